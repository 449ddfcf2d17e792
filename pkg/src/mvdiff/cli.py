"""Command-line surface tying the stages into reproducible runs.

Every invocation resolves a full configuration (file, then --key value
overrides), executes one stage, and leaves a run directory containing the
resolved-config echo plus an artifact manifest with content hashes. Exit
codes: 0 success, 2 usage or configuration error, 3 I/O error, 4 numeric
divergence.
"""

from __future__ import annotations

import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from .bundle import BundleError, file_sha256, load_bundle, save_bundle
from .config import ConfigError, RunConfig
from .denoiser import Denoiser, DenoiserConfig
from .rng import RngStream
from .schedule import make_linear_schedule
from .tensor import NumericError

__all__ = ["main", "entry", "USAGE"]

SUBCOMMANDS = ("scenegen", "train-gen", "generate", "eval-gen", "train-planner",
               "eval-planner", "failure-loop", "report", "selftest")

USAGE = f"""usage: mvdiff <subcommand> [--config FILE] [--key value ...]

subcommands: {', '.join(SUBCOMMANDS)}

Flags mirror configuration keys (e.g. --train.steps 500). Short aliases:
--corpus, --ckpt, --planner, --out, --frames, --name, --label, --inputs.
"""

_ALIASES = {
    "corpus": "run.corpus",
    "ckpt": "run.ckpt",
    "planner": "run.planner",
    "out": "run.out",
    "name": "run.name",
    "label": "run.label",
    "frames": "sample.frames",
}


def _parse_args(args: list[str]) -> tuple[RunConfig, dict]:
    cfg = RunConfig()
    extra: dict[str, list[str]] = {"inputs": []}
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"expected a --flag, got {tok!r}")
        key = tok[2:]
        if key == "inputs":
            i += 1
            while i < len(args) and not args[i].startswith("--"):
                extra["inputs"].append(args[i])
                i += 1
            continue
        if i + 1 >= len(args):
            raise ConfigError(f"flag {tok} needs a value")
        val = args[i + 1]
        if key == "config":
            cfg.update_from_file(val)
        else:
            cfg.set(_ALIASES.get(key, key), val)
        i += 2
    return cfg, extra


def _run_dir(cfg: RunConfig, sub: str) -> Path:
    root = cfg["run.root"] or os.environ.get("MVDIFF_RUN_ROOT", "runs")
    digest = hashlib.sha256(cfg.echo().encode()).hexdigest()[:12]
    name = cfg["run.name"] or f"{sub}-{digest}"
    path = Path(root) / name
    path.mkdir(parents=True, exist_ok=True)
    (path / "config_resolved.txt").write_text(cfg.echo(), encoding="utf-8")
    return path


def _register(run_dir: Path, artifacts: dict[str, Path]) -> None:
    lines = [f"{name}\t{p}\t{file_sha256(p)}" for name, p in sorted(artifacts.items())]
    (run_dir / "artifacts.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _hashed_name(run_dir: Path, stem: str, suffix: str, tmp_path: Path) -> Path:
    digest = file_sha256(tmp_path)[:12]
    final = run_dir / f"{stem}_{digest}{suffix}"
    tmp_path.rename(final)
    return final


def _need(cfg: RunConfig, key: str, what: str) -> str:
    val = cfg[key]
    if not val:
        raise ConfigError(f"{what} required: set --{key.split('.')[1]} (or {key})")
    return val


def _corpus(cfg: RunConfig):
    from .scenegen import Corpus

    path = Path(_need(cfg, "run.corpus", "a corpus manifest"))
    if path.is_dir():
        path = path / "manifest.tsv"
    return Corpus(path)


def _denoiser_cfg(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(depths=cfg["denoiser.depths"], base_channels=cfg["denoiser.base_channels"],
                          heads=cfg["denoiser.heads"], image=cfg["corpus.image"],
                          views=cfg["corpus.views"], use_ftcm=cfg["denoiser.use_ftcm"])


def _cmd_scenegen(cfg: RunConfig, run_dir: Path, extra) -> int:
    from .scenegen import GenSpec, corpus_build

    out = Path(cfg["run.out"] or run_dir / "corpus")
    spec = GenSpec(n_frames=cfg["corpus.frames"])
    manifest = corpus_build(cfg["corpus.n_train"], cfg["corpus.n_val"], cfg["corpus.seed"], out,
                            spec=spec, V=cfg["corpus.views"], H=cfg["corpus.image"],
                            W=cfg["corpus.image"])
    _register(run_dir, {"manifest": manifest})
    print(f"corpus: {manifest}")
    return 0


def _cmd_train_gen(cfg: RunConfig, run_dir: Path, extra) -> int:
    from .sampler import TrainConfig, save_checkpoint, train

    corpus = _corpus(cfg)
    model = Denoiser(_denoiser_cfg(cfg), RngStream(cfg["train.seed"]).fork("model-init"))
    sched = make_linear_schedule(cfg["train.timesteps"])
    tc = TrainConfig(lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"],
                     batch=cfg["train.batch"], window=cfg["train.window"],
                     steps=cfg["train.steps"], seed=cfg["train.seed"], nrm=cfg["train.nrm"])
    losses = train(model, corpus, tc, sched, log=print)
    tmp = run_dir / "checkpoint.tmp"
    save_checkpoint(tmp, model, sched)
    ckpt = _hashed_name(run_dir, "checkpoint", ".ckpt", tmp)
    (run_dir / "losses.txt").write_text("\n".join(f"{v:.6f}" for v in losses) + "\n")
    _register(run_dir, {"checkpoint": ckpt})
    print(f"checkpoint: {ckpt}")
    return 0


def _load_generator(cfg: RunConfig):
    from .sampler import load_checkpoint

    return load_checkpoint(_need(cfg, "run.ckpt", "a generator checkpoint"))


def _gen_scene_ids(cfg: RunConfig, corpus) -> list[str]:
    ids = corpus.ids(cfg["sample.split"])
    return ids[: cfg["sample.scenes"]]


def _cmd_generate(cfg: RunConfig, run_dir: Path, extra) -> int:
    from .sampler import FramePrep, SampleConfig, stream_generate, write_ppm

    corpus = _corpus(cfg)
    model, sched = _load_generator(cfg)
    scfg = SampleConfig(num_steps=cfg["sample.num_steps"], sampler=cfg["sample.sampler"],
                        frame_count=cfg["sample.frames"], seed=cfg["sample.seed"],
                        nrm=cfg["sample.nrm"], noise_window=cfg["sample.noise_window"])
    prep = FramePrep(corpus.rig, model.cfg)
    artifacts = {}
    for sid in _gen_scene_ids(cfg, corpus):
        scene = corpus.scene(sid)
        clip = stream_generate(model, scene, corpus.rig, sched, scfg, prep=prep)
        tmp = run_dir / f"clip_{sid}.tmp"
        save_bundle(tmp, {"frames": clip})
        path = _hashed_name(run_dir, f"clip_{sid}", ".bundle", tmp)
        artifacts[f"clip_{sid}"] = path
        if cfg["sample.dump_ppm"]:
            for n in range(0, clip.shape[0], max(1, clip.shape[0] // 8)):
                for v in range(clip.shape[1]):
                    write_ppm(run_dir / f"{sid}_f{n:03d}_v{v}.ppm", clip[n, v])
        print(f"generated {sid}: {clip.shape[0]} frames -> {path}")
    _register(run_dir, artifacts)
    return 0


def _cmd_eval_gen(cfg: RunConfig, run_dir: Path, extra) -> int:
    from .metrics import evaluate_generation
    from .planner import corpus_samples, evaluate_planner, load_planner, model_plan_fn, Sample
    from .sampler import FramePrep, SampleConfig, stream_generate

    corpus = _corpus(cfg)
    model, sched = _load_generator(cfg)
    scfg = SampleConfig(num_steps=cfg["sample.num_steps"], sampler=cfg["sample.sampler"],
                        frame_count=cfg["sample.frames"], seed=cfg["sample.seed"],
                        nrm=cfg["sample.nrm"], noise_window=cfg["sample.noise_window"])
    prep = FramePrep(corpus.rig, model.cfg)
    ids = _gen_scene_ids(cfg, corpus)
    gen, real = [], []
    for sid in ids:
        scene, frames = corpus.load(sid)
        gen.append(stream_generate(model, scene, corpus.rig, sched, scfg, prep=prep))
        real.append(frames[: gen[-1].shape[0]])
    gen, real = np.stack(gen), np.stack(real)
    rates = None
    if cfg["run.planner"]:
        planner = load_planner(cfg["run.planner"])
        gen_samples = [Sample(scene=corpus.scene(sid), frames=g, split="gen")
                       for sid, g in zip(ids, gen)]
        rates = evaluate_planner(model_plan_fn(planner), gen_samples,
                                 stride=cfg["planner.eval_stride"])
    report = evaluate_generation(real, gen, corpus.rig, collision_rates=rates)
    label = cfg["run.label"] or "eval"
    text = f"label={label} {report.record()}\n"
    (run_dir / "metrics.txt").write_text(text + "\n" + report.table() + "\n", encoding="utf-8")
    _register(run_dir, {"metrics": run_dir / "metrics.txt"})
    print(text + report.table())
    return 0


def _cmd_train_planner(cfg: RunConfig, run_dir: Path, extra) -> int:
    from .planner import PlannerConfig, PlannerTrainConfig, corpus_samples, save_planner, train_planner

    corpus = _corpus(cfg)
    samples = corpus_samples(corpus, "train")
    pcfg = PlannerConfig(image=cfg["corpus.image"], views=cfg["corpus.views"],
                         width=cfg["planner.width"], hidden=cfg["planner.hidden"])
    tc = PlannerTrainConfig(lr=cfg["planner.lr"], weight_decay=cfg["planner.weight_decay"],
                            steps=cfg["planner.steps"], batch=cfg["planner.batch"],
                            seed=cfg["planner.seed"])
    model = train_planner(samples, tc, planner_cfg=pcfg, log=print)
    tmp = run_dir / "planner.tmp"
    save_planner(tmp, model)
    path = _hashed_name(run_dir, "planner", ".ckpt", tmp)
    _register(run_dir, {"planner": path})
    print(f"planner: {path}")
    return 0


def _cmd_eval_planner(cfg: RunConfig, run_dir: Path, extra) -> int:
    from .planner import corpus_samples, evaluate_planner, load_planner, model_plan_fn

    corpus = _corpus(cfg)
    planner = load_planner(_need(cfg, "run.planner", "a planner checkpoint"))
    rates = evaluate_planner(model_plan_fn(planner), corpus_samples(corpus, "val"),
                             stride=cfg["planner.eval_stride"])
    line = " ".join(f"col_{k}={rates[k]:.6f}" for k in ("1s", "2s", "3s", "avg"))
    (run_dir / "planner_eval.txt").write_text(line + "\n", encoding="utf-8")
    _register(run_dir, {"planner_eval": run_dir / "planner_eval.txt"})
    print(line)
    return 0


def _cmd_failure_loop(cfg: RunConfig, run_dir: Path, extra) -> int:
    from .failure_loop import LoopConfig, run_loop
    from .planner import load_planner, save_planner

    corpus = _corpus(cfg)
    model, sched = _load_generator(cfg)
    planner = load_planner(_need(cfg, "run.planner", "a planner checkpoint"))
    budget = cfg["loop.budget_samples"]
    lc = LoopConfig(budget_frac=cfg["loop.budget_frac"],
                    budget_samples=None if budget < 0 else budget,
                    k=cfg["loop.k"], edits_per_scene=cfg["loop.edits"],
                    finetune_steps=cfg["loop.finetune_steps"],
                    finetune_batch=cfg["loop.finetune_batch"], seed=cfg["loop.seed"],
                    sampling=cfg["loop.sampling"], edit_mode=cfg["loop.edit_mode"],
                    collect_split=cfg["loop.collect_split"], gen_frames=cfg["loop.gen_frames"],
                    gen_num_steps=cfg["loop.gen_num_steps"],
                    eval_stride=cfg["planner.eval_stride"])
    tuned, report = run_loop(planner, model, sched, corpus, lc, out_dir=run_dir)
    tmp = run_dir / "planner_tuned.tmp"
    save_planner(tmp, tuned)
    path = _hashed_name(run_dir, "planner_tuned", ".ckpt", tmp)
    _register(run_dir, {"planner_tuned": path, "loop_report": run_dir / "loop_report.txt"})
    print(report.table())
    print(f"report_hash={report.hash()}")
    return 0


def _cmd_report(cfg: RunConfig, run_dir: Path, extra) -> int:
    inputs = extra["inputs"]
    if len(inputs) < 2:
        raise ConfigError("report needs --inputs with at least two metrics files")
    rows = []
    for p in inputs:
        try:
            first = Path(p).read_text(encoding="utf-8").splitlines()[0]
        except OSError as e:
            raise IOError(f"cannot read metrics file {p}: {e}") from e
        kv = dict(part.split("=", 1) for part in first.split())
        rows.append(kv)
    head = f"{'label':<24s} {'FID':>10s} {'FVD':>10s} {'CLIP':>10s}"
    lines = [head]
    for kv in rows:
        lines.append(f"{kv.get('label', '?'):<24s} {float(kv['toy_fid']):>10.3f} "
                     f"{float(kv['toy_fvd_40']):>10.3f} {float(kv['cross_view']):>10.4f}")
    table = "\n".join(lines)
    (run_dir / "ablation_table.txt").write_text(table + "\n", encoding="utf-8")
    _register(run_dir, {"ablation_table": run_dir / "ablation_table.txt"})
    print(table)
    return 0


def _cmd_selftest(cfg: RunConfig, run_dir: Path, extra) -> int:
    from .ftcm import CrossFrameAttention, FtcmBlock, instance_attention, scene_attention
    from .schedule import sample_shared_noise
    from .tensor import softmax, tensor

    checks = []

    rng = RngStream(0).fork("selftest")
    n = sample_shared_noise(2, 2, 1, 200, 200, rng.fork("noise"), dtype=np.float64)
    c = n.composite

    def corr(a, b):
        return float(np.corrcoef(a.ravel(), b.ravel())[0, 1])

    checks.append(("nrm cross-frame correlation ~ 1/3", abs(corr(c[0, 0], c[0, 1]) - 1 / 3) < 0.03))
    checks.append(("nrm cross-view correlation ~ 1/3", abs(corr(c[0, 0], c[1, 0]) - 1 / 3) < 0.03))
    checks.append(("nrm disjoint correlation ~ 0", abs(corr(c[0, 0], c[1, 1])) < 0.03))
    checks.append(("nrm unit variance", abs(float(c.var()) - 1.0) < 0.03))

    s = softmax(tensor([[0.0, np.log(3.0)]], dtype=np.float64), axis=1)
    checks.append(("softmax closed form", np.allclose(s.data, [[0.25, 0.75]], atol=1e-12)))
    dead = softmax(tensor([[-np.inf, -np.inf]]), axis=1)
    checks.append(("softmax all-masked slice is zero", np.array_equal(dead.data, [[0.0, 0.0]])))

    attn = CrossFrameAttention(8, 2, rng.fork("attn"))
    q = tensor(rng.fork("q").normal((1, 8, 4, 4)))
    cc = tensor(rng.fork("c").normal((1, 8, 4, 4)))
    ones = np.ones((1, 1, 4, 4), dtype=np.float32)
    checks.append(("full-mask instance == scene attention",
                   np.array_equal(instance_attention(attn, q, cc, ones, ones).data,
                                  scene_attention(attn, q, cc).data)))
    mask = ones.copy()
    mask[0, 0, 0, :] = 0.0
    w = attn.attention_map(q, cc, mask_kv=mask)
    checks.append(("masked keys carry exactly zero weight",
                   bool(np.all(w.reshape(1, 2, 16, 16)[:, :, :, :4] == 0.0))))

    blk = FtcmBlock(8, 2, rng.fork("blk"))
    h = tensor(rng.fork("h").normal((1, 8, 4, 4)))
    checks.append(("zero-init cross-frame block is identity",
                   np.array_equal(blk(h, cc, ones, ones).data, h.data)))

    entries = {"x": rng.fork("x").normal((3, 5)).astype(np.float32)}
    tmp = run_dir / "selftest.bundle"
    save_bundle(tmp, entries)
    back = load_bundle(tmp)
    checks.append(("tensor bundle round-trip", back["x"].tobytes() == entries["x"].tobytes()))

    failed = [name for name, ok in checks if not ok]
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0 if not failed else 1


_COMMANDS = {
    "scenegen": _cmd_scenegen,
    "train-gen": _cmd_train_gen,
    "generate": _cmd_generate,
    "eval-gen": _cmd_eval_gen,
    "train-planner": _cmd_train_planner,
    "eval-planner": _cmd_eval_planner,
    "failure-loop": _cmd_failure_loop,
    "report": _cmd_report,
    "selftest": _cmd_selftest,
}


def main(argv: list[str]) -> int:
    if not argv or argv[0] in ("-h", "--help", "help"):
        print(USAGE)
        return 0 if argv and argv[0] in ("-h", "--help", "help") else 2
    sub = argv[0]
    if sub not in _COMMANDS:
        print(f"unknown subcommand {sub!r}\n{USAGE}", file=sys.stderr)
        return 2
    try:
        cfg, extra = _parse_args(argv[1:])
        run_dir = _run_dir(cfg, sub)
        return _COMMANDS[sub](cfg, run_dir, extra)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (BundleError, IOError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
