import numpy as np
import pytest

from mvdiff.bundle import load_bundle
from mvdiff.cli import main
from mvdiff.config import ConfigError, DEFAULTS, RunConfig


def test_config_defaults_and_override():
    cfg = RunConfig()
    assert cfg["train.lr"] == 5e-5
    assert cfg["sample.num_steps"] == 50
    assert cfg["train.window"] == 10
    assert cfg["corpus.frames"] == 40
    cfg.set("train.steps", "12")
    assert cfg["train.steps"] == 12


def test_config_rejects_unknown_key():
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="unknown"):
        cfg.set("train.lrr", "1")


def test_config_file_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\ntrain.steps = 7\nsample.sampler = ddim  # trailing\n")
    cfg = RunConfig.from_file(p)
    assert cfg["train.steps"] == 7
    assert cfg["sample.sampler"] == "ddim"


def test_config_bad_line(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("train.steps 7\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)


def test_config_echo_roundtrip(tmp_path):
    cfg = RunConfig()
    cfg.set("loop.edit_mode", "scene")
    p = tmp_path / "echo.cfg"
    p.write_text(cfg.echo())
    back = RunConfig.from_file(p)
    assert back.echo() == cfg.echo()
    assert all(k in cfg.echo() for k in DEFAULTS)


def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2


def test_unknown_flag_exits_2(tmp_path):
    assert main(["scenegen", "--run.root", str(tmp_path), "--nope", "1"]) == 2


def test_missing_input_exits_2(tmp_path):
    assert main(["eval-planner", "--run.root", str(tmp_path)]) == 2


def test_missing_file_exits_3(tmp_path):
    code = main(["eval-planner", "--run.root", str(tmp_path),
                 "--corpus", str(tmp_path / "nope"), "--planner", str(tmp_path / "nope.ckpt")])
    assert code == 3


def test_selftest_passes(tmp_path, capsys):
    assert main(["selftest", "--run.root", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL " not in out


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """scenegen -> train-gen (2 steps) -> train-planner chained through the CLI."""
    root = tmp_path_factory.mktemp("cli_ws")
    run_root = root / "runs"
    corpus_dir = root / "corpus"
    assert main(["scenegen", "--run.root", str(run_root), "--out", str(corpus_dir),
                 "--corpus.n_train", "4", "--corpus.n_val", "2", "--corpus.frames", "10",
                 "--corpus.views", "2", "--corpus.image", "16"]) == 0
    common = ["--corpus", str(corpus_dir), "--corpus.views", "2", "--corpus.image", "16"]
    assert main(["train-gen", "--run.root", str(run_root), "--name", "tg", *common,
                 "--denoiser.base_channels", "4", "--denoiser.heads", "1",
                 "--denoiser.depths", "2", "--train.steps", "2", "--train.window", "3",
                 "--train.timesteps", "60"]) == 0
    ckpt = next((run_root / "tg").glob("checkpoint_*.ckpt"))
    assert main(["train-planner", "--run.root", str(run_root), "--name", "tp", *common,
                 "--planner.steps", "10", "--planner.batch", "4",
                 "--planner.width", "6", "--planner.hidden", "32"]) == 0
    planner = next((run_root / "tp").glob("planner_*.ckpt"))
    return {"run_root": run_root, "corpus": corpus_dir, "ckpt": ckpt, "planner": planner,
            "common": common}


def test_cli_pipeline_artifacts(cli_workspace):
    tg = cli_workspace["run_root"] / "tg"
    assert (tg / "config_resolved.txt").exists()
    manifest = (tg / "artifacts.tsv").read_text().splitlines()
    assert any(line.startswith("checkpoint\t") for line in manifest)
    echo = (tg / "config_resolved.txt").read_text()
    assert "train.steps = 2" in echo and "train.seed = 0" in echo


def test_cli_generate_emits_clip_bundle(cli_workspace, tmp_path):
    ws = cli_workspace
    assert main(["generate", "--run.root", str(ws["run_root"]), "--name", "gen",
                 *ws["common"], "--ckpt", str(ws["ckpt"]), "--frames", "8",
                 "--sample.num_steps", "3", "--sample.scenes", "1"]) == 0
    clip_path = next((ws["run_root"] / "gen").glob("clip_val00000_*.bundle"))
    clip = load_bundle(clip_path)["frames"]
    assert clip.shape[0] == 8


def test_cli_eval_planner(cli_workspace):
    ws = cli_workspace
    assert main(["eval-planner", "--run.root", str(ws["run_root"]), "--name", "ep",
                 *ws["common"], "--planner", str(ws["planner"])]) == 0
    line = (ws["run_root"] / "ep" / "planner_eval.txt").read_text()
    assert all(f"col_{k}=" in line for k in ("1s", "2s", "3s", "avg"))


def test_cli_eval_gen_and_report(cli_workspace):
    ws = cli_workspace
    for label in ("armA", "armB"):
        assert main(["eval-gen", "--run.root", str(ws["run_root"]), "--name", f"ev-{label}",
                     *ws["common"], "--ckpt", str(ws["ckpt"]), "--label", label,
                     "--sample.num_steps", "2", "--sample.scenes", "2", "--frames", "8"]) == 0
    metrics = [str(ws["run_root"] / f"ev-{label}" / "metrics.txt") for label in ("armA", "armB")]
    assert main(["report", "--run.root", str(ws["run_root"]), "--name", "rep",
                 "--inputs", *metrics]) == 0
    table = (ws["run_root"] / "rep" / "ablation_table.txt").read_text()
    assert "FID" in table and "FVD" in table and "CLIP" in table
    assert "armA" in table and "armB" in table


def test_cli_failure_loop(cli_workspace):
    ws = cli_workspace
    code = main(["failure-loop", "--run.root", str(ws["run_root"]), "--name", "fl",
                 *ws["common"], "--ckpt", str(ws["ckpt"]), "--planner", str(ws["planner"]),
                 "--loop.budget_samples", "3", "--loop.gen_frames", "9",
                 "--loop.gen_num_steps", "2", "--loop.finetune_steps", "2",
                 "--loop.sampling", "random", "--loop.finetune_batch", "4"])
    assert code == 0
    report = (ws["run_root"] / "fl" / "loop_report.txt").read_text()
    assert "baseline" in report and "random" in report
