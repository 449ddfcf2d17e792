"""Flat key=value run configuration with a closed key registry.

Files are UTF-8 `key = value` lines with `#` comments; dotted prefixes
group keys by stage (corpus., denoiser., train., sample., planner.,
loop., run.). Every key has a typed default below; unknown keys are
rejected so typos cannot silently fall back to defaults. The resolved
echo written into each run directory lists every key, which is enough to
reproduce the run.
"""

from __future__ import annotations

from pathlib import Path

__all__ = ["DEFAULTS", "RunConfig", "ConfigError"]


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    # corpus construction
    "corpus.n_train": 200,
    "corpus.n_val": 50,
    "corpus.seed": 0,
    "corpus.views": 3,
    "corpus.image": 32,
    "corpus.frames": 40,
    # denoiser architecture
    "denoiser.depths": 3,
    "denoiser.base_channels": 32,
    "denoiser.heads": 4,
    "denoiser.use_ftcm": True,
    # generator training
    "train.lr": 5e-5,
    "train.weight_decay": 0.01,
    "train.batch": 1,
    "train.window": 10,
    "train.steps": 2000,
    "train.seed": 0,
    "train.nrm": True,
    "train.timesteps": 1000,
    # sampling / generation
    "sample.num_steps": 50,
    "sample.sampler": "plms",
    "sample.frames": 40,
    "sample.seed": 0,
    "sample.nrm": True,
    "sample.noise_window": 10,
    "sample.scenes": 4,
    "sample.split": "val",
    "sample.dump_ppm": False,
    # planner
    "planner.lr": 1e-3,
    "planner.weight_decay": 1e-4,
    "planner.steps": 1200,
    "planner.batch": 16,
    "planner.seed": 0,
    "planner.width": 12,
    "planner.hidden": 96,
    "planner.eval_stride": 2,
    # failure loop
    "loop.budget_frac": 0.04,
    "loop.budget_samples": -1,   # -1: derive from budget_frac
    "loop.k": 5,
    "loop.edits": 3,
    "loop.finetune_steps": 400,
    "loop.finetune_batch": 16,
    "loop.seed": 0,
    "loop.sampling": "failure",
    "loop.edit_mode": "both",
    "loop.collect_split": "val",
    "loop.gen_frames": 13,
    "loop.gen_num_steps": 8,
    # run bookkeeping (paths may be empty)
    "run.root": "",
    "run.corpus": "",
    "run.ckpt": "",
    "run.planner": "",
    "run.out": "",
    "run.name": "",
    "run.label": "",
}


def _coerce(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from e
    return raw.strip()


class RunConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = _coerce(key, value) if isinstance(value, str) else value

    def __getitem__(self, key: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values[key]

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        cfg.update_from_file(path)
        return cfg

    def update_from_file(self, path) -> None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise IOError(f"cannot read config {path}: {e}") from e
        for lineno, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in body.split("=", 1))
            self.set(key, raw)

    def echo(self) -> str:
        lines = [f"{k} = {self._fmt(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    @staticmethod
    def _fmt(v) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(v)
