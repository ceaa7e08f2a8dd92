"""Flat ``key = value`` run configuration.

Keys are the snake_case field names of ``ACFormerConfig`` and
``TrainConfig`` plus a few run-level settings (``split``, ``data_rows``,
``ablation``, ``rf_samples`` and the synthetic-study sizes). One ``seed``
drives every random stream. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ABLATIONS, ACFormerConfig
from .training import TrainConfig


class ConfigFileError(ValueError):
    pass


MODEL_KEYS = {f.name for f in fields(ACFormerConfig)} - {"seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass(frozen=True)
class SynthSettings:
    n_train: int = 10_000
    n_eval: int = 1_000
    synth_len: int = 200
    synth_epochs: int = 20
    synth_batch_size: int = 64


RUN_DEFAULTS = {
    "split": "6:2:2",
    "data_rows": 0,
    "ablation": "none",
    "rf_samples": 100,
}
SYNTH_KEYS = {f.name for f in fields(SynthSettings)}
ALL_KEYS = MODEL_KEYS | TRAIN_KEYS | SYNTH_KEYS | set(RUN_DEFAULTS) | {"seed"}


@dataclass(frozen=True)
class RunConfig:
    model: ACFormerConfig = field(default_factory=ACFormerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSettings = field(default_factory=SynthSettings)
    split: str = "6:2:2"
    data_rows: int = 0
    ablation: str = "none"
    rf_samples: int = 100
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "train": asdict(self.train),
            "synth": asdict(self.synth),
            "split": self.split,
            "data_rows": self.data_rows,
            "ablation": self.ablation,
            "rf_samples": self.rf_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            model=ACFormerConfig(**d["model"]),
            train=TrainConfig(**d["train"]),
            synth=SynthSettings(**d["synth"]),
            split=d["split"],
            data_rows=d["data_rows"],
            ablation=d["ablation"],
            rf_samples=d["rf_samples"],
            seed=d["seed"],
        )

    def replace(self, **changes) -> "RunConfig":
        """Apply flat overrides (``seed``, ``ablation``, ``n_channels``...) to the right section."""
        model, train, synth, run = {}, {}, {}, {}
        for k, v in changes.items():
            if k == "seed":
                run[k] = v
                model[k] = v
                train[k] = v
            elif k in MODEL_KEYS:
                model[k] = v
            elif k in TRAIN_KEYS:
                train[k] = v
            elif k in SYNTH_KEYS:
                synth[k] = v
            elif k in RUN_DEFAULTS:
                run[k] = v
            else:
                raise ConfigFileError(f"unknown config key {k!r}")
        try:
            return dataclasses.replace(
                self,
                model=dataclasses.replace(self.model, **model),
                train=dataclasses.replace(self.train, **train),
                synth=dataclasses.replace(self.synth, **synth),
                **run,
            )
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from exc


def _field_type(key: str):
    for cls in (ACFormerConfig, TrainConfig, SynthSettings):
        for f in fields(cls):
            if f.name == key:
                return f.type if isinstance(f.type, str) else f.type.__name__
    return type(RUN_DEFAULTS.get(key, 0)).__name__


def _coerce(key: str, raw: str, lineno: int):
    kind = _field_type(key)
    try:
        if "bool" in kind:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if "None" in kind and raw.lower() in ("none", "auto", ""):
            return None
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigFileError(f"line {lineno}: cannot parse {key} = {raw!r} as {kind}") from None
    return raw


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines into typed overrides."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigFileError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _coerce(key, raw, lineno)
    if "ablation" in out and out["ablation"] not in ABLATIONS:
        raise ConfigFileError(f"ablation must be one of {ABLATIONS}, got {out['ablation']!r}")
    return out


def load_run_config(path: str | Path | None, **overrides) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigFileError(f"config file not found: {p}")
        values = parse_config(p.read_text(encoding="utf-8"))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig().replace(**values)


def dump_config(cfg: RunConfig) -> str:
    """Render a resolved config back into the flat file format."""
    lines = []
    flat = {**asdict(cfg.model), **asdict(cfg.train), **asdict(cfg.synth)}
    flat.update(split=cfg.split, data_rows=cfg.data_rows, ablation=cfg.ablation, rf_samples=cfg.rf_samples, seed=cfg.seed)
    for k in sorted(flat):
        v = flat[k]
        lines.append(f"{k} = {'auto' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
