"""End-to-end forecasting run shared by the CLI and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigFileError, RunConfig
from .data import DatasetSplit, SeriesDataset, chronological_split, load_csv, parse_ratio, standardize
from .model import ACFormer, ConfigError
from .rng import stream
from .training import ExperimentReport, evaluate, fit


@dataclass
class Prepared:
    raw: SeriesDataset
    split: DatasetSplit
    data: np.ndarray  # standardized with train-only statistics


def prepare(cfg: RunConfig, data_path: str | Path) -> Prepared:
    ds = load_csv(data_path).head(cfg.data_rows)
    split = chronological_split(ds, parse_ratio(cfg.split), cfg.model.seq_len, cfg.model.pred_len)
    return Prepared(ds, split, standardize(ds, split).values)


def resolve_channels(cfg: RunConfig, ds: SeriesDataset) -> RunConfig:
    """Infer ``n_channels`` from the data unless the config pins a different value."""
    if cfg.model.n_channels != ds.n_channels:
        default = RunConfig().model.n_channels
        if cfg.model.n_channels != default:
            raise ConfigFileError(f"n_channels = {cfg.model.n_channels} but {ds.name} has {ds.n_channels} columns")
        cfg = cfg.replace(n_channels=ds.n_channels)
    return cfg


def build_model(cfg: RunConfig) -> ACFormer:
    model_cfg = cfg.model.with_ablation(cfg.ablation)
    try:
        return ACFormer(model_cfg)
    except ConfigError as exc:
        raise ConfigFileError("; ".join(exc.errors)) from exc


def train_forecaster(cfg: RunConfig, prep: Prepared, on_epoch=None) -> tuple[ACFormer, ExperimentReport]:
    model = build_model(cfg)
    _, report = fit(model, prep.data, prep.split, cfg.train, on_epoch)
    S, P = cfg.model.seq_len, cfg.model.pred_len
    report.test = evaluate(model, prep.split.segment(prep.data, "test"), S, P, cfg.train.eval_batch_size)
    report.config = cfg.to_dict()
    return model, report


def analysis_samples(prep: Prepared, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` test-window inputs (sorted window ids) from the seeded ``analyze`` stream."""
    seg = prep.split.segment(prep.data, "test")
    S, P = prep.split.seq_len, prep.split.pred_len
    count = len(seg) - S - P + 1
    ids = np.sort(stream(seed, "analyze").permutation(count)[:min(n, count)])
    return ids, np.stack([seg[i:i + S] for i in ids])
