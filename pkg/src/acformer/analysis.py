"""Gradient-based receptive fields, variance attention, attention dumps and
channel correlation."""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tensor import ConfigurationError, Tape, Tensor, TapeError

Model = Callable[[Tensor], Tensor]


class NoInputGradient(TapeError):
    """The model output is not connected to its input on the tape."""


@dataclass
class GradientField:
    """``ig[s, c_in, c_out]`` summed |gradient| over samples; ``raw`` keeps each sample's signed field."""

    ig: np.ndarray
    raw: np.ndarray
    sample_ids: tuple[int, ...]
    aggregation: str = "sum_abs"
    model_id: str = ""
    backward_passes: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.ig.shape


@dataclass
class VarianceAttentionMap:
    va: np.ndarray
    normalized: bool


@contextmanager
def _frozen(model):
    """Stop parameter gradients from accumulating while we differentiate w.r.t. inputs."""
    params = model.parameters() if hasattr(model, "parameters") else []
    flags = [p.requires_grad for p in params]
    was_training = getattr(model, "training", None)
    if hasattr(model, "eval"):
        model.eval()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
        if was_training:
            model.train()


def _forward_on_tape(model: Model, x: np.ndarray) -> tuple[Tensor, Tensor, Tape]:
    xt = Tensor(x, requires_grad=True)
    tape = Tape()
    with tape:
        y = model(xt)
    if y.tape_id is None or y._tape is not tape:
        raise NoInputGradient("model output does not depend on its input through the tape")
    return xt, y, tape


def center_index(pred_len: int) -> int:
    return pred_len // 2


def conventional_receptive_field(model: Model, x: np.ndarray) -> np.ndarray:
    """G[s] = (1/C) sum_c dF/dx[s, c] with F the channel mean of the centre forecast."""
    with _frozen(model):
        xt, y, tape = _forward_on_tape(model, np.asarray(x, dtype=np.float64))
        with tape:
            F = y[center_index(y.shape[0])].mean()
        tape.backward(F)
    grad = xt.grad if xt.grad is not None else np.zeros(xt.shape)
    return grad.mean(axis=1)


def sample_gradient_field(model: Model, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Signed IG for one input ``x`` (S, C): one backward pass per output channel."""
    with _frozen(model):
        xt, y, tape = _forward_on_tape(model, np.asarray(x, dtype=np.float64))
        P, C_out = y.shape
        mid = center_index(P)
        with tape:
            picks = [y[mid, c] for c in range(C_out)]
        S, C_in = xt.shape
        field = np.zeros((S, C_in, C_out))
        for c, pick in enumerate(picks):
            xt.grad = None
            tape.backward(pick, retain=c < C_out - 1)
            if xt.grad is not None:
                field[:, :, c] = xt.grad
    return field, tape.backward_calls


def individual_receptive_field(model: Model, samples: np.ndarray, sample_ids: Sequence[int] | None = None,
                               model_id: str = "") -> GradientField:
    """Stack d yhat[P/2, c] / dx over output channels; aggregate |.| over ``samples`` (N, S, C)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    if len(samples) < 1:
        raise ValueError("need at least one sample")
    raw = []
    passes = 0
    for x in samples:
        field, n = sample_gradient_field(model, x)
        raw.append(field)
        passes += n
    raw_arr = np.stack(raw)
    ids = tuple(range(len(samples))) if sample_ids is None else tuple(int(i) for i in sample_ids)
    return GradientField(np.abs(raw_arr).sum(axis=0), raw_arr, ids, "sum_abs", model_id, passes)


def minmax_normalize(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo == 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def variance_attention(field: "GradientField | np.ndarray", normalize: bool = True) -> VarianceAttentionMap:
    """Population variance over time of each IG[:, c_in, c_out], min-max scaled over the whole map."""
    ig = field.ig if isinstance(field, GradientField) else np.asarray(field, dtype=np.float64)
    if ig.ndim != 3 or ig.shape[1] != ig.shape[2]:
        raise ValueError(f"expected a gradient field of shape (S, C, C), got {ig.shape}")
    va = ig.var(axis=0)
    return VarianceAttentionMap(minmax_normalize(va) if normalize else va, normalize)


def attention_map_dump(model, batch: np.ndarray) -> np.ndarray:
    """Batch-averaged attention per layer and head: (n_layers, M, C, C)."""
    if not getattr(model.cfg, "use_attention", False):
        raise ConfigurationError("this checkpoint has no attention layers (W/O Attention ablation)")
    was_training = model.training
    model.eval()
    try:
        maps = model.collect_attention(Tensor(np.asarray(batch, dtype=np.float64)))
    finally:
        model.train(was_training)
    return np.stack([a.mean(axis=0) for a in maps])


def channel_correlation(values: np.ndarray) -> np.ndarray:
    """Pearson correlation of the columns of ``values`` (N, C); constant columns correlate 0 except with themselves."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < 2:
        raise ValueError("need at least two time points")
    centered = values - values.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    safe = np.where(norms > 0, norms, 1.0)
    z = centered / safe
    corr = z.T @ z
    corr[:, norms == 0] = 0.0
    corr[norms == 0, :] = 0.0
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return (corr + corr.T) / 2


# -- CSV emitters ----------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_grid(path: str | Path, matrix: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["", *names])
        for name, row in zip(names, matrix):
            w.writerow([name, *(_fmt(v) for v in row)])


def write_ig_long(path: str | Path, field: GradientField, names: Sequence[str]) -> None:
    S, C, _ = field.ig.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "c_in", "c_out", "value"])
        for s in range(S):
            for i in range(C):
                for o in range(C):
                    w.writerow([s, names[i], names[o], _fmt(field.ig[s, i, o])])


def write_ig_raw(path: str | Path, field: GradientField, names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "s", "c_in", "c_out", "value"])
        for sid, sample in zip(field.sample_ids, field.raw):
            S, C, _ = sample.shape
            for s in range(S):
                for i in range(C):
                    for o in range(C):
                        w.writerow([sid, s, names[i], names[o], _fmt(sample[s, i, o])])


def write_attention(path: str | Path, maps: np.ndarray, names: Sequence[str]) -> None:
    """Long-format rows: layer, head, row channel, then one column per key channel."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "channel", *names])
        for layer, per_head in enumerate(maps):
            for head, grid in enumerate(per_head):
                for name, row in zip(names, grid):
                    w.writerow([layer, head, name, *(_fmt(v) for v in row)])
