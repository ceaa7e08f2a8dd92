"""CSV ingestion, chronological splits, train-only standardization and
sliding windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import stream


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SeriesDataset:
    name: str
    values: np.ndarray
    columns: tuple[str, ...]
    timestamps: tuple[str, ...] = ()

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def head(self, rows: int) -> "SeriesDataset":
        """First ``rows`` steps; ``rows <= 0`` keeps everything."""
        if rows <= 0 or rows >= self.n_steps:
            return self
        return SeriesDataset(self.name, self.values[:rows], self.columns, self.timestamps[:rows])


@dataclass(frozen=True)
class DatasetSplit:
    """Boundaries ``[0, b1)``, ``[b1, b2)``, ``[b2, N)`` plus train-fitted stats.

    Validation and test segments borrow the preceding ``seq_len`` steps as
    input context; their label regions stay inside their own range.
    """

    n_steps: int
    train_end: int
    val_end: int
    seq_len: int
    pred_len: int
    mean: np.ndarray = field(repr=False)
    std: np.ndarray = field(repr=False)

    @property
    def ranges(self) -> dict[str, tuple[int, int]]:
        """Row ranges each segment's windows are cut from (inputs + labels)."""
        S = self.seq_len
        return {
            "train": (0, self.train_end),
            "val": (self.train_end - S, self.val_end),
            "test": (self.val_end - S, self.n_steps),
        }

    def segment(self, values: np.ndarray, name: str) -> np.ndarray:
        lo, hi = self.ranges[name]
        return values[lo:hi]


def load_csv(path: str | Path) -> SeriesDataset:
    """Read a ``date,<numeric columns...>`` file; the first column is kept as text."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column and at least one value column")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}")
            stamps.append(row[0])
            parsed = []
            for col, cell in enumerate(row[1:], start=2):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: unparseable cell {cell!r} at (row {lineno}, column {col})") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite cell {cell!r} at (row {lineno}, column {col})")
                parsed.append(v)
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return SeriesDataset(path.stem, np.array(rows, dtype=np.float64), tuple(header[1:]), tuple(stamps))


def parse_ratio(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.replace(",", ":").split(":")]
    if len(parts) != 3:
        raise DataError(f"split ratio needs three parts, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def chronological_split(ds: SeriesDataset, ratio=(0.6, 0.2, 0.2), seq_len: int = 96, pred_len: int = 96) -> DatasetSplit:
    parts = np.asarray(ratio, dtype=np.float64)
    if parts.shape != (3,) or np.any(parts <= 0):
        raise DataError(f"split ratio parts must be three positive numbers, got {ratio}")
    parts = parts / parts.sum()
    n = ds.n_steps
    b1 = int(math.floor(n * parts[0]))
    b2 = int(math.floor(n * (parts[0] + parts[1])))
    S, P = seq_len, pred_len
    # every segment must host at least one (S, P) window
    if b1 < S + P:
        raise DataError(f"train split has {b1} steps, fewer than S+P={S + P}")
    if b2 - b1 < P or n - b2 < P:
        raise DataError(f"validation/test splits ({b2 - b1}, {n - b2} steps) cannot hold a {P}-step label")
    mean = ds.values[:b1].mean(axis=0)
    std = ds.values[:b1].std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return DatasetSplit(n, b1, b2, S, P, mean, std)


def standardize(ds: SeriesDataset, split: DatasetSplit) -> SeriesDataset:
    return SeriesDataset(ds.name, (ds.values - split.mean) / split.std, ds.columns, ds.timestamps)


def window_count(length: int, seq_len: int, pred_len: int) -> int:
    return max(length - seq_len - pred_len + 1, 0)


def window_starts(length: int, seq_len: int, pred_len: int, shuffle: bool = False, seed: int = 0, epoch: int = 0) -> np.ndarray:
    starts = np.arange(window_count(length, seq_len, pred_len))
    if shuffle:
        starts = stream(seed, "shuffle", epoch).permutation(starts)
    return starts


def window_batches(segment: np.ndarray, seq_len: int, pred_len: int, batch_size: int,
                   shuffle: bool = False, seed: int = 0, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (X: B x S x C, Y: B x P x C). The final partial batch is kept."""
    if len(segment) < seq_len + pred_len:
        raise DataError(f"segment of {len(segment)} steps is shorter than S+P={seq_len + pred_len}")
    starts = window_starts(len(segment), seq_len, pred_len, shuffle, seed, epoch)
    span = np.arange(seq_len + pred_len)
    for lo in range(0, len(starts), batch_size):
        idx = starts[lo:lo + batch_size, None] + span
        block = segment[idx]
        yield block[:, :seq_len], block[:, seq_len:]
