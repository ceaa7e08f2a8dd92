"""Adam, the halving learning-rate schedule, early stopping and metrics."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import DatasetSplit, window_batches
from .model import ACFormer, mae_loss
from .tensor import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str = "loss is not finite"):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 3
    seed: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


class Adam:
    """Adam with bias correction over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: dict[str, Tensor], state: Adam, lr: float) -> None:
    state.step(lr)


def lr_schedule(epoch: int, lr0: float = 1e-3) -> float:
    """lr0 * 0.5 ** (epoch - 1) for 1-based ``epoch``."""
    if epoch < 1:
        raise ValueError("epoch is 1-based")
    return lr0 * 0.5 ** (epoch - 1)


class EarlyStopping:
    """Track the best validation score; ``step`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, score: float) -> bool:
        if score < self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentReport:
    config: dict
    seed: int
    epochs: list[dict] = field(default_factory=list)
    test: dict | None = None
    best_epoch: int = 0
    wall_seconds: float = 0.0

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "config": self.config,
            "config_hash": self.config_hash,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "test": self.test,
            "seed": self.seed,
        }
        if timing:
            out["wall_seconds"] = self.wall_seconds
        return out

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(config=d["config"], seed=d["seed"], epochs=d.get("epochs", []), test=d.get("test"),
                   best_epoch=d.get("best_epoch", 0), wall_seconds=d.get("wall_seconds", 0.0))


def evaluate(model: ACFormer, segment: np.ndarray, seq_len: int, pred_len: int, batch_size: int = 256) -> dict:
    """MSE and MAE over every window and element of ``segment`` (eval mode)."""
    model.eval()
    sq = ab = 0.0
    count = 0
    for X, Y in window_batches(segment, seq_len, pred_len, batch_size):
        pred = model(Tensor(X)).data
        diff = pred - Y
        sq += float(np.sum(diff * diff))
        ab += float(np.sum(np.abs(diff)))
        count += diff.size
    return {"mse": sq / count, "mae": ab / count}


def fit(model: ACFormer, data: np.ndarray, split: DatasetSplit, cfg: TrainConfig,
        on_epoch: Callable[[dict], None] | None = None) -> tuple[dict[str, np.ndarray], ExperimentReport]:
    """Train on the standardized ``data`` and return the best-validation state."""
    S, P = split.seq_len, split.pred_len
    train_seg = split.segment(data, "train")
    val_seg = split.segment(data, "val")
    report = ExperimentReport(config={"model": asdict(model.cfg), "train": asdict(cfg)}, seed=cfg.seed)
    opt = Adam(model.params)
    stopper = EarlyStopping(cfg.patience)
    best_state = model.state_dict()
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(epoch, cfg.lr)
        model.train()
        total, seen = 0.0, 0
        for b, (X, Y) in enumerate(window_batches(train_seg, S, P, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch)):
            model.zero_grad()
            try:
                with Tape() as tape:
                    loss = mae_loss(model(Tensor(X)), Y)
            except NonFiniteError as exc:
                raise TrainingDivergence(epoch, b, str(exc)) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergence(epoch, b)
            tape.backward(loss)
            try:
                opt.step(lr)
            except NonFiniteError as exc:
                raise TrainingDivergence(epoch, b, str(exc)) from exc
            total += value * len(X)
            seen += len(X)
        val = evaluate(model, val_seg, S, P, cfg.eval_batch_size)
        row = {"epoch": epoch, "lr": lr, "train_mae": total / seen, "val_mae": val["mae"]}
        report.epochs.append(row)
        log.info("epoch %d lr=%.2e train_mae=%.4f val_mae=%.4f", epoch, lr, row["train_mae"], row["val_mae"])
        if on_epoch is not None:
            on_epoch(row)
        improved = val["mae"] < stopper.best
        stop = stopper.step(epoch, val["mae"])
        if improved:
            best_state = model.state_dict()
        if stop:
            break
    report.best_epoch = stopper.best_epoch
    report.wall_seconds = time.perf_counter() - start
    model.load_state_dict(best_state)
    return best_state, report
