"""Central finite-difference checks against the tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, Tape


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    checked: int
    finite: bool = True

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_err <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor).

    The floor keeps vanishing gradients from turning rounding noise into a
    large "relative" error. Two exact zeros compare as 0.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return diff / scale


def numerical_grad(f: Callable[[], Tensor], x: Tensor, indices: Sequence[int], h: float = 1e-5) -> np.ndarray:
    flat = x.data.reshape(-1)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * h)
    return out


def grad_check_many(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    tol: float,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` closes over ``tensors``; entries are perturbed in place. When
    ``max_entries`` is given, that many entries are drawn at random from
    the concatenation of all tensors.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
    if loss.tape_id is None:
        analytic = [np.zeros(t.shape) for t in tensors]
    else:
        tape.backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in tensors]

    pairs = [(ti, i) for ti, t in enumerate(tensors) for i in range(t.size)]
    if max_entries is not None and max_entries < len(pairs):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(pairs), size=max_entries, replace=False)
        pairs = [pairs[p] for p in sorted(pick)]

    errs = []
    finite = True
    for ti, t in enumerate(tensors):
        idx = [i for tj, i in pairs if tj == ti]
        if not idx:
            continue
        num = numerical_grad(f, t, idx, h)
        ana = analytic[ti].reshape(-1)[idx]
        finite &= bool(np.all(np.isfinite(num)) and np.all(np.isfinite(ana)))
        errs.append(relative_error(ana, num, floor))
    max_err = float(max((e.max() for e in errs if e.size), default=0.0))
    if not finite:
        max_err = float("inf")
    return GradCheckReport(max_rel_err=max_err, tol=tol, checked=len(pairs), finite=finite)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, tol: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Check the gradient of scalar-valued ``f`` at ``x``."""
    return grad_check_many(lambda: f(x), [x], tol=tol, h=h)
