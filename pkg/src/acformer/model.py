"""ACFormer: shared patch compression, temporal gated channel attention and
channel-independent patch expansion over a RevIN-normalized input.

Internal layout is (batch, heads, time, channels) inside the attention
blocks, so the L x L projections act as a left ``matmul`` and the C x C
score matrix comes out of ``Q^T K`` directly.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .rng import stream
from .tensor import ConfigurationError, ShapeError, Tensor, as_tensor, assert_finite

ABLATIONS = ("none", "no-gate", "no-attention")


class ConfigError(ConfigurationError):
    """Invalid ACFormerConfig; ``errors`` lists every violated invariant."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ACFormerConfig:
    """Hyperparameters.

    ``seq_len`` S, ``pred_len`` P, ``n_channels`` C, ``kernel_size`` K,
    ``stride`` T, ``n_kernels`` M (also the head count), ``gate_kernel`` K'.
    ``d_ff=None`` means 2 * L * M.
    """

    seq_len: int = 96
    pred_len: int = 96
    n_channels: int = 7
    kernel_size: int = 16
    stride: int = 8
    n_kernels: int = 8
    gate_kernel: int = 3
    n_layers: int = 2
    d_ff: int | None = None
    use_gate: bool = True
    use_attention: bool = True
    revin_affine: bool = False
    per_head_qkv: bool = False
    per_channel_projection: bool = False
    conv_bias: bool = True
    revin_eps: float = 1e-5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0

    @property
    def patch_len(self) -> int:
        """Compressed length L = (S - K) / T + 1."""
        return (self.seq_len - self.kernel_size) // self.stride + 1

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 2 * self.patch_len * self.n_kernels

    def with_ablation(self, ablation: str) -> "ACFormerConfig":
        if ablation == "none":
            return self
        if ablation == "no-gate":
            return dataclasses.replace(self, use_gate=False)
        if ablation == "no-attention":
            return dataclasses.replace(self, use_attention=False)
        raise ConfigurationError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")


def validate_config(cfg: ACFormerConfig) -> list[str]:
    """Every violated invariant, in a stable order. Empty means valid."""
    errors = []
    for name in ("seq_len", "pred_len", "n_channels", "kernel_size", "stride", "n_kernels", "gate_kernel", "n_layers"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            errors.append(f"{name} must be a positive integer, got {value!r}")
    if errors:
        return errors
    S, K, T = cfg.seq_len, cfg.kernel_size, cfg.stride
    if K > S:
        errors.append(f"kernel_size K={K} exceeds seq_len S={S}")
    elif (S - K) % T != 0:
        errors.append(f"(S-K) mod T != 0: ({S}-{K}) mod {T} = {(S - K) % T}")
    elif cfg.patch_len < 2:
        errors.append(f"compressed length L=(S-K)/T+1={cfg.patch_len} must be at least 2")
    if cfg.gate_kernel % 2 == 0:
        errors.append(f"gate kernel must be odd, got K'={cfg.gate_kernel}")
    if cfg.d_ff is not None and (not isinstance(cfg.d_ff, int) or cfg.d_ff < 1):
        errors.append(f"d_ff must be a positive integer, got {cfg.d_ff!r}")
    for name in ("revin_eps", "bn_eps"):
        if not getattr(cfg, name) > 0:
            errors.append(f"{name} must be positive")
    if not 0 < cfg.bn_momentum <= 1:
        errors.append("bn_momentum must lie in (0, 1]")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        errors.append(f"seed must be a non-negative integer, got {cfg.seed!r}")
    return errors


def check_config(cfg: ACFormerConfig) -> None:
    errors = validate_config(cfg)
    if errors:
        raise ConfigError(errors)


# -- RevIN ---------------------------------------------------------------

@dataclass
class RevINState:
    mean: Tensor
    std: Tensor
    weight: Tensor | None = None
    bias: Tensor | None = None


def revin_normalize(x, eps: float = 1e-5, weight=None, bias=None) -> tuple[Tensor, RevINState]:
    """Per-instance, per-channel standardization over the time axis (-2).

    std = sqrt(var + eps), so a constant channel maps to zeros and the
    statistics stay differentiable.
    """
    x = as_tensor(x)
    if x.shape[-2] < 2:
        raise ShapeError(f"RevIN needs at least 2 time steps, got {x.shape[-2]}")
    mean = ops.mean(x, axis=-2, keepdims=True)
    centered = x - mean
    var = ops.mean(centered * centered, axis=-2, keepdims=True)
    std = ops.sqrt(var + eps)
    out = centered / std
    if weight is not None:
        out = out * weight + bias
    return out, RevINState(mean, std, weight, bias)


def revin_denormalize(y, state: RevINState) -> Tensor:
    y = as_tensor(y)
    if state.weight is not None:
        y = (y - state.bias) / (state.weight + 1e-10)
    return y * state.std + state.mean


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every element."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    return ops.mean(ops.abs(pred - target))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return ops.mean(diff * diff)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float, eps: float) -> Tensor:
    """Normalize the last axis with statistics over all leading axes."""
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = ops.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = ops.mean(centered * centered, axis=axes, keepdims=True)
        n = int(np.prod([x.shape[a] for a in axes]))
        unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        normed = centered / ops.sqrt(var + eps)
    else:
        normed = (x - running_mean) / np.sqrt(running_var + eps)
    return normed * weight + bias


# -- model -------------------------------------------------------------------

def _param_shapes(cfg: ACFormerConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) in initialization order."""
    S, P, C, K, M, L = cfg.seq_len, cfg.pred_len, cfg.n_channels, cfg.kernel_size, cfg.n_kernels, cfg.patch_len
    Kg, F = cfg.gate_kernel, cfg.ff_width
    shapes = []
    shapes.append(("compress.weight", (M, 1, K), K))
    if cfg.conv_bias:
        shapes.append(("compress.bias", (M,), K))
    if cfg.use_attention:
        lead = (M,) if cfg.per_head_qkv else ()
        for i in range(cfg.n_layers):
            p = f"blocks.{i}."
            for proj in ("q", "k", "v"):
                shapes.append((p + f"w{proj}", (*lead, L, L), L))
                shapes.append((p + f"b{proj}", (*lead, L), L))
            if cfg.use_gate:
                shapes.append((p + "gate.weight", (2, 1, Kg), Kg))
                if cfg.conv_bias:
                    shapes.append((p + "gate.bias", (2,), Kg))
            shapes.append((p + "ff1.weight", (L * M, F), L * M))
            shapes.append((p + "ff1.bias", (F,), L * M))
            shapes.append((p + "ff2.weight", (F, L * M), F))
            shapes.append((p + "ff2.bias", (L * M,), F))
    shapes.append(("expand.weight", (C * M, 1, K), M * K))
    if cfg.conv_bias:
        shapes.append(("expand.bias", (C,), M * K))
    if cfg.per_channel_projection:
        shapes.append(("head.weight", (C, S, P), S))
        shapes.append(("head.bias", (C, P), S))
    else:
        shapes.append(("head.weight", (S, P), S))
        shapes.append(("head.bias", (P,), S))
    return shapes


class ACFormer:
    """The forecasting network. ``params`` and ``buffers`` are plain name-keyed dicts."""

    def __init__(self, cfg: ACFormerConfig):
        check_config(cfg)
        self.cfg = cfg
        rng = stream(cfg.seed, "init")
        self.params: dict[str, Tensor] = {}
        for name, shape, fan_in in _param_shapes(cfg):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
        LM = cfg.patch_len * cfg.n_kernels
        if cfg.use_attention:
            for i in range(cfg.n_layers):
                p = f"blocks.{i}.bn."
                self.params[p + "weight"] = Tensor(np.ones(LM), requires_grad=True, name=p + "weight")
                self.params[p + "bias"] = Tensor(np.zeros(LM), requires_grad=True, name=p + "bias")
        if cfg.revin_affine:
            C = cfg.n_channels
            self.params["revin.weight"] = Tensor(np.ones(C), requires_grad=True, name="revin.weight")
            self.params["revin.bias"] = Tensor(np.zeros(C), requires_grad=True, name="revin.bias")
        self.buffers: dict[str, np.ndarray] = {}
        if cfg.use_attention:
            for i in range(cfg.n_layers):
                self.buffers[f"blocks.{i}.bn.running_mean"] = np.zeros(LM)
                self.buffers[f"blocks.{i}.bn.running_var"] = np.ones(LM)
        self.training = False
        self.attention_maps: list[np.ndarray] | None = None

    # -- parameter plumbing ---------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.params.items()}
        state.update({k: v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, v in state.items():
            target = self.params[k].data if k in self.params else self.buffers[k]
            if target.shape != v.shape:
                raise ShapeError(f"{k}: expected shape {target.shape}, got {v.shape}")
            target[...] = v

    def train(self, mode: bool = True) -> "ACFormer":
        self.training = mode
        return self

    def eval(self) -> "ACFormer":
        return self.train(False)

    # -- forward --------------------------------------------------------

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def _param(self, name: str) -> Tensor | None:
        return self.params.get(name)

    def compress(self, xn: Tensor) -> Tensor:
        """(B, S, C) -> (B, M, L, C) with M shared kernels applied to every channel."""
        cfg = self.cfg
        B, S, C = xn.shape
        seqs = ops.reshape(ops.transpose(xn, (0, 2, 1)), (B * C, 1, S))
        z = ops.conv1d(seqs, self.params["compress.weight"], self._param("compress.bias"), stride=cfg.stride)
        z = ops.reshape(z, (B, C, cfg.n_kernels, cfg.patch_len))
        return ops.transpose(z, (0, 2, 3, 1))

    def attention_block(self, h: Tensor, i: int) -> Tensor:
        cfg = self.cfg
        p = f"blocks.{i}."
        B, M, L, C = h.shape

        def project(name: str) -> Tensor:
            w, b = self.params[p + "w" + name], self.params[p + "b" + name]
            return ops.matmul(w, h) + ops.reshape(b, (*b.shape, 1))

        q, k, v = project("q"), project("k"), project("v")
        scores = ops.matmul(ops.transpose(q, (0, 1, 3, 2)), k) * (1.0 / math.sqrt(L))
        attn = ops.softmax(scores, axis=-1)
        if self.attention_maps is not None:
            self.attention_maps.append(attn.data.copy())
        out = ops.matmul(v, ops.transpose(attn, (0, 1, 3, 2)))
        assert_finite(out, f"block {i} attention")

        if cfg.use_gate:
            seqs = ops.reshape(ops.transpose(h, (0, 1, 3, 2)), (B * M * C, 1, L))
            g = ops.conv1d(seqs, self.params[p + "gate.weight"], self._param(p + "gate.bias"),
                           padding=(cfg.gate_kernel - 1) // 2)
            gate = ops.transpose(ops.reshape(ops.glu(g, axis=1), (B, M, C, L)), (0, 1, 3, 2))
            out = out * gate
            assert_finite(out, f"block {i} temporal gate")

        z = h + out
        tokens = ops.reshape(ops.transpose(z, (0, 3, 1, 2)), (B, C, M * L))
        f = ops.relu(ops.matmul(tokens, self.params[p + "ff1.weight"]) + self.params[p + "ff1.bias"])
        f = ops.matmul(f, self.params[p + "ff2.weight"]) + self.params[p + "ff2.bias"]
        f = batch_norm(
            f, self.params[p + "bn.weight"], self.params[p + "bn.bias"],
            self.buffers[p + "bn.running_mean"], self.buffers[p + "bn.running_var"],
            training=self.training, momentum=cfg.bn_momentum, eps=cfg.bn_eps,
        )
        tokens = tokens + f
        assert_finite(tokens, f"block {i} feed-forward")
        return ops.transpose(ops.reshape(tokens, (B, C, M, L)), (0, 2, 3, 1))

    def expand(self, h: Tensor) -> Tensor:
        """(B, M, L, C) -> (B, C, S) with one K x M transposed-conv kernel per channel."""
        cfg = self.cfg
        B, M, L, C = h.shape
        seqs = ops.reshape(ops.transpose(h, (0, 3, 1, 2)), (B, C * M, L))
        out = ops.conv_transpose1d(seqs, self.params["expand.weight"], self._param("expand.bias"),
                                   stride=cfg.stride, groups=C)
        if out.shape[-1] != cfg.seq_len:
            raise ConfigurationError(f"expansion produced length {out.shape[-1]}, expected S={cfg.seq_len}")
        return out

    def project(self, z: Tensor) -> Tensor:
        """(B, C, S) -> (B, C, P)."""
        w, b = self.params["head.weight"], self.params["head.bias"]
        if self.cfg.per_channel_projection:
            B, C, S = z.shape
            out = ops.matmul(ops.reshape(z, (B, C, 1, S)), w)
            return ops.reshape(out, (B, C, self.cfg.pred_len)) + b
        return ops.matmul(z, w) + b

    def forward(self, x) -> Tensor:
        """x: (S, C) or (B, S, C) -> forecast of shape (P, C) or (B, P, C)."""
        cfg = self.cfg
        x = as_tensor(x)
        single = x.ndim == 2
        if single:
            x = ops.reshape(x, (1, *x.shape))
        if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.n_channels):
            raise ShapeError(f"expected input (B, {cfg.seq_len}, {cfg.n_channels}), got {x.shape}")
        assert_finite(x, "input")
        xn, state = revin_normalize(x, cfg.revin_eps, self._param("revin.weight"), self._param("revin.bias"))
        h = self.compress(xn)
        if cfg.use_attention:
            for i in range(cfg.n_layers):
                h = self.attention_block(h, i)
        amp = self.expand(h)
        y = self.project(ops.transpose(xn, (0, 2, 1)) + amp)
        y = revin_denormalize(ops.transpose(y, (0, 2, 1)), state)
        assert_finite(y, "output")
        if single:
            y = ops.reshape(y, y.shape[1:])
        return y

    def collect_attention(self, x) -> list[np.ndarray]:
        """Run forward and return each layer's attention, shape (B, M, C, C)."""
        if not self.cfg.use_attention:
            raise ConfigurationError("model was built without attention (W/O Attention ablation)")
        self.attention_maps = []
        try:
            self.forward(x)
            return self.attention_maps
        finally:
            self.attention_maps = None
