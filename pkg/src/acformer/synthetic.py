"""Residual-extraction study: recover the Gaussian noise from a noisy sinusoid
with small linear / convolutional autoencoders."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .model import mse_loss
from .rng import stream
from .tensor import ConfigurationError, NonFiniteError, Tape, Tensor
from .training import Adam

CONV_KERNEL = 10
CONV_STRIDE = 2
CHANNEL_FACTOR = 4


@dataclass(frozen=True)
class SyntheticSample:
    s: np.ndarray
    eps: np.ndarray
    a: float
    b: float


@dataclass(frozen=True)
class SyntheticSet:
    """Column-stacked samples: ``s[n] = a[n] * sin(2 b[n] pi i / l) + eps[n]``."""

    s: np.ndarray
    eps: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __len__(self) -> int:
        return len(self.s)

    def __getitem__(self, n: int) -> SyntheticSample:
        return SyntheticSample(self.s[n], self.eps[n], float(self.a[n]), float(self.b[n]))


def synthesize(a, b, eps: np.ndarray) -> np.ndarray:
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    l = eps.shape[-1]
    i = np.arange(l)
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 1)
    return a * np.sin(2.0 * b * math.pi * i / l) + eps


def generate_synthetic(n: int, l: int = 200, seed: int = 0, name: str = "synth") -> SyntheticSet:
    """a ~ U(-3, 3), b ~ U(0, 10), eps ~ N(0, 1), drawn from the ``name`` stream."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = stream(seed, name)
    a = rng.uniform(-3.0, 3.0, size=n)
    b = rng.uniform(0.0, 10.0, size=n)
    eps = rng.standard_normal((n, l))
    return SyntheticSet(synthesize(a, b, eps), eps, a, b)


# -- autoencoders ------------------------------------------------------------

@dataclass(frozen=True)
class AEVariant:
    encoder: str
    decoder: str
    projection: str = "none"

    @property
    def label(self) -> str:
        parts = [self.encoder, self.decoder] if self.projection == "none" else [self.encoder, self.projection, self.decoder]
        return "/".join(p.replace("linear", "lin") for p in parts)


VARIANTS = (
    AEVariant("linear", "linear"),
    AEVariant("linear", "conv"),
    AEVariant("conv", "linear"),
    AEVariant("conv", "conv"),
    AEVariant("conv", "conv", "linear"),
)


def variant_by_label(label: str) -> AEVariant:
    for v in VARIANTS:
        if v.label == label:
            return v
    raise ConfigurationError(f"unknown variant {label!r}; choose from {[v.label for v in VARIANTS]}")


def conv_out_len(length: int, k: int = CONV_KERNEL, s: int = CONV_STRIDE) -> int:
    return (length - k) // s + 1


def conv_transpose_out_len(length: int, k: int = CONV_KERNEL, s: int = CONV_STRIDE) -> int:
    return (length - 1) * s + k


@dataclass
class Layer:
    kind: str  # "conv", "tconv", "linear", "flatten"
    weight: Tensor | None = None
    bias: Tensor | None = None
    relu: bool = True


@dataclass
class Autoencoder:
    """Stack of layers mapping (B, 1, l) to (B, 1, l)."""

    variant: AEVariant
    length: int
    layers: list[Layer] = field(default_factory=list)
    latent_shape: tuple[int, int] = (1, 0)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.weight is not None:
                out[f"{i}.{layer.kind}.weight"] = layer.weight
                out[f"{i}.{layer.kind}.bias"] = layer.bias
        return out

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params().values()))

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.ndim == 2:
            h = ops.reshape(h, (h.shape[0], 1, h.shape[1]))
        for layer in self.layers:
            if layer.kind == "conv":
                h = ops.conv1d(h, layer.weight, layer.bias, stride=CONV_STRIDE)
            elif layer.kind == "tconv":
                h = ops.conv_transpose1d(h, layer.weight, layer.bias, stride=CONV_STRIDE)
            elif layer.kind == "linear":
                h = ops.matmul(h, layer.weight) + layer.bias
            elif layer.kind == "flatten":
                h = ops.reshape(h, (h.shape[0], 1, -1))
            if layer.relu:
                h = ops.relu(h)
        # transposed-conv lengths need not land on l; keep the central l samples
        extra = h.shape[-1] - self.length
        if extra < 0:
            raise ConfigurationError(f"decoder emits {h.shape[-1]} samples, fewer than l={self.length}")
        if extra:
            lo = extra // 2
            h = h[:, :, lo:lo + self.length]
        return ops.reshape(h, (h.shape[0], self.length))


def build_autoencoder(variant: AEVariant, l: int = 200, seed: int = 0) -> Autoencoder:
    """Two-layer encoder and decoder, optional linear middle projection.

    Conv compartments use kernel 10 / stride 2 and multiply (encoder) or
    divide (decoder) the channel count by four per layer. Linear
    compartments act on the sequence axis with one channel: 200 -> 100 -> 50
    on the way down, (latent) -> l/2 -> l on the way up. ReLU follows every
    layer except the output.
    """
    if l % 4:
        raise ConfigurationError(f"sequence length must be divisible by 4, got {l}")
    if variant not in VARIANTS:
        raise ConfigurationError(f"unsupported variant {variant}")
    rng = stream(seed, "synth-init", VARIANTS.index(variant))
    layers: list[Layer] = []

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def conv(cin, cout, relu=True):
        layers.append(Layer("conv", uniform((cout, cin, CONV_KERNEL), cin * CONV_KERNEL), uniform((cout,), cin * CONV_KERNEL), relu))

    def tconv(cin, cout, relu=True):
        fan = cout * CONV_KERNEL
        layers.append(Layer("tconv", uniform((cin, cout, CONV_KERNEL), fan), uniform((cout,), fan), relu))

    def linear(n_in, n_out, relu=True):
        layers.append(Layer("linear", uniform((n_in, n_out), n_in), uniform((n_out,), n_in), relu))

    if variant.encoder == "conv":
        c1, c2 = CHANNEL_FACTOR, CHANNEL_FACTOR ** 2
        conv(1, c1)
        conv(c1, c2)
        latent = (c2, conv_out_len(conv_out_len(l)))
    else:
        linear(l, l // 2)
        linear(l // 2, l // 4)
        latent = (1, l // 4)
    if variant.projection == "linear":
        linear(latent[1], latent[1])
    if variant.decoder == "conv":
        tconv(latent[0], CHANNEL_FACTOR)
        tconv(CHANNEL_FACTOR, 1, relu=False)
    else:
        if latent[0] > 1:
            layers.append(Layer("flatten", relu=False))
        linear(latent[0] * latent[1], l // 2)
        linear(l // 2, l, relu=False)
    return Autoencoder(variant, l, layers, latent)


# -- experiment --------------------------------------------------------------

@dataclass
class VariantResult:
    variant: AEVariant
    seed: int
    mae: float
    mse: float
    n_params: int
    status: str = "ok"
    losses: list[float] = field(default_factory=list)
    trace: np.ndarray | None = None  # (n_trace, 3, l): s, eps, eps_hat

    def row(self) -> dict:
        v = self.variant
        return {
            "variant": v.label,
            "enc": v.encoder,
            "proj": v.projection,
            "dec": v.decoder,
            "mae": self.mae,
            "mse": self.mse,
            "seed": self.seed,
        }


def train_variant(variant: AEVariant, train: SyntheticSet, evalset: SyntheticSet, seed: int,
                  epochs: int = 20, batch_size: int = 64, lr: float = 1e-3, n_trace: int = 3) -> VariantResult:
    model = build_autoencoder(variant, train.s.shape[1], seed)
    params = model.params()
    opt = Adam(params)
    losses = []
    n = len(train)
    try:
        for epoch in range(1, epochs + 1):
            order = stream(seed, "synth-shuffle", VARIANTS.index(variant), epoch).permutation(n)
            total = 0.0
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                for p in params.values():
                    p.grad = None
                with Tape() as tape:
                    loss = mse_loss(model(train.s[idx]), train.eps[idx])
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError(f"loss became {value} at epoch {epoch}")
                tape.backward(loss)
                opt.step(lr)
                total += value * len(idx)
            losses.append(total / n)
    except NonFiniteError:
        return VariantResult(variant, seed, float("nan"), float("nan"), model.num_parameters(), "diverged", losses)
    pred = np.concatenate([model(evalset.s[lo:lo + 500]).data for lo in range(0, len(evalset), 500)])
    diff = pred - evalset.eps
    trace = np.stack([evalset.s[:n_trace], evalset.eps[:n_trace], pred[:n_trace]], axis=1)
    return VariantResult(variant, seed, float(np.mean(np.abs(diff))), float(np.mean(diff * diff)),
                         model.num_parameters(), "ok", losses, trace)


def run_residual_experiment(seed: int, n_train: int = 10_000, n_eval: int = 1_000, l: int = 200,
                            epochs: int = 20, batch_size: int = 64, lr: float = 1e-3,
                            variants=VARIANTS, threads: int = 1) -> list[VariantResult]:
    """Train every variant on one shared dataset; results come back in ``variants`` order."""
    train = generate_synthetic(n_train, l, seed, "synth-train")
    evalset = generate_synthetic(n_eval, l, seed, "synth-eval")

    def job(v):
        return train_variant(v, train, evalset, seed, epochs, batch_size, lr)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(job, variants))
    return [job(v) for v in variants]
