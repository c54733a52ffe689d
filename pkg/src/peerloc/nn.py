"""Minimal deterministic tensor engine for the localization network.

Exactly the four layer kinds the network needs (same-size convolution,
2x2 max pooling, ReLU, batch normalization), each with an analytic
backward pass, plus He-style initialization and Adam.  Activations are
plain numpy arrays in (batch, channels, height, width) layout; the
engine runs in whatever float dtype flows in, so training uses float32
while gradient checks run the same code in float64.

Convolution is implemented as cross-correlation with zero padding and
stride 1, lowered to matrix products (im2col) so the single hot loop is
a BLAS GEMM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """A gradient fed to the optimizer contained NaN or Inf."""


@dataclass(frozen=True)
class LayerSpec:
    """Description of one layer; parameter shapes derive from `kind`.

    conv: out_channels and odd kernel, stride 1, zero padding (k-1)/2 so
    spatial size is preserved.  maxpool: fixed 2x2 window, stride 2.
    """

    kind: str  # "conv" | "maxpool" | "relu" | "batchnorm"
    out_channels: Optional[int] = None
    kernel: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in ("conv", "maxpool", "relu", "batchnorm"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if not self.out_channels or not self.kernel:
                raise ValueError("conv spec needs out_channels and kernel")
            if self.kernel % 2 == 0:
                raise ValueError("conv kernel must be odd")

    def to_json(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "conv":
            d["out_channels"] = self.out_channels
            d["kernel"] = self.kernel
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            out_channels=d.get("out_channels"),
            kernel=d.get("kernel"),
        )


class ParamStore:
    """Ordered named tensors: trainable params plus persistent buffers
    (batchnorm running statistics).  Iteration order is fixed by layer
    order, which also fixes the checkpoint blob layout."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> None:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate tensor name {name!r}")
        self.params[name] = value

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate tensor name {name!r}")
        self.buffers[name] = value

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.params[k] = v.astype(dtype)
        for k, v in self.buffers.items():
            out.buffers[k] = v.astype(dtype)
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.params[k] = v.copy()
        for k, v in self.buffers.items():
            out.buffers[k] = v.copy()
        return out


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Lower (B, C, H, W) into (B, C*k*k, H*W) patches, zero-padded so
    every output pixel has a full window."""
    b, c, h, w = x.shape
    p = (k - 1) // 2
    if p:
        xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p : p + h, p : p + w] = x
    else:
        xp = x
    cols = np.empty((b, c, k, k, h, w), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + h, kj : kj + w]
    return cols.reshape(b, c * k * k, h * w)


class Conv2d:
    """Same-size convolution (cross-correlation), stride 1."""

    kind = "conv"

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.weight_name = f"{name}.weight"
        self.bias_name = f"{name}.bias"

    def param_shapes(self) -> dict[str, tuple]:
        k = self.kernel
        return {
            self.weight_name: (self.out_channels, self.in_channels, k, k),
            self.bias_name: (self.out_channels,),
        }

    def init_params(self, store: ParamStore, rng: np.random.Generator, dtype) -> None:
        fan_in = self.in_channels * self.kernel * self.kernel
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=self.param_shapes()[self.weight_name])
        store.add_param(self.weight_name, w.astype(dtype))
        store.add_param(self.bias_name, np.zeros(self.out_channels, dtype=dtype))

    def forward(self, store: ParamStore, x: np.ndarray, training: bool):
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        weight = store.params[self.weight_name]
        bias = store.params[self.bias_name]
        cols = _im2col(x, self.kernel)
        w2 = weight.reshape(self.out_channels, -1)
        out = np.matmul(w2, cols)
        out += bias[None, :, None]
        return out.reshape(b, self.out_channels, h, w), (cols, x.shape)

    def backward(self, store: ParamStore, cache, grad_out: np.ndarray):
        cols, x_shape = cache
        b, c, h, w = x_shape
        k = self.kernel
        p = (k - 1) // 2
        weight = store.params[self.weight_name]
        gout = grad_out.reshape(b, self.out_channels, h * w)

        grad_w = np.matmul(gout, cols.transpose(0, 2, 1)).sum(axis=0)
        grad_w = grad_w.reshape(weight.shape)
        grad_b = gout.sum(axis=(0, 2))

        w2 = weight.reshape(self.out_channels, -1)
        dcols = np.matmul(w2.T, gout).reshape(b, c, k, k, h, w)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki : ki + h, kj : kj + w] += dcols[:, :, ki, kj]
        grad_x = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return grad_x, {self.weight_name: grad_w, self.bias_name: grad_b}


class MaxPool2d:
    """2x2 max pooling, stride 2; gradients route to the first maximum
    of each window (deterministic tie break)."""

    kind = "maxpool"

    def __init__(self, name: str):
        self.name = name

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def init_params(self, store: ParamStore, rng: np.random.Generator, dtype) -> None:
        pass

    _OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))

    def forward(self, store: ParamStore, x: np.ndarray, training: bool):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"{self.name}: spatial size {h}x{w} not divisible by 2")
        out = np.maximum(
            np.maximum(x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2]),
            np.maximum(x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]),
        )
        return out, (x, out)

    def backward(self, store: ParamStore, cache, grad_out: np.ndarray):
        x, out = cache
        grad_x = np.zeros_like(x, dtype=grad_out.dtype)
        # route each window's gradient to its first maximum (row-major
        # within the window), so ties resolve deterministically
        claimed = np.zeros(out.shape, dtype=bool)
        for di, dj in self._OFFSETS:
            hit = (x[:, :, di::2, dj::2] == out) & ~claimed
            grad_x[:, :, di::2, dj::2] = grad_out * hit
            claimed |= hit
        return grad_x, {}


class ReLU:
    kind = "relu"

    def __init__(self, name: str):
        self.name = name

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def init_params(self, store: ParamStore, rng: np.random.Generator, dtype) -> None:
        pass

    def forward(self, store: ParamStore, x: np.ndarray, training: bool):
        out = np.maximum(x, 0.0)
        return out, (x > 0.0)

    def backward(self, store: ParamStore, cache, grad_out: np.ndarray):
        return grad_out * cache, {}


class BatchNorm2d:
    """Per-channel batch normalization.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running statistics in place with momentum 0.9; eval mode
    uses the stored running statistics.
    """

    kind = "batchnorm"
    eps = 1e-5
    momentum = 0.9

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels
        self.gamma_name = f"{name}.gamma"
        self.beta_name = f"{name}.beta"
        self.mean_name = f"{name}.running_mean"
        self.var_name = f"{name}.running_var"

    def param_shapes(self) -> dict[str, tuple]:
        return {self.gamma_name: (self.channels,), self.beta_name: (self.channels,)}

    def buffer_shapes(self) -> dict[str, tuple]:
        return {self.mean_name: (self.channels,), self.var_name: (self.channels,)}

    def init_params(self, store: ParamStore, rng: np.random.Generator, dtype) -> None:
        store.add_param(self.gamma_name, np.ones(self.channels, dtype=dtype))
        store.add_param(self.beta_name, np.zeros(self.channels, dtype=dtype))
        store.add_buffer(self.mean_name, np.zeros(self.channels, dtype=dtype))
        store.add_buffer(self.var_name, np.ones(self.channels, dtype=dtype))

    def forward(self, store: ParamStore, x: np.ndarray, training: bool):
        gamma = store.params[self.gamma_name]
        beta = store.params[self.beta_name]
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            rm = store.buffers[self.mean_name]
            rv = store.buffers[self.var_name]
            rm *= self.momentum
            rm += (1.0 - self.momentum) * mean
            rv *= self.momentum
            rv += (1.0 - self.momentum) * var
        else:
            mean = store.buffers[self.mean_name]
            var = store.buffers[self.var_name]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        return out, (xhat, inv, training)

    def backward(self, store: ParamStore, cache, grad_out: np.ndarray):
        xhat, inv, training = cache
        gamma = store.params[self.gamma_name]
        grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
        grad_beta = grad_out.sum(axis=(0, 2, 3))
        dxhat = grad_out * gamma[None, :, None, None]
        if training:
            b, c, h, w = grad_out.shape
            n = b * h * w
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            grad_x = (inv[None, :, None, None] / n) * (n * dxhat - sum_d - xhat * sum_dx)
        else:
            # running statistics are constants in eval mode
            grad_x = dxhat * inv[None, :, None, None]
        return grad_x, {self.gamma_name: grad_gamma, self.beta_name: grad_beta}


Layer = Conv2d | MaxPool2d | ReLU | BatchNorm2d


def build_layers(specs: list[LayerSpec], in_channels: int) -> list[Layer]:
    """Instantiate named layers from specs, propagating channel counts."""
    layers: list[Layer] = []
    counters = {"conv": 0, "maxpool": 0, "relu": 0, "batchnorm": 0}
    short = {"conv": "conv", "maxpool": "pool", "relu": "relu", "batchnorm": "bn"}
    ch = in_channels
    for spec in specs:
        counters[spec.kind] += 1
        name = f"{short[spec.kind]}{counters[spec.kind]}"
        if spec.kind == "conv":
            layers.append(Conv2d(name, ch, spec.out_channels, spec.kernel))  # type: ignore[arg-type]
            ch = spec.out_channels  # type: ignore[assignment]
        elif spec.kind == "maxpool":
            layers.append(MaxPool2d(name))
        elif spec.kind == "relu":
            layers.append(ReLU(name))
        else:
            layers.append(BatchNorm2d(name, ch))
    return layers


def init_params(
    layers: list[Layer], seed: int | np.random.SeedSequence, dtype=np.float32
) -> ParamStore:
    """He fan-in init for conv weights, zero biases, identity batchnorm.

    Deterministic per seed: one generator, layers drawn in order.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore()
    for layer in layers:
        layer.init_params(store, rng, dtype)
    return store


def forward_stack(
    layers: list[Layer], store: ParamStore, x: np.ndarray, training: bool
) -> tuple[np.ndarray, list]:
    """Run all layers; returns the output and per-layer caches."""
    caches = []
    for layer in layers:
        x, cache = layer.forward(store, x, training)
        caches.append(cache)
    return x, caches


def backward_stack(
    layers: list[Layer], store: ParamStore, caches: list, grad_out: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backpropagate through all layers; returns input grad and a dict
    of parameter gradients."""
    grads: dict[str, np.ndarray] = {}
    for layer, cache in zip(reversed(layers), reversed(caches)):
        grad_out, layer_grads = layer.backward(store, cache, grad_out)
        grads.update(layer_grads)
    return grad_out, grads


@dataclass
class AdamState:
    """Per-parameter Adam moments; created lazily from a ParamStore."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, store: ParamStore) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in store.params.items()},
            v={k: np.zeros_like(p) for k, p in store.params.items()},
        )


def adam_step(
    state: AdamState, store: ParamStore, grads: dict[str, np.ndarray], lr: float
) -> None:
    """One bias-corrected Adam update, in place on the parameters."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, param in store.params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
