"""Network layers: specs, forward/backward rules, loss, and SGD.

Supported kinds: conv3d, maxpool3d, dense, leaky_relu, dropout, batchnorm3d,
flatten.  Spatial activations are channels-last (N, D, H, W, C); dense
activations are (N, F).  Every spatial layer obeys

    out_extent = floor((in + 2*pad - kernel) / stride) + 1

per axis.  conv3d is cross-correlation (no kernel flip) with a per-filter
bias.  Backward passes are exact reverse-mode derivatives of the forward
maps; dropout reuses its forward mask, batchnorm differentiates through the
batch statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .tensor import Tensor

LAYER_KINDS = ("conv3d", "maxpool3d", "dense", "leaky_relu", "dropout", "batchnorm3d", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer (kind + hyperparameters)."""

    kind: str
    filters: int = 0          # conv3d
    kernel: int = 0           # conv3d / maxpool3d
    stride: int = 1           # conv3d / maxpool3d
    pad: int = 0              # conv3d
    units: int = 0            # dense
    slope: float = 0.1        # leaky_relu
    ratio: float = 0.0        # dropout
    eps: float = 1e-5         # batchnorm3d
    momentum: float = 0.9     # batchnorm3d running-stat retention

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3d", "maxpool3d"):
            if self.kernel < 1:
                raise ValueError("kernel extent must be >= 1")
            if self.stride < 1:
                raise ValueError("stride must be >= 1")
        if self.kind == "conv3d":
            if self.filters < 1:
                raise ValueError("conv3d needs filters >= 1")
            if self.pad < 0:
                raise ValueError("padding must be >= 0")
        if self.kind == "dense" and self.units < 1:
            raise ValueError("dense needs units >= 1")
        if self.kind == "dropout" and not 0.0 <= self.ratio < 1.0:
            raise ValueError("dropout ratio must be in [0, 1)")

    @staticmethod
    def conv3d(filters, kernel, stride=1, pad=0) -> "LayerSpec":
        return LayerSpec("conv3d", filters=filters, kernel=kernel, stride=stride, pad=pad)

    @staticmethod
    def maxpool3d(kernel, stride) -> "LayerSpec":
        return LayerSpec("maxpool3d", kernel=kernel, stride=stride)

    @staticmethod
    def dense(units) -> "LayerSpec":
        return LayerSpec("dense", units=units)

    @staticmethod
    def leaky_relu(slope=0.1) -> "LayerSpec":
        return LayerSpec("leaky_relu", slope=slope)

    @staticmethod
    def dropout(ratio) -> "LayerSpec":
        return LayerSpec("dropout", ratio=ratio)

    @staticmethod
    def batchnorm3d(eps=1e-5, momentum=0.9) -> "LayerSpec":
        return LayerSpec("batchnorm3d", eps=eps, momentum=momentum)

    @staticmethod
    def flatten() -> "LayerSpec":
        return LayerSpec("flatten")

    def out_shape(self, in_shape: tuple) -> tuple:
        """Output shape (without batch) for a valid input shape."""
        if self.kind == "conv3d":
            d, h, w, _ = in_shape
            e = [(x + 2 * self.pad - self.kernel) // self.stride + 1 for x in (d, h, w)]
            if min(e) < 1:
                raise ValueError(f"conv3d kernel {self.kernel} does not fit input {in_shape}")
            return (*e, self.filters)
        if self.kind == "maxpool3d":
            d, h, w, c = in_shape
            e = [(x - self.kernel) // self.stride + 1 for x in (d, h, w)]
            if min(e) < 1:
                raise ValueError(f"maxpool3d kernel {self.kernel} does not fit input {in_shape}")
            return (*e, c)
        if self.kind == "dense":
            return (self.units,)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return tuple(in_shape)


class Layer:
    """Base runtime layer.  Subclasses fill params/forward/backward."""

    spec: LayerSpec
    name: str

    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        """Non-trainable state persisted in checkpoints (e.g. BN stats)."""
        return {}

    def forward(self, x: np.ndarray, mode: str = "train", rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gy: np.ndarray, need_input_grad: bool = True) -> Optional[np.ndarray]:
        raise NotImplementedError

    def _check_mode(self, mode):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


class Conv3d(Layer):
    """3D cross-correlation with bias, via im2col + GEMM.

    Weight is stored as a (C*k^3, O) matrix whose rows follow the im2col
    column order (kd, kh, kw, c); ``weight_view()`` exposes the logical
    (k, k, k, C, O) layout.
    """

    def __init__(self, spec: LayerSpec, in_channels: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "conv"):
        self.spec = spec
        self.name = name
        self.in_channels = in_channels
        k, o = spec.kernel, spec.filters
        fan_in = in_channels * k ** 3
        std = float(np.sqrt(2.0 / fan_in))
        self.weight = Tensor(
            rng.normal(0.0, std, size=(fan_in, o)).astype(dtype), name=f"{name}.weight")
        self.bias = Tensor(np.zeros(o, dtype=dtype), name=f"{name}.bias")
        self._cache = None
        self._col = None   # reused im2col buffer (page faults dominate otherwise)
        self._gx = None

    def params(self):
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def weight_view(self) -> np.ndarray:
        k, o = self.spec.kernel, self.spec.filters
        return self.weight.data.reshape(k, k, k, self.in_channels, o)

    def _col_for(self, rows: int, ck: int, dtype):
        if (self._col is None or self._col.dtype != dtype or self._col.shape[1] != ck
                or self._col.shape[0] < rows):
            self._col = np.empty((rows, ck), dtype=dtype)
        return self._col[:rows]

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        if x.ndim != 5 or x.shape[4] != self.in_channels:
            raise ValueError(
                f"{self.name}: expected (N, D, H, W, {self.in_channels}) input, got {x.shape}")
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.pad
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
        n, d, h, w, c = x.shape
        do, ho, wo = ((e - k) // s + 1 for e in (d, h, w))
        if min(do, ho, wo) < 1:
            raise ValueError(f"{self.name}: kernel {k} does not fit padded input {x.shape}")
        col = self._col_for(n * do * ho * wo, c * k ** 3, x.dtype)
        kernels.im2col3d(x, col, k, s)
        y = np.empty((n, do, ho, wo, self.spec.filters), dtype=x.dtype)
        flat = y.reshape(-1, self.spec.filters)
        np.matmul(col, self.weight.data, out=flat)
        flat += self.bias.data
        self._cache = (col, x.shape)
        return y

    def backward(self, gy, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without saved forward state")
        col, x_shape = self._cache
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.pad
        o = self.spec.filters
        g = np.ascontiguousarray(gy.reshape(-1, o))
        self.weight.add_grad(col.T @ g)
        self.bias.add_grad(g.sum(axis=0))
        if not need_input_grad:
            return None
        if self._gx is None or self._gx.shape != x_shape or self._gx.dtype != g.dtype:
            self._gx = np.empty(x_shape, dtype=g.dtype)
        gx = self._gx
        gx.fill(0)
        wt = np.ascontiguousarray(self.weight.data.T)
        kernels.conv3d_input_grad(g, wt, gx, k, s)
        if p:
            gx = np.ascontiguousarray(gx[:, p:-p, p:-p, p:-p, :])
        return gx


class MaxPool3d(Layer):
    def __init__(self, spec: LayerSpec, name: str = "pool"):
        self.spec = spec
        self.name = name
        self._cache = None
        self._gx = None

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        if x.ndim != 5:
            raise ValueError(f"{self.name}: expected 5D input, got shape {x.shape}")
        k, s = self.spec.kernel, self.spec.stride
        n, d, h, w, c = x.shape
        do, ho, wo = ((e - k) // s + 1 for e in (d, h, w))
        if min(do, ho, wo) < 1:
            raise ValueError(f"{self.name}: kernel {k} does not fit input {x.shape}")
        shape = (n, do, ho, wo, c)
        y = np.empty(shape, dtype=x.dtype)
        idx = np.empty(shape, dtype=np.int64)
        kernels.maxpool3d_forward(x, y, idx, k, s)
        self._cache = (idx, x.shape)
        return y

    def backward(self, gy, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without saved forward state")
        idx, x_shape = self._cache
        if not need_input_grad:
            return None
        if self._gx is None or self._gx.shape != x_shape or self._gx.dtype != gy.dtype:
            self._gx = np.empty(x_shape, dtype=gy.dtype)
        self._gx.fill(0)
        kernels.maxpool3d_backward(np.ascontiguousarray(gy), idx, self._gx)
        return self._gx


class Dense(Layer):
    def __init__(self, spec: LayerSpec, in_features: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "fc"):
        self.spec = spec
        self.name = name
        self.in_features = in_features
        std = float(np.sqrt(2.0 / in_features))
        self.weight = Tensor(
            rng.normal(0.0, std, size=(in_features, spec.units)).astype(dtype),
            name=f"{name}.weight")
        self.bias = Tensor(np.zeros(spec.units, dtype=dtype), name=f"{name}.bias")
        self._cache = None

    def params(self):
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(
                f"{self.name}: expected (N, {self.in_features}) input, got {x.shape}")
        self._cache = x
        return x @ self.weight.data + self.bias.data

    def backward(self, gy, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without saved forward state")
        x = self._cache
        self.weight.add_grad(x.T @ gy)
        self.bias.add_grad(gy.sum(axis=0))
        if not need_input_grad:
            return None
        return gy @ self.weight.data.T


class LeakyReLU(Layer):
    """``inplace=True`` mutates its input and the upstream gradient; only
    safe when the caller owns those buffers (the trunk builder does)."""

    def __init__(self, spec: LayerSpec, name: str = "act", inplace: bool = False):
        self.spec = spec
        self.name = name
        self.inplace = inplace
        self._cache = None

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        neg = x < 0
        self._cache = neg
        slope = x.dtype.type(self.spec.slope)
        if self.inplace:
            np.multiply(x, slope, out=x, where=neg)
            return x
        return np.where(neg, x * slope, x)

    def backward(self, gy, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without saved forward state")
        if not need_input_grad:
            return None
        neg = self._cache
        slope = gy.dtype.type(self.spec.slope)
        if self.inplace:
            np.multiply(gy, slope, out=gy, where=neg)
            return gy
        return np.where(neg, gy * slope, gy)


class Dropout(Layer):
    """Inverted dropout: eval mode is the identity."""

    def __init__(self, spec: LayerSpec, name: str = "drop"):
        self.spec = spec
        self.name = name
        self._cache = None

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        if mode == "eval" or self.spec.ratio == 0.0:
            self._cache = None
            return x
        if rng is None:
            raise ValueError(f"{self.name}: train-mode dropout needs an rng")
        keep = 1.0 - self.spec.ratio
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        self._cache = mask
        return x * mask

    def backward(self, gy, need_input_grad=True):
        if not need_input_grad:
            return None
        if self._cache is None:
            return gy
        return gy * self._cache


class BatchNorm3d(Layer):
    """Per-channel normalization over batch and spatial axes.

    Train mode normalizes with batch statistics and updates running stats as
    running = momentum*running + (1-momentum)*batch; eval mode uses the
    running statistics only.
    """

    def __init__(self, spec: LayerSpec, channels: int, dtype=np.float32, name: str = "bn"):
        self.spec = spec
        self.name = name
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return {self.gamma.name: self.gamma, self.beta.name: self.beta}

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        if x.ndim != 5 or x.shape[4] != self.channels:
            raise ValueError(
                f"{self.name}: expected (N, D, H, W, {self.channels}) input, got {x.shape}")
        axes = (0, 1, 2, 3)
        eps = x.dtype.type(self.spec.eps)
        if mode == "train":
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.spec.momentum
            self.running_mean[:] = m * self.running_mean + (1.0 - m) * mean
            self.running_var[:] = m * self.running_var + (1.0 - m) * var
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * invstd
        y = xhat * self.gamma.data + self.beta.data
        self._cache = (xhat, invstd, mode)
        return y

    def backward(self, gy, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without saved forward state")
        xhat, invstd, mode = self._cache
        axes = (0, 1, 2, 3)
        self.gamma.add_grad((gy * xhat).sum(axis=axes))
        self.beta.add_grad(gy.sum(axis=axes))
        if not need_input_grad:
            return None
        gxhat = gy * self.gamma.data
        if mode == "eval":
            return gxhat * invstd
        m = float(np.prod(xhat.shape[:4]))
        return (invstd / m) * (
            m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))


class Flatten(Layer):
    def __init__(self, spec: LayerSpec, name: str = "flatten"):
        self.spec = spec
        self.name = name
        self._cache = None

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gy, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without saved forward state")
        if not need_input_grad:
            return None
        return gy.reshape(self._cache)


def build_layer(spec: LayerSpec, in_shape: tuple, rng=None, dtype=np.float32,
                name: str = "", inplace_activations: bool = False) -> Layer:
    """Instantiate a runtime layer for ``spec`` given its input shape."""
    name = name or spec.kind
    if spec.kind == "conv3d":
        return Conv3d(spec, in_shape[-1], rng, dtype=dtype, name=name)
    if spec.kind == "maxpool3d":
        return MaxPool3d(spec, name=name)
    if spec.kind == "dense":
        feats = in_shape[0] if len(in_shape) == 1 else int(np.prod(in_shape))
        return Dense(spec, feats, rng, dtype=dtype, name=name)
    if spec.kind == "leaky_relu":
        return LeakyReLU(spec, name=name, inplace=inplace_activations)
    if spec.kind == "dropout":
        return Dropout(spec, name=name)
    if spec.kind == "batchnorm3d":
        return BatchNorm3d(spec, in_shape[-1], dtype=dtype, name=name)
    return Flatten(spec, name=name)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax, stabilized by max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, targets) -> tuple:
    """Mean multinomial cross-entropy over the batch.

    Returns (loss, grad) where grad = (softmax - onehot) / batch.  Computed
    via log-sum-exp so saturated logits neither overflow nor lose the zero
    lower bound.
    """
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"target out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, targets]))
    grad = softmax(logits)
    grad[rows, targets] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)


class SGD:
    """SGD with classical momentum and decoupled-into-velocity weight decay.

    Per parameter: v <- momentum*v + grad + weight_decay*param, then
    param <- param - lr*v.  A non-finite gradient rejects the whole step.
    """

    def __init__(self, params: dict, lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be >= 0 (0 freezes the parameters)")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for {name}; step rejected")
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= p.data.dtype.type(self.lr) * v
