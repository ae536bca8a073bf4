"""Differentiable layers with explicit forward/backward passes.

Every layer exposes ``forward(x, train=False)``, ``backward(dout) -> dx``
and ``params() -> list[Param]``. Gradients accumulate into ``Param.grad``;
the training loop zeroes them between steps. Convolutions use stride 1 and
same-padding (extra padding on the trailing side for even kernels), so
spatial dims change only at pooling layers.
"""

from __future__ import annotations

import logging

import numpy as np

from ..errors import ShapeError

log = logging.getLogger(__name__)


class Param:
    """A trainable tensor with a gradient slot.

    ``decay`` marks parameters subject to the L2 penalty (weight matrices
    yes; biases and batch-norm scale/shift no).
    """

    def __init__(self, name: str, data: np.ndarray, decay: bool = True):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)
        self.decay = decay

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0


def xavier_uniform(rng, shape, dtype):
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(rng, shape, dtype):
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))  # fix the sign ambiguity for determinism
    return q.astype(dtype)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (invariant to adding a constant)."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Dense:
    """Affine map x @ W + b with Xavier-uniform init."""

    def __init__(self, in_dim, out_dim, rng, name="dense", dtype=np.float32):
        self.w = Param(f"{name}.W", xavier_uniform(rng, (in_dim, out_dim), dtype))
        self.b = Param(f"{name}.b", np.zeros(out_dim, dtype=dtype), decay=False)
        self._x = None

    def forward(self, x, train=False):
        if x.shape[-1] != self.w.shape[0]:
            raise ShapeError(
                f"{self.w.name}: expected {self.w.shape[0]} inputs, got {x.shape[-1]}"
            )
        self._x = x
        return x @ self.w.data + self.b.data

    def backward(self, dout):
        self.w.grad += self._x.T @ dout
        self.b.grad += dout.sum(axis=0)
        return dout @ self.w.data.T

    def params(self):
        return [self.w, self.b]


class Conv2d:
    """Stride-1 same-padded 2-D convolution via im2col.

    Activations are channels-last (B, H, W, C) so the im2col copy moves
    contiguous channel runs and the GEMM output needs no transpose. Weights
    are stored (out_ch, in_ch, kh, kw) with He-uniform init. Even kernel
    dims get the extra padding on the trailing side.
    """

    def __init__(self, in_ch, out_ch, kh, kw, rng, name="conv", dtype=np.float32):
        fan_in = in_ch * kh * kw
        self.w = Param(f"{name}.W", he_uniform(rng, (out_ch, in_ch, kh, kw), fan_in, dtype))
        self.b = Param(f"{name}.b", np.zeros(out_ch, dtype=dtype), decay=False)
        self.kh, self.kw = kh, kw
        self.in_ch, self.out_ch = in_ch, out_ch
        self.pad_h = ((kh - 1) // 2, kh - 1 - (kh - 1) // 2)
        self.pad_w = ((kw - 1) // 2, kw - 1 - (kw - 1) // 2)
        self._cols = None
        self._shape = None

    def _im2col(self, xp, h, w):
        # rows are spatial positions, columns flatten (kh, kw, channels)
        view = np.lib.stride_tricks.sliding_window_view(xp, (self.kh, self.kw), axis=(1, 2))
        return view.transpose(0, 1, 2, 4, 5, 3).reshape(xp.shape[0] * h * w, -1)

    def _wmat(self):
        return np.ascontiguousarray(
            self.w.data.transpose(0, 2, 3, 1).reshape(self.out_ch, -1)
        )

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ShapeError(
                f"{self.w.name}: expected (B,H,W,{self.in_ch}) input, got {x.shape}"
            )
        b, h, w, _ = x.shape
        xp = np.pad(x, ((0, 0), self.pad_h, self.pad_w, (0, 0)))
        cols = self._im2col(xp, h, w)
        out = cols @ self._wmat().T + self.b.data
        self._cols, self._shape = cols, (b, h, w)
        return out.reshape(b, h, w, self.out_ch)

    def backward(self, dout):
        b, h, w = self._shape
        dmat = dout.reshape(b * h * w, self.out_ch)
        dw = (dmat.T @ self._cols).reshape(self.out_ch, self.kh, self.kw, self.in_ch)
        self.w.grad += dw.transpose(0, 3, 1, 2)
        self.b.grad += dmat.sum(axis=0)

        # dx = full correlation of dout with the flipped, channel-swapped
        # kernel; padding mirrors the forward same-padding.
        dpad = np.pad(
            dout,
            ((0, 0),
             (self.pad_h[1], self.pad_h[0]),
             (self.pad_w[1], self.pad_w[0]),
             (0, 0)),
        )
        dcols = self._im2col(dpad, h, w)
        wf = np.ascontiguousarray(
            self.w.data.transpose(1, 2, 3, 0)[:, ::-1, ::-1, :].reshape(self.in_ch, -1)
        )
        dx = dcols @ wf.T
        return dx.reshape(b, h, w, self.in_ch)

    def params(self):
        return [self.w, self.b]


class BatchNorm2d:
    """Per-channel batch normalization over (B, H, W) of channels-last input.

    Train mode normalizes by batch moments and updates running statistics
    with momentum 0.9; inference uses the running statistics. Running stats
    are buffers, not trainable parameters.
    """

    def __init__(self, channels, rng=None, name="bn", eps=1e-5, momentum=0.9, dtype=np.float32):
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype), decay=False)
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype), decay=False)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self._trained = False
        self._cache = None

    def forward(self, x, train=False):
        if x.shape[-1] != self.gamma.data.size:
            raise ShapeError(
                f"{self.gamma.name}: expected {self.gamma.data.size} channels, got {x.shape[-1]}"
            )
        axes = tuple(range(x.ndim - 1))
        if train:
            n = x.size // x.shape[-1]
            flat = x.reshape(n, x.shape[-1])
            mean = flat.mean(axis=0)
            var = np.einsum("nc,nc->c", flat, flat) / n - mean**2
            np.maximum(var, 0.0, out=var)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(x.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(x.dtype)
            self._trained = True
        else:
            if not self._trained:
                log.warning("%s: inference before any training step, using init stats",
                            self.gamma.name)
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv_std
        self._cache = (xhat, inv_std, train, axes)
        return self.gamma.data * xhat + self.beta.data

    def backward(self, dout):
        xhat, inv_std, train, axes = self._cache
        c = dout.shape[-1]
        n = dout.size // c
        dflat = np.ascontiguousarray(dout).reshape(n, c)
        xflat = xhat.reshape(n, c)
        self.gamma.grad += np.einsum("nc,nc->c", dflat, xflat)
        self.beta.grad += dflat.sum(axis=0)
        dxhat = dout * self.gamma.data
        if not train:
            return dxhat * inv_std
        mean_d = dxhat.reshape(n, c).mean(axis=0)
        mean_dx = np.einsum("nc,nc->c", dxhat.reshape(n, c), xflat) / n
        return inv_std * (dxhat - mean_d - xhat * mean_dx)

    def params(self):
        return [self.gamma, self.beta]

    def get_buffers(self):
        """Running statistics, copied; stored in checkpoints next to params."""
        return {
            f"{self.name}.running_mean": self.running_mean.copy(),
            f"{self.name}.running_var": self.running_var.copy(),
        }

    def set_buffers(self, entries: dict):
        dtype = self.running_mean.dtype
        self.running_mean = np.asarray(entries[f"{self.name}.running_mean"], dtype=dtype)
        self.running_var = np.asarray(entries[f"{self.name}.running_var"], dtype=dtype)
        self._trained = True


class ReLU:
    def __init__(self):
        self._out = None

    def forward(self, x, train=False):
        self._out = np.maximum(x, 0.0)
        return self._out

    def backward(self, dout):
        return dout * (self._out > 0)

    def params(self):
        return []


class AvgPool2d:
    """Non-overlapping average pooling over channels-last input; spatial
    dims must divide the kernel."""

    def __init__(self, kh, kw):
        self.kh, self.kw = kh, kw
        self._shape = None

    def forward(self, x, train=False):
        b, h, w, c = x.shape
        if h % self.kh or w % self.kw:
            raise ShapeError(
                f"avgpool {self.kh}x{self.kw}: input {h}x{w} not divisible"
            )
        self._shape = x.shape
        return x.reshape(b, h // self.kh, self.kh, w // self.kw, self.kw, c).mean(axis=(2, 4))

    def backward(self, dout):
        scale = 1.0 / (self.kh * self.kw)
        up = np.repeat(np.repeat(dout, self.kh, axis=1), self.kw, axis=2)
        return up * scale

    def params(self):
        return []


class GlobalAvgPool:
    """(B, H, W, C) -> (B, C) spatial mean."""

    def __init__(self):
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout):
        b, h, w, c = self._shape
        return np.broadcast_to(dout[:, None, None, :], self._shape) / (h * w)

    def params(self):
        return []


class FeatureAveragePool:
    """(B, T, F) -> (B, T): mean over the feature axis, one value per frame."""

    def __init__(self):
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=2)

    def backward(self, dout):
        return np.broadcast_to(dout[:, :, None], self._shape) / self._shape[2]

    def params(self):
        return []


class Dropout:
    """Inverted dropout: active only in train mode, scaled by 1/(1-p)."""

    def __init__(self, p, rng):
        if not 0.0 <= p < 1.0:
            raise ShapeError(f"dropout rate must be in [0,1), got {p}")
        self.p = p
        self.rng = rng
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.p == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.p
        rdtype = np.float32 if x.dtype == np.float32 else np.float64
        draws = self.rng.random(x.shape, dtype=rdtype)
        self._mask = (draws < keep).astype(x.dtype)
        self._mask /= keep
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask

    def params(self):
        return []
