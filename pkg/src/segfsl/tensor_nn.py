"""Small dense-array neural network kernel with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` objects in channels-last (N,H,W,C) layout
so that convolutions reduce to contiguous matrix products. Every op comes as a
``*_forward`` / ``*_backward`` pair: the forward returns ``(output, cache)`` and
the backward consumes the cache. Layer classes wrap the pairs and own their
:class:`Parameter` objects. The computation dtype follows the input, so the
same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ContractError(ValueError):
    """Raised when an op receives inputs that violate its shape contract."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or inf."""


@dataclass
class Parameter:
    """Trainable array with its gradient and Adam moment slots."""

    name: str
    value: np.ndarray
    grad: np.ndarray | None = None
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


# ---------------------------------------------------------------------------
# conv2d
#
# The convolution works on the flattened padded image. For a padded input of
# width Wp, the window of output pixel q starts at flat row q and tap (i, j)
# sits at row q + i*Wp + j, so each tap is one contiguous matmul. Rows that
# straddle an image border are computed and then cropped away.


_GATHER_BELOW = 16


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def conv2d_forward(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (N,H,W,C) with ``weight`` (kh,kw,C,O)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, h, w, c = x.shape
    kh, kw, cw, o = weight.shape
    if c != cw:
        raise ContractError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ContractError(f"conv2d input {h}x{w} smaller than kernel {kh}x{kw}")
    xp = np.ascontiguousarray(_pad(x, padding))
    hp, wp = xp.shape[1:3]
    xf = xp.reshape(-1, c)
    rows = xf.shape[0]
    q = rows - ((kh - 1) * wp + kw - 1)
    yf = np.zeros((rows, o), dtype=np.result_type(x, weight))
    if kh == 1 and kw == 1:
        np.matmul(xf, weight[0, 0], out=yf)
    elif c < _GATHER_BELOW:
        # few input channels: one wide matmul beats kh*kw skinny ones
        cols = np.empty((q, kh * kw, c), dtype=xf.dtype)
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                cols[:, i * kw + j] = xf[off:off + q]
        np.matmul(cols.reshape(q, -1), weight.reshape(-1, o), out=yf[:q])
    else:
        tmp = np.empty((q, o), dtype=yf.dtype)
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                np.matmul(xf[off:off + q], weight[i, j], out=tmp)
                yf[:q] += tmp
    y = yf.reshape(n, hp, wp, o)[:, :hp - kh + 1:stride, :wp - kw + 1:stride]
    if bias is not None:
        y = y + bias
    return np.ascontiguousarray(y), (x.shape, xp, weight, stride, padding, bias is not None)


def conv2d_backward(dy, cache):
    """Return ``(dx, dweight, dbias)``; ``dbias`` is None when the layer has no bias."""
    x_shape, xp, weight, stride, padding, has_bias = cache
    n, h, w, c = x_shape
    kh, kw, _, o = weight.shape
    hp, wp = xp.shape[1:3]
    ho, wo = dy.shape[1:3]
    db = dy.reshape(-1, o).sum(axis=0) if has_bias else None
    # scatter dy onto the flat padded grid; cropped rows carry zero gradient
    dyf = np.zeros((n, hp, wp, o), dtype=dy.dtype)
    dyf[:, :stride * ho:stride, :stride * wo:stride] = dy
    dyf = dyf.reshape(-1, o)
    xf = xp.reshape(-1, c)
    rows = xf.shape[0]
    q = rows - ((kh - 1) * wp + kw - 1)
    dw = np.empty_like(weight)
    dxf = np.zeros_like(xf)
    tmp = np.empty((q, c), dtype=dxf.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            dw[i, j] = xf[off:off + q].T @ dyf[:q]
            np.matmul(dyf[:q], weight[i, j].T, out=tmp)
            dxf[off:off + q] += tmp
    dxp = dxf.reshape(n, hp, wp, c)
    dx = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# batch norm


def batch_norm_forward(x, gamma, beta, running_mean, running_var, training,
                       momentum=0.1, eps=1e-5):
    """Per-channel normalisation of ``x`` (N,H,W,C) over N, H and W.

    In training mode the running statistics are updated in place (unbiased
    variance, PyTorch convention); in eval mode they are used as-is.
    """
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    if training:
        mean = flat.mean(axis=0)
        xc = x - mean
        var = (xc * xc).reshape(-1, c).mean(axis=0)
        count = flat.shape[0]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        xc = x - running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv_std
    y = xhat * gamma + beta
    return y, (xhat, inv_std, gamma, training)


def batch_norm_backward(dy, cache):
    xhat, inv_std, gamma, training = cache
    c = dy.shape[-1]
    dgamma = (dy * xhat).reshape(-1, c).sum(axis=0)
    dbeta = dy.reshape(-1, c).sum(axis=0)
    dxhat = dy * gamma
    if training:
        m = dy.size // c
        dx = (inv_std / m) * (
            m * dxhat
            - dxhat.reshape(-1, c).sum(axis=0)
            - xhat * (dxhat * xhat).reshape(-1, c).sum(axis=0)
        )
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations and pooling


def leaky_relu_forward(x, slope=0.01):
    if not 0 < slope < 1:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    return np.maximum(x, slope * x), (x >= 0, slope)


def leaky_relu_backward(dy, cache):
    mask, slope = cache
    return np.where(mask, dy, slope * dy)


_POOL_TAPS = ((0, 0), (0, 1), (1, 0), (1, 1))


def max_pool_2x2_forward(x):
    """2x2/stride-2 max pooling of (N,H,W,C); an odd trailing row or column is dropped."""
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ContractError(f"max_pool_2x2 needs H, W >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    y = x[:, 0:2 * ho:2, 0:2 * wo:2]
    for a, b in _POOL_TAPS[1:]:
        y = np.maximum(y, x[:, a:2 * ho:2, b:2 * wo:2])
    return y, (x, y)


def max_pool_2x2_backward(dy, cache):
    """Route each gradient to the window maximum; ties go to the first tap in row-major order."""
    x, y = cache
    ho, wo = y.shape[1:3]
    dx = np.zeros_like(x)
    taken = np.zeros(y.shape, dtype=bool)
    for a, b in _POOL_TAPS:
        hit = (x[:, a:2 * ho:2, b:2 * wo:2] == y) & ~taken
        dx[:, a:2 * ho:2, b:2 * wo:2] = np.where(hit, dy, 0)
        taken |= hit
    return dx


def adaptive_bins(size, out):
    """Row ranges ``[start, end)`` for adaptive pooling of ``size`` cells into ``out`` bins.

    Bins partition the input when ``out <= size``. When the input is smaller
    than the grid each bin falls back to its nearest single cell, so short
    segments still produce a fixed-size embedding.
    """
    bins = []
    for i in range(out):
        start = (i * size) // out
        end = max(start + 1, ((i + 1) * size) // out)
        bins.append((start, end))
    return bins


def _pool_matrix(size, out, dtype):
    a = np.zeros((out, size), dtype=dtype)
    for i, (s, e) in enumerate(adaptive_bins(size, out)):
        a[i, s:e] = 1.0 / (e - s)
    return a


def adaptive_avg_pool_forward(x, out_h, out_w):
    """Average (N,H,W,C) into an (N,out_h,out_w,C) grid of bins."""
    if x.ndim != 4 or out_h < 1 or out_w < 1:
        raise ContractError(f"adaptive_avg_pool got input {x.shape} and grid {out_h}x{out_w}")
    h, w = x.shape[1:3]
    ah = _pool_matrix(h, out_h, x.dtype)
    aw = _pool_matrix(w, out_w, x.dtype)
    y = np.einsum("ih,nhwc,jw->nijc", ah, x, aw, optimize=True)
    return y, (ah, aw)


def adaptive_avg_pool_backward(dy, cache):
    ah, aw = cache
    return np.einsum("ih,nijc,jw->nhwc", ah, dy, aw, optimize=True)


# ---------------------------------------------------------------------------
# layers


class Layer:
    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


class Conv2d(Layer):
    def __init__(self, name, in_ch, out_ch, kernel, stride=1, padding=0, bias=True,
                 dtype=DEFAULT_DTYPE):
        self.stride, self.padding = stride, padding
        self.weight = Parameter(f"{name}.weight", np.zeros((kernel, kernel, in_ch, out_ch), dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch, dtype)) if bias else None
        self._cache = None

    def forward(self, x):
        b = self.bias.value if self.bias is not None else None
        y, self._cache = conv2d_forward(x, self.weight.value, b, self.stride, self.padding)
        return y

    def backward(self, dy):
        dx, dw, db = conv2d_backward(dy, self._cache)
        self.weight.accumulate(dw)
        if self.bias is not None:
            self.bias.accumulate(db)
        self._cache = None
        return dx

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class BatchNorm2d(Layer):
    def __init__(self, name, channels, momentum=0.1, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.name = name
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(f"{name}.weight", np.ones(channels, dtype))
        self.beta = Parameter(f"{name}.bias", np.zeros(channels, dtype))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.training = True
        self._cache = None

    def forward(self, x):
        y, self._cache = batch_norm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps)
        return y

    def backward(self, dy):
        dx, dg, db = batch_norm_backward(dy, self._cache)
        self.gamma.accumulate(dg)
        self.beta.accumulate(db)
        self._cache = None
        return dx

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


class LeakyReLU(Layer):
    def __init__(self, slope=0.01):
        self.slope = slope
        self._cache = None

    def forward(self, x):
        y, self._cache = leaky_relu_forward(x, self.slope)
        return y

    def backward(self, dy):
        return leaky_relu_backward(dy, self._cache)


class MaxPool2x2(Layer):
    def forward(self, x):
        y, self._cache = max_pool_2x2_forward(x)
        return y

    def backward(self, dy):
        return max_pool_2x2_backward(dy, self._cache)


class AdaptiveAvgPool2d(Layer):
    def __init__(self, out_h, out_w):
        self.out_h, self.out_w = out_h, out_w

    def forward(self, x):
        y, self._cache = adaptive_avg_pool_forward(x, self.out_h, self.out_w)
        return y

    def backward(self, dy):
        return adaptive_avg_pool_backward(dy, self._cache)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Bias-corrected Adam over a list of :class:`Parameter`."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self):
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in {p.name}; step aborted")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            p.m *= self.beta1
            p.m += (1 - self.beta1) * g
            p.v *= self.beta2
            p.v += (1 - self.beta2) * g * g
            mhat = p.m / c1
            vhat = p.v / c2
            p.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_dict(self):
        return {"t": self.t, "lr": self.lr}


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """Functional single Adam update at step index ``t`` (1-based). Returns ``t``."""
    opt = Adam(params, lr, beta1, beta2, eps)
    opt.t = t - 1
    opt.step()
    return opt.t


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[np.ndarray], float], point: np.ndarray,
                      analytic: np.ndarray, eps: float = 1e-4,
                      max_coords: int | None = None, rng=None) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``f`` maps an array shaped like ``point`` to a scalar, or to an array whose
    sum is the scalar; the array form is differenced elementwise before
    summing, which keeps cancellation error out of small gradient entries.
    With ``max_coords`` only a random subset of coordinates is probed.
    """
    x = np.array(point, dtype=point.dtype, copy=True)
    flat = x.reshape(-1)
    ana = np.asarray(analytic).reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    for k in coords:
        orig = flat[k]
        flat[k] = orig + eps
        fp = np.asarray(f(x), dtype=np.float64)
        flat[k] = orig - eps
        fm = np.asarray(f(x), dtype=np.float64)
        flat[k] = orig
        num = float(np.sum(fp - fm)) / (2 * eps)
        err = abs(ana[k] - num) / max(1e-8, abs(num))
        worst = max(worst, err)
    return float(worst)
