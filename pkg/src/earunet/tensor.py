"""Rank-4 tensor kernels with explicit backward passes.

Everything here operates on (batch, channel, height, width) arrays in
float32 (float64 is accepted for high-precision gradient checking).
Convolution uses the cross-correlation convention with zero padding.
Reductions (pooling, batch statistics) accumulate in float64.

Ops are pure: given the same inputs (and RNG state, where one is taken)
they return bit-identical results.  Backward functions compute the
gradients of ``sum(grad_out * op(x))`` with respect to each input.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateBatchError, ParameterError, ShapeError

TRAIN = "train"
INFER = "infer"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise ParameterError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")


@dataclass
class Tensor4:
    """A (n, c, h, w) array with an optional same-shape gradient slot."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ShapeError(f"Tensor4 expects 4 dims (n,c,h,w), got shape {self.data.shape}")
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} does not match data shape {self.data.shape}"
            )

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]


@dataclass
class ConvParams:
    """Weights and geometry of one 2-D convolution.

    weight has shape (out_c, in_c // groups, kh, kw); bias, when present,
    has length out_c.  stride/padding apply to both spatial axes.
    """

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self) -> None:
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ParameterError(f"padding must be >= 0, got {self.padding}")
        if self.groups < 1:
            raise ParameterError(f"groups must be >= 1, got {self.groups}")
        out_c = self.weight.shape[0]
        if out_c % self.groups != 0:
            raise ShapeError(f"out_c {out_c} not divisible by groups {self.groups}")
        if self.bias is not None and self.bias.shape != (out_c,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_c {out_c}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


@dataclass
class BatchNormState:
    """Per-channel batch-norm parameters and running statistics.

    In train mode batch statistics over (n, h, w) are used and the running
    stats are updated in place as running <- (1-momentum)*running +
    momentum*batch.  In infer mode only the running stats are read.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = INFER

    def __post_init__(self) -> None:
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            arr = getattr(self, name)
            if arr.shape != (c,):
                raise ShapeError(f"{name} shape {arr.shape} does not match gamma shape {(c,)}")
        if self.eps <= 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")
        if not 0.0 < self.momentum < 1.0:
            raise ParameterError(f"momentum must be in (0,1), got {self.momentum}")
        if np.any(self.running_var <= 0):
            raise ParameterError("running_var must be strictly positive")
        _check_mode(self.mode)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


# ---------------------------------------------------------------------------
# convolution


def _conv_out_dims(h: int, w: int, p: ConvParams) -> tuple[int, int]:
    kh, kw = p.kernel
    oh = (h + 2 * p.padding - kh) // p.stride + 1
    ow = (w + 2 * p.padding - kw) // p.stride + 1
    if h + 2 * p.padding < kh or w + 2 * p.padding < kw:
        raise ShapeError(
            f"kernel {p.kernel} does not fit padded input "
            f"({h + 2 * p.padding}, {w + 2 * p.padding})"
        )
    return oh, ow


def _pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _patch_view(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided view (n, c, kh, kw, oh, ow) of the padded input; no copy."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x: Tensor4, p: ConvParams) -> Tensor4:
    """2-D cross-correlation with zero padding.

    Output dims: (n, out_c, (h+2*pad-kh)//stride + 1, (w+2*pad-kw)//stride + 1).
    """
    n, c, h, w = x.dims
    if c != p.in_channels:
        raise ShapeError(
            f"input channels {x.dims} do not match conv weight {p.weight.shape} "
            f"with groups={p.groups}"
        )
    kh, kw = p.kernel
    oh, ow = _conv_out_dims(h, w, p)
    xp = _pad_input(x.data, p.padding)
    patches = _patch_view(xp, kh, kw, p.stride, oh, ow)
    oc = p.out_channels

    if p.groups == 1:
        cols = patches.reshape(n, c * kh * kw, oh * ow)
        w2 = p.weight.reshape(oc, c * kh * kw)
        out = np.matmul(w2, cols).reshape(n, oc, oh, ow)
    elif p.groups == c and p.groups == oc and p.weight.shape[1] == 1:
        # depthwise: one filter per channel, vectorized over channels
        cols = patches.reshape(n, c, kh * kw, oh * ow)
        w2 = p.weight.reshape(c, kh * kw)
        out = np.einsum("nckp,ck->ncp", cols, w2).reshape(n, oc, oh, ow)
    else:
        icpg = c // p.groups
        ocpg = oc // p.groups
        out = np.empty((n, oc, oh * ow), dtype=x.data.dtype)
        for g in range(p.groups):
            cols = patches[:, g * icpg : (g + 1) * icpg].reshape(n, icpg * kh * kw, oh * ow)
            wg = p.weight[g * ocpg : (g + 1) * ocpg].reshape(ocpg, icpg * kh * kw)
            out[:, g * ocpg : (g + 1) * ocpg] = np.matmul(wg, cols)
        out = out.reshape(n, oc, oh, ow)

    out = np.ascontiguousarray(out, dtype=x.data.dtype)
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return Tensor4(out)


def conv2d_backward(
    x: Tensor4, p: ConvParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of conv2d w.r.t. input, weight and bias."""
    n, c, h, w = x.dims
    if c != p.in_channels:
        raise ShapeError(
            f"input channels {x.dims} do not match conv weight {p.weight.shape} "
            f"with groups={p.groups}"
        )
    kh, kw = p.kernel
    oh, ow = _conv_out_dims(h, w, p)
    if grad_out.shape != (n, p.out_channels, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output "
            f"{(n, p.out_channels, oh, ow)}"
        )
    oc = p.out_channels
    icpg = c // p.groups
    ocpg = oc // p.groups

    grad_bias = None
    if p.bias is not None:
        grad_bias = np.sum(grad_out, axis=(0, 2, 3), dtype=np.float64).astype(p.bias.dtype)

    xp = _pad_input(x.data, p.padding)
    patches = _patch_view(xp, kh, kw, p.stride, oh, ow)
    go = grad_out.reshape(n, oc, oh * ow)

    grad_weight = np.empty_like(p.weight)
    gxp = np.zeros_like(xp)
    for g in range(p.groups):
        ci = slice(g * icpg, (g + 1) * icpg)
        co = slice(g * ocpg, (g + 1) * ocpg)
        cols = patches[:, ci].reshape(n, icpg * kh * kw, oh * ow)
        go_g = go[:, co]
        # dW = sum_n grad_out . cols^T
        gw = np.matmul(go_g, cols.transpose(0, 2, 1)).sum(axis=0)
        grad_weight[co] = gw.reshape(ocpg, icpg, kh, kw)
        # dX: scatter W^T . grad_out back onto the padded input
        wg = p.weight[co].reshape(ocpg, icpg * kh * kw)
        gcols = np.matmul(wg.T, go_g).reshape(n, icpg, kh, kw, oh, ow)
        for u in range(kh):
            for v in range(kw):
                gxp[:, ci, u : u + p.stride * oh : p.stride, v : v + p.stride * ow : p.stride] += gcols[
                    :, :, u, v
                ]

    if p.padding:
        grad_x = gxp[:, :, p.padding : p.padding + h, p.padding : p.padding + w]
    else:
        grad_x = gxp
    return np.ascontiguousarray(grad_x), grad_weight, grad_bias


# ---------------------------------------------------------------------------
# batch normalization


def _batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = np.mean(x, axis=(0, 2, 3), dtype=np.float64)
    var = np.mean((x.astype(np.float64) - mu[None, :, None, None]) ** 2, axis=(0, 2, 3))
    return mu, var


def batchnorm2d(x: Tensor4, s: BatchNormState) -> Tensor4:
    """Per-channel normalize-scale-shift.

    Train mode normalizes with the batch statistics over (n, h, w) and
    updates the running statistics in place; infer mode reads the running
    statistics only.
    """
    n, c, h, w = x.dims
    if c != s.channels:
        raise ShapeError(f"input channels {x.dims} do not match batch-norm width {s.channels}")
    dt = x.data.dtype
    if s.mode == TRAIN:
        if n * h * w == 1:
            raise DegenerateBatchError(
                "batch variance undefined for a single element per channel"
            )
        mu64, var64 = _batch_stats(x.data)
        m = s.momentum
        s.running_mean[:] = ((1.0 - m) * s.running_mean.astype(np.float64) + m * mu64).astype(
            s.running_mean.dtype
        )
        s.running_var[:] = ((1.0 - m) * s.running_var.astype(np.float64) + m * var64).astype(
            s.running_var.dtype
        )
        mu = mu64.astype(dt)
        var = var64.astype(dt)
    else:
        mu = s.running_mean.astype(dt)
        var = s.running_var.astype(dt)
    inv = (1.0 / np.sqrt(var.astype(np.float64) + s.eps)).astype(dt)
    xh = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xh * s.gamma.astype(dt)[None, :, None, None] + s.beta.astype(dt)[None, :, None, None]
    return Tensor4(out)


def batchnorm2d_backward(
    x: Tensor4, s: BatchNormState, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of batchnorm2d w.r.t. input, gamma and beta.

    Train mode differentiates through the batch statistics; infer mode
    treats the running statistics as constants.
    """
    n, c, h, w = x.dims
    if grad_out.shape != x.data.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input {x.data.shape}")
    dt = x.data.dtype
    if s.mode == TRAIN:
        mu64, var64 = _batch_stats(x.data)
        mu = mu64.astype(dt)
        var = var64.astype(dt)
    else:
        mu = s.running_mean.astype(dt)
        var = s.running_var.astype(dt)
    inv = (1.0 / np.sqrt(var.astype(np.float64) + s.eps)).astype(dt)
    xh = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]

    grad_gamma = np.sum(grad_out * xh, axis=(0, 2, 3), dtype=np.float64).astype(s.gamma.dtype)
    grad_beta = np.sum(grad_out, axis=(0, 2, 3), dtype=np.float64).astype(s.beta.dtype)

    g = grad_out * s.gamma.astype(dt)[None, :, None, None]
    if s.mode == TRAIN:
        mean_g = np.mean(g, axis=(0, 2, 3), dtype=np.float64).astype(dt)
        mean_gxh = np.mean(g * xh, axis=(0, 2, 3), dtype=np.float64).astype(dt)
        grad_x = inv[None, :, None, None] * (
            g - mean_g[None, :, None, None] - xh * mean_gxh[None, :, None, None]
        )
    else:
        grad_x = g * inv[None, :, None, None]
    return grad_x.astype(dt, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# activations


def _stable_sigmoid(t: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(t))
    s = np.where(t >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    # keep the output strictly inside (0,1) even where exp underflows
    one = np.asarray(1.0, dtype=s.dtype)
    return np.clip(s, np.finfo(s.dtype).tiny, np.nextafter(one, 0.0))


def activate(x: Tensor4, kind: str) -> Tensor4:
    """Elementwise activation: relu, swish (t*sigmoid(t)) or sigmoid."""
    t = x.data
    if kind == "relu":
        out = np.maximum(t, 0)
    elif kind == "swish":
        out = t * _stable_sigmoid(t)
    elif kind == "sigmoid":
        out = _stable_sigmoid(t)
    else:
        raise ParameterError(f"unknown activation kind {kind!r}")
    return Tensor4(out.astype(t.dtype, copy=False))


def activate_backward(x: Tensor4, kind: str, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.data.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input {x.data.shape}")
    t = x.data
    if kind == "relu":
        d = (t > 0).astype(t.dtype)
    elif kind == "swish":
        s = _stable_sigmoid(t)
        d = s * (1.0 + t * (1.0 - s))
    elif kind == "sigmoid":
        s = _stable_sigmoid(t)
        d = s * (1.0 - s)
    else:
        raise ParameterError(f"unknown activation kind {kind!r}")
    return (grad_out * d).astype(t.dtype, copy=False)


# ---------------------------------------------------------------------------
# pooling / resampling


def global_avg_pool(x: Tensor4) -> Tensor4:
    """Mean over each (h, w) plane; output dims (n, c, 1, 1)."""
    out = np.mean(x.data, axis=(2, 3), keepdims=True, dtype=np.float64)
    return Tensor4(out.astype(x.data.dtype))


def global_avg_pool_backward(x: Tensor4, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x.dims
    if grad_out.shape != (n, c, 1, 1):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled {(n, c, 1, 1)}")
    scale = np.asarray(1.0 / (h * w), dtype=x.data.dtype)
    return np.broadcast_to(grad_out * scale, x.data.shape).astype(x.data.dtype, copy=False)


@lru_cache(maxsize=64)
def _upsample2x_matrix(size: int, dtype_name: str) -> np.ndarray:
    """(2*size, size) interpolation matrix for half-pixel-center bilinear 2x."""
    src = (np.arange(2 * size, dtype=np.float64) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, size - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, size - 1)
    f = src - i0
    m = np.zeros((2 * size, size), dtype=np.dtype(dtype_name))
    rows = np.arange(2 * size)
    np.add.at(m, (rows, i0), (1.0 - f).astype(m.dtype))
    np.add.at(m, (rows, i1), f.astype(m.dtype))
    m.flags.writeable = False
    return m


def upsample_bilinear_2x(x: Tensor4) -> Tensor4:
    """Double both spatial dims; half-pixel-center sampling with edge clamp.

    Source coordinate for destination index d is (d+0.5)/2 - 0.5, clamped
    to the valid range.
    """
    n, c, h, w = x.dims
    dt = x.data.dtype.name
    wh = _upsample2x_matrix(h, dt)
    ww = _upsample2x_matrix(w, dt)
    out = np.matmul(np.matmul(wh, x.data), ww.T)
    return Tensor4(np.ascontiguousarray(out))


def upsample_bilinear_2x_backward(x: Tensor4, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x.dims
    if grad_out.shape != (n, c, 2 * h, 2 * w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match upsampled {(n, c, 2 * h, 2 * w)}"
        )
    dt = x.data.dtype.name
    wh = _upsample2x_matrix(h, dt)
    ww = _upsample2x_matrix(w, dt)
    return np.ascontiguousarray(np.matmul(np.matmul(wh.T, grad_out), ww))


# ---------------------------------------------------------------------------
# fully connected


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y = x W + b for a length-k vector or an (n, k) stack of rows."""
    k, m = weight.shape
    if x.shape[-1] != k or bias.shape != (m,):
        raise ShapeError(
            f"linear dims disagree: x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight + bias


def linear_backward(
    x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of linear w.r.t. x, weight and bias."""
    grad_x = grad_out @ weight.T
    if x.ndim == 1:
        grad_w = np.outer(x, grad_out)
        grad_b = grad_out.copy()
    else:
        grad_w = x.T @ grad_out
        grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w.astype(weight.dtype, copy=False), grad_b


# ---------------------------------------------------------------------------
# stochastic depth


def sample_keep_mask(n: int, survive_p: float, rng: np.random.Generator) -> np.ndarray:
    """Per-sample Bernoulli(survive_p) keep mask, shape (n,), values {0,1}."""
    if not 0.0 < survive_p <= 1.0:
        raise ParameterError(f"survive_p must be in (0,1], got {survive_p}")
    if survive_p == 1.0:
        return np.ones(n)
    return (rng.random(n) < survive_p).astype(np.float64)


def apply_keep_mask(x: Tensor4, mask: np.ndarray, survive_p: float) -> Tensor4:
    scale = (mask / survive_p).astype(x.data.dtype)
    return Tensor4(x.data * scale[:, None, None, None])


def drop_connect(x: Tensor4, survive_p: float, mode: str, rng: np.random.Generator) -> Tensor4:
    """Per-sample drop of the whole tensor, rescaled to preserve expectation.

    Infer mode is the identity; train mode keeps each sample with
    probability survive_p and scales kept samples by 1/survive_p.
    """
    _check_mode(mode)
    if not 0.0 < survive_p <= 1.0:
        raise ParameterError(f"survive_p must be in (0,1], got {survive_p}")
    if mode == INFER or survive_p == 1.0:
        return Tensor4(x.data)
    mask = sample_keep_mask(x.n, survive_p, rng)
    return apply_keep_mask(x, mask, survive_p)
