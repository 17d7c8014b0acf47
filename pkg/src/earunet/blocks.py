"""Composite network blocks built from the tensor kernels.

Each block is a pure function pair: ``*_forward`` returns the output plus
a context of saved intermediates, ``*_backward`` consumes that context and
the output gradient and returns the input gradient together with a dict of
parameter gradients keyed by hierarchical names ("fc1.weight", ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import (
    INFER,
    TRAIN,
    BatchNormState,
    ConvParams,
    Tensor4,
    activate,
    activate_backward,
    apply_keep_mask,
    batchnorm2d,
    batchnorm2d_backward,
    conv2d,
    conv2d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    linear,
    linear_backward,
    sample_keep_mask,
    upsample_bilinear_2x,
    upsample_bilinear_2x_backward,
)

GradDict = dict[str, np.ndarray]


@dataclass
class LinearParams:
    weight: np.ndarray  # (k, m)
    bias: np.ndarray  # (m,)


@dataclass
class SeBlockParams:
    """Squeeze-and-excitation: two fully connected layers around a swish."""

    fc1: LinearParams  # c -> c_squeeze
    fc2: LinearParams  # c_squeeze -> c


@dataclass
class MbConvParams:
    """Mobile inverted bottleneck with SE gating and optional shortcut.

    expand_conv is absent for expansion ratio 1.  has_shortcut must hold
    exactly when stride == 1 and in/out channel counts match.
    """

    dw_conv: ConvParams
    dw_bn: BatchNormState
    se: SeBlockParams
    project_conv: ConvParams
    project_bn: BatchNormState
    expand_conv: ConvParams | None = None
    expand_bn: BatchNormState | None = None
    survive_p: float = 1.0
    has_shortcut: bool = False


@dataclass
class AttentionGateParams:
    """Spatial gating of an encoder skip, conditioned on decoder features."""

    wg: ConvParams  # gate channels -> inter, 1x1, no bias
    wx: ConvParams  # skip channels -> inter, 1x1, no bias
    psi: ConvParams  # inter -> 1, 1x1, with bias

    def __post_init__(self) -> None:
        if self.wg.out_channels != self.wx.out_channels:
            raise ShapeError(
                f"gate inter channels disagree: wg {self.wg.out_channels} "
                f"vs wx {self.wx.out_channels}"
            )


@dataclass
class ResBlockParams:
    """Two 3x3 conv+BN+ReLU stages plus an identity or 1x1-projected shortcut."""

    conv1: ConvParams
    bn1: BatchNormState
    conv2: ConvParams
    bn2: BatchNormState
    shortcut_proj: ConvParams | None = None


# ---------------------------------------------------------------------------
# initializers


def he_normal_conv(rng: np.random.Generator, out_c, in_c_per_group, kh, kw, dtype) -> np.ndarray:
    fan_out = out_c * kh * kw
    std = math.sqrt(2.0 / fan_out)
    return (rng.standard_normal((out_c, in_c_per_group, kh, kw)) * std).astype(dtype)


def init_conv(
    rng, in_c, out_c, k, stride=1, padding=None, groups=1, bias=False, dtype=np.float32
) -> ConvParams:
    if padding is None:
        padding = k // 2
    w = he_normal_conv(rng, out_c, in_c // groups, k, k, dtype)
    b = np.zeros(out_c, dtype=dtype) if bias else None
    return ConvParams(weight=w, bias=b, stride=stride, padding=padding, groups=groups)


def init_bn(c, dtype=np.float32, mode=INFER) -> BatchNormState:
    return BatchNormState(
        gamma=np.ones(c, dtype=dtype),
        beta=np.zeros(c, dtype=dtype),
        running_mean=np.zeros(c, dtype=dtype),
        running_var=np.ones(c, dtype=dtype),
        mode=mode,
    )


def init_linear(rng, k, m, dtype=np.float32) -> LinearParams:
    bound = 1.0 / math.sqrt(k)
    return LinearParams(
        weight=rng.uniform(-bound, bound, (k, m)).astype(dtype),
        bias=rng.uniform(-bound, bound, m).astype(dtype),
    )


def se_squeeze_width(c: int) -> int:
    return max(1, round(c / 4))


def init_se(rng, c, c_squeeze=None, dtype=np.float32) -> SeBlockParams:
    cs = se_squeeze_width(c) if c_squeeze is None else c_squeeze
    return SeBlockParams(fc1=init_linear(rng, c, cs, dtype), fc2=init_linear(rng, cs, c, dtype))


def init_mbconv(
    rng, in_c, out_c, kernel, stride, expansion, survive_p=1.0, dtype=np.float32
) -> MbConvParams:
    hidden = in_c * expansion
    expand_conv = expand_bn = None
    if expansion != 1:
        expand_conv = init_conv(rng, in_c, hidden, 1, dtype=dtype)
        expand_bn = init_bn(hidden, dtype)
    return MbConvParams(
        expand_conv=expand_conv,
        expand_bn=expand_bn,
        dw_conv=init_conv(rng, hidden, hidden, kernel, stride=stride, groups=hidden, dtype=dtype),
        dw_bn=init_bn(hidden, dtype),
        se=init_se(rng, hidden, dtype=dtype),
        project_conv=init_conv(rng, hidden, out_c, 1, dtype=dtype),
        project_bn=init_bn(out_c, dtype),
        survive_p=survive_p,
        has_shortcut=(stride == 1 and in_c == out_c),
    )


def gate_inter_width(skip_c: int) -> int:
    return max(1, skip_c // 2)


def init_attention_gate(rng, skip_c, gate_c, inter=None, dtype=np.float32) -> AttentionGateParams:
    ic = gate_inter_width(skip_c) if inter is None else inter
    return AttentionGateParams(
        wg=init_conv(rng, gate_c, ic, 1, dtype=dtype),
        wx=init_conv(rng, skip_c, ic, 1, dtype=dtype),
        psi=init_conv(rng, ic, 1, 1, bias=True, dtype=dtype),
    )


def init_res_block(rng, in_c, out_c, dtype=np.float32) -> ResBlockParams:
    proj = None if in_c == out_c else init_conv(rng, in_c, out_c, 1, dtype=dtype)
    return ResBlockParams(
        conv1=init_conv(rng, in_c, out_c, 3, dtype=dtype),
        bn1=init_bn(out_c, dtype),
        conv2=init_conv(rng, out_c, out_c, 3, dtype=dtype),
        bn2=init_bn(out_c, dtype),
        shortcut_proj=proj,
    )


# ---------------------------------------------------------------------------
# squeeze and excitation


@dataclass
class SeCtx:
    p: SeBlockParams
    x: Tensor4
    v: np.ndarray
    h1: np.ndarray
    a1: np.ndarray
    h2: np.ndarray
    s: np.ndarray


def _vec_activate(arr: np.ndarray, kind: str) -> np.ndarray:
    n, c = arr.shape
    return activate(Tensor4(arr.reshape(n, c, 1, 1)), kind).data.reshape(n, c)


def _vec_activate_backward(arr: np.ndarray, kind: str, grad: np.ndarray) -> np.ndarray:
    n, c = arr.shape
    return activate_backward(
        Tensor4(arr.reshape(n, c, 1, 1)), kind, grad.reshape(n, c, 1, 1)
    ).reshape(n, c)


def se_block_forward(x: Tensor4, p: SeBlockParams) -> tuple[Tensor4, SeCtx]:
    if x.c != p.fc1.weight.shape[0]:
        raise ShapeError(
            f"SE input channels {x.dims} do not match fc1 width {p.fc1.weight.shape}"
        )
    v = global_avg_pool(x).data.reshape(x.n, x.c)
    h1 = linear(v, p.fc1.weight, p.fc1.bias)
    a1 = _vec_activate(h1, "swish")
    h2 = linear(a1, p.fc2.weight, p.fc2.bias)
    s = _vec_activate(h2, "sigmoid")
    y = Tensor4(x.data * s[:, :, None, None])
    return y, SeCtx(p, x, v, h1, a1, h2, s)


def se_block(x: Tensor4, p: SeBlockParams) -> Tensor4:
    """Per-channel gating: x scaled by sigmoid(fc2(swish(fc1(gap(x)))))."""
    return se_block_forward(x, p)[0]


def se_block_backward(ctx: SeCtx, grad_out: np.ndarray) -> tuple[np.ndarray, GradDict]:
    p, x = ctx.p, ctx.x
    grad_x = grad_out * ctx.s[:, :, None, None]
    ds = np.sum(grad_out * x.data, axis=(2, 3), dtype=np.float64).astype(x.data.dtype)
    dh2 = _vec_activate_backward(ctx.h2, "sigmoid", ds)
    da1, gw2, gb2 = linear_backward(ctx.a1, p.fc2.weight, dh2)
    dh1 = _vec_activate_backward(ctx.h1, "swish", da1)
    dv, gw1, gb1 = linear_backward(ctx.v, p.fc1.weight, dh1)
    grad_x = grad_x + global_avg_pool_backward(x, dv.reshape(x.n, x.c, 1, 1))
    grads = {"fc1.weight": gw1, "fc1.bias": gb1, "fc2.weight": gw2, "fc2.bias": gb2}
    return grad_x, grads


# ---------------------------------------------------------------------------
# mobile inverted bottleneck


@dataclass
class MbConvCtx:
    p: MbConvParams
    x: Tensor4
    expand_in: Tensor4 | None
    expand_pre: Tensor4 | None  # conv output, BN input
    expand_act_in: Tensor4 | None
    dw_in: Tensor4
    dw_pre: Tensor4
    dw_act_in: Tensor4
    se_ctx: SeCtx
    proj_in: Tensor4
    proj_pre: Tensor4
    keep_mask: np.ndarray | None


def _set_bn_modes(p: MbConvParams, mode: str) -> None:
    for bn in (p.expand_bn, p.dw_bn, p.project_bn):
        if bn is not None:
            bn.mode = mode


def mbconv_forward(
    x: Tensor4, p: MbConvParams, mode: str, rng: np.random.Generator
) -> tuple[Tensor4, MbConvCtx]:
    _set_bn_modes(p, mode)
    h = x
    expand_in = expand_pre = expand_act_in = None
    if p.expand_conv is not None:
        expand_in = h
        expand_pre = conv2d(h, p.expand_conv)
        expand_act_in = batchnorm2d(expand_pre, p.expand_bn)
        h = activate(expand_act_in, "swish")
    dw_in = h
    dw_pre = conv2d(h, p.dw_conv)
    dw_act_in = batchnorm2d(dw_pre, p.dw_bn)
    h = activate(dw_act_in, "swish")
    h, se_ctx = se_block_forward(h, p.se)
    proj_in = h
    proj_pre = conv2d(h, p.project_conv)
    y = batchnorm2d(proj_pre, p.project_bn)

    keep_mask = None
    if p.has_shortcut:
        if mode == TRAIN and p.survive_p < 1.0:
            keep_mask = sample_keep_mask(x.n, p.survive_p, rng)
            y = apply_keep_mask(y, keep_mask, p.survive_p)
        y = Tensor4(x.data + y.data)
    ctx = MbConvCtx(
        p, x, expand_in, expand_pre, expand_act_in, dw_in, dw_pre, dw_act_in, se_ctx,
        proj_in, proj_pre, keep_mask,
    )
    return y, ctx


def mbconv(x: Tensor4, p: MbConvParams, mode: str, rng: np.random.Generator) -> Tensor4:
    """Expand -> depthwise -> SE -> project, with BN/swish between stages
    and a drop-connected shortcut when the shapes allow one."""
    return mbconv_forward(x, p, mode, rng)[0]


def mbconv_backward(ctx: MbConvCtx, grad_out: np.ndarray) -> tuple[np.ndarray, GradDict]:
    p = ctx.p
    grads: GradDict = {}
    if p.has_shortcut:
        grad_x_accum = grad_out
        g = grad_out
        if ctx.keep_mask is not None:
            scale = (ctx.keep_mask / p.survive_p).astype(g.dtype)
            g = g * scale[:, None, None, None]
    else:
        grad_x_accum = None
        g = grad_out

    g, gg, gb = batchnorm2d_backward(ctx.proj_pre, p.project_bn, g)
    grads["project_bn.gamma"], grads["project_bn.beta"] = gg, gb
    g, gw, _ = conv2d_backward(ctx.proj_in, p.project_conv, g)
    grads["project_conv.weight"] = gw

    g, se_grads = se_block_backward(ctx.se_ctx, g)
    grads.update({f"se.{k}": v for k, v in se_grads.items()})

    g = activate_backward(ctx.dw_act_in, "swish", g)
    g, gg, gb = batchnorm2d_backward(ctx.dw_pre, p.dw_bn, g)
    grads["dw_bn.gamma"], grads["dw_bn.beta"] = gg, gb
    g, gw, _ = conv2d_backward(ctx.dw_in, p.dw_conv, g)
    grads["dw_conv.weight"] = gw

    if p.expand_conv is not None:
        g = activate_backward(ctx.expand_act_in, "swish", g)
        g, gg, gb = batchnorm2d_backward(ctx.expand_pre, p.expand_bn, g)
        grads["expand_bn.gamma"], grads["expand_bn.beta"] = gg, gb
        g, gw, _ = conv2d_backward(ctx.expand_in, p.expand_conv, g)
        grads["expand_conv.weight"] = gw

    grad_x = g if grad_x_accum is None else grad_x_accum + g
    return grad_x, grads


# ---------------------------------------------------------------------------
# attention gate


@dataclass
class GateCtx:
    p: AttentionGateParams
    x: Tensor4
    up_chain: list[Tensor4]  # g and every intermediate before each 2x step
    g_up: Tensor4
    sum_pre: Tensor4
    relu_out: Tensor4
    psi_pre: Tensor4
    alpha: np.ndarray


def attention_gate_forward(
    x: Tensor4, g: Tensor4, p: AttentionGateParams
) -> tuple[Tensor4, GateCtx]:
    if x.h % g.h or x.w % g.w or x.h // g.h != x.w // g.w:
        raise ShapeError(
            f"gate features {g.dims} do not divide skip features {x.dims} evenly"
        )
    factor = x.h // g.h
    if factor & (factor - 1):
        raise ShapeError(f"gate upsampling factor {factor} is not a power of two")

    up_chain = []
    cur = g
    while cur.h < x.h:
        up_chain.append(cur)
        cur = upsample_bilinear_2x(cur)
    g_up = cur

    xa = conv2d(x, p.wx)
    ga = conv2d(g_up, p.wg)
    if xa.dims != ga.dims:
        raise ShapeError(f"gate inter features disagree: {xa.dims} vs {ga.dims}")
    sum_pre = Tensor4(xa.data + ga.data)
    relu_out = activate(sum_pre, "relu")
    psi_pre = conv2d(relu_out, p.psi)
    alpha = activate(psi_pre, "sigmoid").data  # (n, 1, hx, wx)
    y = Tensor4(x.data * alpha)
    return y, GateCtx(p, x, up_chain, g_up, sum_pre, relu_out, psi_pre, alpha)


def attention_gate(x: Tensor4, g: Tensor4, p: AttentionGateParams) -> Tensor4:
    """Multiply skip features x by a mask in (0,1) computed from x and the
    (upsampled) decoder features g."""
    return attention_gate_forward(x, g, p)[0]


def attention_gate_backward(ctx: GateCtx, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, GradDict]:
    p, x = ctx.p, ctx.x
    grad_x = grad_out * ctx.alpha
    dalpha = np.sum(grad_out * x.data, axis=1, keepdims=True, dtype=np.float64).astype(
        x.data.dtype
    )
    dpsi_pre = activate_backward(ctx.psi_pre, "sigmoid", dalpha)
    drelu, gw_psi, gb_psi = conv2d_backward(ctx.relu_out, p.psi, dpsi_pre)
    dsum = activate_backward(ctx.sum_pre, "relu", drelu)
    dx2, gw_wx, _ = conv2d_backward(x, p.wx, dsum)
    dg_up, gw_wg, _ = conv2d_backward(ctx.g_up, p.wg, dsum)
    grad_x = grad_x + dx2

    dg = dg_up
    for src in reversed(ctx.up_chain):
        dg = upsample_bilinear_2x_backward(src, dg)
    grads = {"wx.weight": gw_wx, "wg.weight": gw_wg, "psi.weight": gw_psi, "psi.bias": gb_psi}
    return grad_x, dg, grads


# ---------------------------------------------------------------------------
# residual decoder block


@dataclass
class ResCtx:
    p: ResBlockParams
    x: Tensor4
    pre1: Tensor4
    act1_in: Tensor4
    conv2_in: Tensor4
    pre2: Tensor4
    act2_in: Tensor4


def residual_block_forward(x: Tensor4, p: ResBlockParams) -> tuple[Tensor4, ResCtx]:
    pre1 = conv2d(x, p.conv1)
    act1_in = batchnorm2d(pre1, p.bn1)
    r1 = activate(act1_in, "relu")
    pre2 = conv2d(r1, p.conv2)
    act2_in = batchnorm2d(pre2, p.bn2)
    r2 = activate(act2_in, "relu")
    if p.shortcut_proj is None:
        sc = x.data
    else:
        sc = conv2d(x, p.shortcut_proj).data
    y = Tensor4(r2.data + sc)
    return y, ResCtx(p, x, pre1, act1_in, r1, pre2, act2_in)


def residual_block(x: Tensor4, p: ResBlockParams) -> Tensor4:
    """relu(bn2(conv2(relu(bn1(conv1(x)))))) plus an identity or projected
    shortcut; spatial dims are preserved."""
    return residual_block_forward(x, p)[0]


def residual_block_backward(ctx: ResCtx, grad_out: np.ndarray) -> tuple[np.ndarray, GradDict]:
    p = ctx.p
    grads: GradDict = {}
    g = activate_backward(ctx.act2_in, "relu", grad_out)
    g, gg, gb = batchnorm2d_backward(ctx.pre2, p.bn2, g)
    grads["bn2.gamma"], grads["bn2.beta"] = gg, gb
    g, gw, _ = conv2d_backward(ctx.conv2_in, p.conv2, g)
    grads["conv2.weight"] = gw
    g = activate_backward(ctx.act1_in, "relu", g)
    g, gg, gb = batchnorm2d_backward(ctx.pre1, p.bn1, g)
    grads["bn1.gamma"], grads["bn1.beta"] = gg, gb
    g, gw, _ = conv2d_backward(ctx.x, p.conv1, g)
    grads["conv1.weight"] = gw

    if p.shortcut_proj is None:
        grad_x = g + grad_out
    else:
        gsc, gw, _ = conv2d_backward(ctx.x, p.shortcut_proj, grad_out)
        grads["shortcut_proj.weight"] = gw
        grad_x = g + gsc
    return grad_x, grads
