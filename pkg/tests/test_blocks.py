"""Block tests: hand-composed primitive chains as oracles, plus gradients."""

import numpy as np
import pytest

from earunet import blocks as B
from earunet import tensor as T
from earunet.errors import ShapeError
from oracles import max_rel_err, numeric_grad

GRAD_TOL = 1e-3


def t4(arr):
    return T.Tensor4(np.asarray(arr, dtype=np.float64))


# Composite chains use a smaller step than the single-op suite: truncation
# error through several nonlinearities at 1e-3 exceeds the 1e-3 tolerance,
# and relu kinks must not be crossed by the perturbation.
BLOCK_STEP = 1e-5


def check_param_grads(loss, arrays, analytic, tol=GRAD_TOL, step=BLOCK_STEP):
    """Finite-difference every entry of every (shared, in-place) param array."""
    for name, arr in arrays.items():
        num = numeric_grad(lambda _: loss(), arr, step=step)
        err = max_rel_err(analytic[name], num)
        assert err < tol, f"{name}: rel err {err}"


class TestSeBlock:
    def test_zero_params_gate_half(self):
        rng = np.random.default_rng(0)
        x = t4(rng.standard_normal((2, 4, 3, 3)))
        p = B.SeBlockParams(
            fc1=B.LinearParams(np.zeros((4, 2)), np.zeros(2)),
            fc2=B.LinearParams(np.zeros((2, 4)), np.zeros(4)),
        )
        out = B.se_block(x, p)
        assert np.allclose(out.data, 0.5 * x.data, atol=1e-12)

    def test_channel_symmetry(self):
        rng = np.random.default_rng(1)
        plane = rng.standard_normal((1, 1, 4, 4))
        x = t4(np.repeat(plane, 3, axis=1))
        # channel-symmetric weights: every fc row/column identical
        p = B.SeBlockParams(
            fc1=B.LinearParams(np.full((3, 2), 0.3), np.array([0.1, -0.2])),
            fc2=B.LinearParams(rng.standard_normal((2, 1)).repeat(3, axis=1), np.full(3, 0.05)),
        )
        out, ctx = B.se_block_forward(x, p)
        assert np.allclose(ctx.s[0], ctx.s[0, 0], atol=1e-12)

    def test_matches_primitive_composition(self):
        rng = np.random.default_rng(2)
        x = t4(rng.standard_normal((1, 4, 3, 3)))
        p = B.init_se(rng, 4, dtype=np.float64)
        got = B.se_block(x, p).data

        pooled = T.global_avg_pool(x).data.reshape(1, 4)
        h1 = T.linear(pooled[0], p.fc1.weight, p.fc1.bias)
        a1 = T.activate(T.Tensor4(h1.reshape(1, -1, 1, 1)), "swish").data.reshape(-1)
        h2 = T.linear(a1, p.fc2.weight, p.fc2.bias)
        s = T.activate(T.Tensor4(h2.reshape(1, -1, 1, 1)), "sigmoid").data.reshape(-1)
        want = x.data * s[None, :, None, None]
        assert np.allclose(got, want, atol=1e-12)

    def test_preserves_dims_and_gate_range(self):
        rng = np.random.default_rng(3)
        x = t4(rng.standard_normal((2, 6, 5, 4)))
        p = B.init_se(rng, 6, dtype=np.float64)
        out, ctx = B.se_block_forward(x, p)
        assert out.dims == x.dims
        assert np.all(ctx.s > 0) and np.all(ctx.s < 1)

    def test_channel_mismatch(self):
        p = B.init_se(np.random.default_rng(0), 4)
        with pytest.raises(ShapeError):
            B.se_block(t4(np.zeros((1, 5, 2, 2))), p)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((2, 4, 3, 3))
        p = B.init_se(rng, 4, dtype=np.float64)
        go = rng.standard_normal(x0.shape)

        out, ctx = B.se_block_forward(t4(x0), p)
        gx, grads = B.se_block_backward(ctx, go)

        def loss():
            return float(np.sum(go * B.se_block(t4(x0), p).data))

        assert max_rel_err(gx, numeric_grad(
            lambda x: float(np.sum(go * B.se_block(t4(x), p).data)), x0, step=BLOCK_STEP
        )) < GRAD_TOL
        arrays = {
            "fc1.weight": p.fc1.weight, "fc1.bias": p.fc1.bias,
            "fc2.weight": p.fc2.weight, "fc2.bias": p.fc2.bias,
        }
        check_param_grads(loss, arrays, grads)


def mbconv_arrays(p, prefix=""):
    arrays = {
        f"{prefix}dw_conv.weight": p.dw_conv.weight,
        f"{prefix}dw_bn.gamma": p.dw_bn.gamma,
        f"{prefix}dw_bn.beta": p.dw_bn.beta,
        f"{prefix}se.fc1.weight": p.se.fc1.weight,
        f"{prefix}se.fc1.bias": p.se.fc1.bias,
        f"{prefix}se.fc2.weight": p.se.fc2.weight,
        f"{prefix}se.fc2.bias": p.se.fc2.bias,
        f"{prefix}project_conv.weight": p.project_conv.weight,
        f"{prefix}project_bn.gamma": p.project_bn.gamma,
        f"{prefix}project_bn.beta": p.project_bn.beta,
    }
    if p.expand_conv is not None:
        arrays[f"{prefix}expand_conv.weight"] = p.expand_conv.weight
        arrays[f"{prefix}expand_bn.gamma"] = p.expand_bn.gamma
        arrays[f"{prefix}expand_bn.beta"] = p.expand_bn.beta
    return arrays


class TestMbConv:
    def test_stride2_halves_spatial(self):
        rng = np.random.default_rng(5)
        p = B.init_mbconv(rng, 4, 6, kernel=3, stride=2, expansion=6, dtype=np.float64)
        out = B.mbconv(t4(rng.standard_normal((1, 4, 8, 8))), p, T.INFER, rng)
        assert out.dims == (1, 6, 4, 4)

    def test_zero_weights_shortcut_identity(self):
        rng = np.random.default_rng(6)
        p = B.init_mbconv(rng, 4, 4, kernel=3, stride=1, expansion=1, dtype=np.float64)
        assert p.has_shortcut
        p.dw_conv.weight[:] = 0
        p.project_conv.weight[:] = 0
        p.se.fc1.weight[:] = 0
        p.se.fc1.bias[:] = 0
        p.se.fc2.weight[:] = 0
        p.se.fc2.bias[:] = 0
        x = t4(rng.standard_normal((2, 4, 5, 5)))
        out = B.mbconv(x, p, T.INFER, rng)
        assert np.allclose(out.data, x.data, atol=1e-12)

    def test_shortcut_flag_rule(self):
        rng = np.random.default_rng(7)
        assert B.init_mbconv(rng, 4, 4, 3, 1, 6).has_shortcut
        assert not B.init_mbconv(rng, 4, 6, 3, 1, 6).has_shortcut
        assert not B.init_mbconv(rng, 4, 4, 3, 2, 6).has_shortcut

    def test_matches_primitive_composition(self):
        rng = np.random.default_rng(8)
        p = B.init_mbconv(rng, 8, 8, kernel=3, stride=1, expansion=6, dtype=np.float64)
        # non-trivial running stats so infer-mode BN actually does something
        for bn in (p.expand_bn, p.dw_bn, p.project_bn):
            bn.running_mean[:] = rng.standard_normal(bn.channels) * 0.1
            bn.running_var[:] = 1.0 + rng.random(bn.channels)
        x = t4(rng.standard_normal((1, 8, 8, 8)))
        got = B.mbconv(x, p, T.INFER, rng).data

        h = T.activate(T.batchnorm2d(T.conv2d(x, p.expand_conv), p.expand_bn), "swish")
        h = T.activate(T.batchnorm2d(T.conv2d(h, p.dw_conv), p.dw_bn), "swish")
        h = B.se_block(h, p.se)
        h = T.batchnorm2d(T.conv2d(h, p.project_conv), p.project_bn)
        want = x.data + h.data  # shortcut, infer mode: no drop
        assert np.allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("expansion,stride,out_c", [(1, 1, 4), (6, 1, 4), (6, 2, 6)])
    def test_gradients(self, expansion, stride, out_c):
        rng = np.random.default_rng(9)
        p = B.init_mbconv(rng, 4, out_c, kernel=3, stride=stride, expansion=expansion,
                          survive_p=0.8, dtype=np.float64)
        x0 = rng.standard_normal((2, 4, 6, 6))
        out, ctx = B.mbconv_forward(t4(x0), p, T.TRAIN, np.random.default_rng(123))
        go = np.random.default_rng(10).standard_normal(out.dims)
        gx, grads = B.mbconv_backward(ctx, go)

        def loss():
            y = B.mbconv(t4(x0), p, T.TRAIN, np.random.default_rng(123))
            return float(np.sum(go * y.data))

        assert max_rel_err(gx, numeric_grad(
            lambda x: float(np.sum(go * B.mbconv(t4(x), p, T.TRAIN, np.random.default_rng(123)).data)),
            x0, step=BLOCK_STEP,
        )) < GRAD_TOL
        check_param_grads(loss, mbconv_arrays(p), grads)


class TestAttentionGate:
    def test_zero_psi_gates_half(self):
        rng = np.random.default_rng(11)
        x = t4(rng.standard_normal((1, 4, 8, 8)))
        g = t4(rng.standard_normal((1, 6, 4, 4)))
        p = B.init_attention_gate(rng, 4, 6, dtype=np.float64)
        p.psi.weight[:] = 0
        p.psi.bias[:] = 0
        out = B.attention_gate(x, g, p)
        assert np.allclose(out.data, 0.5 * x.data, atol=1e-12)

    def test_saturated_psi_passes_x(self):
        rng = np.random.default_rng(12)
        x = t4(rng.standard_normal((1, 4, 8, 8)))
        g = t4(rng.standard_normal((1, 6, 4, 4)))
        p = B.init_attention_gate(rng, 4, 6, dtype=np.float64)
        p.psi.weight[:] = 0
        p.psi.bias[:] = 20.0
        out = B.attention_gate(x, g, p)
        assert np.max(np.abs(out.data - x.data)) < 1e-6 * np.max(np.abs(x.data))

    def test_matches_primitive_composition(self):
        rng = np.random.default_rng(13)
        x = t4(rng.standard_normal((1, 4, 8, 8)))
        g = t4(rng.standard_normal((1, 6, 2, 2)))
        p = B.init_attention_gate(rng, 4, 6, dtype=np.float64)
        got = B.attention_gate(x, g, p).data

        gu = T.upsample_bilinear_2x(T.upsample_bilinear_2x(g))
        s = T.Tensor4(T.conv2d(x, p.wx).data + T.conv2d(gu, p.wg).data)
        alpha = T.activate(T.conv2d(T.activate(s, "relu"), p.psi), "sigmoid").data
        assert np.allclose(got, x.data * alpha, atol=1e-12)

    def test_output_dominated_by_x(self):
        rng = np.random.default_rng(14)
        x = t4(rng.standard_normal((2, 3, 4, 4)))
        g = t4(rng.standard_normal((2, 5, 2, 2)))
        p = B.init_attention_gate(rng, 3, 5, dtype=np.float64)
        out = B.attention_gate(x, g, p)
        assert np.all(np.abs(out.data) <= np.abs(x.data) + 1e-15)
        assert np.all(np.sign(out.data) == np.sign(x.data))

    def test_uneven_factor_rejected(self):
        rng = np.random.default_rng(15)
        p = B.init_attention_gate(rng, 3, 5)
        with pytest.raises(ShapeError):
            B.attention_gate(t4(np.zeros((1, 3, 6, 6))), t4(np.zeros((1, 5, 4, 4))), p)

    def test_gradients(self):
        rng = np.random.default_rng(16)
        x0 = rng.standard_normal((1, 3, 4, 4))
        g0 = rng.standard_normal((1, 5, 2, 2))
        p = B.init_attention_gate(rng, 3, 5, dtype=np.float64)
        out, ctx = B.attention_gate_forward(t4(x0), t4(g0), p)
        go = rng.standard_normal(out.dims)
        gx, gg, grads = B.attention_gate_backward(ctx, go)

        def run(x, g):
            return float(np.sum(go * B.attention_gate(t4(x), t4(g), p).data))

        assert max_rel_err(gx, numeric_grad(lambda x: run(x, g0), x0, step=BLOCK_STEP)) < GRAD_TOL
        assert max_rel_err(gg, numeric_grad(lambda g: run(x0, g), g0, step=BLOCK_STEP)) < GRAD_TOL
        arrays = {
            "wx.weight": p.wx.weight, "wg.weight": p.wg.weight,
            "psi.weight": p.psi.weight, "psi.bias": p.psi.bias,
        }
        check_param_grads(lambda: run(x0, g0), arrays, grads)


class TestResidualBlock:
    def test_zero_weights_identity(self):
        rng = np.random.default_rng(17)
        p = B.init_res_block(rng, 4, 4, dtype=np.float64)
        p.conv1.weight[:] = 0
        p.conv2.weight[:] = 0
        x = t4(rng.standard_normal((2, 4, 5, 5)))
        out = B.residual_block(x, p)
        assert np.allclose(out.data, x.data, atol=1e-12)

    @pytest.mark.parametrize("h,w", [(1, 1), (3, 4), (7, 5)])
    def test_spatial_dims_preserved(self, h, w):
        rng = np.random.default_rng(18)
        p = B.init_res_block(rng, 3, 6, dtype=np.float64)
        out = B.residual_block(t4(rng.standard_normal((1, 3, h, w))), p)
        assert out.dims == (1, 6, h, w)

    def test_matches_primitive_composition(self):
        rng = np.random.default_rng(19)
        p = B.init_res_block(rng, 3, 5, dtype=np.float64)
        for bn in (p.bn1, p.bn2):
            bn.running_mean[:] = rng.standard_normal(bn.channels) * 0.2
            bn.running_var[:] = 0.5 + rng.random(bn.channels)
        x = t4(rng.standard_normal((1, 3, 6, 6)))
        got = B.residual_block(x, p).data

        r = T.activate(T.batchnorm2d(T.conv2d(x, p.conv1), p.bn1), "relu")
        r = T.activate(T.batchnorm2d(T.conv2d(r, p.conv2), p.bn2), "relu")
        want = r.data + T.conv2d(x, p.shortcut_proj).data
        assert np.allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("out_c", [4, 6])
    def test_gradients(self, out_c):
        rng = np.random.default_rng(20)
        p = B.init_res_block(rng, 4, out_c, dtype=np.float64)
        for bn in (p.bn1, p.bn2):
            bn.mode = T.TRAIN
            bn.beta[:] = 0.4  # keep pre-relu values off the kink
        x0 = rng.standard_normal((2, 4, 4, 4))
        out, ctx = B.residual_block_forward(t4(x0), p)
        go = rng.standard_normal(out.dims)
        gx, grads = B.residual_block_backward(ctx, go)

        def loss():
            return float(np.sum(go * B.residual_block(t4(x0), p).data))

        assert max_rel_err(gx, numeric_grad(
            lambda x: float(np.sum(go * B.residual_block(t4(x), p).data)), x0, step=BLOCK_STEP
        )) < GRAD_TOL
        arrays = {
            "conv1.weight": p.conv1.weight, "bn1.gamma": p.bn1.gamma, "bn1.beta": p.bn1.beta,
            "conv2.weight": p.conv2.weight, "bn2.gamma": p.bn2.gamma, "bn2.beta": p.bn2.beta,
        }
        if p.shortcut_proj is not None:
            arrays["shortcut_proj.weight"] = p.shortcut_proj.weight
        check_param_grads(loss, arrays, grads)
