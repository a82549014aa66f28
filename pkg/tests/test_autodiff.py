"""Tape recording, backward rules, and the finite-difference checker."""
import numpy as np
import pytest

from ministereo import autodiff as ad
from ministereo import tensor as K
from ministereo.tensor import ShapeError, UntrackedKernelError

from conftest import grad_check

F32 = np.float32


class TestRecordBackward:
    def test_product_rule(self, rng):
        x = rng.normal(size=(4, 3)).astype(F32)
        params = {"w": rng.normal(size=(4, 3)).astype(F32)}

        def fn(view):
            return ad.sum_all(ad.mul(ad.lift(x), view["w"]))

        out, tape = ad.record(fn, ad.ParamView(params))
        grads = ad.backward(tape, out)
        assert np.allclose(grads["w"], x)

    def test_sum_gradient_is_ones(self, rng):
        params = {"x": rng.normal(size=(5, 2)).astype(F32)}
        out, tape = ad.record(lambda v: ad.sum_all(v["x"]), ad.ParamView(params))
        grads = ad.backward(tape, out)
        assert np.array_equal(grads["x"], np.ones((5, 2), dtype=F32))

    def test_recorded_output_bit_exact(self, rng):
        x = rng.normal(size=(3, 8, 8)).astype(F32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(F32)
        plain = K.conv2d(x, w, padding=(1, 1))
        out, _ = ad.record(lambda v: ad.conv2d(ad.lift(x), v["w"], padding=(1, 1)),
                           ad.ParamView({"w": w}))
        assert np.array_equal(out.value, plain)

    def test_disconnected_parameter_gets_exact_zero(self, rng):
        params = {"used": rng.normal(size=(3,)).astype(F32),
                  "unused": rng.normal(size=(4, 4)).astype(F32)}

        def fn(view):
            _ = view["unused"]  # touched but not part of the output
            return ad.sum_all(ad.mul(view["used"], view["used"]))

        out, tape = ad.record(fn, ad.ParamView(params))
        grads = ad.backward(tape, out)
        assert np.array_equal(grads["unused"], np.zeros((4, 4), dtype=F32))
        assert np.allclose(grads["used"], 2 * params["used"])

    def test_seed_shape_mismatch(self, rng):
        params = {"x": rng.normal(size=(3, 3)).astype(F32)}
        out, tape = ad.record(lambda v: ad.mul(v["x"], 2.0), ad.ParamView(params))
        with pytest.raises(ShapeError):
            ad.backward(tape, out, seed=np.ones((2, 2), dtype=F32))

    def test_raw_kernel_inside_tape_rejected(self, rng):
        x = rng.normal(size=(2, 4, 4)).astype(F32)
        w = rng.normal(size=(2, 2, 1, 1)).astype(F32)

        def fn(view):
            raw = K.conv2d(x, w)  # bypasses the wrappers: no backward rule
            return ad.sum_all(ad.lift(raw))

        with pytest.raises(UntrackedKernelError):
            ad.record(fn, ad.ParamView({"w": w}))
        # the guard is scoped to recording only
        K.conv2d(x, w)

    def test_nested_tapes_rejected(self):
        with ad.Tape():
            with pytest.raises(RuntimeError):
                ad.record(lambda: ad.lift(np.zeros(1, dtype=F32)))

    def test_accumulation_over_reused_node(self, rng):
        params = {"x": rng.normal(size=(3,)).astype(F32)}

        def fn(view):
            x = view["x"]
            return ad.sum_all(ad.add(ad.mul(x, 3.0), ad.mul(x, 2.0)))

        out, tape = ad.record(fn, ad.ParamView(params))
        grads = ad.backward(tape, out)
        assert np.allclose(grads["x"], 5.0)


class TestGradientsMatchFiniteDifferences:
    """Each differentiable kernel at <= 1e-4 relative error (eps 1e-3)."""

    def test_conv2d(self, rng):
        sc = 0.5
        p = {"x": (rng.normal(size=(3, 6, 7)) * sc).astype(F32),
             "w": (rng.normal(size=(4, 3, 3, 3)) * sc).astype(F32),
             "b": (rng.normal(size=(4,)) * sc).astype(F32)}
        rep = grad_check(lambda v: ad.conv2d(v["x"], v["w"], v["b"],
                                             stride=(2, 1), padding=(1, 2)), p)
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_conv2d_grouped(self, rng):
        sc = 0.5
        p = {"x": (rng.normal(size=(4, 6, 7)) * sc).astype(F32),
             "w": (rng.normal(size=(6, 2, 3, 3)) * sc).astype(F32)}
        rep = grad_check(lambda v: ad.conv2d(v["x"], v["w"], padding=(1, 1), groups=2), p)
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_depthwise(self, rng):
        sc = 0.5
        p = {"x": (rng.normal(size=(3, 6, 7)) * sc).astype(F32),
             "w": (rng.normal(size=(3, 3, 3)) * sc).astype(F32),
             "b": (rng.normal(size=(3,)) * sc).astype(F32)}
        rep = grad_check(lambda v: ad.depthwise_conv2d(v["x"], v["w"], v["b"],
                                                       stride=(1, 2), padding=(1, 1)), p)
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_conv3d(self, rng):
        sc = 0.3
        p = {"x": (rng.normal(size=(2, 4, 5, 6)) * sc).astype(F32),
             "w": (rng.normal(size=(3, 2, 3, 3, 3)) * sc).astype(F32),
             "b": (rng.normal(size=(3,)) * sc).astype(F32)}
        rep = grad_check(lambda v: ad.conv3d(v["x"], v["w"], v["b"],
                                             stride=(2, 1, 2), padding=(1, 1, 1)), p)
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_layer_norm(self, rng):
        p = {"x": rng.normal(size=(4, 3, 3)).astype(F32),
             "s": (1 + 0.3 * rng.normal(size=(4,))).astype(F32),
             "h": (0.3 * rng.normal(size=(4,))).astype(F32)}
        rep = grad_check(lambda v: ad.normalize(v["x"], "layer-norm", v["s"], v["h"]), p)
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_batch_norm_inference(self, rng):
        mean = rng.normal(size=5).astype(F32)
        var = (rng.random(5) + 0.5).astype(F32)
        p = {"x": rng.normal(size=(5, 4, 4)).astype(F32),
             "s": rng.normal(size=(5,)).astype(F32),
             "h": rng.normal(size=(5,)).astype(F32)}
        rep = grad_check(lambda v: ad.normalize(v["x"], "batch-norm-inference",
                                                v["s"], v["h"], mean, var), p)
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_relu6(self, rng):
        x = (rng.normal(size=(4, 5, 5)) * 3).astype(F32)
        # keep samples off the kinks at 0 and 6, where the derivative jumps
        x[np.abs(x) < 0.02] += 0.05
        x[np.abs(x - 6) < 0.02] += 0.05
        rep = grad_check(lambda v: ad.relu6(v["x"]), {"x": x})
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_gelu(self, rng):
        p = {"x": (rng.normal(size=(4, 5, 5)) * 2).astype(F32)}
        rep = grad_check(lambda v: ad.gelu(v["x"]), p)
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_softmax(self, rng):
        p = {"x": rng.normal(size=(6, 4, 4)).astype(F32)}
        rep = grad_check(lambda v: ad.softmax_axis(v["x"], 0), p)
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_bilinear_resize(self, rng):
        p = {"x": rng.normal(size=(3, 5, 5)).astype(F32)}
        rep = grad_check(lambda v: ad.bilinear_resize(v["x"], 9, 11), p)
        assert rep.max_rel_error <= 1e-4, str(rep)
        rep = grad_check(lambda v: ad.bilinear_resize(v["x"], 3, 2, align_corners=True), p)
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_elementwise_and_structural(self, rng):
        p = {"a": rng.normal(size=(3, 4)).astype(F32),
             "b": rng.normal(size=(3, 4)).astype(F32)}
        rep = grad_check(lambda v: ad.add(ad.mul(v["a"], v["b"]),
                                          ad.sub(v["a"], v["b"])), p)
        assert rep.max_rel_error <= 1e-4, str(rep)
        rep = grad_check(lambda v: ad.concatenate([v["a"], ad.mul(v["b"], 2.0)], axis=0), p)
        assert rep.max_rel_error <= 1e-4, str(rep)

    def test_upsample_and_layout_ops(self, rng):
        p = {"x": rng.normal(size=(2, 4, 4, 6)).astype(F32)}
        rep = grad_check(lambda v: ad.upsample_nearest3d(v["x"], 2), p)
        assert rep.max_rel_error <= 1e-4, str(rep)
        p = {"x": rng.normal(size=(6, 7)).astype(F32)}
        rep = grad_check(lambda v: ad.neighbors3x3(v["x"]), p)
        assert rep.max_rel_error <= 1e-4, str(rep)
        p = {"x": rng.normal(size=(16, 3, 4)).astype(F32)}
        rep = grad_check(lambda v: ad.depth_to_space4(v["x"]), p)
        assert rep.max_rel_error <= 1e-4, str(rep)


def test_softmax_gradient_translation_invariance(rng):
    """grad of (linear functional of softmax) sums to 0 along the softmax axis."""
    x = rng.normal(size=(8, 5)).astype(F32)
    r = rng.normal(size=(8, 5)).astype(F32)

    def fn(view):
        return ad.sum_all(ad.mul(ad.softmax_axis(view["x"], 0), r))

    out, tape = ad.record(fn, ad.ParamView({"x": x}))
    grads = ad.backward(tape, out)
    assert np.abs(grads["x"].sum(axis=0)).max() < 1e-6


class TestFiniteDiffChecker:
    def test_quadratic_at_three(self):
        params = {"x": np.array([3.0], dtype=F32)}

        def fn(view):
            return ad.sum_all(ad.mul(view["x"], view["x"]))

        rep = ad.finite_diff_check(fn, params, eps=1e-3)
        # central differences are exact for quadratics
        assert abs(rep.numeric_at_worst - 6.0) < 1e-3
        assert rep.max_rel_error < 1e-4

    def test_smooth_l1_quadratic_zone_slope(self):
        from ministereo.training import disparity_loss
        gt = np.zeros((2, 2), dtype=F32)
        mask = np.ones((2, 2), dtype=bool)
        params = {"pred": np.full((2, 2), 0.5, dtype=F32)}

        def fn(view):
            return disparity_loss(view["pred"], gt, mask)

        out, tape = ad.record(fn, ad.ParamView(params))
        grads = ad.backward(tape, out)
        # d/dx of 0.5 x^2 averaged over 4 pixels: 0.5 / 4 each
        assert np.allclose(grads["pred"], 0.5 / 4)
        rep = ad.finite_diff_check(fn, params, eps=1e-3)
        assert rep.max_rel_error < 1e-4

    def test_report_fields(self, rng):
        params = {"x": rng.normal(size=(3,)).astype(F32)}
        rep = ad.finite_diff_check(lambda v: ad.sum_all(v["x"]), params, eps=1e-3)
        assert rep.n_coords == 3
        assert rep.worst_coordinate[0] == "x"
        assert rep.max_rel_error < 1e-4

    def test_non_scalar_function_rejected(self, rng):
        params = {"x": rng.normal(size=(3,)).astype(F32)}
        with pytest.raises(ShapeError):
            ad.finite_diff_check(lambda v: ad.mul(v["x"], 1.0), params)
