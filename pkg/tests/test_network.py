"""Network graph: features, cost volume, aggregation variants, heads."""
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from ministereo import autodiff as ad
from ministereo import network as net
from ministereo.autodiff import ParamView
from ministereo.config import AGG_VARIANTS, micro_config
from ministereo.network import NetParams
from ministereo.tensor import MacsLedger, ShapeError

from oracles import cost_volume_ref, softargmax_ref

F32 = np.float32

TINY = micro_config(d_max=16, stem_channels=8, channels_per_scale=(8, 12, 16, 24),
                    blocks_per_scale=(1, 1, 1, 1), fused_channels=12, agg_channels=8,
                    two_d_layer_count=2, mask_head_channels=8)


@pytest.fixture(scope="module")
def tiny_store():
    return net.init_weights(TINY, seed=0)


def _features(img, store, cfg):
    p = NetParams.run(ParamView(store))
    return net.extract_features(ad.lift(img), p, cfg).value


class TestExtractFeatures:
    def test_output_shape_micro(self):
        cfg = micro_config()
        store = net.init_weights(cfg, 0)
        img = np.random.default_rng(0).random((3, 64, 128), dtype=F32)
        out = _features(img, store, cfg)
        assert out.shape == (48, 16, 32)

    def test_two_calls_bit_identical(self, tiny_store, rng):
        img = rng.random((3, 32, 64), dtype=F32)
        a = _features(img, tiny_store, TINY)
        b = _features(img, tiny_store, TINY)
        assert np.array_equal(a, b)

    def test_weight_sharing_same_tensors(self, tiny_store, rng):
        """Left and right branches resolve the same parameter objects, so the
        same input through either branch yields bit-identical features."""
        img = rng.random((3, 32, 64), dtype=F32)
        p = NetParams.run(ParamView(tiny_store))
        fl = net.extract_features(ad.lift(img), p, TINY).value
        fr = net.extract_features(ad.lift(img), p, TINY).value
        assert np.array_equal(fl, fr)
        # mutating a backbone tensor changes both branches identically
        mutated = tiny_store.copy()
        mutated["features.stem.w"] = mutated["features.stem.w"] + F32(0.05)
        p2 = NetParams.run(ParamView(mutated))
        fl2 = net.extract_features(ad.lift(img), p2, TINY).value
        fr2 = net.extract_features(ad.lift(img), p2, TINY).value
        assert np.array_equal(fl2, fr2)
        assert not np.array_equal(fl2, fl)

    def test_zero_weights_zero_features(self, rng):
        store = net.init_weights(TINY, 0)
        zeroed = store.copy()
        for name in zeroed:
            zeroed.tensors[name] = np.zeros_like(zeroed[name])
        img = rng.random((3, 32, 64), dtype=F32)
        out = _features(img, zeroed, TINY)
        assert np.all(out == 0.0)

    def test_indivisible_input_rejected(self, tiny_store, rng):
        img = rng.random((3, 30, 64), dtype=F32)
        with pytest.raises(ShapeError):
            _features(img, tiny_store, TINY)


class TestCostVolume:
    def test_all_ones_level_zero(self):
        f = np.ones((8, 4, 6), dtype=F32)
        vol = net.build_cost_volume(f, f, 4).value
        assert np.allclose(vol[0], 1.0)

    def test_shifted_copy_argmax(self, rng):
        """F_R equal to F_L shifted right by k: the best level at interior
        pixels is k. Verified against per-pixel inner products."""
        k = 3
        nc, h, w = 32, 16, 16
        fl = rng.normal(size=(nc, h, w)).astype(F32)
        fr = np.zeros_like(fl)
        fr[:, :, :w - k] = fl[:, :, k:]  # F_R(x) = F_L(x + k) => match at d = k
        vol = net.build_cost_volume(fl, fr, 8).value
        ref = cost_volume_ref(fl, fr, 8)
        assert np.abs(vol - ref).max() <= 1e-5
        am = vol.argmax(axis=0)
        assert np.all(am[:, k:w - k] == k)

    def test_out_of_bounds_zero(self, rng):
        fl = rng.normal(size=(4, 3, 5)).astype(F32) + 2.0
        vol = net.build_cost_volume(fl, fl, 5).value
        for d in range(5):
            assert np.all(vol[d, :, :d] == 0.0)

    def test_levels_beyond_width_zero(self, rng):
        fl = rng.normal(size=(4, 3, 4)).astype(F32)
        vol = net.build_cost_volume(fl, fl, 8).value
        assert vol.shape == (8, 3, 4)
        assert np.all(vol[4:] == 0.0)

    def test_matches_brute_force_random(self, rng):
        fl = rng.normal(size=(8, 12, 12)).astype(F32)
        fr = rng.normal(size=(8, 12, 12)).astype(F32)
        vol = net.build_cost_volume(fl, fr, 6).value
        ref = cost_volume_ref(fl, fr, 6)
        assert np.abs(vol - ref).max() <= 1e-5

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            net.build_cost_volume(rng.random((4, 3, 5), dtype=F32),
                                  rng.random((4, 3, 6), dtype=F32), 4)


class TestAggregate:
    @pytest.mark.parametrize("variant", AGG_VARIANTS)
    def test_output_shape_all_variants(self, variant, rng):
        cfg = replace(TINY, agg_variant=variant)
        store = net.init_weights(cfg, 0)
        cost = rng.normal(size=(cfg.d_levels, 8, 16)).astype(F32)
        out = net.aggregate(ad.lift(cost), NetParams.run(ParamView(store)), cfg)
        assert out.value.shape == (cfg.d_levels, 8, 16)

    def test_serial_orders_share_parameters_and_macs(self):
        b = replace(micro_config(), agg_variant="two-d-then-three-d")
        c = replace(micro_config(), agg_variant="three-d-then-two-d")
        sb = net.init_weights(b, 0)
        sc = net.init_weights(c, 0)
        assert sorted(sb.keys()) == sorted(sc.keys())
        assert sb.parameter_count() == sc.parameter_count()
        pb = net.profile_macs(b, 64, 128)
        pc = net.profile_macs(c, 64, 128)
        assert pb.aggregation_total == pc.aggregation_total
        assert pb.total == pc.total

    def test_two_d_only_is_cheapest_serial(self):
        a = net.profile_macs(replace(micro_config(), agg_variant="two-d-only"), 64, 128)
        c = net.profile_macs(micro_config(), 64, 128)
        assert a.aggregation_total < c.aggregation_total

    def test_interleaved_within_ten_percent_of_serial(self):
        c = net.profile_macs(micro_config(), 64, 128)
        i = net.profile_macs(replace(micro_config(), agg_variant="interleaved"), 64, 128)
        ratio = i.aggregation_total / c.aggregation_total
        assert 0.9 <= ratio <= 1.1

    def test_three_d_share_near_target(self):
        cfg = micro_config()
        prof = net.profile_macs(cfg, 64, 128)
        assert abs(prof.three_d_fraction - cfg.three_d_proportion) <= 0.02

    def test_three_d_share_tracks_knob(self):
        lo = net.profile_macs(micro_config(three_d_proportion=0.048), 64, 128)
        hi = net.profile_macs(micro_config(three_d_proportion=0.156), 64, 128)
        assert hi.three_d_fraction > lo.three_d_fraction

    def test_zero_weights_constant_from_biases(self, rng):
        cfg = TINY
        store = net.init_weights(cfg, 0)
        zeroed = store.copy()
        for name in zeroed:
            if name.startswith(("agg", "head")):
                zeroed.tensors[name] = np.zeros_like(zeroed[name])
        bias_val = 0.75
        zeroed["agg.proj.b"] = np.full(cfg.d_levels, bias_val, dtype=F32)
        cost = rng.normal(size=(cfg.d_levels, 8, 16)).astype(F32)
        out = net.aggregate(ad.lift(cost), NetParams.run(ParamView(zeroed)), cfg)
        assert np.allclose(out.value, bias_val, atol=1e-6)

    def test_unknown_variant_rejected(self, tiny_store, rng):
        fake = SimpleNamespace(agg_variant="diagonal", d_levels=TINY.d_levels,
                               agg_channels=8, two_d_layer_count=2,
                               three_d_kernel=(3, 3, 3), three_d_proportion=0.05)
        cost = rng.normal(size=(TINY.d_levels, 8, 16)).astype(F32)
        with pytest.raises(ValueError):
            net.aggregate(ad.lift(cost), NetParams.run(ParamView(tiny_store)), fake)


class TestSoftArgmax:
    def test_one_hot_large_margin(self):
        cost = np.zeros((16, 2, 2), dtype=F32)
        cost[5] = 60.0
        out = net.soft_argmax(cost).value
        assert np.abs(out - 5.0).max() <= 1e-3

    def test_uniform_gives_midpoint(self):
        cost = np.zeros((48, 3, 3), dtype=F32)
        out = net.soft_argmax(cost).value
        assert np.allclose(out, 23.5, atol=1e-4)

    def test_single_pixel_matches_direct_evaluation(self, rng):
        cost = rng.normal(size=(8, 1, 1)).astype(F32)
        out = float(net.soft_argmax(cost).value[0, 0])
        ref = softargmax_ref(cost[:, 0, 0])
        assert abs(out - ref) <= 1e-5

    def test_translation_invariance(self, rng):
        cost = rng.normal(size=(12, 5, 7)).astype(F32)
        shifted = cost + rng.normal(size=(1, 5, 7)).astype(F32)
        a = net.soft_argmax(cost).value
        b = net.soft_argmax(shifted).value
        assert np.abs(a - b).max() <= 1e-5


class TestConvexUpsample:
    def test_constant_map_times_four(self, rng):
        dq = np.full((4, 6), 2.5, dtype=F32)
        logits = rng.normal(size=(144, 4, 6)).astype(F32)
        out = net.convex_upsample(dq, logits).value
        assert out.shape == (16, 24)
        assert np.abs(out - 10.0).max() <= 1e-5

    def test_output_shape(self, rng):
        dq = rng.random((8, 16), dtype=F32)
        logits = rng.normal(size=(144, 8, 16)).astype(F32)
        assert net.convex_upsample(dq, logits).value.shape == (32, 64)

    def test_convexity_bounds_on_step_edge(self, rng):
        dq = np.zeros((6, 8), dtype=F32)
        dq[:, 4:] = 10.0
        logits = rng.normal(size=(144, 6, 8)).astype(F32) * 3
        out = net.convex_upsample(dq, logits).value
        for i in range(6):
            for j in range(8):
                lo0, hi0 = max(0, i - 1), min(6, i + 2)
                lo1, hi1 = max(0, j - 1), min(8, j + 2)
                nb = dq[lo0:hi0, lo1:hi1]
                block = out[4 * i:4 * i + 4, 4 * j:4 * j + 4]
                assert block.min() >= 4 * nb.min() - 1e-4
                assert block.max() <= 4 * nb.max() + 1e-4

    def test_mask_shape_rejected(self, rng):
        with pytest.raises(ShapeError):
            net.convex_upsample(rng.random((4, 4), dtype=F32),
                                rng.random((100, 4, 4), dtype=F32))


class TestForward:
    def test_range_and_determinism(self, tiny_store, rng):
        left = rng.random((3, 32, 64), dtype=F32)
        right = rng.random((3, 32, 64), dtype=F32)
        r1 = net.forward(left, right, tiny_store, TINY)
        r2 = net.forward(left, right, tiny_store, TINY)
        assert np.array_equal(r1.disparity.values, r2.disparity.values)
        assert r1.disparity.values.min() >= 0.0
        assert r1.disparity.values.max() <= TINY.d_max
        assert r1.disparity.valid.all()
        assert r1.fused_left.shape == (TINY.fused_channels, 8, 16)

    def test_recorded_full_graph_grad_shapes(self, tiny_store, rng):
        """Recording the whole forward yields one gradient per named
        parameter, with matching shapes."""
        from ministereo.training import disparity_loss
        left = rng.random((3, 32, 64), dtype=F32)
        right = rng.random((3, 32, 64), dtype=F32)
        gt = (rng.random((32, 64)) * 12).astype(F32)

        def fn(view):
            out = net.forward_vars(ad.lift(left), ad.lift(right),
                                   NetParams.run(view), TINY)
            return disparity_loss(out["disparity"], gt, np.ones_like(gt, dtype=bool))

        out, tape = ad.record(fn, ParamView(tiny_store))
        grads = ad.backward(tape, out)
        assert set(grads.keys()) == set(tiny_store.keys())
        for name in tiny_store:
            assert grads[name].shape == tiny_store[name].shape
        # at least the head must receive signal
        assert float(np.abs(grads["head.mask2.w"]).max()) > 0

    def test_init_weights_deterministic(self):
        a = net.init_weights(TINY, seed=7)
        b = net.init_weights(TINY, seed=7)
        c = net.init_weights(TINY, seed=8)
        assert a.allclose(b)
        assert not a.allclose(c)
        assert a.schemes == b.schemes

    def test_run_mode_validates_shapes(self, tiny_store, rng):
        broken = tiny_store.copy()
        broken["features.stem.w"] = np.zeros((4, 3, 3, 3), dtype=F32)
        img = rng.random((3, 32, 64), dtype=F32)
        with pytest.raises(ShapeError):
            _features(img, broken, TINY)


class TestMacsProfile:
    def test_groups_cover_pipeline(self):
        prof = net.profile_macs(micro_config(), 64, 128)
        for key in ("features", "fusion", "correlation", "agg2d", "agg3d", "head",
                    "upsample"):
            assert key in prof.by_group, key
        assert prof.total == sum(prof.by_group.values())
        assert prof.total == prof.ledger.total

    def test_profile_deterministic(self):
        a = net.profile_macs(micro_config(), 64, 128)
        b = net.profile_macs(micro_config(), 64, 128)
        assert a.ledger.entries == b.ledger.entries

    def test_correlation_macs_closed_form(self):
        cfg = micro_config()
        prof = net.profile_macs(cfg, 64, 128)
        h4, w4 = 16, 32
        want = cfg.fused_channels * sum(h4 * max(0, w4 - d)
                                        for d in range(cfg.d_levels))
        assert prof.by_group["correlation"] == want
