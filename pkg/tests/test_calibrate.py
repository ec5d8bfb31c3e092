import math
from dataclasses import replace

import numpy as np
import pytest

from coopquant.calibrate import (
    CalibConfig,
    CalibSample,
    QuantizedModel,
    build_calib_set,
    calibrate,
    collect_block_io,
    dataset_ap,
    hetero_loss,
    naive_maxmin,
    spatial_loss,
    _forward_sample,
)
from coopquant.grids import FeatureGrid, RngStream
from coopquant.model import DetectionGrid, TrainConfig, fit_fp, init_params
from coopquant.scene import gen_scenario


def tiny_scenarios(n=2, seed=300, n_frames=2):
    return [gen_scenario(seed=seed + i, n_agents=2, n_objects=2, n_frames=n_frames,
                         frame_dt_ms=200, roi=(6.0, 6.0, 0.5), fov_radius=6.0)
            for i in range(n)]


@pytest.fixture(scope="module")
def tiny_model():
    scns = tiny_scenarios(3, seed=310)
    cfg = TrainConfig(epochs=8, seed=4, channels=4, hidden=2, val_fraction=0.0)
    return scns, fit_fp(scns, cfg)


def fast_cfg(**kw):
    base = dict(fraction=1.0, steps=1, t_grid=16, adaround_iters=120,
                bits_weights=8, bits_acts=8, seed=0)
    base.update(kw)
    return CalibConfig(**base)


class TestBuildCalibSet:
    def test_full_fraction_single_agent(self):
        scn = gen_scenario(seed=1, n_agents=1, n_objects=1, n_frames=4,
                           frame_dt_ms=100, roi=(6.0, 6.0, 0.5))
        samples = build_calib_set([scn], fast_cfg(fraction=1.0), RngStream(0))
        assert len(samples) == 4
        assert all(s.present_agents == frozenset({0}) for s in samples)
        assert all(s.ego_id == 0 for s in samples)

    def test_ceiling_arithmetic(self):
        scns = [gen_scenario(seed=i, n_agents=1, n_objects=0, n_frames=100,
                             frame_dt_ms=50, roi=(4.0, 4.0, 0.5))
                for i in range(20)]
        samples = build_calib_set(scns, fast_cfg(fraction=0.005), RngStream(1))
        assert len(samples) == 10  # ceil(0.005 * 2000)

    def test_deterministic(self):
        scns = tiny_scenarios(2)
        a = build_calib_set(scns, fast_cfg(), RngStream(7))
        b = build_calib_set(scns, fast_cfg(), RngStream(7))
        assert a == b

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_calib_set([], fast_cfg(), RngStream(0))

    def test_subset_frequencies_uniform(self):
        # 3 agents -> 7 non-empty subsets, each expected at 1/7
        scn = gen_scenario(seed=5, n_agents=3, n_objects=0, n_frames=1,
                           frame_dt_ms=100, roi=(4.0, 4.0, 0.5))
        rng = RngStream(9)
        counts = {}
        n = 10_000
        for _ in range(n):
            (s,) = build_calib_set([scn], fast_cfg(), rng)
            counts[s.present_agents] = counts.get(s.present_agents, 0) + 1
        assert len(counts) == 7
        p = 1 / 7
        sigma = math.sqrt(n * p * (1 - p))
        for c in counts.values():
            assert abs(c - n * p) <= 3 * sigma

    def test_invariants_enforced(self):
        scn = tiny_scenarios(1)[0]
        with pytest.raises(ValueError):
            CalibSample(scn, 0, 5, frozenset({0, 1}), 0.0, 0.0, "sync", 0)
        with pytest.raises(ValueError):
            CalibSample(scn, 0, 0, frozenset({0}), 0.0, 0.0, "bogus", 0)


class TestCalibConfig:
    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            CalibConfig(fraction=0.0)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            CalibConfig(lambda_hetero=-0.1)


class TestAlignmentLosses:
    def test_hetero_identical_zero(self):
        g = FeatureGrid(RngStream(1).uniform_array((4, 4, 2), -1, 1))
        assert hetero_loss(g, g) == 0.0

    def test_hetero_shift_invariant(self):
        g = FeatureGrid(RngStream(2).uniform_array((4, 4, 2), -1, 1))
        shifted = FeatureGrid(g.data + 3.0)
        assert hetero_loss(g, shifted) == pytest.approx(0.0, abs=1e-12)

    def test_hetero_delegates_to_kl(self):
        from coopquant.grids import kl_divergence

        a = FeatureGrid(RngStream(3).uniform_array((3, 3, 2), -1, 1))
        b = FeatureGrid(a.data + 0.2 * RngStream(4).normal_array((3, 3, 2)))
        assert hetero_loss(a, b) == kl_divergence(a, b)

    def test_spatial_identical_zero(self):
        d = DetectionGrid(RngStream(5).uniform_array((3, 3, 3), -1, 1))
        assert spatial_loss(d, d) == 0.0

    def test_spatial_unit_difference(self):
        a = DetectionGrid(np.zeros((2, 2, 3)))
        bdata = np.zeros((2, 2, 3))
        bdata[0, 0, 0] = 1.0
        assert spatial_loss(a, DetectionGrid(bdata)) == 1.0

    def test_spatial_matches_reference(self):
        a = DetectionGrid(RngStream(6).uniform_array((3, 4, 3), -1, 1))
        b = DetectionGrid(RngStream(7).uniform_array((3, 4, 3), -1, 1))
        ref = sum((a.data[i, j, k] - b.data[i, j, k]) ** 2
                  for i in range(3) for j in range(4) for k in range(3))
        assert spatial_loss(a, b) == pytest.approx(ref, rel=1e-12)

    def test_spatial_shape_mismatch(self):
        with pytest.raises(ValueError):
            spatial_loss(DetectionGrid(np.zeros((2, 2, 3))),
                         DetectionGrid(np.zeros((3, 2, 3))))


class TestCollectBlockIO:
    def test_first_block_fp_equals_quantized(self, tiny_model):
        scns, params = tiny_model
        samples = build_calib_set(scns[:1], fast_cfg(), RngStream(11))
        i_fp, o_fp = collect_block_io(params, samples, 0, "fp")
        i_q, o_q = collect_block_io(params, samples, 0, "quantized", calibrated={})
        for a, b in zip(i_fp, i_q):
            for x, y in zip(a, b):
                np.testing.assert_array_equal(x, y)

    def test_fp_deterministic(self, tiny_model):
        scns, params = tiny_model
        samples = build_calib_set(scns[:1], fast_cfg(), RngStream(12))
        a = collect_block_io(params, samples, 3, "fp")
        b = collect_block_io(params, samples, 3, "fp")
        for xa, xb in zip(a[0], b[0]):
            for x, y in zip(xa, xb):
                np.testing.assert_array_equal(x, y)

    def test_uncalibrated_upstream_rejected(self, tiny_model):
        scns, params = tiny_model
        samples = build_calib_set(scns[:1], fast_cfg(), RngStream(13))
        with pytest.raises(ValueError):
            collect_block_io(params, samples, 4, "quantized", calibrated={})

    def test_unknown_pathway_rejected(self, tiny_model):
        scns, params = tiny_model
        samples = build_calib_set(scns[:1], fast_cfg(), RngStream(14))
        with pytest.raises(ValueError):
            collect_block_io(params, samples, 0, "int8")


class TestCalibrate:
    def test_empty_samples_rejected(self, tiny_model):
        _, params = tiny_model
        with pytest.raises(ValueError):
            calibrate(params, [], fast_cfg())

    def test_32_bit_identity(self, tiny_model):
        scns, params = tiny_model
        samples = build_calib_set(scns[:1], fast_cfg(), RngStream(21))
        qm = calibrate(params, samples, fast_cfg(bits_weights=32, bits_acts=32))
        out_q = qm.forward(scns[0], 0, 0)
        from coopquant.model import forward

        out_fp = forward(scns[0], 0, 0, params)
        np.testing.assert_array_equal(out_q.data, out_fp.data)

    def test_deterministic(self, tiny_model):
        scns, params = tiny_model
        samples = build_calib_set(scns[:1], fast_cfg(), RngStream(22))
        a = calibrate(params, samples, fast_cfg())
        b = calibrate(params, samples, fast_cfg())
        for name in a.blocks:
            np.testing.assert_array_equal(a.blocks[name].weight_qp.scale,
                                          b.blocks[name].weight_qp.scale)
            np.testing.assert_array_equal(a.blocks[name].act_qp.scale,
                                          b.blocks[name].act_qp.scale)
            np.testing.assert_array_equal(a.blocks[name].rounding.up,
                                          b.blocks[name].rounding.up)

    def test_lambdas_zero_matches_plain_reconstruction(self, tiny_model):
        # disabled alignment branch reduces to plain block-wise calibration
        scns, params = tiny_model
        samples = build_calib_set(scns[:1], fast_cfg(), RngStream(23))
        a = calibrate(params, samples, fast_cfg(lambda_hetero=0.0, lambda_spatial=0.0))
        b = calibrate(params, samples, fast_cfg(lambda_hetero=0.0, lambda_spatial=0.0))
        for name in a.blocks:
            np.testing.assert_array_equal(a.blocks[name].act_qp.scale,
                                          b.blocks[name].act_qp.scale)

    def test_every_block_has_params(self, tiny_model):
        scns, params = tiny_model
        samples = build_calib_set(scns[:1], fast_cfg(), RngStream(24))
        qm = naive_maxmin(params, samples, fast_cfg())
        assert set(qm.blocks) == {s.name for s in params.blocks()}
        for bq in qm.blocks.values():
            assert bq.weight_qp.bits == 8 and bq.act_qp.bits == 8

    def test_calibrated_beats_naive_int8(self, tiny_model):
        scns, params = tiny_model
        samples = build_calib_set(scns, fast_cfg(fraction=0.5), RngStream(25))
        qm = calibrate(params, samples, fast_cfg(fraction=0.5))
        nm = naive_maxmin(params, samples, fast_cfg(fraction=0.5))
        ap_c = dataset_ap(scns, params, qm.weight_fn(), qm.act_fn())
        ap_n = dataset_ap(scns, params, nm.weight_fn(), nm.act_fn())
        assert ap_c >= ap_n

    def test_act_scale_objective_never_worse_than_init(self, tiny_model):
        # chosen scale's objective <= objective at s0: s0 is on the grid
        from coopquant.quantize import _candidate_scales

        cand = _candidate_scales(0.37, 0.5, 1.2, 8)
        assert np.any(cand == 0.37)


class TestQuantizedModelContainer:
    def test_round_trip(self, tiny_model, tmp_path):
        scns, params = tiny_model
        samples = build_calib_set(scns[:1], fast_cfg(), RngStream(31))
        qm = calibrate(params, samples, fast_cfg(adaround_iters=40))
        path = tmp_path / "model.qv2xqm"
        qm.save(path)
        back = QuantizedModel.load(path)
        assert back.bits_weights == 8 and back.bits_acts == 8
        out_a = qm.forward(scns[0], 0, 0)
        out_b = back.forward(scns[0], 0, 0)
        # f32 storage of scales bounds the output difference
        np.testing.assert_allclose(out_b.data, out_a.data, atol=1e-4)
        for name, bq in qm.blocks.items():
            np.testing.assert_array_equal(back.blocks[name].rounding.up,
                                          bq.rounding.up)
            np.testing.assert_array_equal(back.blocks[name].weight_qp.zero_point,
                                          bq.weight_qp.zero_point)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk"
        p.write_bytes(b"WRONG!" + b"\x00" * 20)
        with pytest.raises(ValueError):
            QuantizedModel.load(p)


class TestForwardSample:
    def test_stale_tag_changes_remote_observation(self, tiny_model):
        scns, params = tiny_model
        scn = scns[0]
        common = dict(scenario=scn, frame_idx=1, ego_id=0,
                      present_agents=frozenset({0, 1}), pose_sigma_t=0.0,
                      pose_sigma_r=0.0, noise_seed=3)
        sync = _forward_sample(CalibSample(latency_tag="sync", **common), params)
        stale = _forward_sample(CalibSample(latency_tag="stale_1_frame", **common),
                                params)
        assert not np.array_equal(sync, stale)
