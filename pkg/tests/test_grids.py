import math

import numpy as np
import pytest

from coopquant.grids import (
    FeatureGrid,
    Pose2D,
    RngStream,
    bilinear_warp,
    bilinear_warp_backward,
    frobenius_norm,
    kl_divergence,
)


def seeded_grid(seed, h, w, c, lo=-2.0, hi=2.0):
    return FeatureGrid(RngStream(seed).uniform_array((h, w, c), lo, hi))


class TestFrobeniusNorm:
    def test_zero_grid(self):
        assert frobenius_norm(FeatureGrid.zeros(2, 2, 1)) == 0.0

    def test_3_4_5(self):
        g = FeatureGrid(np.array([[[3.0], [4.0]]]))
        assert frobenius_norm(g) == pytest.approx(5.0)

    def test_matches_scalar_loop(self):
        g = seeded_grid(7, 4, 4, 2)
        acc = 0.0
        for i in range(4):
            for j in range(4):
                for k in range(2):
                    acc += g.data[i, j, k] ** 2
        assert frobenius_norm(g) == pytest.approx(math.sqrt(acc), rel=1e-12)

    def test_absolute_homogeneity(self):
        g = seeded_grid(11, 3, 5, 2)
        for a in (-3.0, -0.5, 0.0, 2.5):
            assert frobenius_norm(FeatureGrid(a * g.data)) == pytest.approx(
                abs(a) * frobenius_norm(g), abs=1e-12)


class TestKlDivergence:
    def test_identical_is_zero(self):
        g = seeded_grid(3, 4, 4, 2)
        assert kl_divergence(g, g) == 0.0

    def test_two_point_arithmetic(self):
        # softmax(p) = [.5, .5], softmax(q) = [.25, .75]
        p = FeatureGrid(np.log(np.array([[[0.5], [0.5]]])))
        q = FeatureGrid(np.log(np.array([[[0.25], [0.75]]])))
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert kl_divergence(p, q) == pytest.approx(expected, rel=1e-12)

    def test_matches_scalar_reference(self):
        p = seeded_grid(5, 3, 3, 2)
        q = FeatureGrid(p.data + 0.1 * RngStream(6).normal_array((3, 3, 2)))

        def ref_softmax(flat):
            e = [math.exp(v) for v in flat]
            s = sum(e)
            return [v / s for v in e]

        sp = ref_softmax(p.data.ravel())
        sq = ref_softmax(q.data.ravel())
        expected = sum(a * math.log(a / b) for a, b in zip(sp, sq))
        assert kl_divergence(p, q) == pytest.approx(expected, rel=1e-10)

    def test_nonnegative_and_vanishing_perturbation(self):
        p = seeded_grid(9, 4, 4, 1)
        last = None
        for eps in (1e-1, 1e-2, 1e-3):
            q = FeatureGrid(p.data + eps * RngStream(10).normal_array((4, 4, 1)))
            d = kl_divergence(p, q)
            assert d >= 0.0
            if last is not None:
                assert d < last
            last = d
        assert last < 1e-4

    def test_shift_invariance(self):
        p = seeded_grid(2, 3, 3, 1)
        q = FeatureGrid(p.data + 1.7)
        assert kl_divergence(p, q) == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence(seeded_grid(1, 2, 2, 1), seeded_grid(1, 2, 3, 1))


def reference_warp(g, src, dst, mpc):
    """Scalar reference sampler: same convention, one cell at a time."""
    h, w, c = g.shape
    out = np.zeros((h, w, c))
    for i in range(h):
        for j in range(w):
            lx = (j + 0.5) * mpc - 0.5 * w * mpc
            ly = (i + 0.5) * mpc - 0.5 * h * mpc
            wx, wy = dst.to_world(np.array(lx), np.array(ly))
            sx, sy = src.to_local(wx, wy)
            col = float(sx) / mpc + 0.5 * w - 0.5
            row = float(sy) / mpc + 0.5 * h - 0.5
            r0, c0 = math.floor(row), math.floor(col)
            fr, fc = row - r0, col - c0
            for dr in (0, 1):
                for dc in (0, 1):
                    rr, cc = r0 + dr, c0 + dc
                    if 0 <= rr < h and 0 <= cc < w:
                        wgt = (fr if dr else 1 - fr) * (fc if dc else 1 - fc)
                        out[i, j] += wgt * g.data[rr, cc]
    return out


class TestBilinearWarp:
    def test_identity(self):
        g = seeded_grid(21, 6, 6, 2)
        pose = Pose2D(1.0, -2.0, 0.3)
        out = bilinear_warp(g, pose, pose, 0.5)
        np.testing.assert_array_equal(out.data, g.data)

    def test_one_cell_translation(self):
        g = seeded_grid(22, 5, 5, 1)
        mpc = 0.5
        out = bilinear_warp(g, Pose2D(0, 0, 0), Pose2D(mpc, 0, 0), mpc)
        np.testing.assert_allclose(out.data[:, :-1], g.data[:, 1:], atol=1e-12)
        np.testing.assert_allclose(out.data[:, -1], 0.0, atol=1e-12)

    def test_rotation_matches_reference_sampler(self):
        g = FeatureGrid.zeros(9, 9, 1)
        g.data[4, 6, 0] = 1.0
        src = Pose2D(0, 0, math.pi / 4)
        dst = Pose2D(0, 0, 0)
        out = bilinear_warp(g, src, dst, 0.5)
        np.testing.assert_allclose(out.data, reference_warp(g, src, dst, 0.5), atol=1e-12)
        # mass stays within the interpolation support (resampling is not
        # exactly mass-preserving, but close for an interior single-hot cell)
        assert out.data.sum() == pytest.approx(1.0, abs=0.15)
        assert np.all(out.data >= 0.0)

    def test_random_pose_matches_reference_sampler(self):
        g = seeded_grid(23, 7, 8, 2)
        src = Pose2D(0.4, -0.3, 0.7)
        dst = Pose2D(-0.2, 0.5, -0.4)
        out = bilinear_warp(g, src, dst, 0.5)
        np.testing.assert_allclose(out.data, reference_warp(g, src, dst, 0.5), atol=1e-12)

    def test_inverse_composition_interior(self):
        # smooth blob: round trip reproduces the interior within 0.1 of range
        h = w = 24
        ys, xs = np.mgrid[0:h, 0:w]
        blob = np.exp(-(((xs - 12) ** 2 + (ys - 12) ** 2) / 30.0))[..., None]
        g = FeatureGrid(blob)
        a, b = Pose2D(0, 0, 0), Pose2D(0.7, -0.4, 0.2)
        back = bilinear_warp(bilinear_warp(g, a, b, 0.5), b, a, 0.5)
        err = np.abs(back.data - g.data)[6:-6, 6:-6]
        assert err.max() <= 0.1 * (blob.max() - blob.min())

    def test_backward_is_adjoint(self):
        # <warp(x), y> == <x, warp_backward(y)> for random tensors
        rng = RngStream(31)
        x = rng.uniform_array((6, 6, 2), -1, 1)
        y = rng.uniform_array((6, 6, 2), -1, 1)
        src, dst = Pose2D(0.2, 0.1, 0.4), Pose2D(-0.3, 0.2, -0.1)
        wx = bilinear_warp(FeatureGrid(x), src, dst, 0.5).data
        bty = bilinear_warp_backward(y, src, dst, 0.5)
        assert np.sum(wx * y) == pytest.approx(np.sum(x * bty), rel=1e-12)


class TestRngStream:
    def test_degenerate_interval(self):
        assert RngStream(4).uniform(0.0, 0.0) == 0.0

    def test_determinism_from_seed_and_counter(self):
        a = RngStream(99)
        a.uniform_array(10)
        v1 = a.uniform()
        b = RngStream(99, counter=a.counter - 1)
        assert b.uniform() == v1

    def test_sequences_identical(self):
        assert np.array_equal(RngStream(5).uniform_array(100),
                              RngStream(5).uniform_array(100))

    def test_uniform_mean(self):
        draws = RngStream(17).uniform_array(100_000)
        assert abs(draws.mean() - 0.5) < 0.01
        assert draws.min() >= 0.0 and draws.max() < 1.0

    def test_normal_moments(self):
        draws = RngStream(18).normal_array(100_000, 1.0, 2.0)
        assert abs(draws.mean() - 1.0) < 0.05
        assert abs(draws.std() - 2.0) < 0.05

    def test_split_streams_differ(self):
        root = RngStream(7)
        a, b = root.split(1), root.split(2)
        assert not np.array_equal(a.uniform_array(50), b.uniform_array(50))
        assert root.counter == 0

    def test_shuffle_deterministic(self):
        items = list(range(20))
        RngStream(3).shuffle(items)
        items2 = list(range(20))
        RngStream(3).shuffle(items2)
        assert items == items2
        assert sorted(items) == list(range(20))


class TestPose2D:
    def test_yaw_wrapped(self):
        assert Pose2D(0, 0, math.pi + 0.1).yaw == pytest.approx(-math.pi + 0.1)
        assert Pose2D(0, 0, math.pi).yaw == pytest.approx(math.pi)
        assert Pose2D(0, 0, -math.pi).yaw == pytest.approx(math.pi)

    def test_world_local_round_trip(self):
        p = Pose2D(2.0, -1.0, 0.8)
        wx, wy = p.to_world(np.array(1.5), np.array(-0.7))
        lx, ly = p.to_local(wx, wy)
        assert float(lx) == pytest.approx(1.5)
        assert float(ly) == pytest.approx(-0.7)


class TestFeatureGridSerialization:
    def test_round_trip(self):
        g = FeatureGrid(RngStream(41).uniform_array((3, 5, 2), -1, 1).astype(np.float32))
        back = FeatureGrid.from_bytes(g.to_bytes())
        np.testing.assert_array_equal(back.data, g.data)
        assert back.shape == (3, 5, 2)

    def test_rejects_truncation(self):
        blob = FeatureGrid.zeros(2, 2, 1).to_bytes()
        with pytest.raises(ValueError):
            FeatureGrid.from_bytes(blob[:-1])

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            FeatureGrid(np.full((1, 1, 1), np.nan))
