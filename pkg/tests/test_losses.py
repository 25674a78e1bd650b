import math

import numpy as np
import pytest

from intrinsics.imageio import FlowField, JudgementSet
from intrinsics.losses import (
    LossWeights, rescale, feature_distance, fdd, fdc, ssim,
    reconstruction_loss, gradient_loss, total_loss_dense, total_loss_sparse,
    ordinal_error, ordinal_loss, albedo_smoothness, shading_smoothness,
    bistochastic, warp, temporal_loss, ORDINAL_MARGIN,
)
from intrinsics.tensor import Tensor, ShapeError, backward, finite_diff_check


def rand(shape, seed=0, lo=0.1, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


def leaf(shape, seed=0, lo=0.1, hi=1.0):
    return Tensor(rand(shape, seed, lo, hi), requires_grad=True)


# -- independent oracles -----------------------------------------------------


def ssim_brute(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct windowed evaluation with explicit loops."""
    c, h, w = x.shape
    k = min(window, h, w)
    half = (k - 1) / 2.0
    ax = np.arange(k) - half
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for ch in range(c):
        for i in range(h - k + 1):
            for j in range(w - k + 1):
                px = x[ch, i:i + k, j:j + k]
                py = y[ch, i:i + k, j:j + k]
                mx, my = (g * px).sum(), (g * py).sum()
                vx = (g * px * px).sum() - mx * mx
                vy = (g * py * py).sum() - my * my
                cov = (g * px * py).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cov + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def ordinal_brute(a_data, judgements, margin):
    """Direct re-evaluation of the pair error sum."""
    c, h, w = a_data.shape
    total = 0.0
    for i, j, r, wgt in judgements.pairs:
        def lval(p):
            x, y = p
            row, col = min(int(y * h), h - 1), min(int(x * w), w - 1)
            return math.log(max(a_data[:, row, col].mean(), 1e-6))
        li, lj = lval(judgements.points[i]), lval(judgements.points[j])
        if r == 0:
            total += wgt * (li - lj) ** 2
        elif r == 1:
            total += wgt * max(0.0, margin - li + lj) ** 2
        else:
            total += wgt * max(0.0, margin - lj + li) ** 2
    return total


class TestRescale:
    def test_midpoint(self):
        assert abs(rescale(1.2 * math.exp(1.2)) - 0.5) < 1e-12

    def test_at_zero(self):
        # closed form: 1 - 1/(1 + exp(1.2 e^1.2 / 1.44))
        expect = 1.0 - 1.0 / (1.0 + math.exp(1.2 * math.exp(1.2) / 1.44))
        assert abs(rescale(0.0) - expect) < 1e-12
        assert abs(rescale(0.0) - 0.9409) < 5e-5

    def test_limit_and_monotone(self):
        assert rescale(1e6) < 1e-12
        ds = np.linspace(0, 20, 50)
        vals = [rescale(float(d)) for d in ds]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert all(0 < v < 1 for v in vals)

    def test_tensor_matches_float(self):
        t = rescale(Tensor(2.5))
        assert abs(t.item() - rescale(2.5)) < 1e-12


class TestFeatureDistance:
    def test_identical_features_cosine_one(self):
        f = leaf((4, 3, 3), seed=1)
        d = feature_distance(f, Tensor(f.data), alpha=1.0, beta=0.0)
        assert abs(d.item() - 1.0) < 1e-12

    def test_orthogonal_everywhere_cosine_zero(self):
        fa = np.zeros((2, 2, 2))
        fs = np.zeros((2, 2, 2))
        fa[0] = 1.0
        fs[1] = 1.0
        d = feature_distance(Tensor(fa), Tensor(fs), alpha=1.0, beta=0.0)
        assert abs(d.item()) < 1e-12

    def test_half_cosine_squared(self):
        fa = np.array([1.0, 1.0]).reshape(2, 1, 1) / math.sqrt(2.0)
        fs = np.array([1.0, 0.0]).reshape(2, 1, 1)
        d = feature_distance(Tensor(fa), Tensor(fs), alpha=1.0, beta=0.0)
        assert abs(d.item() - 0.5) < 1e-12

    def test_zero_norm_guarded(self):
        d = feature_distance(Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((2, 2, 2))),
                             alpha=1.0, beta=1.0)
        assert np.isfinite(d.item())

    def test_shape_contract(self):
        with pytest.raises(ShapeError):
            feature_distance(leaf((2, 2, 2)), leaf((3, 2, 2)), 0.3, 0.1)


class TestFdd:
    def test_zero_weights(self):
        taps = [leaf((2, 4, 4), seed=2)]
        assert fdd(taps, taps, [0.0], 0.3, 0.1).item() == 0.0

    def test_identical_single_level(self):
        f = leaf((3, 4, 4), seed=3)
        val = fdd([f], [Tensor(f.data)], [1.0], 0.3, 0.1).item()
        assert abs(val - (0.3 * 1.0 + 0.1 * rescale(0.0))) < 1e-12

    def test_gradient_check(self):
        fs = Tensor(rand((3, 8, 8), seed=4))

        def fn(t):
            return fdd([t], [fs], [1.0], 0.3, 0.1)

        assert finite_diff_check(fn, leaf((3, 8, 8), seed=5)) < 1e-4

    def test_length_contract(self):
        with pytest.raises(ShapeError):
            fdd([leaf((2, 2, 2))], [], [1.0], 0.3, 0.1)

    def test_gradient_step_decreases(self):
        fa = leaf((3, 6, 6), seed=6)
        fs = Tensor(rand((3, 6, 6), seed=7))
        loss = fdd([fa], [fs], [1.0], 0.3, 0.1)
        backward(loss)
        fa2 = Tensor(fa.data - 1e-3 * fa.grad)
        after = fdd([fa2], [fs], [1.0], 0.3, 0.1)
        assert after.item() < loss.item()


class TestFdc:
    def test_identical_taps_zero(self):
        f = leaf((3, 4, 4), seed=8)
        val = fdc([f], [Tensor(f.data)], [f], [Tensor(f.data)], [1.0], 1.0, 0.0)
        assert abs(val.item()) < 1e-12

    def test_gamma_zero(self):
        f = leaf((3, 4, 4), seed=9)
        g = leaf((3, 4, 4), seed=10)
        assert fdc([f], [g], [f], [g], [0.0], 0.1, 0.9).item() == 0.0

    def test_gradient_check(self):
        real_a = Tensor(rand((2, 6, 6), seed=11))
        real_s = Tensor(rand((2, 6, 6), seed=12))
        ps = Tensor(rand((2, 6, 6), seed=13))

        def fn(t):
            return fdc([t], [real_a], [ps], [real_s], [1.0], 0.1, 0.9)

        assert finite_diff_check(fn, leaf((2, 6, 6), seed=14)) < 1e-4


class TestSsim:
    def test_self_similarity(self):
        x = leaf((3, 12, 12), seed=15)
        assert ssim(x, Tensor(x.data)).item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_brute_force(self):
        x = rand((3, 14, 13), seed=16, lo=0.0, hi=1.0)
        y = rand((3, 14, 13), seed=17, lo=0.0, hi=1.0)
        ours = ssim(Tensor(x), Tensor(y)).item()
        assert ours == pytest.approx(ssim_brute(x, y), abs=1e-10)

    def test_checkerboard_inversion_negative(self):
        yy, xx = np.mgrid[0:12, 0:12]
        board = ((yy + xx) % 2).astype(np.float64)[None].repeat(1, axis=0)
        x, y = board, 1.0 - board
        val = ssim(Tensor(x), Tensor(y)).item()
        assert val < 0
        assert val == pytest.approx(ssim_brute(x, y), abs=1e-10)

    def test_symmetry(self):
        x = rand((1, 11, 11), seed=18)
        y = rand((1, 11, 11), seed=19)
        a = ssim(Tensor(x), Tensor(y)).item()
        b = ssim(Tensor(y), Tensor(x)).item()
        assert abs(a - b) < 1e-12

    def test_small_image_window_shrinks(self):
        x = leaf((1, 5, 5), seed=20)
        assert ssim(x, Tensor(x.data)).item() == pytest.approx(1.0, abs=1e-12)


class TestReconstruction:
    def test_perfect_fit_zero(self):
        a = leaf((3, 8, 8), seed=21)
        s = leaf((3, 8, 8), seed=22)
        image = Tensor(a.data * s.data)
        val = reconstruction_loss(a, s, image, Tensor(a.data), Tensor(s.data))
        assert abs(val.item()) < 1e-10

    def test_constant_offset_l1(self):
        a_ref = rand((3, 8, 8), seed=23, lo=0.2, hi=0.7)
        a = Tensor(a_ref + 0.1, requires_grad=True)
        s = Tensor(rand((3, 8, 8), seed=24))
        image = Tensor(a.data * s.data)
        val = reconstruction_loss(a, s, image, Tensor(a_ref), Tensor(s.data),
                                  lambda_l1=1.0, lambda_ssim=0.0)
        # only |A - A_ref| and the (exact) cycle/shading terms contribute
        assert val.item() == pytest.approx(0.1, abs=1e-12)

    def test_gradient_check(self):
        s = Tensor(rand((3, 8, 8), seed=25))
        image = Tensor(rand((3, 8, 8), seed=26))
        a_ref = Tensor(rand((3, 8, 8), seed=27))
        s_ref = Tensor(rand((3, 8, 8), seed=28))

        def fn(t):
            return reconstruction_loss(t, s, image, a_ref, s_ref, 1.0, 0.5)

        assert finite_diff_check(fn, leaf((3, 8, 8), seed=29)) < 1e-4

    def test_sparse_mode_drops_albedo_terms(self):
        a = leaf((3, 8, 8), seed=30)
        s = leaf((3, 8, 8), seed=31)
        image = Tensor(a.data * s.data)
        val = reconstruction_loss(a, s, image, None, Tensor(s.data))
        assert abs(val.item()) < 1e-10


class TestGradientLoss:
    def test_exact_fit(self):
        a, s = leaf((3, 6, 6), seed=32), leaf((3, 6, 6), seed=33)
        assert gradient_loss(a, Tensor(a.data), s, Tensor(s.data)).item() == 0.0

    def test_translation_invariance(self):
        a_ref = rand((3, 6, 6), seed=34)
        a = Tensor(a_ref + 0.3)
        s = leaf((3, 6, 6), seed=35)
        val = gradient_loss(a, Tensor(a_ref), s, Tensor(s.data))
        assert abs(val.item()) < 1e-24

    def test_gradient_check(self):
        refs = [Tensor(rand((2, 8, 8), seed=s)) for s in (36, 37, 38)]

        def fn(t):
            return gradient_loss(t, refs[0], refs[1], refs[2])

        assert finite_diff_check(fn, leaf((2, 8, 8), seed=39)) < 1e-4


class TestTotals:
    def test_all_zero_weights(self):
        terms = [Tensor(3.0), Tensor(1.0), Tensor(2.0), Tensor(0.5)]
        assert total_loss_dense(*terms, lambdas=(0, 0, 0, 0)).item() == 0.0

    def test_selection(self):
        terms = [Tensor(3.0), Tensor(1.0), Tensor(2.0), Tensor(0.5)]
        assert total_loss_dense(*terms, lambdas=(1, 0, 0, 0)).item() == 3.0

    def test_linear_in_weights(self):
        terms = [Tensor(v) for v in (0.3, 0.7, 0.2, 0.9)]
        base = total_loss_dense(*terms, lambdas=(1.0, 1.5, 0.1, 1.0)).item()
        doubled = total_loss_dense(*terms, lambdas=(2.0, 3.0, 0.2, 2.0)).item()
        assert doubled == pytest.approx(2 * base, rel=1e-12)

    def test_sparse_reduces_to_dense_when_extras_off(self):
        w = LossWeights(lambda_ord=0.0, lambda_asmooth=0.0, lambda_ssmooth=0.0)
        terms = [Tensor(v) for v in (0.3, 0.7, 0.2, 0.9)]
        extras = [Tensor(5.0)] * 3
        sparse = total_loss_sparse(*terms, *extras, weights=w).item()
        dense = total_loss_dense(*terms, lambdas=w.lambdas).item()
        assert sparse == pytest.approx(dense, rel=1e-12)

    def test_smoothness_weight_sweep_grid(self):
        # the full sparse objective evaluates across the smoothness weight grid
        rng = np.random.default_rng(60)
        a = Tensor(rng.uniform(0.2, 0.9, (3, 8, 8)), requires_grad=True)
        s = Tensor(rng.uniform(0.2, 0.9, (3, 8, 8)), requires_grad=True)
        image = Tensor(a.data * s.data)
        guide = np.transpose(image.data, (1, 2, 0))
        js = JudgementSet(points=[(0.2, 0.2), (0.7, 0.7)], pairs=[(0, 1, 0, 1.0)])
        terms = (reconstruction_loss(a, s, image, None, Tensor(s.data)),
                 gradient_loss(a, None, s, Tensor(s.data)),
                 fdd([a], [s], [1.0], 0.3, 0.1),
                 fdc([a], [Tensor(a.data)], [s], [Tensor(s.data)], [1.0], 0.1, 0.9),
                 ordinal_loss(a, js),
                 albedo_smoothness(a, guide),
                 shading_smoothness(s))
        for lam_as in (0.0, 0.5, 4.0):
            for lam_ss in (0.0, 0.5, 4.0):
                w = LossWeights(lambda_asmooth=lam_as, lambda_ssmooth=lam_ss)
                val = total_loss_sparse(*terms, weights=w)
                assert np.isfinite(val.item()) and val.item() >= 0.0

    def test_default_weights(self):
        w = LossWeights()
        assert w.lambdas == (1.0, 1.5, 0.1, 1.0)
        assert w.omega == (0.01, 0.1, 0.5, 0.7, 1.0)
        assert (w.alpha_fdd, w.beta_fdd) == (0.3, 0.1)
        assert (w.alpha_fdc, w.beta_fdc) == (0.1, 0.9)
        assert (w.lambda_l1, w.lambda_ssim) == (30.0, 0.5)
        assert LossWeights.for_mode("sparse").gamma == (0, 0, 0, 1.0, 1.0)
        assert LossWeights.for_mode("dense").gamma == (1.0,) * 5

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_ord=-1.0)


class TestOrdinal:
    def test_equal_pair_no_relation(self):
        a = Tensor(np.full((3, 4, 4), 0.5), requires_grad=True)
        val = ordinal_error(a, (0.1, 0.1), (0.9, 0.9), 0, 1.0)
        assert val.item() == 0.0

    def test_margin_satisfied(self):
        a = np.full((3, 4, 4), 0.1)
        a[:, 0, 0] = 0.9  # point i much brighter than j
        val = ordinal_error(Tensor(a), (0.0, 0.0), (0.9, 0.9), 1, 1.0)
        assert val.item() == 0.0

    def test_hinge_at_equality(self):
        a = Tensor(np.full((3, 4, 4), 0.5))
        val = ordinal_error(a, (0.1, 0.1), (0.9, 0.9), 1, 2.0, margin=ORDINAL_MARGIN)
        assert val.item() == pytest.approx(2.0 * ORDINAL_MARGIN ** 2, rel=1e-12)

    def test_out_of_bounds_point(self):
        with pytest.raises(IndexError):
            ordinal_error(Tensor(np.ones((3, 4, 4))), (1.5, 0.0), (0.0, 0.0), 0, 1.0)

    def test_empty_set(self):
        assert ordinal_loss(Tensor(np.ones((3, 4, 4))), JudgementSet()).item() == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(40)
        a = rng.uniform(0.05, 1.0, (3, 9, 9))
        points = [(rng.uniform(), rng.uniform()) for _ in range(12)]
        pairs = [(int(rng.integers(12)), int(rng.integers(12)),
                  int(rng.integers(-1, 2)), float(rng.uniform(0, 2)))
                 for _ in range(30)]
        js = JudgementSet(points, pairs)
        ours = ordinal_loss(Tensor(a), js).item()
        assert ours == pytest.approx(ordinal_brute(a, js, ORDINAL_MARGIN), rel=1e-10)

    def test_gradient_check(self):
        js = JudgementSet(points=[(0.1, 0.2), (0.8, 0.7), (0.4, 0.9)],
                          pairs=[(0, 1, 1, 1.0), (1, 2, 0, 0.5), (2, 0, -1, 2.0)])
        assert finite_diff_check(lambda t: ordinal_loss(t, js),
                                 leaf((3, 8, 8), seed=41)) < 1e-4


class TestAlbedoSmoothness:
    def test_constant_albedo_zero(self):
        a = Tensor(np.full((3, 8, 8), 0.4), requires_grad=True)
        guide = rand((8, 8, 3), seed=42)
        assert albedo_smoothness(a, guide).item() == pytest.approx(0.0, abs=1e-20)

    def test_identical_features_weight_one(self):
        # uniform guide and a huge position bandwidth -> every pair weight is exp(0) = 1
        a = np.full((3, 2, 2), 0.5)
        a[:, 0, 0] = 0.5 * math.e
        guide = np.full((2, 2, 3), 0.5)
        val = albedo_smoothness(Tensor(a), guide, levels=1,
                                sigmas=(1e9, 0.1, 0.025)).item()
        # pixel (0,0) differs by |log| = 1 from its three neighbors, counted both ways
        assert val == pytest.approx(6.0 / 4.0, rel=1e-9)

    def test_hand_enumerated_2x2(self):
        rng = np.random.default_rng(43)
        a = rng.uniform(0.2, 0.9, (3, 2, 2))
        guide = rng.uniform(0.1, 0.9, (2, 2, 3))
        sigmas = (0.1, 0.1, 0.025)
        sp, si, sc = sigmas
        inv_var = np.array([1 / sp ** 2, 1 / sp ** 2, 1 / si ** 2, 1 / sc ** 2, 1 / sc ** 2])

        ints = guide.mean(axis=2)
        tot = np.maximum(guide.sum(axis=2), 1e-6)
        la = np.log(np.maximum(a.mean(axis=0), 1e-6))
        expect = 0.0
        for y in range(2):
            for x in range(2):
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if (dy, dx) == (0, 0) or not (0 <= ny < 2 and 0 <= nx < 2):
                            continue
                        fi = np.array([x / 1, y / 1, ints[y, x],
                                       guide[y, x, 0] / tot[y, x], guide[y, x, 1] / tot[y, x]])
                        fj = np.array([nx / 1, ny / 1, ints[ny, nx],
                                       guide[ny, nx, 0] / tot[ny, nx], guide[ny, nx, 1] / tot[ny, nx]])
                        v = math.exp(-0.5 * ((fi - fj) ** 2 @ inv_var))
                        expect += v * abs(la[y, x] - la[ny, nx])
        expect /= 4.0 * 1.0
        ours = albedo_smoothness(Tensor(a), guide, levels=1, sigmas=sigmas).item()
        assert ours == pytest.approx(expect, rel=1e-10)

    def test_gradient_check(self):
        guide = rand((8, 8, 3), seed=44)
        assert finite_diff_check(
            lambda t: albedo_smoothness(t, guide, levels=2),
            leaf((3, 8, 8), seed=45, lo=0.2, hi=0.9)) < 1e-4


class TestShadingSmoothness:
    def test_constant_shading_zero(self):
        s = Tensor(np.full((3, 8, 8), 0.6), requires_grad=True)
        assert shading_smoothness(s).item() == pytest.approx(0.0, abs=1e-12)

    def test_sinkhorn_row_col_sums(self):
        ys, xs = np.mgrid[0:16, 0:16]
        px, py = (xs / 15).ravel(), (ys / 15).ravel()
        d2 = (px[:, None] - px[None, :]) ** 2 + (py[:, None] - py[None, :]) ** 2
        w_hat = bistochastic(np.exp(-0.5 * d2 / 0.01))
        assert np.abs(w_hat.sum(axis=1) - 1.0).max() < 1e-3
        assert np.abs(w_hat.sum(axis=0) - 1.0).max() < 1e-3

    def test_two_pixel_toy(self):
        s = Tensor(np.array([math.e, 1.0]).reshape(1, 1, 2))
        val = shading_smoothness(s, sigma_p=1e6).item()
        assert val == pytest.approx(0.25, rel=1e-6)

    def test_gradient_check(self):
        assert finite_diff_check(
            lambda t: shading_smoothness(t),
            leaf((1, 6, 6), seed=46, lo=0.2, hi=0.9)) < 1e-4


class TestWarpAndTemporal:
    def test_zero_flow_identity(self):
        frame = leaf((3, 5, 5), seed=47)
        flow = FlowField(np.zeros((5, 5)), np.zeros((5, 5)), np.ones((5, 5), bool))
        out, ok = warp(frame, flow)
        np.testing.assert_array_equal(out.data, frame.data)
        assert ok.all()

    def test_integer_flow_shifts_ramp(self):
        ramp = np.tile(np.arange(6.0), (4, 1))[None]
        flow = FlowField(np.ones((4, 6)), np.zeros((4, 6)), np.ones((4, 6), bool))
        out, ok = warp(Tensor(ramp), flow)
        np.testing.assert_allclose(out.data[0, :, :-1], ramp[0, :, :-1] + 1.0)
        assert not ok[:, -1].any()

    def test_half_pixel_interpolation(self):
        ramp = np.tile(np.arange(6.0), (4, 1))[None]
        flow = FlowField(np.full((4, 6), 0.5), np.zeros((4, 6)), np.ones((4, 6), bool))
        out, _ = warp(Tensor(ramp), flow)
        np.testing.assert_allclose(out.data[0, :, :-1], ramp[0, :, :-1] + 0.5)

    def test_flow_invalidity_propagates(self):
        frame = leaf((1, 3, 3), seed=48)
        valid = np.ones((3, 3), bool)
        valid[1, 1] = False
        flow = FlowField(np.zeros((3, 3)), np.zeros((3, 3)), valid)
        _, ok = warp(frame, flow)
        assert not ok[1, 1] and ok.sum() == 8

    def test_static_scene_zero(self):
        a = leaf((3, 6, 6), seed=49)
        s = leaf((3, 6, 6), seed=50)
        flow = FlowField(np.zeros((6, 6)), np.zeros((6, 6)), np.ones((6, 6), bool))
        val = temporal_loss(a, Tensor(a.data), s, Tensor(s.data), flow,
                            np.ones((6, 6), bool))
        assert val.item() == 0.0

    def test_all_occluded_zero_with_warning(self):
        a = leaf((3, 4, 4), seed=51)
        flow = FlowField(np.zeros((4, 4)), np.zeros((4, 4)), np.ones((4, 4), bool))
        with pytest.warns(UserWarning):
            val = temporal_loss(a, a, a, a, flow, np.zeros((4, 4), bool))
        assert val.item() == 0.0

    def test_constant_offset_hand_sum(self):
        base = rand((3, 4, 8), seed=52, lo=0.2, hi=0.6)
        a_t = Tensor(base)
        a_next = Tensor(base + 0.2)
        s = Tensor(base)
        flow = FlowField(np.zeros((4, 8)), np.zeros((4, 8)), np.ones((4, 8), bool))
        omega = np.zeros((4, 8), bool)
        omega[:, :4] = True  # valid on the left half only
        val = temporal_loss(a_t, a_next, s, Tensor(s.data), flow, omega,
                            lambda_a=3.0, lambda_s=1.0)
        assert val.item() == pytest.approx(3.0 * 0.2, rel=1e-12)

    def test_gradient_check(self):
        base = rand((2, 6, 6), seed=53)
        flow = FlowField(rand((6, 6), 54, -0.8, 0.8), rand((6, 6), 55, -0.8, 0.8),
                         np.ones((6, 6), bool))
        omega = np.ones((6, 6), bool)
        a_t = Tensor(base)
        s_pair = (Tensor(rand((2, 6, 6), 56)), Tensor(rand((2, 6, 6), 57)))

        def fn(t):
            return temporal_loss(a_t, t, s_pair[0], s_pair[1], flow, omega)

        assert finite_diff_check(fn, leaf((2, 6, 6), seed=58)) < 1e-4
