"""Gradient checks against central finite differences (h=1e-5, float64),
closed-form loss values and the Adam update."""

import numpy as np
import pytest

from chunkloc import autodiff as ad
from conftest import assert_gradients_match

rng = np.random.default_rng(20240)

SMALL_CONV = ad.ConvSpec(in_rows=7, in_cols=5, channels=3, kernel_rows=3, kernel_cols=3)


def weighted_sum(t, w):
    """Reduce any tensor to a scalar through fixed weights."""
    return ad.mean_all(ad.mul(t, ad.Tensor(w)))


class TestGradients:
    """Every op, >=20 random small instances each."""

    @pytest.mark.parametrize("trial", range(20))
    def test_conv2d(self, trial):
        r = np.random.default_rng(trial)
        x = r.normal(size=(2, 7, 5))
        k = r.normal(size=(3, 3, 3))
        b = r.normal(size=3)
        w = r.normal(size=(2, 3, 3, 2))
        assert_gradients_match(
            lambda xs, ks, bs: weighted_sum(ad.conv2d(xs, ks, bs, SMALL_CONV), w), [x, k, b]
        )

    @pytest.mark.parametrize("trial", range(20))
    def test_conv2d_transpose(self, trial):
        r = np.random.default_rng(100 + trial)
        y = r.normal(size=(2, 3, 3, 2))
        k = r.normal(size=(3, 3, 3))
        b = r.normal(size=())
        w = r.normal(size=(2, 7, 5))
        assert_gradients_match(
            lambda ys, ks, bs: weighted_sum(ad.conv2d_transpose(ys, ks, bs, SMALL_CONV), w),
            [y, k, b],
        )

    def test_conv2d_full_geometry_sampled(self):
        # one full-size check; weights make the scalar sensitive to all outputs
        r = np.random.default_rng(7)
        x = r.normal(size=(1, 32, 24))
        k = r.normal(size=(40, 15, 15)) * 0.1
        b = r.normal(size=40)
        w = r.normal(size=(1, 40, 3, 2))

        def build(xs, ks, bs):
            return weighted_sum(ad.conv2d(xs, ks, bs), w)

        leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in (x, k, b)]
        build(*leaves).backward()
        h = 1e-5
        checks = [(0, (0, 13, 7)), (0, (0, 30, 20)), (1, (17, 3, 9)), (1, (39, 14, 14)), (2, (11,))]
        arrays = [x.copy(), k.copy(), b.copy()]
        for which, idx in checks:
            orig = arrays[which][idx]
            arrays[which][idx] = orig + h
            up = build(*[ad.Tensor(a) for a in arrays]).item()
            arrays[which][idx] = orig - h
            down = build(*[ad.Tensor(a) for a in arrays]).item()
            arrays[which][idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = leaves[which].grad[idx]
            assert abs(analytic - numeric) <= 1e-7 + 1e-4 * max(abs(analytic), abs(numeric))

    @pytest.mark.parametrize("trial", range(20))
    def test_linear(self, trial):
        r = np.random.default_rng(200 + trial)
        x, wgt, b = r.normal(size=(3, 4)), r.normal(size=(4, 6)), r.normal(size=6)
        w = r.normal(size=(3, 6))
        assert_gradients_match(lambda a, c, d: weighted_sum(ad.linear(a, c, d), w), [x, wgt, b])

    @pytest.mark.parametrize("trial", range(20))
    def test_softmax_rows(self, trial):
        r = np.random.default_rng(300 + trial)
        m = r.normal(size=(4, 5))
        w = r.normal(size=(4, 5))
        tau = float(r.uniform(0.2, 3.0))
        assert_gradients_match(lambda ms: weighted_sum(ad.softmax_rows(ms, tau), w), [m])

    @pytest.mark.parametrize("trial", range(20))
    def test_masked_linear(self, trial):
        r = np.random.default_rng(400 + trial)
        x = r.normal(size=(2, 6))
        wgt = r.normal(size=(6, 10))
        b = r.normal(size=10)
        m = r.normal(size=(6, 5))
        wmu = r.normal(size=(2, 5))
        wlv = r.normal(size=(2, 5))

        def build(xs, ws, bs, ms):
            mu, lv = ad.masked_linear(xs, ws, bs, ms, temperature=0.7, n_units=5)
            return ad.add(weighted_sum(mu, wmu), weighted_sum(lv, wlv))

        assert_gradients_match(build, [x, wgt, b, m])

    @pytest.mark.parametrize("trial", range(20))
    def test_reparam_and_kl(self, trial):
        r = np.random.default_rng(500 + trial)
        mu = r.normal(size=(3, 5))
        lv = r.normal(size=(3, 5)) * 0.5
        noise = r.normal(size=(3, 5))
        w = r.normal(size=(3, 5))

        def build(ms, ls):
            z = ad.reparam_sample(ms, ls, noise)
            return ad.add(weighted_sum(z, w), ad.mean_all(ad.kl_standard_normal(ms, ls)))

        assert_gradients_match(build, [mu, lv])

    @pytest.mark.parametrize("trial", range(20))
    def test_cosine(self, trial):
        r = np.random.default_rng(600 + trial)
        a = r.normal(size=(3, 8))
        b = r.normal(size=(3, 8))
        w = r.normal(size=3)
        assert_gradients_match(lambda xs, ys: weighted_sum(ad.cosine(xs, ys), w), [a, b])

    @pytest.mark.parametrize("trial", range(20))
    def test_maxmargin(self, trial):
        r = np.random.default_rng(700 + trial)
        sc = r.normal(size=4)
        se = r.normal(size=(4, 6))
        # keep the hinge away from its kink so finite differences are clean
        t = 1 - sc + se.mean(axis=1)
        sc = sc - np.where(np.abs(t) < 0.05, 0.1, 0.0)
        w = r.normal(size=4)
        assert_gradients_match(lambda a, b: weighted_sum(ad.maxmargin_loss(a, b), w), [sc, se])

    @pytest.mark.parametrize("trial", range(20))
    def test_pointwise_and_shape_ops(self, trial):
        r = np.random.default_rng(800 + trial)
        x = r.normal(size=(2, 6))
        y = r.normal(size=(2, 6))
        w = r.normal(size=(2, 2, 3))
        w2 = r.normal(size=(2, 12))

        def build(a, b):
            s = ad.tanh(ad.add(ad.mul(a, b), ad.scale(a, 0.5)))
            e = ad.exp(ad.scale(b, 0.3))
            summed = ad.sum_axis(ad.mul(s, e), 1)
            part1 = weighted_sum(ad.reshape(s, (2, 2, 3)), w)
            part2 = weighted_sum(ad.concat_rows([s, e]), w2)
            return ad.add(ad.add(part1, part2), ad.mean_all(summed))

        assert_gradients_match(build, [x, y])


class TestConvContract:
    def test_window_sums_on_ones(self):
        out = ad.conv2d(
            ad.Tensor(np.ones((1, 32, 24))),
            ad.Tensor(np.ones((40, 15, 15))),
            ad.Tensor(np.zeros(40)),
        )
        assert np.allclose(out.data[0, 0].ravel(), [225, 135, 225, 135, 30, 18])

    def test_zero_input_gives_bias(self):
        bias = np.arange(40, dtype=np.float64)
        out = ad.conv2d(
            ad.Tensor(np.zeros((1, 32, 24))), ad.Tensor(rng.normal(size=(40, 15, 15))), ad.Tensor(bias)
        )
        assert np.allclose(out.data[0], bias[:, None, None] * np.ones((40, 3, 2)))

    def test_node_count(self):
        assert ad.ConvSpec().nodes == 240

    def test_region_geometry(self):
        spec = ad.ConvSpec()
        assert [spec.region_shape(r) for r in range(6)] == [
            (15, 15), (15, 9), (15, 15), (15, 9), (2, 15), (2, 9),
        ]
        assert spec.padded == (45, 30)
        assert spec.grid == (3, 2)

    def test_linearity(self):
        k = ad.Tensor(rng.normal(size=(40, 15, 15)))
        zero_b = ad.Tensor(np.zeros(40))
        x, y = rng.normal(size=(2, 1, 32, 24))
        a, b = 0.7, -1.3
        lhs = ad.conv2d(ad.Tensor(a * x + b * y), k, zero_b).data
        rhs = a * ad.conv2d(ad.Tensor(x), k, zero_b).data + b * ad.conv2d(ad.Tensor(y), k, zero_b).data
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_adjoint_property(self):
        spec = ad.ConvSpec()
        for trial in range(5):
            r = np.random.default_rng(trial)
            x = r.normal(size=(1, 32, 24))
            y = r.normal(size=(1, 40, 3, 2))
            k = ad.Tensor(r.normal(size=(40, 15, 15)))
            cx = ad.conv2d(ad.Tensor(x), k, ad.Tensor(np.zeros(40)), spec).data
            cty = ad.conv2d_transpose(ad.Tensor(y), k, ad.Tensor(np.zeros(())), spec).data
            assert abs((cx * y).sum() - (x * cty).sum()) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.conv2d(ad.Tensor(np.zeros((1, 24, 32))), ad.Tensor(np.zeros((40, 15, 15))), ad.Tensor(np.zeros(40)))


class TestMaskOps:
    def test_uniform_logits_give_uniform_factors(self):
        f = ad.softmax_rows(ad.Tensor(np.zeros((240, 5))), 1.0)
        assert np.allclose(f.data, 0.2, atol=1e-15)

    def test_softmax_example_value(self):
        f = ad.softmax_rows(ad.Tensor(np.array([[2.0, 0, 0, 0, 0]])), 1.0)
        e2 = np.exp(2.0)
        expected = np.array([e2, 1, 1, 1, 1]) / (e2 + 4)
        assert np.allclose(f.data[0], expected, atol=1e-12)
        assert abs(f.data[0, 0] - 0.6488) < 5e-5

    def test_low_temperature_near_one_hot(self):
        # rows are permutations of 0..4 (unit gaps), i.e. clearly distinct logits
        r = np.random.default_rng(0)
        logits = np.stack([r.permutation(5).astype(float) for _ in range(50)])
        f = ad.softmax_rows(ad.Tensor(logits), 0.01)
        assert f.data.max(axis=1).min() > 1 - 1e-6

    def test_rows_sum_to_one(self):
        for tau in (0.01, 0.5, 1.0, 10.0):
            f = ad.softmax_rows(ad.Tensor(rng.normal(size=(240, 5))), tau)
            assert np.allclose(f.data.sum(axis=1), 1.0, atol=1e-12)
            assert (f.data > 0).all()

    def test_nonpositive_temperature(self):
        with pytest.raises(ValueError):
            ad.softmax_rows(ad.Tensor(np.zeros((2, 5))), 0.0)

    def test_harden_partitions_nodes(self):
        for trial in range(5):
            m = np.random.default_rng(trial).normal(size=(240, 5))
            assign = ad.harden_mask(m)
            sets = [set(np.nonzero(assign == k)[0]) for k in range(5)]
            assert sum(len(s) for s in sets) == 240
            assert set().union(*sets) == set(range(240))

    def test_harden_tie_break_lowest_index(self):
        m = np.array([[1.0, 1.0, 0.0, 0.0, 0.0]])
        assert ad.harden_mask(m)[0] == 0

    def test_harden_agrees_with_low_temperature_softmax(self):
        m = np.random.default_rng(3).normal(size=(240, 5))
        assign = ad.harden_mask(m)
        f = ad.softmax_rows(ad.Tensor(m), 0.01).data
        for node in range(240):
            assert np.argmax(f[node]) == assign[node]
            assert all(f[node, assign[node]] > f[node, k] for k in range(5) if k != assign[node])


class TestSamplingAndLosses:
    def test_reparam_zero_noise(self):
        mu = ad.Tensor(rng.normal(size=(2, 5)))
        z = ad.reparam_sample(mu, ad.Tensor(np.zeros((2, 5))), np.zeros((2, 5)))
        assert np.array_equal(z.data, mu.data)

    def test_reparam_unit_variance_shift(self):
        mu = ad.Tensor(rng.normal(size=(1, 5)))
        z = ad.reparam_sample(mu, ad.Tensor(np.zeros((1, 5))), np.ones((1, 5)))
        assert np.allclose(z.data, mu.data + 1.0, atol=1e-15)

    def test_reparam_empirical_std(self):
        n = 100_000
        noise = np.random.default_rng(0).standard_normal((n, 1))
        z = ad.reparam_sample(
            ad.Tensor(np.zeros((n, 1))), ad.Tensor(np.full((n, 1), np.log(4.0))), noise
        )
        assert abs(z.data.std() - 2.0) / 2.0 < 0.02

    def test_kl_zero_at_prior(self):
        out = ad.kl_standard_normal(ad.Tensor(np.zeros((1, 5))), ad.Tensor(np.zeros((1, 5))))
        assert out.data[0] == 0.0

    def test_kl_unit_mean(self):
        mu = np.zeros((1, 5)); mu[0, 0] = 1.0
        out = ad.kl_standard_normal(ad.Tensor(mu), ad.Tensor(np.zeros((1, 5))))
        assert abs(out.data[0] - 0.5) < 1e-12

    def test_kl_unit_logvar(self):
        lv = np.zeros((1, 5)); lv[0, 0] = 1.0
        out = ad.kl_standard_normal(ad.Tensor(np.zeros((1, 5))), ad.Tensor(lv))
        assert abs(out.data[0] - (np.e - 2) / 2) < 1e-12

    def test_maxmargin_perfect_separation(self):
        out = ad.maxmargin_loss(ad.Tensor(np.array([1.0])), ad.Tensor(np.zeros((1, 6))))
        assert out.data[0] == 0.0

    def test_maxmargin_equal_scores(self):
        out = ad.maxmargin_loss(ad.Tensor(np.array([0.4])), ad.Tensor(np.full((1, 6), 0.4)))
        assert abs(out.data[0] - 1.0) < 1e-12

    def test_maxmargin_arithmetic_example(self):
        out = ad.maxmargin_loss(ad.Tensor(np.array([0.5])), ad.Tensor(np.full((1, 6), 0.3)))
        assert abs(out.data[0] - 0.8) < 1e-12

    def test_maxmargin_inactive_hinge_zero_subgradient(self):
        sc = ad.Tensor(np.array([5.0]), requires_grad=True)
        se = ad.Tensor(np.zeros((1, 6)), requires_grad=True)
        ad.mean_all(ad.maxmargin_loss(sc, se)).backward()
        assert np.all(sc.grad == 0.0) and np.all(se.grad == 0.0)

    def test_cosine_identities(self):
        x = rng.normal(size=(1, 10))
        assert abs(ad.cosine(ad.Tensor(x), ad.Tensor(x)).data[0] - 1.0) < 1e-12
        assert abs(ad.cosine(ad.Tensor(x), ad.Tensor(-x)).data[0] + 1.0) < 1e-12
        e1, e2 = np.zeros((1, 4)), np.zeros((1, 4))
        e1[0, 0] = 1.0
        e2[0, 1] = 1.0
        assert ad.cosine(ad.Tensor(e1), ad.Tensor(e2)).data[0] == 0.0

    def test_cosine_zero_norm_warns(self):
        with pytest.warns(RuntimeWarning):
            out = ad.cosine(ad.Tensor(np.zeros((1, 4))), ad.Tensor(np.ones((1, 4))))
        assert out.data[0] == 0.0


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = rng.normal(size=(3, 3))
        new, _ = ad.adam_step([p.copy()], [np.zeros((3, 3))], {})
        assert np.array_equal(new[0], p)

    def test_first_step_is_signed_lr(self):
        g = np.array([0.3, -2.0, 7.5, -0.001])
        p = np.zeros(4)
        new, _ = ad.adam_step([p], [g], {}, lr=1e-3)
        assert np.allclose(new[0], -1e-3 * np.sign(g), rtol=1e-4)

    def test_bias_corrected_two_steps_deterministic(self):
        g = rng.normal(size=5)
        pa, sa = ad.adam_step([np.zeros(5)], [g], {}, lr=0.01)
        pa, sa = ad.adam_step(pa, [g], sa, lr=0.01)
        pb, sb = ad.adam_step([np.zeros(5)], [g], {}, lr=0.01)
        pb, sb = ad.adam_step(pb, [g], sb, lr=0.01)
        assert np.array_equal(pa[0], pb[0])

    def test_matches_reference_formula(self):
        # independent recomputation of the bias-corrected update
        r = np.random.default_rng(1)
        p = r.normal(size=4)
        state = {}
        params = [p.copy()]
        m = np.zeros(4); v = np.zeros(4)
        lr, b1, b2, eps = 2e-3, 0.9, 0.999, 1e-8
        expected = p.copy()
        for t in range(1, 4):
            g = r.normal(size=4)
            params, state = ad.adam_step(params, [g], state, lr, b1, b2, eps)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            expected = expected - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            assert np.allclose(params[0], expected, atol=1e-15)
