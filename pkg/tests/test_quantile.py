import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qrfvimp.forest import Dataset, ForestConfig, fit_forest, forest_weights
from qrfvimp.pinball import score
from qrfvimp.quantile import (
    DENSITY_FLOOR,
    conditional_density,
    default_bandwidth,
    interval_half_width,
    predict_quantile,
    predict_with_interval,
    summarize,
    variance_scaling,
    weighted_quantile,
)

from .conftest import make_linear
from .oracles import grid_argmin_quantile

pytestmark = pytest.mark.filterwarnings("ignore:num_trees=.*:RuntimeWarning")


class TestWeightedQuantile:

    def test_uniform_left_endpoint(self):
        assert weighted_quantile([1, 2, 3, 4], [0.25] * 4, 0.5) == 2.0

    @pytest.mark.parametrize("tau", [0.01, 0.5, 0.99])
    def test_single_value(self, tau):
        assert weighted_quantile([3.7], [1.0], tau) == 3.7

    def test_heavy_left_weight(self):
        assert weighted_quantile([0, 10], [0.9, 0.1], 0.5) == 0.0

    def test_unsorted_with_ties(self):
        assert weighted_quantile([3, 1, 3, 2], [1, 1, 1, 1], 0.6) == 3.0

    def test_zero_weights_ignored(self):
        assert weighted_quantile([-100, 5, 6], [0.0, 0.5, 0.5], 0.1) == 5.0

    def test_empty_support(self):
        with pytest.raises(ValueError):
            weighted_quantile([1.0, 2.0], [0.0, 0.0], 0.5)

    def test_matches_exact_grid_oracle(self, rng):
        for _ in range(2000):
            m = rng.integers(1, 13)
            y = rng.integers(-20, 21, size=m)
            w = rng.integers(1, 6, size=m)
            k = int(rng.integers(1, 8))
            assert weighted_quantile(y, w, k / 8) == grid_argmin_quantile(y, w, k)

    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(1e-3, 1.0)), min_size=1, max_size=15),
           st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_monotone_in_tau(self, pairs, t1, t2):
        vals, w = map(np.array, zip(*pairs))
        lo, hi = sorted((t1, t2))
        assert weighted_quantile(vals, w, lo) <= weighted_quantile(vals, w, hi)

    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(1e-3, 1.0)), min_size=1, max_size=15),
           st.floats(0.01, 0.99))
    def test_subgradient_optimality(self, pairs, tau):
        vals, w = map(np.array, zip(*pairs))
        w = w / w.sum()
        q = weighted_quantile(vals, w, tau)
        g = float(np.dot(w, score(vals - q, tau)))
        atom = w[vals == q].sum()  # equals max weight when responses are distinct
        assert -atom - 1e-12 <= g <= atom + 1e-12


@pytest.fixture(scope="module")
def model_and_data():
    data = make_linear(800, p=2, coef=(2.0,), seed=21)
    cfg = ForestConfig(num_trees=300, beta=0.6, min_leaf_est=3, seed=4)
    return fit_forest(data, cfg), data


class TestPredictQuantile:

    def test_constant_response(self, rng):
        data = Dataset(rng.uniform(size=(100, 2)), np.full(100, 2.5))
        m = fit_forest(data, ForestConfig(num_trees=50, subsample_size=40, min_leaf_est=2))
        np.testing.assert_array_equal(predict_quantile(m, data, rng.uniform(size=(10, 2))), 2.5)

    def test_single_leaf_empirical_quantile(self, rng):
        data = Dataset(rng.uniform(size=(30, 1)), rng.normal(size=30))
        m = fit_forest(data, ForestConfig(num_trees=1, subsample_size=20, min_leaf_est=10, tau=0.3))
        assert m.tree(0).n_leaves == 1
        es = m.halves()[1][0]
        ys = np.sort(data.y[es])
        assert predict_quantile(m, data, [0.5]) == ys[math.ceil(0.3 * len(ys)) - 1]

    def test_stored_responses(self, model_and_data, rng):
        m, data = model_and_data
        X = rng.uniform(size=(20, 2))
        np.testing.assert_array_equal(predict_quantile(m, None, X), predict_quantile(m, data, X))

    def test_foreign_data_rejected(self, model_and_data):
        m, data = model_and_data
        with pytest.raises(ValueError):
            predict_quantile(m, data.with_y(data.y + 1), [0.5, 0.5])

    def test_location_equivariance(self, model_and_data, rng):
        m, data = model_and_data
        shifted = data.with_y(data.y + 3.25)
        m2 = fit_forest(shifted, m.config)
        assert m.same_structure(m2)
        X = rng.uniform(size=(50, 2))
        diff = predict_quantile(m2, shifted, X) - predict_quantile(m, data, X)
        np.testing.assert_allclose(diff, 3.25, atol=1e-10)

    def test_orthogonality_bound(self, model_and_data, rng):
        m, data = model_and_data
        for x in rng.uniform(size=(100, 2)):
            w = forest_weights(m, x)
            q = weighted_quantile(data.y, w, m.tau)
            g = float(np.dot(w.weights, score(data.y[w.indices] - q, m.tau)))
            assert abs(g) <= w.weights.max() + 1e-12

    def test_consistency_in_n(self):
        probes = np.column_stack([np.linspace(0.1, 0.9, 10), np.full(10, 0.5)])
        truth = probes[:, 0]

        def rmse(n):
            errs = []
            for r in range(100):
                rng = np.random.default_rng([n, r])
                X = rng.uniform(size=(n, 2))
                data = Dataset(X, X[:, 0] + rng.standard_normal(n))
                cfg = ForestConfig(num_trees=100, beta=0.4, min_leaf_est=2, seed=r)
                errs.append(predict_quantile(fit_forest(data, cfg), data, probes) - truth)
            return np.sqrt(np.mean(np.square(errs)))

        assert rmse(4000) < rmse(1000)


class TestVarianceScaling:

    def test_uniform(self):
        assert variance_scaling(np.full(4, 0.25), 100, 10) == pytest.approx(10 / 4)

    def test_point_mass(self):
        assert variance_scaling(np.array([1.0]), 100, 10) == pytest.approx(10.0)

    def test_dense_oracle(self, model_and_data, rng):
        m, data = model_and_data
        s = m.subsample_size
        xs = rng.uniform(size=(20, 2))
        summ = summarize(m, data, xs)
        for x, eta in zip(xs, summ.eta_hat):
            dense = np.zeros(data.n)
            for tree in m.trees():
                members = tree.leaf_members[tree.apply(x)]
                dense[members] += 1.0 / len(members) / m.num_trees
            direct = data.n / s * float(np.sum(dense**2))
            assert variance_scaling((m, x), data.n, s) == pytest.approx(direct, abs=1e-12)
            assert eta == pytest.approx(direct, abs=1e-12)

    def test_stable_across_seeds(self):
        data = make_linear(500, p=2, coef=(1.0,), seed=30)
        x = np.array([0.4, 0.6])
        etas = []
        for seed in range(100):
            m = fit_forest(data, ForestConfig(num_trees=1000, beta=0.6, min_leaf_est=3, seed=seed))
            etas.append(variance_scaling((m, x), data.n, m.subsample_size))
        etas = np.array(etas)
        assert etas.min() > 0
        assert etas.std() / etas.mean() < 0.2


class TestDensity:

    def test_point_mass(self):
        assert conditional_density([1.5], [1.0], 1.5, 0.2) == pytest.approx(1 / (0.2 * math.sqrt(2 * math.pi)))

    def test_standard_normal(self, rng):
        y = rng.standard_normal(4000)
        w = np.full(4000, 1 / 4000)
        f = conditional_density(y, w, 0.0, default_bandwidth(y, w))
        assert abs(f / 0.39894 - 1) < 0.15

    def test_floor(self):
        assert conditional_density([50.0, 60.0], [0.5, 0.5], 0.0, 1.0) == DENSITY_FLOOR

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            conditional_density([1.0], [1.0], 0.0, 0.0)


class TestBandwidth:

    def test_unit_variance_uniform(self):
        vals = np.array([-1.0, 1.0] * 50)
        assert default_bandwidth(vals, np.full(100, 0.01)) == pytest.approx(1.06 * 100 ** -0.2)

    def test_point_mass_effective_size(self):
        vals = np.array([0.0, 3.0, 7.0])
        w = np.array([1.0, 0.0, 0.0])
        # zero-weight points drop out: one support point, degenerate spread
        assert default_bandwidth(vals, w) == 1e-3

    def test_meff_one(self):
        # m_eff = 1 needs a single support point; its spread is 0 -> fallback
        assert default_bandwidth([2.0], [1.0]) == 1e-3

    def test_constant_values(self):
        assert default_bandwidth(np.full(20, 4.0), np.full(20, 0.05)) == 1e-3

    def test_formula_with_unequal_weights(self):
        vals = np.array([0.0, 1.0, 2.0])
        w = np.array([0.5, 0.25, 0.25])
        mean = 0.75
        sd = math.sqrt(0.5 * mean**2 + 0.25 * 0.25**2 + 0.25 * 1.25**2)
        m_eff = 1 / (0.25 + 0.0625 + 0.0625)
        assert default_bandwidth(vals, w) == pytest.approx(1.06 * sd * m_eff**-0.2)


class TestInterval:

    def test_half_width(self):
        assert interval_half_width(1.0, 100, 1, 0.95) == pytest.approx(0.195996, abs=1e-6)

    def test_floor_width(self):
        # the density at a forest prediction never drops below the weight of
        # the atom at q_hat, so check the floored formula chain directly
        n, s = 2000, 20
        eta = n / s
        sigma2 = 0.25 * eta / DENSITY_FLOOR**2
        half = interval_half_width(sigma2, n, s, 0.95)
        expected = 2 * 1.959963984540054 * math.sqrt(s / n * 0.25 * (n / s) / 1e-8)
        assert 2 * half == pytest.approx(expected, rel=1e-12)
        assert math.isfinite(half)

    def test_batch_matches_single(self, model_and_data, rng):
        m, data = model_and_data
        xs = rng.uniform(size=(5, 2))
        batch = predict_with_interval(m, data, xs)
        for x, p in zip(xs, batch):
            assert predict_with_interval(m, data, x) == p
            assert p.ci_low < p.q_hat < p.ci_high

    def test_bad_level(self, model_and_data):
        with pytest.raises(ValueError):
            predict_with_interval(model_and_data[0], None, [0.5, 0.5], level=1.0)
