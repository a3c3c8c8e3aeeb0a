import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qrfvimp.forest import Dataset, ForestConfig, fit_forest
from qrfvimp.quantile import ForestSummary
from qrfvimp.simlab.dgp import DGPSpec
from qrfvimp.simlab.oracles import oracle_vi
from qrfvimp.vimp import (
    CrossFitSplit,
    FeatureSubset,
    FoldLeakageError,
    bias_constant_estimate,
    bias_constant_from_summaries,
    bias_corrected_vi,
    cross_fit_split,
    fit_restricted,
    run_vimp,
    vi_confidence_interval,
    vi_estimate,
    vi_variance,
)

from .conftest import make_linear

pytestmark = pytest.mark.filterwarnings("ignore:num_trees=.*:RuntimeWarning")


def _folds(data, seed=0):
    split = cross_fit_split(data, np.random.default_rng(seed))
    return data.subset(split.train_rows), data.subset(split.eval_rows)


class TestFeatureSubset:

    def test_parse_one_based(self):
        assert FeatureSubset.parse("3,1").indices == (0, 2)
        assert FeatureSubset.parse("").indices == ()

    def test_duplicates(self):
        with pytest.raises(ValueError):
            FeatureSubset((1, 1))

    def test_validate(self):
        with pytest.raises(ValueError):
            FeatureSubset((2,)).validate(2)

    def test_complement(self):
        assert FeatureSubset((1,)).complement(3).tolist() == [0, 2]


class TestCrossFitSplit:

    def test_four_rows(self, rng):
        sp = cross_fit_split(4, rng)
        assert len(sp.train_rows) == len(sp.eval_rows) == 2
        assert not set(sp.train_rows) & set(sp.eval_rows)

    def test_reproducible(self):
        a = cross_fit_split(100, np.random.default_rng(3))
        b = cross_fit_split(100, np.random.default_rng(3))
        assert np.array_equal(a.eval_rows, b.eval_rows)

    def test_symmetry(self, rng):
        counts = np.zeros(6)
        for _ in range(10_000):
            counts[cross_fit_split(6, rng).eval_rows] += 1
        np.testing.assert_allclose(counts / 10_000, 0.5, atol=0.02)

    def test_too_small(self, rng):
        with pytest.raises(ValueError):
            cross_fit_split(3, rng)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            CrossFitSplit(np.array([0, 1]), np.array([1, 2]))


class TestFitRestricted:
    cfg = ForestConfig(num_trees=40, subsample_size=100, min_leaf_est=3, seed=2)

    def test_empty_subset_matches_full(self):
        data = make_linear(200, seed=1)
        assert fit_restricted(data, (), self.cfg).same_structure(fit_forest(data, self.cfg))

    def test_only_remaining_feature_used(self):
        data = make_linear(200, coef=(2.0, 2.0), seed=1)
        m = fit_restricted(data, (1,), self.cfg)
        splits = m.feature[m.feature >= 0]
        assert splits.size and set(splits.tolist()) == {0}

    def test_invariant_to_dropped_feature(self, rng):
        data = make_linear(200, coef=(2.0, 2.0), seed=1)
        m = fit_restricted(data, (1,), self.cfg)
        from qrfvimp.quantile import predict_quantile
        X = rng.uniform(size=(30, 2))
        X2 = X.copy()
        X2[:, 1] = rng.uniform(size=30) * 100
        np.testing.assert_array_equal(predict_quantile(m, data, X), predict_quantile(m, data, X2))

    def test_all_features_rejected(self):
        with pytest.raises(ValueError):
            fit_restricted(make_linear(50), (0, 1), self.cfg)


class TestEstimate:
    cfg = ForestConfig(num_trees=100, subsample_size=100, min_leaf_est=3, seed=5)

    def test_identical_models_zero(self):
        train, ev = _folds(make_linear(400, seed=2))
        m = fit_forest(train, self.cfg)
        v, losses = vi_estimate(train, ev, m, fit_restricted(train, (), self.cfg))
        assert v == 0.0 and np.all(losses == 0.0)
        assert bias_constant_estimate(train, ev, m, m) == 0.0

    def test_swap_flips_sign(self):
        train, ev = _folds(make_linear(400, coef=(2.0,), seed=2))
        full = fit_forest(train, self.cfg)
        restr = fit_restricted(train, (0,), self.cfg)
        v1, _ = vi_estimate(train, ev, full, restr)
        v2, _ = vi_estimate(train, ev, restr, full)
        assert v1 == -v2 and v1 != 0

    def test_translation_invariance(self):
        data = make_linear(400, coef=(2.0,), seed=2)
        shifted = data.with_y(data.y + 7.0)
        split = cross_fit_split(data, np.random.default_rng(0))
        a = run_vimp(data, (0,), self.cfg, split=split)
        b = run_vimp(shifted, (0,), self.cfg, split=split)
        assert b.v_hat == pytest.approx(a.v_hat, abs=1e-10)

    def test_leakage_model_on_other_data(self):
        data = make_linear(400, seed=2)
        train, ev = _folds(data)
        m = fit_forest(data, self.cfg)
        with pytest.raises(FoldLeakageError):
            vi_estimate(train, ev, m, m)

    def test_leakage_overlapping_rows(self):
        data = make_linear(400, seed=2)
        train, _ = _folds(data)
        m = fit_forest(train, self.cfg)
        with pytest.raises(FoldLeakageError):
            vi_estimate(train, train.subset(np.arange(50)), m, m)


def _replicate(s_set, reps, n=4000, beta=0.7):
    out = []
    for r in range(reps):
        rng = np.random.default_rng([11, r])
        X = rng.uniform(size=(n, 2))
        data = Dataset(X, 2 * X[:, 0] + rng.standard_normal(n))
        cfg = ForestConfig(num_trees=300, beta=beta, min_leaf_est=3, seed=r)
        out.append(run_vimp(data, s_set, cfg))
    return out


class TestMonteCarlo:

    def test_noise_feature_near_zero(self):
        reps = _replicate((1,), 100)
        ok = [abs(r.v_hat) < 3 * r.sigma_s_hat / math.sqrt(r.n_eval) for r in reps]
        assert np.mean(ok) >= 0.9

    def test_signal_feature_positive(self):
        reps = _replicate((0,), 100)
        truth = oracle_vi(DGPSpec("linear_gaussian", (2.0, 0.0), 1.0), 0.5, (0,))
        v = np.array([r.v_hat for r in reps])
        assert np.mean(v > 0) >= 0.95
        assert abs(v.mean() - truth) < 0.1 * truth

    def test_bias_constant_tracks_scaled_error(self):
        n, beta = 4000, 0.7
        scaled, chats = [], []
        for r in range(200):
            rng = np.random.default_rng([12, r])
            X = rng.uniform(size=(n, 2))
            data = Dataset(X, 2 * X[:, 0] + rng.standard_normal(n))
            cfg = ForestConfig(num_trees=200, beta=beta, min_leaf_est=3, seed=r)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = run_vimp(data, (1,), cfg)
            scaled.append(rep.n_eval ** (1 - rep.beta_used) * rep.v_hat)
            chats.append(rep.c_hat)
        a, b = np.mean(scaled), np.mean(chats)
        assert np.sign(a) == np.sign(b)
        assert 0.5 <= a / b <= 2.0


class TestVariance:

    def test_constant(self):
        assert vi_variance([0.3] * 5) == 0.0

    def test_pair(self):
        assert vi_variance([0.0, 2.0]) == 2.0

    def test_too_few(self):
        with pytest.raises(ValueError):
            vi_variance([1.0])

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
    def test_matches_one_pass(self, xs):
        n = len(xs)
        mean = 0.0
        m2 = 0.0
        for k, x in enumerate(xs, 1):  # Welford
            d = x - mean
            mean += d / k
            m2 += d * (x - mean)
        assert vi_variance(xs) == pytest.approx(m2 / (n - 1), abs=1e-10, rel=1e-9)


class TestBiasCorrection:

    def test_formula_example(self):
        one = np.ones(3)
        full = ForestSummary(one, one, 0.5 * one, one, np.zeros(3, bool))
        restr = ForestSummary(one, one, 0.25 * one, one, np.zeros(3, bool))
        assert bias_constant_from_summaries(0.5, full, restr) == pytest.approx(0.25)

    def test_zero_constant(self):
        assert bias_corrected_vi(0.3, 0.0, 1000, 0.7) == 0.3

    def test_beta_one(self):
        assert bias_corrected_vi(0.3, 0.1, 1000, 1.0) == pytest.approx(0.2)

    def test_arithmetic(self):
        assert bias_corrected_vi(0.10, 0.25, 10_000, 0.7) == pytest.approx(0.08423, abs=1e-5)

    def test_interval_examples(self):
        assert vi_confidence_interval(0.2, 0.0, 50) == (0.2, 0.2)
        lo, hi = vi_confidence_interval(0.1, 1.0, 100, 0.95)
        assert lo == pytest.approx(0.1 - 0.195996, abs=1e-6)
        assert hi == pytest.approx(0.1 + 0.195996, abs=1e-6)

    @given(st.floats(-1, 1), st.floats(-1, 1), st.integers(10, 10**6), st.floats(0.51, 0.99))
    def test_correction_algebra(self, v, c, n, beta):
        assert bias_corrected_vi(v, c, n, beta) == pytest.approx(v - n ** (beta - 1) * c, abs=1e-12)


class TestReport:

    def test_fields_consistent(self):
        data = make_linear(600, coef=(2.0,), seed=8)
        cfg = ForestConfig(num_trees=100, beta=0.7, min_leaf_est=3, seed=1)
        rep = run_vimp(data, (0,), cfg, keep_losses=True)
        assert rep.n_eval == 300 and rep.n_train == 300
        assert rep.beta_used == 0.7
        assert rep.v_hat == pytest.approx(np.mean(rep.per_point_losses))
        assert rep.sigma_s_hat == pytest.approx(np.std(rep.per_point_losses, ddof=1))
        assert rep.v_tilde == pytest.approx(rep.v_hat - 300 ** (0.7 - 1) * rep.c_hat)
        half = 1.959963984540054 * rep.sigma_s_hat / math.sqrt(300)
        assert rep.ci_high - rep.v_hat == pytest.approx(half)
        assert rep.ci_tilde_low == pytest.approx(rep.v_tilde - half)
        assert "per_point_losses" not in rep.to_dict()

    def test_deterministic(self):
        data = make_linear(300, coef=(2.0,), seed=8)
        cfg = ForestConfig(num_trees=50, beta=0.7, min_leaf_est=3, seed=1)
        assert run_vimp(data, (0,), cfg).to_json() == run_vimp(data, (0,), cfg).to_json()

    def test_explicit_subsample_beta(self):
        data = make_linear(400, coef=(2.0,), seed=8)
        cfg = ForestConfig(num_trees=50, subsample_size=100, min_leaf_est=3)
        rep = run_vimp(data, (0,), cfg)
        assert rep.beta_used == pytest.approx(math.log(100) / math.log(200))

    def test_all_features_rejected(self):
        with pytest.raises(ValueError):
            run_vimp(make_linear(100), (0, 1), ForestConfig(num_trees=10))
