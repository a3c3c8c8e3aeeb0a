"""
Cross-fitted quantile variable importance with inference.

The importance of a feature subset ``S`` is the increase in pinball risk
when ``S`` is dropped. Both nuisance forests are fitted on a training fold
and scored on a disjoint evaluation fold. Intervals use the sample variance
of the per-row loss differences; for large subsamples an analytic bias term
``n^(beta - 1) * C_hat`` can be subtracted before forming the interval.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .forest.data import Dataset
from .forest.model import ForestConfig, ForestModel, fit_forest
from .pinball import check_tau, pinball_loss
from .quantile import ForestSummary, predict_quantile, summarize

logger = logging.getLogger(__name__)

__all__ = [
    "FeatureSubset",
    "CrossFitSplit",
    "VimpReport",
    "FoldLeakageError",
    "cross_fit_split",
    "fit_restricted",
    "vi_estimate",
    "vi_variance",
    "bias_constant_estimate",
    "bias_constant_from_summaries",
    "bias_corrected_vi",
    "vi_confidence_interval",
    "run_vimp",
]


class FoldLeakageError(ValueError):
    """Raised when nuisance models were not fitted on the training fold alone."""


@dataclass(frozen=True)
class FeatureSubset:
    """Sorted, duplicate-free 0-based feature indices."""

    indices: tuple = ()

    def __post_init__(self):
        idx = [int(i) for i in self.indices]
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate feature indices")
        if any(i < 0 for i in idx):
            raise ValueError("negative feature index")
        object.__setattr__(self, "indices", tuple(sorted(idx)))

    @classmethod
    def parse(cls, text: str, one_based: bool = True) -> "FeatureSubset":
        """Parse ``"1,3"``; empty text gives the empty subset."""
        text = (text or "").strip()
        if not text:
            return cls(())
        vals = [int(t) for t in text.split(",") if t.strip()]
        return cls(tuple(v - 1 for v in vals) if one_based else tuple(vals))

    def validate(self, p: int) -> "FeatureSubset":
        if any(i >= p for i in self.indices):
            raise ValueError(f"feature index out of range for p={p}")
        return self

    def complement(self, p: int) -> np.ndarray:
        return np.array([j for j in range(p) if j not in self.indices], dtype=np.int64)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


@dataclass(frozen=True)
class CrossFitSplit:
    train_rows: np.ndarray
    eval_rows: np.ndarray

    def __post_init__(self):
        if np.intersect1d(self.train_rows, self.eval_rows).size:
            raise ValueError("folds overlap")


def cross_fit_split(data: Dataset | int, rng: np.random.Generator) -> CrossFitSplit:
    """Uniform random split into a training fold and an evaluation fold of size n // 2."""
    n = data if isinstance(data, int) else data.n
    if n < 4:
        raise ValueError("cross-fitting needs at least 4 rows")
    perm = rng.permutation(n)
    n_eval = n // 2
    return CrossFitSplit(np.sort(perm[n_eval:]), np.sort(perm[:n_eval]))


def fit_restricted(data: Dataset, s_set, config: ForestConfig) -> ForestModel:
    """Forest that never splits on the features in ``s_set``."""
    s_set = s_set if isinstance(s_set, FeatureSubset) else FeatureSubset(tuple(s_set))
    s_set.validate(data.p)
    keep = s_set.complement(data.p)
    if keep.size == 0:
        raise ValueError("removing every feature leaves nothing to fit")
    return fit_forest(data, config, columns=keep)


def _check_folds(train: Dataset, eval_data: Dataset, *models: ForestModel):
    fp = train.fingerprint()
    for m in models:
        if m.fingerprint != fp:
            raise FoldLeakageError("model was not fitted on the supplied training fold")
    if train.row_digests() & eval_data.row_digests():
        raise FoldLeakageError("evaluation rows overlap the training fold")


def vi_estimate(train: Dataset, eval_data: Dataset, full: ForestModel,
                restricted: ForestModel, tau=None):
    """
    Cross-fitted importance estimate.

    Returns
    -------
    v_hat : float
        Mean over evaluation rows of
        ``rho(Y - q_restricted(X)) - rho(Y - q_full(X))``.
    losses : ndarray
        The per-row differences.
    """
    _check_folds(train, eval_data, full, restricted)
    tau = full.tau if tau is None else check_tau(tau)
    q_full = predict_quantile(full, train, eval_data.x)
    q_restr = predict_quantile(restricted, train, eval_data.x)
    losses = _loss_differences(eval_data.y, q_full, q_restr, tau)
    return float(losses.mean()), losses


def _loss_differences(y, q_full, q_restr, tau):
    return pinball_loss(y - q_restr, tau) - pinball_loss(y - q_full, tau)


def vi_variance(losses) -> float:
    """Sample variance (divisor n - 1) of the per-row loss differences."""
    losses = np.asarray(losses, dtype=float)
    if losses.size < 2:
        raise ValueError("variance needs at least 2 points")
    return float(np.var(losses, ddof=1))


def bias_constant_from_summaries(tau, full: ForestSummary, restr: ForestSummary) -> float:
    """``tau (1 - tau) / 2`` times the mean of ``eta_r / f_r - eta / f``."""
    terms = restr.eta_hat / restr.f_hat - full.eta_hat / full.f_hat
    return float(tau * (1.0 - tau) / 2.0 * terms.mean())


def _warn_floor(full: ForestSummary, restr: ForestSummary):
    frac = max(full.floored.mean(), restr.floored.mean())
    if frac > 0.5:
        warnings.warn(f"density floor engaged on {frac:.0%} of evaluation points; "
                      "the bias constant is unreliable", RuntimeWarning, stacklevel=3)
    return float(frac)


def bias_constant_estimate(train: Dataset, eval_data: Dataset, full: ForestModel,
                           restricted: ForestModel, tau=None,
                           bandwidths=None) -> float:
    """
    Plug-in bias constant
    ``tau (1 - tau) / (2 n) * sum_i (eta_r / f_r - eta / f)(X_i)``.

    ``eta`` and ``f`` come from each forest's own weights, with ``f``
    evaluated at that forest's prediction. ``bandwidths`` may fix the
    (full, restricted) kernel bandwidths; by default each query uses the
    rule-of-thumb bandwidth.
    """
    _check_folds(train, eval_data, full, restricted)
    tau = full.tau if tau is None else check_tau(tau)
    h_full, h_restr = (None, None) if bandwidths is None else bandwidths
    s_full = summarize(full, train, eval_data.x, bandwidth=h_full)
    s_restr = summarize(restricted, train, eval_data.x, bandwidth=h_restr)
    _warn_floor(s_full, s_restr)
    return bias_constant_from_summaries(tau, s_full, s_restr)


def bias_corrected_vi(v_hat: float, c_hat: float, n_eval: int, beta: float) -> float:
    """``v_hat - n_eval^(beta - 1) * c_hat``."""
    return float(v_hat - n_eval ** (beta - 1.0) * c_hat)


def vi_confidence_interval(center: float, sigma: float, n_eval: int,
                           level: float = 0.95):
    """``center +/- z * sigma / sqrt(n_eval)``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    half = stats.norm.ppf(0.5 * (1.0 + level)) * sigma / math.sqrt(n_eval)
    return float(center - half), float(center + half)


@dataclass
class VimpReport:
    """Importance estimate, bias correction and intervals for one subset."""

    subset: list
    tau: float
    level: float
    v_hat: float
    sigma_s_hat: float
    ci_low: float
    ci_high: float
    c_hat: float
    v_tilde: float
    ci_tilde_low: float
    ci_tilde_high: float
    beta_used: float
    n_eval: int
    n_train: int
    subsample_size: int
    floor_fraction: float
    per_point_losses: list | None = field(default=None, repr=False)

    def to_dict(self, include_losses: bool = False) -> dict:
        d = asdict(self)
        if not include_losses:
            d.pop("per_point_losses")
        return d

    def to_json(self, include_losses: bool = False) -> str:
        return json.dumps(self.to_dict(include_losses), indent=2, sort_keys=True)


def run_vimp(data: Dataset, s_set, config: ForestConfig, split_seed=None,
             level: float = 0.95, keep_losses: bool = False,
             split: CrossFitSplit | None = None) -> VimpReport:
    """
    Full pipeline: split, fit both forests on the training fold, score the
    evaluation fold, estimate the bias constant and build both intervals.
    """
    s_set = s_set if isinstance(s_set, FeatureSubset) else FeatureSubset(tuple(s_set))
    s_set.validate(data.p)
    if len(s_set) >= data.p:
        raise ValueError("subset cannot contain every feature")
    if split is None:
        seed = config.seed if split_seed is None else split_seed
        split = cross_fit_split(data, np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED])))
    train = data.subset(split.train_rows)
    eval_data = data.subset(split.eval_rows)
    if train.n < 4 * config.min_leaf_est:
        raise ValueError("training fold too small for the forest configuration")
    tau = float(config.tau)
    full = fit_forest(train, config)
    restricted = fit_restricted(train, s_set, config) if len(s_set) else full
    _check_folds(train, eval_data, full, restricted)

    s_full = summarize(full, train, eval_data.x)
    s_restr = summarize(restricted, train, eval_data.x) if len(s_set) else s_full
    losses = _loss_differences(eval_data.y, s_full.q_hat, s_restr.q_hat, tau)
    v_hat = float(losses.mean())
    sigma = math.sqrt(vi_variance(losses))
    c_hat = bias_constant_from_summaries(tau, s_full, s_restr)
    floor_fraction = _warn_floor(s_full, s_restr)
    n_eval = eval_data.n
    beta = full.beta
    v_tilde = bias_corrected_vi(v_hat, c_hat, n_eval, beta)
    lo, hi = vi_confidence_interval(v_hat, sigma, n_eval, level)
    tlo, thi = vi_confidence_interval(v_tilde, sigma, n_eval, level)
    return VimpReport(
        subset=[int(i) for i in s_set], tau=tau, level=float(level),
        v_hat=v_hat, sigma_s_hat=sigma, ci_low=lo, ci_high=hi, c_hat=c_hat,
        v_tilde=v_tilde, ci_tilde_low=tlo, ci_tilde_high=thi,
        beta_used=float(beta), n_eval=int(n_eval), n_train=int(train.n),
        subsample_size=int(full.subsample_size), floor_fraction=floor_fraction,
        per_point_losses=losses.tolist() if keep_losses else None)
