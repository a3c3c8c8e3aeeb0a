"""
Forest quantile predictions with plug-in asymptotic intervals.

The point estimate minimizes the forest-weighted pinball risk. Its
standard error uses ``sigma^2 = tau (1 - tau) eta / f^2`` where ``eta`` is
``(n / s) * sum K^2`` and ``f`` a forest-weighted Gaussian kernel density
of the responses at the prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .forest import _kernels
from .forest.data import Dataset
from .forest.model import ForestModel, WeightVector, forest_weights
from .pinball import check_tau

__all__ = [
    "DENSITY_FLOOR",
    "QuantilePrediction",
    "ForestSummary",
    "weighted_quantile",
    "predict_quantile",
    "variance_scaling",
    "default_bandwidth",
    "conditional_density",
    "predict_with_interval",
    "summarize",
    "interval_half_width",
]

DENSITY_FLOOR = 1e-4
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class QuantilePrediction:
    q_hat: float
    eta_hat: float
    f_hat: float
    sigma2_hat: float
    ci_low: float
    ci_high: float
    level: float


def _as_weights(values, weights):
    values = np.asarray(values, dtype=float)
    if isinstance(weights, WeightVector):
        return values[weights.indices], np.asarray(weights.weights, dtype=float)
    w = np.asarray(weights, dtype=float)
    if w.shape != values.shape:
        raise ValueError("values and weights differ in shape")
    return values, w


def weighted_quantile(values, weights, tau) -> float:
    """
    Smallest support value whose cumulative weight reaches ``tau``.

    This is the left endpoint of the argmin set of
    ``sum_i w_i * rho_tau(y_i - theta)``.

    Parameters
    ----------
    values : array_like
        Responses. When ``weights`` is a ``WeightVector`` these are indexed
        by its row indices.
    weights : WeightVector or array_like
        Nonnegative weights.
    tau : float
    """
    tau = check_tau(tau)
    vals, w = _as_weights(values, weights)
    keep = w > 0
    vals, w = vals[keep], w[keep]
    if vals.size == 0:
        raise ValueError("weighted quantile of an empty support")
    if not np.all(np.isfinite(vals)):
        raise ValueError("values must be finite")
    order = np.argsort(vals, kind="mergesort")
    return float(_kernels.weighted_quantile_sorted(vals[order], w[order], tau))


def predict_quantile(model: ForestModel, data: Dataset | None, x) -> float | np.ndarray:
    """
    Forest quantile prediction at ``x`` (one point or a matrix of points).

    ``data`` is the dataset the model was fitted on; pass ``None`` to use the
    responses stored with the model.
    """
    y = model.check_data(data)
    X, squeeze = model.check_query(x)
    indptr, indices, weights = model.weights_csr(X)
    q = _kernels.csr_quantiles(indptr, indices, weights, y, model.tau)
    return float(q[0]) if squeeze else q


def variance_scaling(weights, n: int, s: int) -> float:
    """``(n / s) * sum_i K_i^2`` for one weight vector.

    ``weights`` may be a ``WeightVector``, a dense array, or a fitted model
    paired with a query (``(model, x)``).
    """
    if isinstance(weights, tuple):
        model, x = weights
        weights = forest_weights(model, x)
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=float)
    return float(n) / float(s) * float(np.dot(w, w))


def _weighted_std(vals, w):
    total = w.sum()
    mean = np.dot(w, vals) / total
    return np.sqrt(max(np.dot(w, (vals - mean) ** 2) / total, 0.0))


def default_bandwidth(values, weights) -> float:
    """
    Rule-of-thumb bandwidth ``1.06 * sd_w * m_eff^(-1/5)``.

    ``m_eff = 1 / sum w^2`` for normalized weights. A degenerate weighted
    spread falls back to ``max(1e-3, IQR / 1.349)``.
    """
    vals, w = _as_weights(values, weights)
    keep = w > 0
    vals, w = vals[keep], w[keep] / w[keep].sum()
    if vals.size < 1:
        raise ValueError("bandwidth needs a nonempty support")
    sd = _weighted_std(vals, w)
    m_eff = 1.0 / np.dot(w, w)
    if sd > 0.0 and vals.size >= 2:
        return float(1.06 * sd * m_eff ** (-0.2))
    order = np.argsort(vals, kind="mergesort")
    v, ww = vals[order], w[order]
    iqr = (_kernels.weighted_quantile_sorted(v, ww, 0.75)
           - _kernels.weighted_quantile_sorted(v, ww, 0.25))
    return float(max(1e-3, iqr / 1.349))


def conditional_density(values, weights, at: float, h: float,
                        floor: float = DENSITY_FLOOR) -> float:
    """
    ``sum_i w_i * phi((y_i - at) / h) / h`` floored at ``floor``.

    ``values``/``weights`` follow ``weighted_quantile``. To evaluate at a
    query of a fitted model use ``forest_weights(model, x)`` as weights and
    ``model.responses`` (or the training ``y``) as values.
    """
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    vals, w = _as_weights(values, weights)
    z = (vals - at) / h
    f = float(np.dot(w, np.exp(-0.5 * z * z)) / (h * _SQRT_2PI))
    return max(f, floor)


def interval_half_width(sigma2, n: int, s: int, level: float):
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    z = stats.norm.ppf(0.5 * (1.0 + level))
    return z * np.sqrt(np.asarray(sigma2) * s / n)


@dataclass(frozen=True)
class ForestSummary:
    """Per-query plug-in quantities for a batch of query points."""

    q_hat: np.ndarray
    eta_hat: np.ndarray
    f_hat: np.ndarray
    bandwidth: np.ndarray
    floored: np.ndarray

    def sigma2(self, tau):
        return tau * (1.0 - tau) * self.eta_hat / self.f_hat**2


def summarize(model: ForestModel, data: Dataset | None, X,
              bandwidth: float | None = None,
              floor: float = DENSITY_FLOOR) -> ForestSummary:
    """
    Quantile, variance scaling and conditional density at each row of ``X``.

    The density is evaluated at the forest's own prediction with the
    default bandwidth of each query's weighted responses unless a fixed
    ``bandwidth`` is supplied.
    """
    y = model.check_data(data)
    Xq, _ = model.check_query(X)
    indptr, indices, weights = model.weights_csr(Xq)
    q = _kernels.csr_quantiles(indptr, indices, weights, y, model.tau)
    ss = _kernels.csr_sum_squares(indptr, weights)
    eta = model.n_rows / model.subsample_size * ss
    nq = len(q)
    f = np.empty(nq)
    hs = np.empty(nq)
    floored = np.zeros(nq, dtype=bool)
    for k in range(nq):
        lo, hi = indptr[k], indptr[k + 1]
        vals = y[indices[lo:hi]]
        w = weights[lo:hi]
        h = default_bandwidth(vals, w) if bandwidth is None else float(bandwidth)
        hs[k] = h
        raw = conditional_density(vals, w, q[k], h, floor=0.0)
        floored[k] = raw < floor
        f[k] = max(raw, floor)
    return ForestSummary(q, eta, f, hs, floored)


def predict_with_interval(model: ForestModel, data: Dataset | None, x,
                          level: float = 0.95,
                          bandwidth: float | None = None):
    """
    Quantile prediction with a normal-approximation confidence interval.

    Returns a ``QuantilePrediction`` for a single point, or a list of them
    for a matrix of query points.
    """
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    Xq, squeeze = model.check_query(x)
    summ = summarize(model, data, Xq, bandwidth=bandwidth)
    tau = model.tau
    sigma2 = summ.sigma2(tau)
    half = interval_half_width(sigma2, model.n_rows, model.subsample_size, level)
    preds = [QuantilePrediction(float(summ.q_hat[k]), float(summ.eta_hat[k]),
                                float(summ.f_hat[k]), float(sigma2[k]),
                                float(summ.q_hat[k] - half[k]),
                                float(summ.q_hat[k] + half[k]), float(level))
             for k in range(len(summ.q_hat))]
    return preds[0] if squeeze else preds
