"""
Ground-truth quantiles and variable importance for the simulation DGPs.

Restricted quantiles integrate the removed covariates out of the Gaussian
conditional CDF by Gauss-Legendre quadrature and invert by bracketing.
Expected pinball risks under Gaussian noise are closed form:
``E rho_tau(sd * (eps - z)) = sd * (phi(z) + z * (Phi(z) - tau))``.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy import optimize, stats
from scipy.interpolate import CubicSpline

from ..pinball import check_tau, pinball_loss, score
from .dgp import DGPSpec

__all__ = [
    "oracle_quantile",
    "oracle_restricted_quantile",
    "oracle_vi",
    "oracle_vi_mc",
    "gaussian_risk",
    "gateaux_check",
]

_GL_NODES = 64


def _gauss_legendre_box(dims: int, nodes: int = _GL_NODES):
    """Tensor Gauss-Legendre rule on [0, 1]^dims: (points, weights)."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    if dims == 0:
        return np.zeros((1, 0)), np.ones(1)
    pts = np.array(list(itertools.product(x, repeat=dims)))
    wts = np.prod(np.array(list(itertools.product(w, repeat=dims))), axis=1)
    return pts, wts


def _normalize_subset(dgp: DGPSpec, s_set) -> tuple:
    s = tuple(sorted({int(j) for j in s_set}))
    if any(j < 0 or j >= dgp.p for j in s):
        raise ValueError("subset index out of range")
    return s


def oracle_quantile(dgp: DGPSpec, tau, x) -> np.ndarray | float:
    """True conditional quantile ``c'x + sd(x) * Phi^-1(tau)``."""
    tau = check_tau(tau)
    x = np.asarray(x, dtype=float)
    out = dgp.mean(x) + dgp.scale(x) * stats.norm.ppf(tau)
    return float(out) if x.ndim == 1 else out


def _integrated_dims(dgp: DGPSpec, s_set):
    """Removed features that actually move the conditional law of Y."""
    c = dgp.coef
    return [j for j in s_set if c[j] != 0.0 or (dgp.heteroscedastic and j == 0)]


def _restricted_offset(dgp: DGPSpec, tau, s_set, x1, nodes=_GL_NODES):
    """
    tau-quantile of ``c_S X_S + sd * eps`` with X_S uniform, given x_1.

    The restricted quantile is ``c_{-S} x_{-S}`` plus this offset; ``x1``
    only matters for the heteroscedastic kind with feature 1 retained.
    """
    c = dgp.coef
    dims = _integrated_dims(dgp, s_set)
    pts, wts = _gauss_legendre_box(len(dims), nodes)
    full = np.zeros((len(wts), dgp.p))
    full[:, dims] = pts
    if dgp.heteroscedastic and 0 not in s_set:
        full[:, 0] = x1
    shift = pts @ c[dims] if dims else np.zeros(1)
    sd = dgp.scale(full)

    def cdf_gap(y):
        return float(np.dot(wts, stats.norm.cdf((y - shift) / sd))) - tau

    lo = float(np.min(shift - 12 * sd))
    hi = float(np.max(shift + 12 * sd))
    if not (cdf_gap(lo) < 0 < cdf_gap(hi)):
        raise RuntimeError("restricted quantile bracket failed")
    root, info = optimize.brentq(cdf_gap, lo, hi, xtol=1e-12, rtol=1e-14,
                                 full_output=True)
    if not info.converged:
        raise RuntimeError("restricted quantile inversion did not converge")
    return root


def oracle_restricted_quantile(dgp: DGPSpec, tau, x, s_set) -> float:
    """
    tau-quantile of ``Y | X_{-S} = x_{-S}`` (0-based feature indices in ``s_set``).
    """
    tau = check_tau(tau)
    s_set = _normalize_subset(dgp, s_set)
    if len(s_set) >= dgp.p:
        raise ValueError("cannot remove every feature")
    x = np.asarray(x, dtype=float)
    keep = [j for j in range(dgp.p) if j not in s_set]
    base = float(np.dot(dgp.coef[keep], x[keep]))
    return base + _restricted_offset(dgp, tau, s_set, x[0])


def gaussian_risk(a, mean, sd, tau):
    """Expected pinball loss of ``Y - a`` for ``Y ~ N(mean, sd^2)``."""
    z = (np.asarray(a) - mean) / sd
    return sd * (stats.norm.pdf(z) + z * (stats.norm.cdf(z) - tau))


def oracle_vi(dgp: DGPSpec, tau, s_set, nodes: int = _GL_NODES) -> float:
    """
    Population importance ``E[rho(Y - q_{-S}(X)) - rho(Y - q(X))]``.

    Integrates the closed-form conditional risks over the covariates that
    matter: the removed features with nonzero effect, plus ``x_1`` for the
    heteroscedastic kind when it is retained. Other retained features shift
    both quantiles equally and drop out.
    """
    tau = check_tau(tau)
    s_set = _normalize_subset(dgp, s_set)
    if not s_set:
        return 0.0
    if len(s_set) >= dgp.p:
        raise ValueError("cannot remove every feature")
    c = dgp.coef
    dims = _integrated_dims(dgp, s_set)
    if not dims:
        return 0.0
    pts, wts = _gauss_legendre_box(len(dims), nodes)
    z_tau = stats.norm.ppf(tau)
    outer = dgp.heteroscedastic and 0 not in s_set
    if outer:
        x1_nodes, x1_wts = _gauss_legendre_box(1, nodes)
        x1_nodes = x1_nodes[:, 0]
    else:
        x1_nodes, x1_wts = np.zeros(1), np.ones(1)
    total = 0.0
    for x1, w1 in zip(x1_nodes, x1_wts):
        offset = _restricted_offset(dgp, tau, s_set, x1, nodes)
        full = np.zeros((len(wts), dgp.p))
        full[:, dims] = pts
        if outer:
            full[:, 0] = x1
        shift = pts @ c[dims]
        sd = dgp.scale(full)
        # retained part of the mean cancels; compare on the removed part
        restricted = gaussian_risk(offset, shift, sd, tau)
        oracle = sd * (stats.norm.pdf(z_tau) + z_tau * (stats.norm.cdf(z_tau) - tau))
        total += w1 * float(np.dot(wts, restricted - oracle))
    return total


def _restricted_quantile_fn(dgp: DGPSpec, tau, s_set):
    """Vectorised ``x -> q_{-S}(x)`` built from the quadrature offsets."""
    keep = [j for j in range(dgp.p) if j not in s_set]
    c_keep = dgp.coef[keep]
    if dgp.heteroscedastic and 0 not in s_set:
        grid = np.linspace(0.0, 1.0, 201)
        offs = np.array([_restricted_offset(dgp, tau, s_set, g) for g in grid])
        spline = CubicSpline(grid, offs)
        return lambda X: X[:, keep] @ c_keep + spline(X[:, 0])
    off = _restricted_offset(dgp, tau, s_set, 0.0)
    return lambda X: X[:, keep] @ c_keep + off


def oracle_vi_mc(dgp: DGPSpec, tau, s_set, n_draws: int = 10_000_000,
                 rng: np.random.Generator | None = None,
                 chunk: int = 1_000_000):
    """
    Monte Carlo importance from simulated (X, Y) draws.

    Returns ``(estimate, standard_error)``.
    """
    tau = check_tau(tau)
    s_set = _normalize_subset(dgp, s_set)
    rng = np.random.default_rng(0) if rng is None else rng
    if not s_set:
        return 0.0, 0.0
    q_restricted = _restricted_quantile_fn(dgp, tau, s_set)
    acc = 0.0
    acc2 = 0.0
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        X = rng.uniform(size=(m, dgp.p))
        y = dgp.mean(X) + dgp.scale(X) * rng.standard_normal(m)
        d = (pinball_loss(y - q_restricted(X), tau)
             - pinball_loss(y - oracle_quantile(dgp, tau, X), tau))
        acc += d.sum()
        acc2 += np.dot(d, d)
        done += m
    mean = acc / done
    var = (acc2 - done * mean**2) / (done - 1)
    return mean, np.sqrt(var / done)


def gateaux_check(dgp: DGPSpec, tau, n_draws: int = 1_000_000, t: float = 1e-3,
                  rng: np.random.Generator | None = None):
    """
    Finite-difference directional derivative of the empirical risk at the
    true quantile in direction ``h(x) = 1``.

    Returns ``(derivative, standard_error_of_mean_score)``; the population
    derivative is ``-E psi_tau(Y - q(X)) = 0``.
    """
    tau = check_tau(tau)
    rng = np.random.default_rng(0) if rng is None else rng
    X = rng.uniform(size=(n_draws, dgp.p))
    y = dgp.mean(X) + dgp.scale(X) * rng.standard_normal(n_draws)
    u = y - oracle_quantile(dgp, tau, X)
    deriv = (pinball_loss(u - t, tau).mean() - pinball_loss(u, tau).mean()) / t
    psi = score(u, tau)
    return float(deriv), float(psi.std(ddof=1) / np.sqrt(n_draws))
