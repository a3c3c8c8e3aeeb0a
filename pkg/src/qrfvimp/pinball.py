"""
Pinball (check) loss, its left-derivative score, and Knight's identity.

All functions accept scalars or numpy arrays and broadcast. The score uses
the left-derivative convention at the kink, ``score(0, tau) == tau - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

__all__ = [
    "QuantileLevel",
    "KnightDecomposition",
    "check_tau",
    "pinball_loss",
    "score",
    "knight_integral",
    "knight_decompose",
    "knight_remainder_oracle",
]


@dataclass(frozen=True)
class QuantileLevel:
    """A quantile level strictly inside (0, 1)."""

    tau: float

    def __post_init__(self):
        check_tau(self.tau)

    def __float__(self):
        return float(self.tau)


def check_tau(tau) -> float:
    """Return ``tau`` as a float, rejecting values outside the open unit interval."""
    tau = float(tau)
    if not (0.0 < tau < 1.0) or math.isnan(tau):
        raise ValueError(f"quantile level must lie in (0, 1), got {tau!r}")
    return tau


def _finite(u, name="u"):
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def _unwrap(result, like):
    if np.ndim(like) == 0:
        return float(result)
    return result


def pinball_loss(u, tau):
    """
    Pinball loss ``u * (tau - 1{u < 0})``.

    Parameters
    ----------
    u : float or array_like
        Residuals ``y - theta``.
    tau : float or QuantileLevel

    Returns
    -------
    float or ndarray
        Nonnegative losses with the shape of ``u``.
    """
    tau = check_tau(tau)
    arr = _finite(u)
    out = np.where(arr < 0.0, (tau - 1.0) * arr, tau * arr)
    return _unwrap(out, u)


def score(u, tau):
    """Left derivative of the pinball loss: ``tau - 1{u <= 0}``."""
    tau = check_tau(tau)
    arr = _finite(u)
    out = np.where(arr <= 0.0, tau - 1.0, tau)
    return _unwrap(out, u)


def knight_integral(u, v):
    """
    Closed form of ``int_0^v (1{u <= s} - 1{u <= 0}) ds``.

    The integrand is piecewise constant with one breakpoint at ``s = u``.
    For ``v > 0`` it equals ``max(0, v - max(u, 0))`` restricted to
    ``u in (0, v]``; for ``v < 0`` the oriented integral equals
    ``max(0, u - v)`` restricted to ``u in (v, 0]``. Both are nonnegative.
    """
    u_arr = _finite(u, "u")
    v_arr = _finite(v, "v")
    pos = (v_arr > 0.0) & (u_arr > 0.0) & (u_arr <= v_arr)
    neg = (v_arr < 0.0) & (u_arr > v_arr) & (u_arr <= 0.0)
    out = np.where(pos, v_arr - u_arr, 0.0)
    out = np.where(neg, u_arr - v_arr, out)
    if np.ndim(u) == 0 and np.ndim(v) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class KnightDecomposition:
    """
    Split of ``rho(u - v) - rho(u)`` into a linear and an integral part.

    ``total`` is computed directly from the loss, so ``total - (linear +
    integral)`` is the floating-point residual of the identity.
    """

    linear: float
    integral: float
    total: float

    @property
    def residual(self) -> float:
        return self.total - (self.linear + self.integral)


def knight_decompose(u, v, tau):
    """
    Evaluate both sides of Knight's identity at ``(u, v)``.

    Vectorised inputs return a ``KnightDecomposition`` holding arrays.
    """
    tau = check_tau(tau)
    u_arr = _finite(u, "u")
    v_arr = _finite(v, "v")
    total = pinball_loss(u_arr - v_arr, tau) - pinball_loss(u_arr, tau)
    linear = -v_arr * score(u_arr, tau)
    integral = knight_integral(u_arr, v_arr)
    if np.ndim(u) == 0 and np.ndim(v) == 0:
        return KnightDecomposition(float(linear), float(integral), float(total))
    return KnightDecomposition(linear, integral, total)


def knight_remainder_oracle(density, q, v, *, epsabs=1e-13, epsrel=1e-11):
    """
    Expected Knight remainder ``E int_0^v (1{U <= s} - 1{U <= 0}) ds``.

    ``U = Y - q`` with ``Y`` drawn from ``density``. Evaluated as
    ``int_0^v (F(q + s) - F(q)) ds`` where ``F`` is itself obtained by
    quadrature of ``density``. Intended as a test oracle for the
    ``0.5 * f(q) * v**2`` approximation.

    Parameters
    ----------
    density : callable
        One-dimensional probability density.
    q : float
        Expansion point.
    v : float
        Perturbation.

    Raises
    ------
    RuntimeError
        If either quadrature fails to converge.
    """
    q = float(q)
    v = float(v)
    if v == 0.0:
        return 0.0

    def cdf_increment(s):
        # F(q + s) - F(q), signed
        val, _, *rest = integrate.quad(density, q, q + s, epsabs=epsabs,
                                       epsrel=epsrel, full_output=1)
        if len(rest) > 1:
            raise RuntimeError(f"density quadrature failed: {rest[1]}")
        return val

    val, _, *rest = integrate.quad(cdf_increment, 0.0, v, epsabs=epsabs,
                                   epsrel=epsrel, full_output=1)
    if len(rest) > 1:
        raise RuntimeError(f"remainder quadrature failed: {rest[1]}")
    return val
