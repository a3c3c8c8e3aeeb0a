"""Linear Gaussian data-generating processes on the unit cube."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..forest.data import Dataset

KINDS = ("linear_gaussian", "linear_noise_features", "heteroscedastic")

__all__ = ["DGPSpec", "generate", "KINDS"]


@dataclass(frozen=True)
class DGPSpec:
    """
    ``Y = c'X + sd(X) * eps`` with ``X ~ U[0,1]^p`` and ``eps ~ N(0, 1)``.

    ``sd(X)`` is ``noise_scale`` for the homoscedastic kinds and
    ``noise_scale * (1 + X_1)`` for ``heteroscedastic``. Coefficients
    shorter than ``p`` are zero-padded, so trailing features are pure noise.
    """

    kind: str = "linear_gaussian"
    coefficients: tuple = (1.0,)
    noise_scale: float = 1.0
    p: int = 2
    _coef: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown DGP kind {self.kind!r}; expected one of {KINDS}")
        coefs = tuple(float(c) for c in self.coefficients)
        if int(self.p) < 1:
            raise ValueError("p must be positive")
        if len(coefs) > self.p:
            raise ValueError("more coefficients than features")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")
        object.__setattr__(self, "coefficients", coefs)
        c = np.zeros(int(self.p))
        c[:len(coefs)] = coefs
        object.__setattr__(self, "_coef", c)

    @property
    def coef(self) -> np.ndarray:
        return self._coef.copy()

    @property
    def heteroscedastic(self) -> bool:
        return self.kind == "heteroscedastic"

    def mean(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self._coef

    def scale(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.heteroscedastic:
            return self.noise_scale * (1.0 + X[..., 0])
        return np.full(X.shape[:-1], float(self.noise_scale))

    def to_dict(self):
        return {"kind": self.kind, "coefficients": list(self.coefficients),
                "noise_scale": float(self.noise_scale), "p": int(self.p)}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d.get("kind", "linear_gaussian"),
                   coefficients=tuple(d.get("coefficients", (1.0,))),
                   noise_scale=float(d.get("noise_scale", 1.0)),
                   p=int(d.get("p", 2)))


def generate(dgp: DGPSpec, n: int, rng: np.random.Generator) -> Dataset:
    """Draw ``n`` i.i.d. rows from ``dgp``."""
    X = rng.uniform(size=(n, dgp.p))
    eps = rng.standard_normal(n)
    y = dgp.mean(X) + dgp.scale(X) * eps
    return Dataset(X, y)
