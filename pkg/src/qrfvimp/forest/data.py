"""Dataset container and fingerprinting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Dataset", "Fingerprint"]


@dataclass(frozen=True)
class Fingerprint:
    n_rows: int
    n_cols: int
    checksum: str

    def to_dict(self):
        return {"n_rows": self.n_rows, "n_cols": self.n_cols,
                "checksum": self.checksum}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n_rows"]), int(d["n_cols"]), str(d["checksum"]))


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Covariates ``x`` (n x p) and responses ``y`` (n,).

    Arrays are copied to C-contiguous float64 and made read-only.
    """

    x: np.ndarray
    y: np.ndarray
    feature_names: tuple = field(default=())

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64, order="C", copy=True)
        y = np.array(self.y, dtype=np.float64, copy=True).ravel()
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise ValueError("x must be a 2-D array")
        n, p = x.shape
        if y.shape[0] != n:
            raise ValueError(f"x has {n} rows but y has {y.shape[0]}")
        if n < 2:
            raise ValueError("a dataset needs at least 2 rows")
        if p < 1:
            raise ValueError("a dataset needs at least 1 feature")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise ValueError("feature_names length does not match x")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.x[rows], self.y[rows], self.feature_names)

    def with_y(self, y) -> "Dataset":
        return Dataset(self.x, y, self.feature_names)

    def fingerprint(self) -> Fingerprint:
        h = hashlib.sha256()
        h.update(np.asarray(self.x.shape, dtype=np.int64).tobytes())
        h.update(self.x.tobytes())
        h.update(self.y.tobytes())
        return Fingerprint(self.n, self.p, h.hexdigest())

    def row_digests(self) -> set:
        """Per-row hashes of (x, y), used to detect fold overlap."""
        rows = np.hstack([self.x, self.y[:, None]])
        return {hashlib.blake2b(r.tobytes(), digest_size=16).digest()
                for r in rows}
