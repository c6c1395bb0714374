"""Simplex equiangular tight frames used as frozen action-selection layers.

A simplex ETF with ``k`` vectors in ``d`` dimensions is built as

    M = sqrt(E_W) * sqrt(k / (k - 1)) * U (I_k - 1 1^T / k)

where ``U`` is a random partial orthonormal basis. Every column then has
squared norm ``E_W`` and every pair of columns has inner product
``-E_W / (k - 1)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
STRUCTURE_TOL = 1e-10
_MAX_DRAWS = 10
_PIVOT_TOL = 1e-8


class DimensionError(ValueError):
    pass


class DegenerateFrameError(RuntimeError):
    pass


@dataclass(frozen=True)
class EtfMatrix:
    """K frame vectors stored as the columns of a ``(d, k)`` array."""

    vectors: np.ndarray
    k: int
    d: int
    energy: float
    seed: int | None = None

    def __post_init__(self):
        if self.vectors.shape != (self.d, self.k):
            raise DimensionError(
                f"vectors have shape {self.vectors.shape}, expected {(self.d, self.k)}"
            )

    @property
    def head(self) -> np.ndarray:
        """The ``(k, d)`` weight matrix W whose rows are the frame vectors."""
        return self.vectors.T

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "k": self.k,
            "d": self.d,
            "energy": self.energy,
            "seed": self.seed,
            # one entry per frame vector, i.e. W in row-major order
            "columns": self.vectors.T.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EtfMatrix":
        schema = data.get("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ValueError(f"unsupported ETF schema {schema}")
        k, d = int(data["k"]), int(data["d"])
        cols = np.asarray(data["columns"], dtype=np.float64)
        if cols.shape != (k, d):
            raise DimensionError(f"columns have shape {cols.shape}, expected {(k, d)}")
        return cls(
            vectors=np.ascontiguousarray(cols.T),
            k=k,
            d=d,
            energy=float(data["energy"]),
            seed=data.get("seed"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "EtfMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()))


def orthonormalize(a: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalization pass.

    Raises DegenerateFrameError if a column is (numerically) dependent on
    the previous ones.
    """
    q = np.array(a, dtype=np.float64, copy=True)
    n_cols = q.shape[1]
    for j in range(n_cols):
        v = q[:, j]
        scale = np.linalg.norm(v)
        for _ in range(2):
            for i in range(j):
                v -= (q[:, i] @ v) * q[:, i]
        nrm = np.linalg.norm(v)
        if scale == 0.0 or nrm < _PIVOT_TOL * scale:
            raise DegenerateFrameError(f"near-zero pivot in column {j}")
        q[:, j] = v / nrm
    return q


def _helmert_basis(k: int) -> np.ndarray:
    # (k, k-1) orthonormal basis of the complement of the all-ones vector
    b = np.zeros((k, k - 1))
    for j in range(1, k):
        b[:j, j - 1] = 1.0
        b[j, j - 1] = -j
        b[:, j - 1] /= np.sqrt(j * (j + 1))
    return b


def generate_etf(k: int, d: int, energy: float = 1.0, seed: int | None = 0) -> EtfMatrix:
    """Draw a randomly oriented simplex ETF with squared column norm ``energy``.

    For ``d >= k`` the orientation U is a ``(d, k)`` matrix with orthonormal
    columns obtained from a seeded Gaussian draw. For the tight case
    ``d == k - 1`` no such U exists, so a ``(d, k-1)`` orthonormal V is drawn
    instead and composed with a fixed basis of the complement of the
    all-ones vector; the resulting Gram matrix is identical.
    """
    if k < 2:
        raise DimensionError(f"need at least 2 actions, got k={k}")
    if d < k - 1:
        raise DimensionError(f"d={d} is too small for a {k}-vector simplex ETF (need d >= {k - 1})")
    if not energy > 0:
        raise ValueError(f"energy must be positive, got {energy}")

    rng = np.random.default_rng(seed)
    centering = np.eye(k) - np.ones((k, k)) / k
    for _ in range(_MAX_DRAWS):
        try:
            if d >= k:
                u = orthonormalize(rng.standard_normal((d, k)))
            else:
                u = orthonormalize(rng.standard_normal((d, k - 1))) @ _helmert_basis(k).T
        except DegenerateFrameError:
            continue
        m = np.sqrt(energy * k / (k - 1)) * (u @ centering)
        return EtfMatrix(vectors=m, k=k, d=d, energy=float(energy), seed=seed)
    raise DegenerateFrameError(f"orthonormalization failed after {_MAX_DRAWS} draws")


def gram(m: EtfMatrix) -> np.ndarray:
    return m.vectors.T @ m.vectors


def ideal_gram(k: int, energy: float = 1.0) -> np.ndarray:
    """E_W * (k/(k-1) I - 1/(k-1) 1 1^T)."""
    return energy * (k / (k - 1) * np.eye(k) - np.ones((k, k)) / (k - 1))


def verify_zero_sum(m: EtfMatrix) -> float:
    """Euclidean norm of the sum of all frame vectors."""
    return float(np.linalg.norm(m.vectors.sum(axis=1)))


def structure_errors(m: EtfMatrix) -> dict[str, float]:
    """Max deviations of norms, pairwise inner products and column sum."""
    g = gram(m)
    k = m.k
    off = ~np.eye(k, dtype=bool)
    return {
        "norm": float(np.max(np.abs(np.diag(g) - m.energy))),
        "inner": float(np.max(np.abs(g[off] + m.energy / (k - 1)))) if k > 1 else 0.0,
        "zero_sum": verify_zero_sum(m),
    }


def is_valid(m: EtfMatrix, tol: float = STRUCTURE_TOL) -> bool:
    return all(v <= tol for v in structure_errors(m).values())
