"""Action Collapse diagnostics computed from last-layer activations.

Activations are grouped by the optimal action of their state (the class).
All standard deviations are population standard deviations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

PINV_RCOND = 1e-8


class MetricError(ValueError):
    pass


@dataclass
class ActivationSet:
    """Activations ``h`` (n, d) with integer class labels in ``[0, k)``."""

    h: np.ndarray
    labels: np.ndarray
    k: int

    def __post_init__(self):
        self.h = np.atleast_2d(np.asarray(self.h, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=int)
        if self.h.shape[0] != self.labels.shape[0]:
            raise MetricError(f"{self.h.shape[0]} activations but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise MetricError(f"labels must lie in [0, {self.k})")

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    @property
    def d(self) -> int:
        return self.h.shape[1]


@dataclass
class CollapseReport:
    epoch: int
    equinorm_w: float
    equiang_std_h: float
    equiang_std_w: float
    maxangle_h: float
    maxangle_w: float
    within_var: float
    self_duality: float
    label_source: str = "oracle"
    sampled: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def values(self) -> dict[str, float]:
        return {
            "equinorm_w": self.equinorm_w,
            "equiang_std_h": self.equiang_std_h,
            "equiang_std_w": self.equiang_std_w,
            "maxangle_h": self.maxangle_h,
            "maxangle_w": self.maxangle_w,
            "within_var": self.within_var,
            "self_duality": self.self_duality,
        }

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.values().values())


def global_mean(a: ActivationSet) -> np.ndarray:
    if a.h.shape[0] == 0:
        raise MetricError("empty activation set")
    return a.h.mean(axis=0)


def class_means(a: ActivationSet) -> np.ndarray:
    """(k, d) array of per-class means; raises if a class is empty."""
    counts = a.counts
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise MetricError(f"classes {empty.tolist()} have no activations")
    sums = np.zeros((a.k, a.d))
    np.add.at(sums, a.labels, a.h)
    return sums / counts[:, None]


def _norms(vectors: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(vectors, axis=1)
    if np.any(n == 0):
        raise MetricError("zero-norm vector")
    return n


def equinorm(vectors: np.ndarray) -> float:
    """Std_k(|v_k|) / Avg_k(|v_k|) over the rows of ``vectors``."""
    v = np.atleast_2d(vectors)
    if v.shape[0] < 2:
        raise MetricError("equinorm needs at least two vectors")
    n = np.linalg.norm(v, axis=1)
    if n.mean() == 0:
        raise MetricError("all vectors have zero norm")
    return float(n.std() / n.mean())


def pairwise_cosines(vectors: np.ndarray, center: np.ndarray | None = None) -> np.ndarray:
    """Cosines of the k(k-1)/2 distinct pairs of rows (after centering)."""
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if center is not None:
        v = v - center
    u = v / _norms(v)[:, None]
    iu = np.triu_indices(v.shape[0], 1)
    return (u @ u.T)[iu]


def equiangularity_std(vectors: np.ndarray, center: np.ndarray | None = None) -> float:
    cos = pairwise_cosines(vectors, center)
    if cos.size <= 1:
        return 0.0
    return float(cos.std())


def maxangle_metric(vectors: np.ndarray, center: np.ndarray | None = None) -> float:
    """Avg over pairs of |cos + 1/(k-1)|; zero only for a maximally separated set."""
    k = np.atleast_2d(vectors).shape[0]
    if k < 2:
        raise MetricError("maxangle needs at least two vectors")
    cos = pairwise_cosines(vectors, center)
    return float(np.mean(np.abs(cos + 1.0 / (k - 1))))


def pinv_svd(a: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """Moore-Penrose inverse keeping singular values above ``rcond * s_max``."""
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros(a.T.shape)
    keep = s > rcond * s[0]
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def within_class_variability(a: ActivationSet) -> float:
    """Tr(Sigma_W Sigma_B^+) / k."""
    means = class_means(a)
    hg = global_mean(a)
    centered_means = means - hg
    scale = max(float(np.abs(means).max()), 1.0)
    if np.max(np.abs(means - means[0])) <= 1e-12 * scale:
        raise MetricError("between-class covariance is degenerate: all class means coincide")
    dev = a.h - means[a.labels]
    sigma_w = dev.T @ dev / a.h.shape[0]
    sigma_b = centered_means.T @ centered_means / a.k
    value = float(np.trace(sigma_w @ pinv_svd(sigma_b)) / a.k)
    return max(value, 0.0)


def self_duality(a: ActivationSet, w: np.ndarray) -> float:
    """Mean over classes of cos(h_k - h_G, w_k)."""
    means = class_means(a) - global_mean(a)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != means.shape:
        raise MetricError(f"W has shape {w.shape}, class means {means.shape}")
    cos = np.einsum("ij,ij->i", means, w) / (_norms(means) * _norms(w))
    return float(np.mean(cos))


def collapse_report(a: ActivationSet, w: np.ndarray, epoch: int = 0,
                    label_source: str = "oracle", sampled: bool = False) -> CollapseReport:
    means = class_means(a)
    hg = global_mean(a)
    return CollapseReport(
        epoch=epoch,
        equinorm_w=equinorm(w),
        equiang_std_h=equiangularity_std(means, hg),
        equiang_std_w=equiangularity_std(w),
        maxangle_h=maxangle_metric(means, hg),
        maxangle_w=maxangle_metric(w),
        within_var=within_class_variability(a),
        self_duality=self_duality(a, w),
        label_source=label_source,
        sampled=sampled,
    )


def nearest_center_agreement(a: ActivationSet, w: np.ndarray) -> np.ndarray:
    """Per-sample flag: argmax_k <h, w_k> equals argmin_k |h - h_k|."""
    means = class_means(a)
    by_head = np.argmax(a.h @ np.asarray(w).T, axis=1)
    dist = np.linalg.norm(a.h[:, None, :] - means[None, :, :], axis=2)
    return by_head == np.argmin(dist, axis=1)


# -- activation dumps ---------------------------------------------------------


def write_activation_dump(path: str | Path, a: ActivationSet, state_ids=None) -> None:
    ids = range(len(a.labels)) if state_ids is None else state_ids
    with open(path, "w") as fh:
        for sid, k, h in zip(ids, a.labels, a.h):
            fh.write(json.dumps({"state_id": int(sid), "class_k": int(k), "h": h.tolist()}) + "\n")


def read_activation_dump(path: str | Path, k: int) -> ActivationSet:
    hs, labels = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                hs.append(rec["h"])
                labels.append(rec["class_k"])
            except KeyError as exc:
                raise MetricError(f"line {lineno}: missing field {exc}") from None
    if not hs:
        raise MetricError(f"{path}: no activations")
    return ActivationSet(np.asarray(hs, dtype=np.float64), np.asarray(labels), k)
