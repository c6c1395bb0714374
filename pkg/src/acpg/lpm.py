"""Layer-peeled model with a fixed simplex-ETF head.

Only the activations ``h_s`` are free. Each state contributes
``d(s) * psi(s) * log softmax(W h_s)[k(s)]`` to the objective and every
activation is constrained to ``|h_s|^2 <= E_H``. The maximizer is
``h_s = sqrt(E_H / E_W) * w_{k(s)}`` whatever the class sizes or weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .etf import EtfMatrix
from .net import log_softmax, softmax

FEASIBILITY_TOL = 1e-9


class DivergenceError(RuntimeError):
    pass


@dataclass
class LpmProblem:
    w_star: EtfMatrix
    labels: np.ndarray
    e_h: float
    weights: np.ndarray | None = None
    psi: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        n = self.labels.size
        self.weights = np.ones(n) if self.weights is None else np.asarray(self.weights, float)
        self.psi = np.ones(n) if self.psi is None else np.asarray(self.psi, float)
        if self.weights.shape != (n,) or self.psi.shape != (n,):
            raise ValueError("weights and psi need one entry per state")
        if np.any(self.weights <= 0):
            raise ValueError("state weights must be positive")
        if np.any(self.psi <= 0):
            raise ValueError("returns must be positive; negative returns flip the problem")
        if not self.e_h > 0:
            raise ValueError(f"E_H must be positive, got {self.e_h}")
        if self.labels.min() < 0 or self.labels.max() >= self.k:
            raise ValueError(f"labels must lie in [0, {self.k})")
        if self.h is None:
            self.h = np.zeros((n, self.d))

    @classmethod
    def from_counts(cls, w_star: EtfMatrix, counts, e_h: float, **kw) -> "LpmProblem":
        counts = [int(c) for c in counts]
        if len(counts) != w_star.k:
            raise ValueError(f"need {w_star.k} class sizes, got {len(counts)}")
        labels = np.repeat(np.arange(w_star.k), counts)
        return cls(w_star=w_star, labels=labels, e_h=e_h, **kw)

    @property
    def k(self) -> int:
        return self.w_star.k

    @property
    def d(self) -> int:
        return self.w_star.d

    @property
    def e_w(self) -> float:
        return self.w_star.energy

    @property
    def W(self) -> np.ndarray:
        return self.w_star.head

    @property
    def coef(self) -> np.ndarray:
        return self.weights * self.psi

    def closed_form(self) -> np.ndarray:
        return np.sqrt(self.e_h / self.e_w) * self.W[self.labels]


def lpm_objective(p: LpmProblem, h: np.ndarray | None = None) -> float:
    h = p.h if h is None else h
    logp = log_softmax(h @ p.W.T)
    return float(np.sum(p.coef * logp[np.arange(len(p.labels)), p.labels]))


def lpm_gradient(p: LpmProblem, h: np.ndarray) -> np.ndarray:
    probs = softmax(h @ p.W.T)
    probs[np.arange(len(p.labels)), p.labels] -= 1.0
    return -(p.coef[:, None] * (probs @ p.W))


def project_ball(h: np.ndarray, e_h: float) -> np.ndarray:
    sq = np.einsum("ij,ij->i", h, h)
    scale = np.ones_like(sq)
    over = sq > e_h
    scale[over] = np.sqrt(e_h / sq[over])
    return h * scale[:, None]


@dataclass
class AscentResult:
    h: np.ndarray
    iterations: int
    converged: bool
    objective: float
    history: list[float] = field(default_factory=list)


def solve_projected_ascent(
    p: LpmProblem,
    lr: float | None = None,
    iters: int = 50_000,
    *,
    rng: np.random.Generator | None = None,
    init_scale: float = 0.01,
    h0: np.ndarray | None = None,
    tol: float = 1e-10,
    patience: int = 100,
) -> AscentResult:
    """Gradient ascent on the objective, projecting onto the E_H ball each step.

    Starts from small random activations unless ``h0`` is given. Stops early
    once the projected step, divided by ``lr``, has norm below ``tol``.
    """
    lr = 0.1 / np.sqrt(p.e_w) if lr is None else lr
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if h0 is None:
        rng = np.random.default_rng(0) if rng is None else rng
        h = rng.standard_normal((len(p.labels), p.d))
        h *= init_scale * np.sqrt(p.e_h) / np.linalg.norm(h, axis=1, keepdims=True)
    else:
        h = project_ball(np.array(h0, dtype=np.float64), p.e_h)

    obj = lpm_objective(p, h)
    history = [obj]
    decreasing = 0
    converged = False
    it = 0
    for it in range(1, iters + 1):
        h_new = project_ball(h + lr * lpm_gradient(p, h), p.e_h)
        step = np.linalg.norm(h_new - h) / lr
        h = h_new
        new_obj = lpm_objective(p, h)
        decreasing = decreasing + 1 if new_obj < obj else 0
        if decreasing >= patience:
            raise DivergenceError(f"objective decreased for {patience} consecutive iterations")
        obj = new_obj
        if it % 1000 == 0:
            history.append(obj)
        if step < tol:
            converged = True
            break
    p.h = h
    return AscentResult(h=h, iterations=it, converged=converged, objective=obj, history=history)


def theorem1_targets(p: LpmProblem) -> np.ndarray:
    """(n, k) target inner products h_s^T w_k' at the optimum."""
    k = p.k
    delta = np.eye(k)[p.labels]
    return np.sqrt(p.e_h * p.e_w) * (k / (k - 1) * delta - 1.0 / (k - 1))


def theorem1_residual(h: np.ndarray, p: LpmProblem) -> float:
    return float(np.max(np.abs(np.asarray(h) @ p.W.T - theorem1_targets(p))))


def exp_margin_sum(h: np.ndarray, W: np.ndarray, k: int) -> float:
    """sum_{j != k} exp(h^T (w_j - w_k)), minimized by the per-sample optimum."""
    diffs = np.delete(W, k, axis=0) - W[k]
    return float(np.sum(np.exp(diffs @ h)))


@dataclass
class KKTReport:
    residual: float
    lam: float
    lam_closed_form: float
    a_values: np.ndarray
    g: float
    active: bool


def kkt_check(h: np.ndarray, p: LpmProblem, k: int, active_tol: float = 1e-9) -> KKTReport:
    """Stationarity of f(h) + lam (|h|^2 - E_H) for the class-k subproblem.

    ``lam`` is the least-squares multiplier (clipped at zero, and zero when
    the constraint is slack); ``lam_closed_form`` is
    ``0.5 * sqrt(E_W / E_H) * A * K`` with ``A`` taken from the first j != k.
    """
    h = np.asarray(h, dtype=np.float64)
    if h @ h > p.e_h + FEASIBILITY_TOL:
        raise ValueError(f"h is infeasible: |h|^2 = {h @ h} > E_H = {p.e_h}")
    W = p.W
    diffs = np.delete(W, k, axis=0) - W[k]
    grad_f = np.exp(diffs @ h) @ diffs

    g = float(h @ h - p.e_h)
    active = abs(g) <= active_tol * max(p.e_h, 1.0)
    if active and h @ h > 0:
        lam = max(0.0, float(-(grad_f @ h) / (2.0 * (h @ h))))
    else:
        lam = 0.0
    residual = float(np.linalg.norm(grad_f + 2.0 * lam * h))

    scale = np.sqrt(p.e_h / p.e_w)
    a_values = np.exp(scale * (diffs @ W[k]))
    lam_cf = 0.5 * np.sqrt(p.e_w / p.e_h) * float(a_values[0]) * p.k
    return KKTReport(residual=residual, lam=lam, lam_closed_form=lam_cf,
                     a_values=a_values, g=g, active=bool(active))
