import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acpg.etf import generate_etf
from acpg.lpm import (
    DivergenceError,
    LpmProblem,
    exp_margin_sum,
    kkt_check,
    lpm_gradient,
    lpm_objective,
    project_ball,
    solve_projected_ascent,
    theorem1_residual,
    theorem1_targets,
)


def problem(k=3, d=5, counts=None, e_h=1.0, e_w=1.0, seed=0, **kw):
    etf = generate_etf(k, d, e_w, seed=seed)
    return LpmProblem.from_counts(etf, counts or [2] * k, e_h, **kw)


def random_feasible(rng, n, d, e_h):
    h = rng.standard_normal((n, d))
    r = np.sqrt(e_h) * rng.random(n) ** (1 / d)
    return h / np.linalg.norm(h, axis=1, keepdims=True) * r[:, None]


class TestObjective:
    def test_zero_activations(self):
        p = problem(k=4, counts=[1, 2, 1, 3], weights=np.arange(1, 8) / 7, psi=np.full(7, 2.0))
        expected = float(np.sum(p.weights * p.psi) * np.log(1 / 4))
        assert lpm_objective(p, np.zeros((7, 5))) == pytest.approx(expected)

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_optimum_beats_zero(self, k):
        p = problem(k=k, d=k + 1, e_h=0.3)
        assert lpm_objective(p, p.closed_form()) > lpm_objective(p, np.zeros_like(p.closed_form()))

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        p = problem(k=3, d=4, counts=[2, 2, 1], weights=rng.uniform(0.1, 1, 5), psi=rng.uniform(0.5, 2, 5))
        h = rng.standard_normal((5, 4))
        total = 0.0
        for s in range(5):
            z = [h[s] @ p.W[j] for j in range(3)]
            total += p.weights[s] * p.psi[s] * (z[p.labels[s]] - np.log(sum(np.exp(v) for v in z)))
        assert lpm_objective(p, h) == pytest.approx(total)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(1)
        p = problem(k=4, d=6, psi=rng.uniform(0.5, 2, 8))
        h = rng.standard_normal((8, 6))
        g = lpm_gradient(p, h)
        step = 1e-6
        for idx in [(0, 0), (3, 2), (7, 5)]:
            hp, hm = h.copy(), h.copy()
            hp[idx] += step
            hm[idx] -= step
            fd = (lpm_objective(p, hp) - lpm_objective(p, hm)) / (2 * step)
            assert g[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_validation(self):
        with pytest.raises(ValueError):
            problem(psi=-np.ones(6))
        with pytest.raises(ValueError):
            problem(e_h=0.0)
        with pytest.raises(ValueError):
            LpmProblem.from_counts(generate_etf(3, 4), [1, 2], 1.0)

    def test_global_max_spot_check(self):
        rng = np.random.default_rng(2)
        p = problem(k=3, d=4, counts=[1, 1, 1], e_h=2.0)
        best = lpm_objective(p, p.closed_form())
        for _ in range(10_000):
            assert lpm_objective(p, random_feasible(rng, 3, 4, 2.0)) < best


class TestSolver:
    def test_alignment_k4_d8(self):
        p = problem(k=4, d=8, e_h=1.5)
        res = solve_projected_ascent(p, rng=np.random.default_rng(0))
        w = p.W[p.labels]
        cos = np.einsum("ij,ij->i", res.h, w) / (np.linalg.norm(res.h, axis=1) * np.linalg.norm(w, axis=1))
        assert np.all(cos > 0.999)
        assert res.iterations <= 50_000

    @pytest.mark.parametrize("counts", [(1, 1, 100), (1000, 1, 1)])
    def test_imbalance(self, counts):
        rng = np.random.default_rng(3)
        p = problem(k=3, d=6, counts=list(counts), e_h=2.0, psi=rng.uniform(0.2, 5.0, sum(counts)))
        res = solve_projected_ascent(p, rng=rng)
        assert theorem1_residual(res.h, p) <= 1e-3 * np.sqrt(2.0)
        cos = np.einsum("ij,ij->i", res.h, p.closed_form()) / 2.0
        assert np.all(cos > 0.999)

    def test_antipodal_1d(self):
        p = problem(k=2, d=1, counts=[3, 2], e_h=4.0)
        res = solve_projected_ascent(p, rng=np.random.default_rng(0))
        np.testing.assert_allclose(np.abs(res.h[:, 0]), 2.0, atol=1e-6)
        np.testing.assert_allclose(np.sign(res.h[:, 0]), np.sign(p.W[p.labels, 0]))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000), e_h=st.floats(0.1, 10.0))
    def test_iterates_feasible(self, seed, e_h):
        p = problem(k=3, d=4, e_h=e_h, seed=seed)
        res = solve_projected_ascent(p, iters=200, rng=np.random.default_rng(seed))
        assert np.all(np.einsum("ij,ij->i", res.h, res.h) <= e_h + 1e-9)

    def test_history_monotone(self):
        p = problem(k=4, d=8)
        res = solve_projected_ascent(p, rng=np.random.default_rng(0))
        assert res.converged
        assert np.all(np.diff(res.history) >= -1e-12)

    def test_divergence(self, monkeypatch):
        import acpg.lpm as lpm

        monkeypatch.setattr(lpm, "lpm_gradient", lambda p, h: -lpm_gradient(p, h))
        with pytest.raises(DivergenceError):
            lpm.solve_projected_ascent(problem(k=3, d=4), iters=5000, patience=3,
                                       rng=np.random.default_rng(0))

    def test_bad_lr(self):
        with pytest.raises(ValueError):
            solve_projected_ascent(problem(), lr=0.0)

    def test_project_ball(self):
        h = np.array([[3.0, 4.0], [0.1, 0.0]])
        out = project_ball(h, 1.0)
        np.testing.assert_allclose(out[0], [0.6, 0.8])
        np.testing.assert_array_equal(out[1], h[1])


class TestTheorem1:
    def test_closed_form_residual(self):
        p = problem(k=5, d=9, e_h=3.0, e_w=2.0)
        assert theorem1_residual(p.closed_form(), p) < 1e-12

    def test_targets_hand_values(self):
        p = problem(k=3, d=4, counts=[1, 1, 1], e_h=4.0, e_w=1.0)
        np.testing.assert_allclose(theorem1_targets(p), [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])

    def test_zero_residual(self):
        # the largest target is the own-class one: sqrt(E_H E_W) (K/(K-1) - 1/(K-1))
        p = problem(k=4, d=6, e_h=2.0, e_w=0.5)
        assert theorem1_residual(np.zeros((8, 6)), p) == pytest.approx(np.sqrt(2.0 * 0.5))


class TestKkt:
    @pytest.mark.parametrize("k,d,e_h,e_w", [(2, 1, 1.0, 1.0), (3, 5, 4.0, 1.0), (4, 4, 0.5, 4.0), (8, 64, 1.0, 0.5)])
    def test_closed_form(self, k, d, e_h, e_w):
        p = problem(k=k, d=d, e_h=e_h, e_w=e_w, counts=[1] * k)
        h = p.closed_form()
        for c in range(k):
            rep = kkt_check(h[c], p, c)
            assert rep.residual < 1e-10
            assert rep.active and rep.lam > 0
            assert rep.lam == pytest.approx(rep.lam_closed_form, rel=1e-8)
            np.testing.assert_allclose(rep.a_values, rep.a_values[0], rtol=1e-12)

    def test_zero_inactive(self):
        p = problem(e_h=2.0)
        rep = kkt_check(np.zeros(5), p, 0)
        assert rep.g == pytest.approx(-2.0) and not rep.active and rep.lam == 0.0

    def test_infeasible(self):
        with pytest.raises(ValueError):
            kkt_check(np.full(5, 10.0), problem(), 0)

    def test_reduction_agrees(self):
        # minimizing sum_j exp(h(w_j - w_k)) is a monotone transform of maximizing log softmax
        rng = np.random.default_rng(0)
        p = problem(k=4, d=6, e_h=1.0)
        pts = random_feasible(rng, 100, 6, 1.0)
        margin = np.array([exp_margin_sum(h, p.W, 2) for h in pts])
        z = pts @ p.W.T
        logsm = z[:, 2] - np.log(np.exp(z).sum(axis=1))
        assert np.argmin(margin) == np.argmax(logsm)
        np.testing.assert_allclose(logsm, -np.log1p(margin), atol=1e-12)
