import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acpg.envs import IdealCliffWorld, optimal_policy
from acpg.etf import generate_etf
from acpg.metrics import (
    ActivationSet,
    MetricError,
    class_means,
    collapse_report,
    equiangularity_std,
    equinorm,
    global_mean,
    maxangle_metric,
    nearest_center_agreement,
    pairwise_cosines,
    pinv_svd,
    read_activation_dump,
    self_duality,
    within_class_variability,
    write_activation_dump,
)
from oracles import collapsed_activations


def random_set(seed, n=30, d=6, k=3):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(k), rng.integers(k, size=n - k)])
    return ActivationSet(rng.standard_normal((n, d)), labels, k)


class TestMeans:
    def test_single(self):
        a = ActivationSet(np.array([[1.0, 2.0]]), np.array([0]), 1)
        np.testing.assert_allclose(global_mean(a), [1.0, 2.0])

    def test_symmetric(self):
        v = np.array([1.0, -2.0, 0.5])
        a = ActivationSet(np.array([v, -v, v, -v]), np.array([0, 1, 0, 1]), 2)
        np.testing.assert_allclose(global_mean(a), 0.0)

    def test_brute_force(self):
        a = random_set(0)
        total = np.zeros(a.d)
        for row in a.h:
            total += row
        np.testing.assert_allclose(global_mean(a), total / len(a.h))
        for k in range(3):
            rows = [a.h[i] for i in range(len(a.labels)) if a.labels[i] == k]
            np.testing.assert_allclose(class_means(a)[k], sum(rows) / len(rows))

    def test_empty_class(self):
        with pytest.raises(MetricError):
            class_means(ActivationSet(np.ones((2, 2)), np.array([0, 0]), 2))

    def test_label_range(self):
        with pytest.raises(MetricError):
            ActivationSet(np.ones((2, 2)), np.array([0, 5]), 2)


class TestEquinorm:
    def test_etf(self):
        assert equinorm(generate_etf(5, 9).head) < 1e-12

    def test_one_three(self):
        assert equinorm(np.array([[1.0, 0.0], [0.0, 3.0]])) == pytest.approx(0.5)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3))
    def test_scale_invariant(self, seed, c):
        w = np.random.default_rng(seed).standard_normal((4, 5))
        assert equinorm(c * w) == pytest.approx(equinorm(w), rel=1e-9, abs=1e-12)

    def test_zero(self):
        with pytest.raises(MetricError):
            equinorm(np.zeros((3, 2)))


class TestAngles:
    def test_etf(self):
        w = generate_etf(6, 8).head
        assert equiangularity_std(w) < 1e-12
        assert maxangle_metric(w) < 1e-12

    def test_orthonormal(self):
        assert equiangularity_std(np.eye(4)) == 0.0
        assert maxangle_metric(np.eye(4)) == pytest.approx(1 / 3)

    def test_cosines_0_0_1(self):
        v = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        np.testing.assert_allclose(sorted(pairwise_cosines(v)), [0, 0, 1], atol=1e-15)
        assert equiangularity_std(v) == pytest.approx(np.sqrt(2) / 3)

    def test_identical_pair(self):
        assert maxangle_metric(np.array([[1.0, 2.0], [1.0, 2.0]])) == pytest.approx(2.0)

    def test_centering(self):
        w = generate_etf(3, 4).head
        shift = np.array([5.0, -1.0, 2.0, 0.3])
        assert maxangle_metric(w + shift, center=shift) < 1e-12


class TestWithinVariability:
    def test_collapsed(self):
        etf, h, labels = collapsed_activations(4, 6)
        assert within_class_variability(ActivationSet(h, labels, 4)) < 1e-12

    def test_scalar_case(self):
        # classes at +-1 with within-class variance v; Sigma_B = 1
        v = 0.09
        h = np.array([1 - 0.3, 1 + 0.3, -1 - 0.3, -1 + 0.3])[:, None]
        value = within_class_variability(ActivationSet(h, np.array([0, 0, 1, 1]), 2))
        assert value == pytest.approx(v / 2)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_rotation_invariant(self, seed):
        a = random_set(seed)
        q, _ = np.linalg.qr(np.random.default_rng(seed + 1).standard_normal((a.d, a.d)))
        rotated = ActivationSet(a.h @ q.T, a.labels, a.k)
        assert within_class_variability(rotated) == pytest.approx(within_class_variability(a), rel=1e-8)

    def test_degenerate_means(self):
        h = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        with pytest.raises(MetricError):
            within_class_variability(ActivationSet(h, np.array([0, 0, 1, 1]), 2))

    def test_pinv_matches_numpy(self):
        a = np.random.default_rng(0).standard_normal((5, 3)) @ np.random.default_rng(1).standard_normal((3, 5))
        np.testing.assert_allclose(pinv_svd(a), np.linalg.pinv(a, rcond=1e-8), atol=1e-10)


class TestSelfDuality:
    def test_aligned(self):
        etf, h, labels = collapsed_activations(3, 5)
        assert self_duality(ActivationSet(h, labels, 3), etf.head) == pytest.approx(1.0)

    def test_opposed(self):
        etf, h, labels = collapsed_activations(3, 5)
        assert self_duality(ActivationSet(-h, labels, 3), etf.head) == pytest.approx(-1.0)

    def test_random_near_zero(self):
        rng = np.random.default_rng(0)
        etf = generate_etf(4, 64, seed=0)
        values = []
        for _ in range(50):
            labels = np.repeat(np.arange(4), 5)
            values.append(self_duality(ActivationSet(rng.standard_normal((20, 64)), labels, 4), etf.head))
        assert np.mean(np.abs(np.array(values)) < 0.3) > 0.95


class TestReport:
    @pytest.mark.parametrize("k,d", [(2, 3), (4, 4), (4, 16), (8, 20)])
    def test_exact_collapse(self, k, d):
        etf, h, labels = collapsed_activations(k, d)
        r = collapse_report(ActivationSet(h, labels, k), etf.head)
        for name in ("equinorm_w", "equiang_std_h", "equiang_std_w", "maxangle_h", "maxangle_w", "within_var"):
            assert abs(getattr(r, name)) < 1e-8, name
        assert r.self_duality == pytest.approx(1.0, abs=1e-8)
        assert r.is_finite()

    def test_rotation_invariance(self):
        a = random_set(3, d=6, k=3)
        w = np.random.default_rng(4).standard_normal((3, 6))
        q, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((6, 6)))
        r1 = collapse_report(a, w).values()
        r2 = collapse_report(ActivationSet(a.h @ q.T, a.labels, 3), w @ q.T).values()
        for key in r1:
            assert r1[key] == pytest.approx(r2[key], rel=1e-8, abs=1e-12)


class TestNearestCenter:
    def test_gridworld_exhaustive(self):
        env = IdealCliffWorld()
        pol = optimal_policy(env)
        labels = np.array([pol[s] for s in env.all_states()])
        for seed in range(5):
            etf = generate_etf(4, 8, 1.0, seed=seed)
            h = np.sqrt(3.0) * etf.head[labels]
            agree = nearest_center_agreement(ActivationSet(h, labels, 4), etf.head)
            assert agree.all()
            assert np.array_equal(np.argmax(h @ etf.head.T, axis=1), labels)


class TestDump:
    def test_round_trip(self, tmp_path):
        a = random_set(0)
        path = tmp_path / "acts.jsonl"
        write_activation_dump(path, a, state_ids=range(100, 130))
        first = json.loads(path.read_text().splitlines()[0])
        assert set(first) == {"state_id", "class_k", "h"} and first["state_id"] == 100
        back = read_activation_dump(path, 3)
        np.testing.assert_array_equal(back.h, a.h)
        np.testing.assert_array_equal(back.labels, a.labels)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"state_id": 0, "h": [1.0]}\n')
        with pytest.raises(MetricError, match="line 1"):
            read_activation_dump(path, 2)

    def test_empty(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("\n")
        with pytest.raises(MetricError):
            read_activation_dump(path, 2)
