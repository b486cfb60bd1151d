import numpy as np
import pytest

from dqmq.errors import ContractError
from dqmq.sensitivity import (POOL_HIGH, POOL_LOW, POOL_MID, LinearSurface, ModelSurface, QuadraticSurface,
                              SensitivityProfile, Surface, assign_pools, hutchinson, hutchinson_trace, hvp,
                              perturbation_direction, perturbation_sweep, profile)


class DenseQuadratic(Surface):
    """0.5 theta^T A theta with a dense symmetric A, so Rademacher probes have variance."""

    def __init__(self, A, blocks=None):
        self.A = np.asarray(A, np.float64)
        self.theta = np.zeros(len(A))
        self.slices = blocks or {"all": slice(0, len(A))}

    def grad(self, theta):
        return self.A @ theta

    def loss(self, theta):
        return float(0.5 * theta @ self.A @ theta)


def dense(n=6, seed=0):
    M = np.random.default_rng(seed).normal(size=(n, n))
    return M + M.T


def test_diag_quadratic_trace():
    est, err = hutchinson(QuadraticSurface([1, 2, 3]), 1000, seed=0)["all"]
    assert est == pytest.approx(6.0, rel=0.05)


def test_linear_trace_is_zero():
    est, _ = hutchinson(LinearSurface([1.0, -2.0, 0.5]), 50, seed=0)["all"]
    assert abs(est) < 1e-3


def test_hvp_matches_matrix_product():
    A = dense()
    v = np.random.default_rng(1).normal(size=6)
    np.testing.assert_allclose(hvp(DenseQuadratic(A), v), A @ v, rtol=1e-9)


def test_block_traces_are_separate():
    A = dense()
    s = DenseQuadratic(A, {"a": slice(0, 2), "b": slice(2, 6)})
    est = hutchinson(s, 4000, seed=3)
    assert est["a"][0] == pytest.approx(np.trace(A[:2, :2]), abs=4 * est["a"][1])
    assert est["b"][0] == pytest.approx(np.trace(A[2:, 2:]), abs=4 * est["b"][1])


def test_stderr_shrinks_like_inverse_sqrt():
    s = DenseQuadratic(dense())
    ratios = []
    for rep in range(10):
        e1 = hutchinson(s, 200, seed=100 + rep)["all"][1]
        e2 = hutchinson(s, 400, seed=200 + rep)["all"][1]
        ratios.append(e2 / e1)
    assert np.mean(ratios) == pytest.approx(1 / np.sqrt(2), rel=0.2)


def test_single_probe_has_infinite_stderr():
    assert hutchinson(DenseQuadratic(dense()), 1, seed=0)["all"][1] == np.inf


def test_probes_must_be_positive():
    with pytest.raises(ContractError):
        hutchinson(QuadraticSurface([1.0]), 0, seed=0)


def test_model_trace_matches_exact(tiny_model, tiny_data):
    """Hutchinson on one small layer against the Hessian built column by column."""
    batch = (tiny_data.images[:16], tiny_data.labels[:16])
    s = ModelSurface(tiny_model, batch, ["conv1"])
    n = s.theta.size
    exact = sum(hvp(s, np.eye(n)[i])[i] for i in range(n))
    est, err = hutchinson_trace(tiny_model, batch, "conv1", 300, seed=0)
    assert abs(est - exact) <= 4 * err + 1e-6


def test_model_surface_does_not_touch_model(tiny_model, tiny_data):
    before = tiny_model.state()
    profile(tiny_model, (tiny_data.images[:8], tiny_data.labels[:8]), probes=2, seed=0)
    for k, v in tiny_model.state().items():
        np.testing.assert_array_equal(v, before[k])


def test_assign_pools_examples():
    assert assign_pools([10, 1, 0.1]) == [POOL_HIGH, POOL_MID, POOL_LOW]
    pools = assign_pools(list(range(1, 10)))
    assert pools[:3] == [POOL_LOW] * 3 and pools[3:6] == [POOL_MID] * 3 and pools[6:] == [POOL_HIGH] * 3


def test_assign_pools_ties_favour_earlier_layer():
    assert assign_pools([1.0, 1.0, 1.0]) == [POOL_HIGH, POOL_MID, POOL_LOW]


def test_assign_pools_scale_invariant_and_monotone():
    h = np.random.default_rng(0).exponential(size=9)
    assert assign_pools(h) == assign_pools(h * 1e4)
    pools = assign_pools(h)
    for i in range(9):
        for j in range(9):
            if h[i] >= h[j]:
                assert max(pools[i]) >= max(pools[j])


def test_profile_json_roundtrip(tiny_model, tiny_data):
    p = profile(tiny_model, (tiny_data.images[:8], tiny_data.labels[:8]), probes=1, seed=0, quality=2)
    q = SensitivityProfile.from_dict(__import__("json").loads(p.to_json()))
    assert q.layers == p.layers and q.traces == p.traces and q.pools == p.pools
    assert all(e == np.inf for e in q.stderrs)


def test_perturbation_sweep_includes_zero(tiny_model, tiny_data):
    d = perturbation_direction(tiny_model, seed=0)
    norm = np.sqrt(sum(np.sum(v * v) for v in d.values()))
    assert norm == pytest.approx(1.0)
    curve = perturbation_sweep(tiny_model, (tiny_data.images[:8], tiny_data.labels[:8]), [-1, 1], d)
    assert [a for a, _ in curve] == [-1.0, 0.0, 1.0]


def test_blockwise_matches_block_traces():
    A = dense(seed=4)
    s = DenseQuadratic(A, {"a": slice(0, 3), "b": slice(3, 6)})
    joint = hutchinson(s, 2000, seed=0)
    block = hutchinson(s, 2000, seed=0, blockwise=True)
    for n, sl in s.slices.items():
        exact = np.trace(A[sl, sl])
        assert block[n][0] == pytest.approx(exact, abs=4 * block[n][1])
        assert block[n][1] < joint[n][1]


def test_model_block_traces_are_nonnegative(tiny_model, tiny_data):
    # each diagonal block of a ReLU network's Hessian is a Gauss-Newton matrix
    est = hutchinson(ModelSurface(tiny_model, (tiny_data.images[:32], tiny_data.labels[:32])), 3, seed=0,
                     blockwise=True)
    assert all(v >= -1e-9 for v, _ in est.values())
