import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss

from stns.elements import temporal_basis
from stns.temporal import (
    assemble_temporal,
    jump_apply,
    kron_apply,
    pack_previous_trace,
)


def dense_temporal_oracle(k):
    """Assemble K via heavy quadrature, independent of the production path."""
    basis = temporal_basis(k)
    gx, gw = leggauss(3 * k + 6)
    vals = basis.values(gx)
    ders = basis.derivatives(gx)
    K = np.einsum("q,qa,qb->ab", gw, vals, ders)
    left = basis.values(-1.0)[0]
    return K + np.outer(left, left), np.einsum("q,qa,qb->ab", gw, vals, vals)


def test_dg0_matrices():
    tm = assemble_temporal(0, 0.1)
    assert np.allclose(tm.K, [[1.0]])
    assert np.allclose(tm.M_diag, [0.1])
    assert np.allclose(tm.C, [[1.0]])


def test_k1_mass_diagonal():
    tm = assemble_temporal(1, 1.0)
    assert np.allclose(tm.M_diag, [0.75, 0.25], atol=1e-14)


@pytest.mark.parametrize("k", range(5))
def test_K_and_M_against_oracle(k):
    tm = assemble_temporal(k, 0.7)
    K_ref, M_ref = dense_temporal_oracle(k)
    assert np.allclose(tm.K, K_ref, atol=1e-13)
    # the exact temporal mass matrix is diagonal with the Radau weights
    assert np.allclose(np.diag(0.5 * 0.7 * np.diag(M_ref)), 0.35 * M_ref, atol=1e-14)
    assert np.allclose(tm.M_diag, 0.5 * 0.7 * np.diag(M_ref), atol=1e-14)


@pytest.mark.parametrize("k", range(5))
def test_K_endpoint_identity(k):
    # int (phi_a phi_b)' = [phi_a phi_b] gives
    # K + K^T = phi(1) phi(1)^T + phi(-1) phi(-1)^T
    tm = assemble_temporal(k, 1.0)
    basis = temporal_basis(k)
    left = basis.values(-1.0)[0]
    right = basis.values(1.0)[0]
    assert np.allclose(
        tm.K + tm.K.T, np.outer(right, right) + np.outer(left, left), atol=1e-13
    )


@pytest.mark.parametrize("k", range(5))
def test_K_row_sums_equal_jump_column(k):
    # with sum_b phi_b = 1 the integral part vanishes and the row sum
    # telescopes to phi_a(-1), the jump column of C
    tm = assemble_temporal(k, 1.0)
    assert np.allclose(tm.K.sum(axis=1), tm.C[:, -1], atol=1e-13)


def test_C_structure_k1():
    tm = assemble_temporal(1, 1.0)
    assert np.allclose(tm.C, [[0.0, 1.5], [0.0, -0.5]], atol=1e-13)
    assert np.allclose(tm.C[:, :-1], 0.0)


def test_node_times_map():
    tm = assemble_temporal(1, 0.5)
    times = tm.node_times(1.0, 1.5)
    assert times[-1] == pytest.approx(1.5)
    assert times[0] == pytest.approx(1.25 - 0.25 / 3.0)


def test_tau_scaling():
    a = assemble_temporal(2, 0.25)
    b = assemble_temporal(2, 0.5)
    assert np.allclose(a.K, b.K)
    assert np.allclose(a.C, b.C)
    assert np.allclose(2 * a.M_diag, b.M_diag)


def test_kron_apply_matches_dense_kron():
    rng = np.random.default_rng(2)
    k, n = 2, 5
    A = rng.standard_normal((k + 1, k + 1))
    B = rng.standard_normal((n, n))
    X = rng.standard_normal((k + 1, n))
    got = kron_apply(A, lambda x: B @ x, X)
    want = (np.kron(A, B) @ X.ravel()).reshape(k + 1, n)
    assert np.allclose(got, want, atol=1e-13)


def test_kron_apply_invokes_action_once_per_block():
    calls = []
    A = np.eye(3)
    X = np.ones((3, 4))
    kron_apply(A, lambda x: calls.append(1) or x, X)
    assert len(calls) == 3


def test_kron_apply_shape_mismatch():
    with pytest.raises(ValueError):
        kron_apply(np.eye(2), lambda x: x, np.ones((3, 4)))


def test_jump_apply_single_mass_application():
    tm = assemble_temporal(2, 1.0)
    rng = np.random.default_rng(4)
    trace = rng.standard_normal(6)
    packed = pack_previous_trace(tm, trace)
    calls = []

    def mass(x):
        calls.append(1)
        return 2.0 * x

    got = jump_apply(tm, mass, packed)
    assert len(calls) == 1
    want = np.einsum("ab,bn->an", tm.C, 2.0 * packed)
    assert np.allclose(got, want, atol=1e-14)


def test_jump_apply_bad_pack():
    tm = assemble_temporal(1, 1.0)
    with pytest.raises(ValueError):
        jump_apply(tm, lambda x: x, np.ones((3, 4)))


def test_invalid_tau():
    with pytest.raises(ValueError):
        assemble_temporal(1, 0.0)
