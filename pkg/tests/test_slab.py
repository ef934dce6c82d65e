import numpy as np
import pytest

from stns.elements import build_pressure_space, build_velocity_space
from stns.geometry import build_hierarchy
from stns.operators import SpatialOperatorSet
from stns.slab import DenseAssembler, SlabProblem, dense_oracle


def force(x, t):
    return np.column_stack(
        [np.sin(x[:, 0] + t), np.cos(x[:, 1]) - 0.2 * t]
    )


def bdata(x, t):
    return np.column_stack(
        [0.3 * t * x[:, 1] + 0.1, 0.2 * np.sin(np.pi * x[:, 0]) - 0.05 * t]
    )


def make_problem(n=2, r=1, k=1, nu=0.4, with_data=True, convection=True,
                 zero_prev=False, seed=0):
    hier = build_hierarchy(((0.0, 0.0), (1.0, 1.0)), base_cells_per_dim=n)
    lvl = hier.finest
    vs = build_velocity_space(lvl, r)
    ps = build_pressure_space(lvl, r)
    ops = SpatialOperatorSet(vs, ps, nu)
    if zero_prev:
        v_prev = np.zeros(vs.n_dofs)
    else:
        v_prev = np.random.default_rng(seed).standard_normal(vs.n_dofs)
    return SlabProblem(
        ops, k, 0.2, 0.45, v_prev,
        f=force if with_data else None,
        g=bdata if with_data else None,
        include_convection=convection,
    )


def test_zero_state_zero_data_zero_residual():
    pr = make_problem(with_data=False, zero_prev=True)
    R = pr.residual(pr.layout.zeros())
    assert np.allclose(R, 0.0, atol=1e-14)


def test_constant_guess_and_end_trace():
    pr = make_problem()
    U = pr.constant_guess()
    Vb, Pb = pr.layout.split(U)
    assert np.allclose(Vb, pr.v_prev[None, :])
    assert np.allclose(Pb, 0.0)
    assert np.allclose(pr.end_velocity(U), pr.v_prev)


@pytest.mark.parametrize("k,r", [(1, 1), (2, 1)])
def test_residual_matches_dense_oracle(k, r):
    rng = np.random.default_rng(21)
    pr = make_problem(k=k, r=r)
    asm = DenseAssembler(pr)
    for _ in range(3):
        U = rng.standard_normal(pr.layout.n_unknowns)
        R = pr.residual(U)
        R_ref = asm.residual(U)
        scale = max(1.0, np.abs(R_ref).max())
        assert np.abs(R - R_ref).max() < 1e-12 * scale


def test_jacobian_matches_dense_oracle():
    rng = np.random.default_rng(22)
    pr = make_problem(n=1, k=1, r=1)
    U = rng.standard_normal(pr.layout.n_unknowns)
    R, J = dense_oracle(pr, U)
    assert np.abs(pr.residual(U) - R).max() < 1e-12 * max(1.0, np.abs(R).max())
    pr.set_linearization(U)
    scale = max(1.0, np.abs(J).max())
    for _ in range(10):
        dU = rng.standard_normal(pr.layout.n_unknowns)
        ref = J @ dU
        assert np.abs(pr.jacobian_action(dU) - ref).max() < 1e-11 * scale


def test_jacobian_block_structure():
    rng = np.random.default_rng(23)
    pr = make_problem(n=1, k=1, r=1)
    U = rng.standard_normal(pr.layout.n_unknowns)
    _, J = dense_oracle(pr, U)
    nv = pr.layout.n_nodes * pr.layout.n_v
    J12 = J[:nv, nv:]
    J21 = J[nv:, :nv]
    J22 = J[nv:, nv:]
    assert np.allclose(J22, 0.0, atol=1e-13)
    assert np.allclose(J21, J12.T, atol=1e-12)


def test_taylor_remainder_is_exactly_quadratic():
    # for increments supported away from the boundary the residual is a
    # quadratic polynomial along the line U + t dU, so the Taylor remainder
    # scales exactly with t^2
    rng = np.random.default_rng(31)
    pr = make_problem(n=2, k=1, r=1)
    vs = pr.ops.vspace
    U = rng.standard_normal(pr.layout.n_unknowns)
    dU = rng.standard_normal(pr.layout.n_unknowns)
    dVb, _ = pr.layout.split(dU)
    bnodes = vs.boundary_scalar_nodes
    for a in range(pr.tm.n_nodes):
        dVb[a].reshape(-1, 2)[bnodes] = 0.0
    pr.set_linearization(U)
    R0 = pr.residual(U)
    JdU = pr.jacobian_action(dU)
    rem_full = pr.residual(U + dU) - R0 - JdU
    rem_half = pr.residual(U + 0.5 * dU) - R0 - 0.5 * JdU
    scale = max(1.0, np.abs(rem_full).max())
    assert np.abs(rem_half - 0.25 * rem_full).max() < 1e-12 * scale


def test_stokes_limit_is_linear():
    rng = np.random.default_rng(41)
    pr = make_problem(convection=False)
    U = rng.standard_normal(pr.layout.n_unknowns)
    W = rng.standard_normal(pr.layout.n_unknowns)
    R0 = pr.residual(pr.layout.zeros())
    lhs = pr.residual(U + W)
    rhs = pr.residual(U) + pr.residual(W) - R0
    assert np.allclose(lhs, rhs, atol=1e-11)


def test_mass_norm_of_constant_state():
    # k = 0 on a unit square: ||U||^2 = tau (V^T M V + P^T M_p P)
    hier = build_hierarchy(((0.0, 0.0), (1.0, 1.0)), base_cells_per_dim=2)
    vs = build_velocity_space(hier.finest, 1)
    ps = build_pressure_space(hier.finest, 1)
    ops = SpatialOperatorSet(vs, ps, 1.0)
    pr = SlabProblem(ops, 0, 0.0, 0.25, np.zeros(vs.n_dofs))
    V = np.zeros(vs.n_dofs)
    V.reshape(-1, 2)[:, 0] = 1.0
    U = pr.layout.join(V[None, :], np.zeros((1, ps.n_dofs)))
    assert np.isclose(pr.mass_norm(U), np.sqrt(0.25 * 1.0), atol=1e-13)


def test_jacobian_requires_linearization_state():
    pr = make_problem()
    with pytest.raises(RuntimeError):
        pr.jacobian_action(pr.layout.zeros())


def test_dense_guard_rejects_large_systems():
    pr = make_problem(n=8, r=3, k=2)
    assert pr.layout.n_unknowns > 5000
    with pytest.raises(ValueError):
        DenseAssembler(pr)


def test_invalid_slab_interval():
    hier = build_hierarchy(((0.0, 0.0), (1.0, 1.0)))
    vs = build_velocity_space(hier.finest, 1)
    ps = build_pressure_space(hier.finest, 1)
    ops = SpatialOperatorSet(vs, ps, 1.0)
    with pytest.raises(ValueError):
        SlabProblem(ops, 1, 0.5, 0.5, np.zeros(vs.n_dofs))
