import numpy as np
import pytest

from stns.elements import (
    build_pressure_space,
    build_velocity_space,
    gauss_legendre,
    gauss_radau,
    tensor_quadrature,
)
from stns.geometry import DIRICHLET, NEUMANN, build_hierarchy, build_time_partition
from stns.operators import SpatialOperatorSet
from stns.slab import SlabProblem, dense_oracle
from stns.solver import (
    ForcingConfig,
    NewtonConfig,
    NewtonStepRecord,
    fgmres,
    march,
    newton_solve_slab,
)
from stns.stmg import (
    LevelParams,
    RebuildConfig,
    STMGPreconditioner,
    build_schedule,
)

UNIT = ((0.0, 0.0), (1.0, 1.0))


def force(x, t):
    return np.column_stack(
        [np.sin(x[:, 0] + t), np.cos(x[:, 1]) - 0.2 * t]
    )


def bdata(x, t):
    return np.column_stack(
        [0.3 * t * x[:, 1] + 0.1, 0.2 * np.sin(np.pi * x[:, 0]) - 0.05 * t]
    )


def setup(n_fine=2, levels=1, r=1, k=1, nu=0.4, with_data=True,
          convection=True, boundary_rule=None, t0=0.2, t1=0.45, seed=3):
    base = n_fine // 2 ** (levels - 1)
    hier = build_hierarchy(UNIT, base_cells_per_dim=base, levels=levels,
                           boundary_rule=boundary_rule)
    vs = build_velocity_space(hier.finest, r)
    ps = build_pressure_space(hier.finest, r)
    ops = SpatialOperatorSet(vs, ps, nu)
    v_prev = np.random.default_rng(seed).standard_normal(vs.n_dofs) * 0.3
    pr = SlabProblem(
        ops, k, t0, t1, v_prev,
        f=force if with_data else None,
        g=bdata if with_data else None,
        include_convection=convection,
    )
    return hier, ops, pr


# ------------------------------------------------------------------ schedule


def test_schedule_spatial_halving_then_geometric():
    sched = [p.astuple() for p in build_schedule(2, 4, 4)]
    assert sched == [(2, 4, 4), (2, 4, 2), (2, 4, 1), (1, 4, 1), (0, 4, 1)]


def test_schedule_single_order_step():
    sched = [p.astuple() for p in build_schedule(0, 3, 3)]
    assert sched == [(0, 3, 3), (0, 3, 1)]


def test_schedule_keeps_temporal_degree():
    sched = [p.astuple() for p in build_schedule(1, 1, 4)]
    assert sched == [(1, 1, 4), (1, 1, 2), (1, 1, 1), (0, 1, 1)]
    sched = [p.astuple() for p in build_schedule(0, 4, 2)]
    assert sched == [(0, 4, 2), (0, 4, 1)]


def test_schedule_keeps_lowest_order_time():
    sched = [p.astuple() for p in build_schedule(1, 0, 2)]
    assert sched == [(1, 0, 2), (1, 0, 1), (0, 0, 1)]


def test_schedule_degenerate_single_level():
    assert [p.astuple() for p in build_schedule(0, 1, 1)] == [(0, 1, 1)]


# ------------------------------------------------------------------ patches


def test_patch_size_formula():
    for k, r in [(1, 1), (2, 2), (0, 3)]:
        hier, ops, pr = setup(n_fine=2, r=r, k=k)
        pre = STMGPreconditioner(ops, k, hier)
        m = pre.levels[0].patch_size
        assert m == (k + 1) * (2 * (r + 2) ** 2 + (r + 1) * (r + 2) // 2)


@pytest.mark.parametrize("convection", [True, False])
def test_patch_matrices_restrict_global_jacobian(convection):
    hier, ops, pr = setup(n_fine=2, r=1, k=1, convection=convection)
    rng = np.random.default_rng(11)
    U = rng.standard_normal(pr.layout.n_unknowns) * 0.5
    _, J = dense_oracle(pr, U)
    pre = STMGPreconditioner(ops, 1, hier, smoother="exact")
    pre.set_state(pr, U)
    big = pre.patch_matrices(0, mode="exact")
    idx = pre.levels[0].patch_idx
    scale = np.abs(J).max()
    for c in range(ops.level.n_cells):
        ref = J[np.ix_(idx[c], idx[c])]
        assert np.abs(big[c] - ref).max() < 1e-12 * scale


def test_one_cell_exact_vanka_solves_in_one_sweep():
    def mixed(m):
        return NEUMANN if m[0] > 1.0 - 1e-9 else DIRICHLET

    hier, ops, pr = setup(n_fine=1, r=1, k=1, boundary_rule=mixed)
    rng = np.random.default_rng(5)
    U = rng.standard_normal(pr.layout.n_unknowns) * 0.4
    _, J = dense_oracle(pr, U)
    pre = STMGPreconditioner(ops, 1, hier, smoother="exact", n_smooth=1,
                             omega=1.0)
    pre.set_state(pr, U)
    v = rng.standard_normal(pr.layout.n_unknowns)
    d = pre.apply(v)
    assert np.abs(J @ d - v).max() < 1e-9 * np.abs(v).max()


def test_surrogate_equals_exact_at_time_constant_state():
    hier, ops, pr = setup(n_fine=2, r=1, k=2, with_data=False)
    W = np.random.default_rng(7).standard_normal(ops.vspace.n_dofs)
    Vb = np.tile(W, (pr.tm.n_nodes, 1))
    U = pr.layout.join(Vb, np.zeros((pr.tm.n_nodes, pr.layout.n_p)))
    pre = STMGPreconditioner(ops, 2, hier)
    pre.set_state(pr, U)
    Se = pre.patch_matrices(0, mode="exact")
    Ss = pre.patch_matrices(0, mode="surrogate")
    assert np.abs(Se - Ss).max() < 1e-12 * np.abs(Se).max()


def test_surrogate_perturbation_shrinks_with_slab_length():
    rng = np.random.default_rng(13)
    hier = build_hierarchy(UNIT, base_cells_per_dim=2)
    vs = build_velocity_space(hier.finest, 1)
    ps = build_pressure_space(hier.finest, 1)
    ops = SpatialOperatorSet(vs, ps, 0.4)
    W0 = rng.standard_normal(vs.n_dofs) * 0.5
    W1 = rng.standard_normal(vs.n_dofs) * 0.5
    norms = []
    taus = [0.4, 0.2, 0.1, 0.05]
    for tau in taus:
        pr = SlabProblem(ops, 2, 1.0, 1.0 + tau, W0, f=force, g=bdata)
        Vb = W0[None, :] + pr.node_times[:, None] * W1[None, :]
        U = pr.layout.join(Vb, np.zeros((pr.tm.n_nodes, pr.layout.n_p)))
        pre = STMGPreconditioner(ops, 2, hier)
        pre.set_state(pr, U)
        E = pre.patch_matrices(0, "surrogate") - pre.patch_matrices(0, "exact")
        norms.append(max(np.linalg.norm(E[c], 2) for c in range(len(E))))
    slopes = np.log2(np.array(norms[:-1]) / np.array(norms[1:]))
    assert (slopes > 0.9).all()


# ---------------------------------------------------------------- transfers


def p_coeffs(pspace, func):
    """Cell-wise coefficient representation of a (low-degree) polynomial."""
    pts, _ = tensor_quadrature(gauss_legendre(pspace.r + 2))
    vand = pspace.basis_values(pts)
    lvl = pspace.mesh_level
    out = np.empty((lvl.n_cells, pspace.n_loc))
    scale = np.array([lvl.hx, lvl.hy])
    for c in range(lvl.n_cells):
        phys = lvl.cell_corners[c] + pts * scale
        out[c] = np.linalg.lstsq(vand, func(phys), rcond=None)[0]
    return out.reshape(-1)


def vfield(x):
    return np.column_stack(
        [x[:, 0] ** 2 + 0.5 * x[:, 1], x[:, 0] * x[:, 1] - x[:, 1] ** 2]
    )


def pfield(x):
    return 0.3 * x[:, 0] - 0.7 * x[:, 1] + 0.2


def _two_step_preconditioner():
    """Fine (s=1,k=2,r=2) -> (s=1,k=2,r=1) -> (s=0,k=2,r=1)."""
    hier = build_hierarchy(UNIT, base_cells_per_dim=2, levels=2)
    vs = build_velocity_space(hier.finest, 2)
    ps = build_pressure_space(hier.finest, 2)
    ops = SpatialOperatorSet(vs, ps, 0.4)
    pre = STMGPreconditioner(ops, 2, hier)
    assert [p.astuple() for p in pre.schedule] == [(1, 2, 2), (1, 2, 1), (0, 2, 1)]
    return pre


@pytest.mark.parametrize("step", [0, 1])
def test_prolongation_reproduces_polynomials(step):
    pre = _two_step_preconditioner()
    tr = pre.transfers[step]
    qc = gauss_radau(tr.coarse.params.k).points
    qf = gauss_radau(tr.fine.params.k).points
    Wc = tr.coarse.ops.vspace.interpolate(vfield)
    Wf = tr.fine.ops.vspace.interpolate(vfield)
    Pc = p_coeffs(tr.coarse.ops.pspace, pfield)
    Pf = p_coeffs(tr.fine.ops.pspace, pfield)
    tl = lambda xi: 1.0 - 0.5 * xi  # linear in reference time
    Uc = tr.coarse.layout.join(
        tl(qc)[:, None] * Wc[None, :], tl(qc)[:, None] * Pc[None, :]
    )
    Uf = tr.prolong(Uc)
    Vb, Pb = tr.fine.layout.split(Uf)
    assert np.abs(Vb - tl(qf)[:, None] * Wf[None, :]).max() < 1e-12
    assert np.abs(Pb - tl(qf)[:, None] * Pf[None, :]).max() < 1e-12


@pytest.mark.parametrize("step", [0, 1])
def test_restriction_is_prolongation_transpose(step):
    pre = _two_step_preconditioner()
    tr = pre.transfers[step]
    rng = np.random.default_rng(17)
    x = rng.standard_normal(tr.coarse.layout.n_unknowns)
    y = rng.standard_normal(tr.fine.layout.n_unknowns)
    lhs = tr.prolong(x) @ y
    rhs = x @ tr.restrict(y)
    assert abs(lhs - rhs) < 1e-11 * max(abs(lhs), 1.0)


@pytest.mark.parametrize("step", [0, 1])
def test_state_restriction_interpolates(step):
    pre = _two_step_preconditioner()
    tr = pre.transfers[step]
    qc = gauss_radau(tr.coarse.params.k).points
    qf = gauss_radau(tr.fine.params.k).points
    Wf = tr.fine.ops.vspace.interpolate(vfield)
    Wc = tr.coarse.ops.vspace.interpolate(vfield)
    tl = lambda xi: 0.25 + 0.5 * xi
    Vb = tl(qf)[:, None] * Wf[None, :]
    Vc = tr.restrict_state(Vb)
    assert np.abs(Vc - tl(qc)[:, None] * Wc[None, :]).max() < 1e-12


# ------------------------------------------------------------------ solves


def stokes_config():
    return NewtonConfig(
        gmres_max_iter=300,
        forcing=ForcingConfig(eta0=1e-10, eta_min=1e-10),
    )


def test_stokes_vcycle_accelerates_fgmres():
    hier, ops, pr = setup(n_fine=4, levels=2, r=1, k=1, convection=False,
                          seed=2)
    pre = STMGPreconditioner(ops, 1, hier)
    U, stats = newton_solve_slab(pr, pr.constant_guess(), preconditioner=pre,
                                 config=stokes_config())
    assert stats.converged
    assert stats.newton_iterations == 1
    # ten orders of magnitude in one linear solve; ~0.5 contraction per
    # preconditioned iteration
    assert stats.steps[0].linear_iterations <= 45
    # same linear system without the V-cycle needs far more iterations
    U0 = pr.constant_guess()
    pr.set_linearization(U0)
    b = -pr.residual(U0)
    _, info = fgmres(pr.jacobian_action, b, 1e-8 * pr.mass_norm(b),
                     norm=pr.mass_norm, max_iter=300)
    assert stats.steps[0].linear_iterations < info.iterations / 3


def test_march_with_stmg_navier_stokes():
    hier = build_hierarchy(UNIT, base_cells_per_dim=2, levels=2)
    vs = build_velocity_space(hier.finest, 1)
    ps = build_pressure_space(hier.finest, 1)
    ops = SpatialOperatorSet(vs, ps, 0.05)
    pre = STMGPreconditioner(ops, 1, hier)
    part = build_time_partition(0.5, 2)
    v0 = vs.interpolate(lambda x: bdata(x, 0.0))
    res = march(ops, 1, part, v0, f=force, g=bdata, preconditioner=pre)
    assert all(s.converged for s in res.stats)
    assert res.max_newton_iterations <= 10
    assert res.mean_linear_iterations <= 30
    # check the final slab solution actually solves its system
    last = res.problems[-1]
    assert last.mass_norm(last.residual(res.trajectory[-1])) < 1e-7


def test_exact_and_surrogate_modes_agree_on_solution():
    hier, ops, pr = setup(n_fine=4, levels=2, r=1, k=1, nu=0.1, seed=9)
    results = {}
    for mode in ("exact", "surrogate"):
        pre = STMGPreconditioner(ops, 1, hier, smoother=mode)
        U, stats = newton_solve_slab(pr, pr.constant_guess(),
                                     preconditioner=pre)
        assert stats.converged
        results[mode] = U
    # both modes solve the same nonlinear system
    diff = pr.mass_norm(results["exact"] - results["surrogate"])
    ref = pr.mass_norm(results["exact"])
    assert diff < 1e-4 * max(ref, 1.0)


def test_vcycle_output_is_gauge_projected():
    hier, ops, pr = setup(n_fine=2, levels=1, r=1, k=1)
    rng = np.random.default_rng(23)
    U = rng.standard_normal(pr.layout.n_unknowns) * 0.3
    pre = STMGPreconditioner(ops, 1, hier)
    pre.set_state(pr, U)
    d = pre.apply(rng.standard_normal(pr.layout.n_unknowns))
    _, Pb = pr.layout.split(d)
    for a in range(pr.tm.n_nodes):
        assert abs(ops.pressure_mean(Pb[a])) < 1e-12


# ------------------------------------------------------------------ rebuild


def _record(step=0, r_before=1.0, r_after=0.1, kappa=2.0, ratios=()):
    return NewtonStepRecord(
        step=step, eta=0.1, linear_iterations=5, linear_converged=True,
        alpha=1.0, r_before=r_before, r_after=r_after,
        condition_estimate=kappa, krylov_ratios=list(ratios),
    )


def _tiny_pre():
    hier, ops, pr = setup(n_fine=2, levels=1, r=1, k=1)
    pre = STMGPreconditioner(ops, 1, hier)
    U = np.zeros(pr.layout.n_unknowns)
    pre.set_state(pr, U)
    return pre


def test_rebuild_on_newton_contraction_loss():
    pre = _tiny_pre()
    pre.notify_step(_record(step=0, r_before=1.0, r_after=0.1))
    assert not pre._pending_rebuild
    pre.notify_step(_record(step=1, r_before=0.1, r_after=0.05))
    assert pre._pending_rebuild  # rho jumped 0.1 -> 0.5
    assert pre.trigger_log[-1][1] == "newton-contraction"


def test_rebuild_on_condition_growth():
    pre = _tiny_pre()
    pre.notify_step(_record(kappa=45.0))
    assert pre._pending_rebuild
    assert pre.trigger_log[-1][1] == "condition-growth"


def test_rebuild_on_krylov_stagnation():
    pre = _tiny_pre()
    pre.notify_step(_record(ratios=[0.95, 0.93, 0.96, 0.99, 0.91]))
    assert pre._pending_rebuild
    assert pre.trigger_log[-1][1] == "krylov-stagnation"
    pre = _tiny_pre()
    pre.notify_step(_record(ratios=[0.95, 0.5, 0.96, 0.99, 0.91]))
    assert not pre._pending_rebuild  # run interrupted


def test_rebuild_clears_after_patch_build():
    pre = _tiny_pre()
    pre.apply(np.zeros(pre.levels[0].layout.n_unknowns))
    n0 = pre.rebuild_count
    pre.notify_step(_record(kappa=100.0))
    assert pre._pending_rebuild
    pre.apply(np.zeros(pre.levels[0].layout.n_unknowns))
    assert not pre._pending_rebuild
    assert pre.rebuild_count == n0 + 1
    assert pre._kappa_ref == 100.0


def test_custom_rebuild_thresholds():
    hier, ops, pr = setup(n_fine=2, levels=1, r=1, k=1)
    pre = STMGPreconditioner(ops, 1, hier,
                             rebuild=RebuildConfig(kappa_abs=1000.0))
    pre.set_state(pr, np.zeros(pr.layout.n_unknowns))
    pre.notify_step(_record(kappa=45.0))
    assert not pre._pending_rebuild


# ---------------------------------------------------------------- validation


def test_set_state_rejects_foreign_operator_set():
    hier, ops, pr = setup(n_fine=2, levels=1, r=1, k=1)
    other_ops = SpatialOperatorSet(ops.vspace, ops.pspace, 0.4)
    pre = STMGPreconditioner(other_ops, 1, hier)
    with pytest.raises(ValueError, match="operator set"):
        pre.set_state(pr, np.zeros(pr.layout.n_unknowns))


def test_set_state_rejects_temporal_degree_mismatch():
    hier, ops, pr = setup(n_fine=2, levels=1, r=1, k=2)
    pre = STMGPreconditioner(ops, 1, hier)
    with pytest.raises(ValueError, match="collocation"):
        pre.set_state(pr, np.zeros(pr.layout.n_unknowns))


def test_apply_before_set_state_raises():
    hier, ops, pr = setup(n_fine=2, levels=1, r=1, k=1)
    pre = STMGPreconditioner(ops, 1, hier)
    with pytest.raises(RuntimeError, match="set_state"):
        pre.apply(np.zeros(pr.layout.n_unknowns))


def test_unknown_smoother_mode_rejected():
    hier, ops, pr = setup(n_fine=2, levels=1, r=1, k=1)
    with pytest.raises(ValueError, match="smoother"):
        STMGPreconditioner(ops, 1, hier, smoother="chebyshev")
