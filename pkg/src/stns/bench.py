"""Benchmark harness: convergence studies, a cavity robustness case, and
a command line front end.

The manufactured case drives space-time convergence measurements (errors
with observed orders, Newton/FGMRES counts per refinement level); the
lid-driven cavity exercises solver robustness at small viscosity.  Reports
are emitted as aligned text tables and optionally as CSV files; with
``--deterministic`` the run is limited to one BLAS thread and wall times
are zeroed so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .elements import (
    build_pressure_space,
    build_velocity_space,
    gauss_legendre,
    gauss_radau,
    shape_tables,
    temporal_basis,
    tensor_quadrature,
)
from .geometry import build_hierarchy, build_time_partition
from .operators import NitscheConfig, SpatialOperatorSet
from .slab import SlabProblem, dense_oracle
from .solver import ForcingConfig, NewtonConfig, NonConvergenceError, march
from .stmg import RebuildConfig, STMGPreconditioner


# --------------------------------------------------------------------------
# benchmark cases
# --------------------------------------------------------------------------


class ManufacturedCase:
    """Smooth solenoidal reference solution on the unit square.

    v = sin(t) (sin^2(pi x) sin(pi y) cos(pi y),
                -sin(pi x) cos(pi x) sin^2(pi y))
    p = sin(t) sin(pi x) cos(pi x) sin(pi y) cos(pi y)

    The velocity is divergence free and vanishes on the boundary, the
    pressure has zero mean, and both vanish at t = 0 so the initial trace
    is exactly representable.  The forcing
    f = v_t + (v . grad) v - nu lap v + grad p is assembled from
    hand-differentiated terms; ``self_check`` compares every derivative
    against finite differences of the primitive fields.
    """

    horizon = 1.0
    corners = ((0.0, 0.0), (1.0, 1.0))

    def __init__(self, nu):
        self.nu = float(nu)

    @staticmethod
    def _shape(points):
        x, y = points[:, 0], points[:, 1]
        s1 = np.sin(np.pi * x) ** 2 * np.sin(np.pi * y) * np.cos(np.pi * y)
        s2 = -np.sin(np.pi * x) * np.cos(np.pi * x) * np.sin(np.pi * y) ** 2
        return np.column_stack([s1, s2])

    def velocity(self, points, t):
        return np.sin(t) * self._shape(np.atleast_2d(points))

    def initial_velocity(self, points):
        return np.zeros((len(np.atleast_2d(points)), 2))

    def velocity_gradient(self, points, t):
        """Jacobian d_d v_s at each point, shaped (n, 2, 2)."""
        pts = np.atleast_2d(points)
        x, y = pts[:, 0], pts[:, 1]
        s = np.sin(t)
        pi = np.pi
        out = np.empty((len(pts), 2, 2))
        out[:, 0, 0] = 0.5 * s * pi * np.sin(2 * pi * x) * np.sin(2 * pi * y)
        out[:, 0, 1] = s * pi * np.sin(pi * x) ** 2 * np.cos(2 * pi * y)
        out[:, 1, 0] = -s * pi * np.cos(2 * pi * x) * np.sin(pi * y) ** 2
        out[:, 1, 1] = -out[:, 0, 0]
        return out

    def pressure(self, points, t):
        pts = np.atleast_2d(points)
        x, y = pts[:, 0], pts[:, 1]
        return (
            0.25 * np.sin(t) * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
        )

    def pressure_gradient(self, points, t):
        pts = np.atleast_2d(points)
        x, y = pts[:, 0], pts[:, 1]
        s = np.sin(t)
        pi = np.pi
        return np.column_stack([
            0.5 * s * pi * np.cos(2 * pi * x) * np.sin(2 * pi * y),
            0.5 * s * pi * np.sin(2 * pi * x) * np.cos(2 * pi * y),
        ])

    def laplacian(self, points, t):
        pts = np.atleast_2d(points)
        x, y = pts[:, 0], pts[:, 1]
        s = np.sin(t)
        pi = np.pi
        return np.column_stack([
            s * pi**2 * (2 * np.cos(2 * pi * x) - 1) * np.sin(2 * pi * y),
            -s * pi**2 * (2 * np.cos(2 * pi * y) - 1) * np.sin(2 * pi * x),
        ])

    def force(self, points, t):
        pts = np.atleast_2d(points)
        v = self.velocity(pts, t)
        grad = self.velocity_gradient(pts, t)
        vt = np.cos(t) * self._shape(pts)
        conv = np.einsum("nd,nsd->ns", v, grad)
        return (
            vt + conv - self.nu * self.laplacian(pts, t)
            + self.pressure_gradient(pts, t)
        )

    def self_check(self, n_points=200, step=1e-5, seed=0):
        """Max defect between the closed-form derivatives and central
        finite differences of the primitive fields (and of the PDE data
        identity); smooth fields make everything resolvable to ~1e-7."""
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0.05, 0.95, size=(n_points, 2))
        ts = rng.uniform(0.1, self.horizon, size=3)
        ex, ey = np.array([step, 0.0]), np.array([0.0, step])
        worst = 0.0
        for t in ts:
            grad = self.velocity_gradient(pts, t)
            fd = np.empty_like(grad)
            fd[:, :, 0] = (
                self.velocity(pts + ex, t) - self.velocity(pts - ex, t)
            ) / (2 * step)
            fd[:, :, 1] = (
                self.velocity(pts + ey, t) - self.velocity(pts - ey, t)
            ) / (2 * step)
            worst = max(worst, float(np.abs(grad - fd).max()))
            worst = max(worst, float(np.abs(grad[:, 0, 0] + grad[:, 1, 1]).max()))
            # Laplacian via first differences of the closed-form gradient
            lap_fd = (
                self.velocity_gradient(pts + ex, t)[:, :, 0]
                - self.velocity_gradient(pts - ex, t)[:, :, 0]
                + self.velocity_gradient(pts + ey, t)[:, :, 1]
                - self.velocity_gradient(pts - ey, t)[:, :, 1]
            ) / (2 * step)
            worst = max(worst, float(np.abs(self.laplacian(pts, t) - lap_fd).max()))
            gp_fd = np.column_stack([
                self.pressure(pts + ex, t) - self.pressure(pts - ex, t),
                self.pressure(pts + ey, t) - self.pressure(pts - ey, t),
            ]) / (2 * step)
            worst = max(
                worst, float(np.abs(self.pressure_gradient(pts, t) - gp_fd).max())
            )
            vt_fd = (
                self.velocity(pts, t + step) - self.velocity(pts, t - step)
            ) / (2 * step)
            f_fd = (
                vt_fd
                + np.einsum("nd,nsd->ns", self.velocity(pts, t), grad)
                - self.nu * lap_fd
                + gp_fd
            )
            worst = max(worst, float(np.abs(self.force(pts, t) - f_fd).max()))
        return worst


class CavityCase2D:
    """Lid-driven cavity with a sinusoidally ramped lid.

    No-slip walls; the lid (y = 1) moves with (sin(pi t / 4), 0).  The lid
    profile is constant in x, so the data jumps at the upper corners --
    harmless under weak boundary enforcement, where data enters only
    through face quadrature points.
    """

    horizon = 8.0
    corners = ((0.0, 0.0), (1.0, 1.0))

    def __init__(self, nu):
        self.nu = float(nu)

    def lid_speed(self, t):
        return np.sin(np.pi * t / 4.0)

    def dirichlet(self, points, t):
        pts = np.atleast_2d(points)
        out = np.zeros((len(pts), 2))
        out[pts[:, 1] > 1.0 - 1e-12, 0] = self.lid_speed(t)
        return out

    def initial_velocity(self, points):
        return np.zeros((len(np.atleast_2d(points)), 2))


# --------------------------------------------------------------------------
# error measurement
# --------------------------------------------------------------------------


@dataclass
class ErrorReport:
    """Space-time error norms of a trajectory against a reference case."""

    v_l2l2: float  # ||v - v_h|| in L2(L2)
    v_l2h1: float  # full H1 norm in space, L2 in time
    p_l2l2: float  # pressure, mean-adjusted at every quadrature time
    div_l2: float  # ||div v_h|| in L2(L2)
    v_linf: float  # max over all quadrature points and times


def compute_errors(problems, trajectory, case):
    """Measure a marched trajectory against the closed-form case.

    Temporal integrals use k+2 Gauss points per slab and spatial integrals
    an (r+3)^2 tensor Gauss rule per cell -- both beyond the discretization
    orders, so the measured rates are not limited by quadrature.
    """
    ops = problems[0].ops
    vs, ps = ops.vspace, ops.pspace
    lvl = ops.level
    k = problems[0].tm.n_nodes - 1

    rule = gauss_legendre(ps.r + 3)
    pts, wts = tensor_quadrature(rule)
    cm0 = lvl.cell_map(0)
    w_q = wts * cm0.det
    vt = shape_tables(vs, pts)
    vgrad = vt.gradients_physical(cm0)
    pvals = ps.basis_values(pts)
    scale = np.array([lvl.hx, lvl.hy])
    phys = (lvl.cell_corners[:, None, :] + pts[None, :, :] * scale).reshape(-1, 2)
    area = ops.domain_area

    xi, om = leggauss(k + 2)
    phi = temporal_basis(k).values(xi)  # (k+2, k+1)

    acc = np.zeros(4)  # v_l2l2, v_l2h1, p_l2l2, div_l2 (squared)
    linf = 0.0
    for pr, U in zip(problems, trajectory):
        tau = pr.t_end - pr.t_start
        Vb, Pb = pr.layout.split(U)
        Vloc = np.stack([ops.gather_velocity(Vb[a]) for a in range(k + 1)])
        dv = np.einsum("qi,acis->acqs", vt.values, Vloc)
        dg = np.einsum("qid,acis->acqsd", vgrad, Vloc)
        dp = np.einsum("ql,acl->acq", pvals,
                       Pb.reshape(k + 1, lvl.n_cells, ps.n_loc))
        for j in range(k + 2):
            t = pr.t_start + 0.5 * (xi[j] + 1.0) * tau
            tw = 0.5 * om[j] * tau
            vh = np.tensordot(phi[j], dv, axes=1)  # (n_cells, q2, 2)
            gh = np.tensordot(phi[j], dg, axes=1)  # (n_cells, q2, 2, 2)
            ph = np.tensordot(phi[j], dp, axes=1)  # (n_cells, q2)
            ev = vh - case.velocity(phys, t).reshape(vh.shape)
            eg = gh - case.velocity_gradient(phys, t).reshape(gh.shape)
            l2 = np.einsum("q,cqs->", w_q, ev**2)
            acc[0] += tw * l2
            acc[1] += tw * (l2 + np.einsum("q,cqsd->", w_q, eg**2))
            div = gh[..., 0, 0] + gh[..., 1, 1]
            acc[3] += tw * np.einsum("q,cq->", w_q, div**2)
            pe = case.pressure(phys, t).reshape(ph.shape)
            ep = (ph - np.einsum("q,cq->", w_q, ph) / area) \
                - (pe - np.einsum("q,cq->", w_q, pe) / area)
            acc[2] += tw * np.einsum("q,cq->", w_q, ep**2)
            linf = max(linf, float(np.abs(ev).max()))
    root = np.sqrt(acc)
    return ErrorReport(
        v_l2l2=float(root[0]), v_l2h1=float(root[1]),
        p_l2l2=float(root[2]), div_l2=float(root[3]), v_linf=linf,
    )


def eoc(values):
    """Observed orders log2(e_{c-1} / e_c) of a refinement sequence."""
    v = np.asarray(values, dtype=float)
    return [float(np.log2(v[i - 1] / v[i])) for i in range(1, len(v))]


# --------------------------------------------------------------------------
# convergence study
# --------------------------------------------------------------------------


@dataclass
class ConvergenceEntry:
    c: int  # refinement index; h = tau = 2^-c on the unit square
    h: float
    n_slabs: int
    errors: ErrorReport
    newton_per_slab: list
    mean_newton: float
    max_newton: int
    mean_fgmres: float
    max_fgmres: int
    cap_hit: bool  # any linear solve stopped by the iteration cap
    patch_builds: int
    rebuild_triggers: int
    wall_time: float


def _solver_setup(a):
    """Translate parsed CLI options into solver configuration objects."""
    nitsche = NitscheConfig(a.gamma1, a.gamma2)
    cfg = NewtonConfig(forcing=ForcingConfig(variant=a.ew_variant))
    rebuild = RebuildConfig(
        theta_newton=a.rebuild_theta_newton,
        theta_linear=a.rebuild_theta_linear,
        kappa_abs=a.rebuild_kappa_abs,
    )
    return nitsche, cfg, rebuild, a.smoother, a.nsm, a.omega


def run_convergence(r, k=None, nu=1e-2, cs=(1, 2, 3), smoother="surrogate",
                    n_smooth=2, omega=0.4, nitsche=None, config=None,
                    rebuild=None, verbose=False):
    """Uniform space-time refinement study on the manufactured solution.

    Refinement index c uses n = 2^c cells per direction and N = 2^c slabs,
    so h = tau = 2^-c.  ``k`` defaults to ``r`` (matched orders).  Returns
    one ConvergenceEntry per refinement.
    """
    if k is None:
        k = r
    case = ManufacturedCase(nu)
    entries = []
    for c in cs:
        hier = build_hierarchy(case.corners, 1, c + 1)
        vs = build_velocity_space(hier.finest, r)
        ps = build_pressure_space(hier.finest, r)
        ops = SpatialOperatorSet(vs, ps, nu, nitsche)
        part = build_time_partition(case.horizon, 2**c)
        pre = STMGPreconditioner(ops, k, hier, smoother=smoother,
                                 n_smooth=n_smooth, omega=omega,
                                 rebuild=rebuild)
        start = time.perf_counter()
        res = march(ops, k, part, vs.interpolate(case.initial_velocity),
                    f=case.force, g=case.velocity, preconditioner=pre,
                    config=config)
        wall = time.perf_counter() - start
        errors = compute_errors(res.problems, res.trajectory, case)
        newton = [s.newton_iterations for s in res.stats]
        lin = [it for s in res.stats for it in s.linear_iterations]
        cap_hit = any(
            not rec.linear_converged for s in res.stats for rec in s.steps
        )
        entries.append(ConvergenceEntry(
            c=c, h=hier.finest.h, n_slabs=len(part), errors=errors,
            newton_per_slab=newton, mean_newton=float(np.mean(newton)),
            max_newton=int(max(newton)),
            mean_fgmres=res.mean_linear_iterations,
            max_fgmres=int(max(lin)) if lin else 0, cap_hit=cap_hit,
            patch_builds=pre.rebuild_count,
            rebuild_triggers=len(pre.trigger_log), wall_time=wall,
        ))
        if verbose:
            e = errors
            print(f"  c={c}: e_v={e.v_l2l2:.5e}  e_p={e.p_l2l2:.5e}  "
                  f"newton={entries[-1].mean_newton:.2f}  "
                  f"fgmres={entries[-1].mean_fgmres:.2f}  "
                  f"wall={wall:.1f}s", flush=True)
    return entries


CONVERGENCE_COLUMNS = [
    "c", "h", "n_slabs", "ev_l2l2", "eoc_v", "ep_l2l2", "eoc_p",
    "ev_l2h1", "eoc_h1", "div_l2", "eoc_div", "ev_linf",
    "mean_newton", "max_newton", "mean_fgmres", "max_fgmres",
    "patch_builds", "wall_s",
]


def convergence_rows(entries, deterministic=False):
    """CSV rows (strings) for a refinement sequence, %.5e floats."""
    rows = []
    prev = None
    for e in entries:
        r = e.errors
        rates = ["", "", "", ""]
        if prev is not None:
            pv = prev.errors
            rates = [
                f"{np.log2(old / new):.2f}" for old, new in [
                    (pv.v_l2l2, r.v_l2l2), (pv.p_l2l2, r.p_l2l2),
                    (pv.v_l2h1, r.v_l2h1), (pv.div_l2, r.div_l2),
                ]
            ]
        wall = 0.0 if deterministic else e.wall_time
        rows.append([
            str(e.c), f"{e.h:.5e}", str(e.n_slabs),
            f"{r.v_l2l2:.5e}", rates[0], f"{r.p_l2l2:.5e}", rates[1],
            f"{r.v_l2h1:.5e}", rates[2], f"{r.div_l2:.5e}", rates[3],
            f"{r.v_linf:.5e}",
            f"{e.mean_newton:.2f}", str(e.max_newton),
            f"{e.mean_fgmres:.2f}", str(e.max_fgmres),
            str(e.patch_builds), f"{wall:.3f}",
        ])
        prev = e
    return rows


def convergence_table(entries, deterministic=False):
    """Aligned text table of a refinement sequence."""
    head = (f"{'c':>3} {'h':>10} {'e_v L2(L2)':>12} {'EOC':>6} "
            f"{'e_p L2(L2)':>12} {'EOC':>6} {'e_v L2(H1)':>12} {'EOC':>6} "
            f"{'||div v||':>12} {'EOC':>6} {'newton':>7} {'fgmres':>7}")
    lines = [head, "-" * len(head)]
    prev = None
    for e in entries:
        r = e.errors
        def rate(old, new):
            return f"{np.log2(old / new):6.2f}" if prev is not None else "    --"
        lines.append(
            f"{e.c:>3} {e.h:>10.4e} {r.v_l2l2:>12.5e} "
            f"{rate(prev.errors.v_l2l2 if prev else 1, r.v_l2l2)} "
            f"{r.p_l2l2:>12.5e} "
            f"{rate(prev.errors.p_l2l2 if prev else 1, r.p_l2l2)} "
            f"{r.v_l2h1:>12.5e} "
            f"{rate(prev.errors.v_l2h1 if prev else 1, r.v_l2h1)} "
            f"{r.div_l2:>12.5e} "
            f"{rate(prev.errors.div_l2 if prev else 1, r.div_l2)} "
            f"{e.mean_newton:>7.2f} {e.mean_fgmres:>7.2f}"
        )
        prev = e
    return "\n".join(lines)


# --------------------------------------------------------------------------
# cavity study
# --------------------------------------------------------------------------


@dataclass
class CavitySlabRow:
    slab: int
    t_end: float
    kinetic_energy: float
    max_speed: float
    div_l2: float
    newton_iterations: int
    mean_fgmres: float


@dataclass
class CavityResult:
    nu: float
    rows: list
    patch_builds: int
    rebuild_triggers: int
    wall_time: float

    @property
    def max_kinetic_energy(self):
        return max(r.kinetic_energy for r in self.rows)

    @property
    def max_speed(self):
        return max(r.max_speed for r in self.rows)


def run_cavity(nu=2e-4, r=2, k=1, n_cells=8, n_slabs=16, smoother="surrogate",
               n_smooth=2, omega=0.4, nitsche=None, config=None, rebuild=None,
               verbose=False):
    """March the ramped-lid cavity and record per-slab flow diagnostics.

    ``n_cells`` (per direction) must be a power of two so the mesh sits on
    top of a full coarsening hierarchy.
    """
    if n_cells & (n_cells - 1) or n_cells < 1:
        raise ValueError(f"n_cells={n_cells} must be a power of two")
    case = CavityCase2D(nu)
    levels = n_cells.bit_length()  # 2^(levels-1) = n_cells
    hier = build_hierarchy(case.corners, 1, levels)
    vs = build_velocity_space(hier.finest, r)
    ps = build_pressure_space(hier.finest, r)
    ops = SpatialOperatorSet(vs, ps, nu, nitsche)
    part = build_time_partition(case.horizon, n_slabs)
    pre = STMGPreconditioner(ops, k, hier, smoother=smoother,
                             n_smooth=n_smooth, omega=omega, rebuild=rebuild)
    start = time.perf_counter()
    res = march(ops, k, part, vs.interpolate(case.initial_velocity),
                f=None, g=case.dirichlet, preconditioner=pre, config=config)
    wall = time.perf_counter() - start

    # end-of-slab diagnostics on the volume quadrature points
    rule = gauss_legendre(r + 3)
    pts, wts = tensor_quadrature(rule)
    cm0 = ops.level.cell_map(0)
    w_q = wts * cm0.det
    vt = shape_tables(vs, pts)
    vgrad = vt.gradients_physical(cm0)
    rows = []
    for n, (pr, U, st) in enumerate(zip(res.problems, res.trajectory,
                                        res.stats), start=1):
        Vb, _ = pr.layout.split(U)
        speeds = []
        for a in range(pr.tm.n_nodes):
            vals = np.einsum("qi,cis->cqs", vt.values,
                             ops.gather_velocity(Vb[a]))
            speeds.append(float(np.sqrt((vals**2).sum(axis=-1)).max()))
        end_loc = ops.gather_velocity(Vb[-1])
        vals = np.einsum("qi,cis->cqs", vt.values, end_loc)
        grads = np.einsum("qid,cis->cqsd", vgrad, end_loc)
        ke = 0.5 * float(np.einsum("q,cqs->", w_q, vals**2))
        div = grads[..., 0, 0] + grads[..., 1, 1]
        divn = float(np.sqrt(np.einsum("q,cq->", w_q, div**2)))
        lin = st.linear_iterations
        rows.append(CavitySlabRow(
            slab=n, t_end=pr.t_end, kinetic_energy=ke,
            max_speed=max(speeds), div_l2=divn,
            newton_iterations=st.newton_iterations,
            mean_fgmres=float(np.mean(lin)) if lin else 0.0,
        ))
        if verbose:
            print(f"  slab {n:2d}: t={pr.t_end:5.2f}  KE={ke:.4e}  "
                  f"max|v|={rows[-1].max_speed:.3f}  "
                  f"newton={st.newton_iterations}", flush=True)
    return CavityResult(nu=nu, rows=rows, patch_builds=pre.rebuild_count,
                        rebuild_triggers=len(pre.trigger_log), wall_time=wall)


CAVITY_COLUMNS = ["slab", "t_end", "kinetic_energy", "max_speed", "div_l2",
                  "newton", "mean_fgmres"]


def cavity_rows(result):
    return [[
        str(r.slab), f"{r.t_end:.5e}", f"{r.kinetic_energy:.5e}",
        f"{r.max_speed:.5e}", f"{r.div_l2:.5e}",
        str(r.newton_iterations), f"{r.mean_fgmres:.2f}",
    ] for r in result.rows]


def cavity_table(result):
    head = (f"{'slab':>4} {'t':>6} {'energy':>12} {'max|v|':>9} "
            f"{'||div v||':>12} {'newton':>7} {'fgmres':>7}")
    lines = [head, "-" * len(head)]
    for r in result.rows:
        lines.append(
            f"{r.slab:>4} {r.t_end:>6.2f} {r.kinetic_energy:>12.5e} "
            f"{r.max_speed:>9.4f} {r.div_l2:>12.5e} "
            f"{r.newton_iterations:>7} {r.mean_fgmres:>7.2f}"
        )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# installation verification
# --------------------------------------------------------------------------


def run_verification():
    """Cheap end-to-end integrity checks; returns (name, ok, detail) rows."""
    checks = []

    worst = 0.0
    for k in range(4):
        rule = gauss_radau(k)
        for d in range(2 * k + 1):
            exact = (1.0 - (-1.0) ** (d + 1)) / (d + 1)
            worst = max(worst, abs(rule.weights @ rule.points**d - exact))
    checks.append(("temporal quadrature exactness", worst < 1e-13,
                   f"max defect {worst:.2e}"))

    rng = np.random.default_rng(7)
    coef = rng.standard_normal(4)
    tb = temporal_basis(3)
    x = rng.uniform(-1, 1, 40)
    exact = np.polyval(coef, x)
    interp = tb.values(x) @ np.polyval(coef, tb.nodes)
    err = float(np.abs(interp - exact).max())
    checks.append(("temporal nodal interpolation", err < 1e-12,
                   f"max defect {err:.2e}"))

    defect = ManufacturedCase(1e-2).self_check()
    checks.append(("manufactured data consistency", defect < 1e-6,
                   f"max defect {defect:.2e}"))

    hier = build_hierarchy(((0.0, 0.0), (1.0, 1.0)), 2, 1)
    vs = build_velocity_space(hier.finest, 1)
    ps = build_pressure_space(hier.finest, 1)
    ops = SpatialOperatorSet(vs, ps, 0.1)
    case = ManufacturedCase(0.1)
    pr = SlabProblem(ops, 1, 0.25, 0.5, vs.interpolate(case.velocity, 0.25),
                     f=case.force, g=case.velocity)
    U = 0.3 * np.sin(np.arange(pr.layout.n_unknowns, dtype=float))
    R_dense, _ = dense_oracle(pr, U)
    diff = float(np.abs(pr.residual(U) - R_dense).max())
    scale = max(1.0, float(np.abs(R_dense).max()))
    checks.append(("matrix-free residual vs dense assembly",
                   diff < 1e-11 * scale, f"max defect {diff:.2e}"))
    return checks


# --------------------------------------------------------------------------
# command line front end
# --------------------------------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="stns",
        description="Space-time Navier-Stokes solver benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, metavar="DIR",
                        help="write CSV reports into DIR")
    common.add_argument("--deterministic", action="store_true",
                        help="one BLAS thread and zeroed wall times, so "
                             "repeated runs emit byte-identical reports")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (default: STNS_THREADS env "
                             "var, or 1 when --deterministic)")
    common.add_argument("--smoother", choices=("surrogate", "exact"),
                        default="surrogate",
                        help="Vanka patch linearization on smoothing levels")
    common.add_argument("--nsm", type=int, default=2,
                        help="smoothing sweeps per V-cycle half")
    common.add_argument("--omega", type=float, default=0.4,
                        help="smoother damping factor")
    common.add_argument("--gamma1", type=float, default=10.0,
                        help="weak-boundary velocity penalty")
    common.add_argument("--gamma2", type=float, default=10.0,
                        help="weak-boundary normal-flux penalty")
    common.add_argument("--ew-variant", choices=("damped", "power"),
                        default="damped", dest="ew_variant",
                        help="adaptive forcing-term update rule")
    common.add_argument("--rebuild-thetaN", type=float, default=2.0,
                        dest="rebuild_theta_newton",
                        help="Newton contraction-loss rebuild threshold")
    common.add_argument("--rebuild-thetaL", type=float, default=1.5,
                        dest="rebuild_theta_linear",
                        help="preconditioned condition-growth factor")
    common.add_argument("--rebuild-kappaabs", type=float, default=40.0,
                        dest="rebuild_kappa_abs",
                        help="absolute condition-estimate rebuild floor")

    conv = sub.add_parser("convergence", parents=[common],
                          help="manufactured-solution refinement study")
    conv.add_argument("--r", type=int, default=3,
                      help="spatial pair order (velocity degree r+1)")
    conv.add_argument("--k", type=int, default=None,
                      help="temporal degree (default: matched, k = r)")
    conv.add_argument("--nu", type=float, default=1e-2, help="viscosity")
    conv.add_argument("--levels", type=int, default=3,
                      help="finest refinement index; runs c = 1..levels")

    cav = sub.add_parser("cavity", parents=[common],
                         help="ramped-lid cavity robustness run")
    cav.add_argument("--nu", type=float, default=2e-4, help="viscosity")
    cav.add_argument("--r", type=int, default=2, help="spatial pair order")
    cav.add_argument("--k", type=int, default=1, help="temporal degree")
    cav.add_argument("--cells", type=int, default=8,
                     help="cells per direction (power of two)")
    cav.add_argument("--slabs", type=int, default=16, help="time slabs")

    sub.add_parser("verify", parents=[common],
                   help="quick integrity checks of the installation")
    return parser


def _cmd_convergence(args):
    nitsche, cfg, rebuild, smoother, nsm, omega = _solver_setup(args)
    k = args.k if args.k is not None else args.r
    print(f"manufactured solution, r={args.r} k={k} nu={args.nu:g}, "
          f"{args.smoother} smoother")
    entries = run_convergence(
        args.r, k=k, nu=args.nu, cs=range(1, args.levels + 1),
        smoother=smoother, n_smooth=nsm, omega=omega, nitsche=nitsche,
        config=cfg, rebuild=rebuild, verbose=True,
    )
    print()
    print(convergence_table(entries, deterministic=args.deterministic))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(
            args.out, f"convergence_r{args.r}_k{k}_nu{args.nu:g}.csv")
        _write_csv(path, CONVERGENCE_COLUMNS,
                   convergence_rows(entries, args.deterministic))
        print(f"\nwrote {path}")
    return 0


def _cmd_cavity(args):
    nitsche, cfg, rebuild, smoother, nsm, omega = _solver_setup(args)
    print(f"ramped-lid cavity, nu={args.nu:g} r={args.r} k={args.k}, "
          f"{args.cells}x{args.cells} cells, {args.slabs} slabs")
    result = run_cavity(
        nu=args.nu, r=args.r, k=args.k, n_cells=args.cells,
        n_slabs=args.slabs, smoother=smoother, n_smooth=nsm, omega=omega,
        nitsche=nitsche, config=cfg, rebuild=rebuild, verbose=True,
    )
    print()
    print(cavity_table(result))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out,
                            f"cavity_nu{args.nu:g}_r{args.r}.csv")
        _write_csv(path, CAVITY_COLUMNS, cavity_rows(result))
        print(f"\nwrote {path}")
    return 0


def _cmd_verify(args):
    failures = 0
    for name, ok, detail in run_verification():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failures += 0 if ok else 1
    return 1 if failures else 0


def _dispatch(args):
    try:
        if args.command == "convergence":
            return _cmd_convergence(args)
        if args.command == "cavity":
            return _cmd_cavity(args)
        return _cmd_verify(args)
    except NonConvergenceError as exc:
        print(f"error: {exc} (slab {exc.slab_index})", file=sys.stderr)
        return 2


def main(argv=None):
    args = _build_parser().parse_args(argv)
    threads = args.threads
    if threads is None:
        env = os.environ.get("STNS_THREADS")
        threads = int(env) if env else (1 if args.deterministic else None)
    if threads is not None:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            return _dispatch(args)
    return _dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
