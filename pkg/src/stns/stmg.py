"""hp space-time multigrid preconditioner with cell-wise Vanka smoothing.

One V-cycle approximately inverts the slab Jacobian. The level schedule
first coarsens the polynomial orders on the finest mesh -- halving whichever
of (k, r) sits deeper in its own halving chain until both are flat, then
halving jointly down to (1, 1) -- and only then steps down the geometric
mesh hierarchy, e.g.

    (s, k, r) = (2, 4, 4) -> (2, 2, 2) -> (2, 1, 1) -> (1, 1, 1) -> (0, 1, 1)

Each level re-discretizes the slab with its own operator set; the
linearization state is carried down by velocity interpolation (pointwise in
space, polynomial evaluation at the coarse collocation times). Residual
restriction is the exact transpose of correction prolongation.

The smoother is additive cell-wise Vanka: the patch of cell K collects the
cell's velocity and pressure DoFs of all k+1 collocation states, and the
patch matrix is the restriction of the global Jacobian to those DoFs
(velocity couplings accumulated over the 3x3 cell neighborhood; pressure
couplings live on the cell itself because the pressure is discontinuous).
In "exact" mode the convection blocks use the per-node states; in
"surrogate" mode they are frozen at the slab-midpoint state, so one factor
set serves all nodes and stays valid across Newton steps and slabs until a
rebuild trigger fires (Newton contraction loss, Krylov condition growth, or
stagnating Krylov residual ratios).
"""

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .elements import (
    build_pressure_space,
    build_velocity_space,
    gauss_legendre,
    gauss_radau,
    temporal_basis,
    tensor_quadrature,
)
from .operators import SpatialOperatorSet
from .slab import SlabLayout, SlabProblem
from .solver import project_pressure_gauge

__all__ = [
    "LevelParams",
    "build_schedule",
    "SlabTransfer",
    "RebuildConfig",
    "STMGPreconditioner",
]

# refuse to hold Vanka inverses beyond this many bytes per level
PATCH_MEMORY_LIMIT = 4_000_000_000


# --------------------------------------------------------------------------
# level schedule
# --------------------------------------------------------------------------


class LevelParams:
    """One multigrid level: geometric mesh index s, temporal degree k,
    pressure degree r (velocity order is r+1 throughout)."""

    def __init__(self, s, k, r):
        self.s = int(s)
        self.k = int(k)
        self.r = int(r)

    def astuple(self):
        return (self.s, self.k, self.r)

    def __eq__(self, other):
        return self.astuple() == other.astuple()

    def __repr__(self):
        return f"LevelParams(s={self.s}, k={self.k}, r={self.r})"


def build_schedule(s_fine, k, r):
    """Fine-to-coarse level list: polynomial coarsening of the spatial pair
    first (r halving to 1), then geometric coarsening to s = 0.

    The temporal degree k is kept on every level. Coarsening it would
    remove the high temporal degrees of spatially smooth pressure fields
    from all coarse spaces, and no cell-local smoother can correct those
    modes either (their residual footprint cancels across cell interfaces),
    which stalls the V-cycle under mesh refinement. Keeping k makes them
    coarse-representable all the way down to the direct solve, while the
    coarsest systems stay small enough that the extra temporal blocks cost
    nothing."""
    if s_fine < 0 or k < 0 or r < 0:
        raise ValueError(f"invalid finest level (s={s_fine}, k={k}, r={r})")
    out = [LevelParams(s_fine, k, r)]
    rr = r
    while rr > 1:
        rr //= 2
        out.append(LevelParams(s_fine, k, rr))
    for s in range(s_fine - 1, -1, -1):
        out.append(LevelParams(s, k, rr))
    return out


# --------------------------------------------------------------------------
# transfers
# --------------------------------------------------------------------------


def _interp_1d(rows_vs, cols_vs):
    """1D interpolation matrix: the cols-space nodal basis evaluated at the
    rows-space global 1D nodes. Both coordinate directions share it because
    the reference subdivision pattern is identical."""
    lvl = cols_vs.mesh_level
    ref = (rows_vs.node_coords_1d_x - lvl.origin[0]) / lvl.hx
    n = lvl.n_cells_per_dim
    q = cols_vs.n_loc_1d - 1
    cell = np.clip(np.floor(ref).astype(int), 0, n - 1)
    vals = cols_vs.basis_1d(ref - cell)
    P = np.zeros((len(ref), cols_vs.n_nodes_per_dim))
    for p in range(len(ref)):
        P[p, cell[p] * q : cell[p] * q + q + 1] = vals[p]
    return P


def _vel_apply(P, V):
    """Tensor-product application of a 1D matrix to an interleaved vector
    velocity coefficient field."""
    m = P.shape[1]
    v3 = V.reshape(m, m, 2)
    tmp = np.tensordot(P, v3, axes=(1, 0))  # (y_out, x_in, 2)
    out = np.tensordot(tmp, P, axes=(1, 1))  # (y_out, 2, x_out)
    return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(-1)


def _pressure_split_matrices(pspace):
    """Per-quadrant reexpansion of the cell monomial basis on its four
    children, quadrant order (LL, LR, UL, UR). Exact because the child map
    is affine and the space is degree-closed."""
    pts, _ = tensor_quadrature(gauss_legendre(pspace.r + 2))
    Vf = pspace.basis_values(pts)
    mats = []
    for cx, cy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        coarse_pts = (pts + np.array([cx, cy])) / 2.0
        Cv = pspace.basis_values(coarse_pts)
        T, *_ = np.linalg.lstsq(Vf, Cv, rcond=None)
        mats.append(T)
    return mats


class SlabTransfer:
    """Prolongation/restriction between two consecutive levels of one slab.

    A step changes either the orders (same mesh) or the mesh (same orders).
    prolong/restrict are exact transposes of each other; restrict_state is
    the separate primal interpolation used to carry the linearization
    velocity down the hierarchy.
    """

    def __init__(self, fine, coarse, hierarchy):
        pf, pc = fine.params, coarse.params
        if pf.s != pc.s and (pf.k, pf.r) != (pc.k, pc.r):
            raise ValueError(
                f"transfer {pf} -> {pc} changes mesh and orders at once"
            )
        self.fine = fine
        self.coarse = coarse
        self.Tt = temporal_basis(pc.k).values(gauss_radau(pf.k).points)
        self.Ts = temporal_basis(pf.k).values(gauss_radau(pc.k).points)
        self.P1 = _interp_1d(fine.ops.vspace, coarse.ops.vspace)
        self.Q1 = _interp_1d(coarse.ops.vspace, fine.ops.vspace)
        self.mode = "p" if pf.s == pc.s else "h"
        if self.mode == "h":
            nc = coarse.ops.level.n_cells
            self.child_ids = np.array(
                [hierarchy.children(pc.s, c) for c in range(nc)]
            )
            self.Tq = _pressure_split_matrices(coarse.ops.pspace)

    # pressure blocks ------------------------------------------------------

    def _p_prolong(self, Pc):
        nlf = self.fine.ops.pspace.n_loc
        nlc = self.coarse.ops.pspace.n_loc
        if self.mode == "p":
            out = np.zeros((self.fine.ops.level.n_cells, nlf))
            out[:, :nlc] = Pc.reshape(-1, nlc)
            return out.reshape(-1)
        Pc2 = Pc.reshape(-1, nlc)
        out = np.empty((self.fine.ops.level.n_cells, nlf))
        for q in range(4):
            out[self.child_ids[:, q]] = Pc2 @ self.Tq[q].T
        return out.reshape(-1)

    def _p_restrict(self, Rf):
        nlf = self.fine.ops.pspace.n_loc
        nlc = self.coarse.ops.pspace.n_loc
        Rf2 = Rf.reshape(-1, nlf)
        if self.mode == "p":
            return Rf2[:, :nlc].reshape(-1).copy()
        out = np.zeros((self.coarse.ops.level.n_cells, nlc))
        for q in range(4):
            out += Rf2[self.child_ids[:, q]] @ self.Tq[q]
        return out.reshape(-1)

    # full slab vectors ----------------------------------------------------

    def prolong(self, Uc):
        Vc, Pc = self.coarse.layout.split(Uc)
        Vs = np.stack([_vel_apply(self.P1, v) for v in Vc])
        Ps = np.stack([self._p_prolong(p) for p in Pc])
        return self.fine.layout.join(self.Tt @ Vs, self.Tt @ Ps)

    def restrict(self, Rf):
        Vf, Pf = self.fine.layout.split(Rf)
        Vt = self.Tt.T @ Vf
        Pt = self.Tt.T @ Pf
        Vc = np.stack([_vel_apply(self.P1.T, v) for v in Vt])
        Pc = np.stack([self._p_restrict(p) for p in Pt])
        return self.coarse.layout.join(Vc, Pc)

    def restrict_state(self, Vb):
        """Velocity blocks (k_f+1, n_v_f) -> (k_c+1, n_v_c) by interpolation."""
        Vt = self.Ts @ Vb
        return np.stack([_vel_apply(self.Q1, v) for v in Vt])


# --------------------------------------------------------------------------
# Vanka patches
# --------------------------------------------------------------------------


def _overlap_pairs(n_loc_1d):
    """For each neighbor offset, the matching (own, neighbor) interleaved
    local vector-DoF indices of the shared scalar nodes."""
    q = n_loc_1d - 1

    def axis(o):
        if o == 0:
            return np.arange(q + 1), np.arange(q + 1)
        if o == 1:
            return np.array([q]), np.array([0])
        return np.array([0]), np.array([q])

    pairs = {}
    for oy in (-1, 0, 1):
        for ox in (-1, 0, 1):
            if ox == 0 and oy == 0:
                continue
            axK, axN = axis(ox)
            ayK, ayN = axis(oy)
            sK = (ayK[:, None] * (q + 1) + axK[None, :]).reshape(-1)
            sN = (ayN[:, None] * (q + 1) + axN[None, :]).reshape(-1)
            vK = np.stack([2 * sK, 2 * sK + 1], axis=-1).reshape(-1)
            vN = np.stack([2 * sN, 2 * sN + 1], axis=-1).reshape(-1)
            pairs[(ox, oy)] = (vK, vN)
    return pairs


def _accumulate_patches(E, mesh, pairs):
    """Restrict the globally assembled velocity operator to each cell's DoF
    patch: start from the cell's own element matrix and add every neighbor
    element matrix at the shared DoFs."""
    P = E.copy()
    n = mesh.n_cells_per_dim
    ids = np.arange(mesh.n_cells)
    ix, iy = mesh.cell_ix, mesh.cell_iy
    for (ox, oy), (vK, vN) in pairs.items():
        ok = (ix + ox >= 0) & (ix + ox < n) & (iy + oy >= 0) & (iy + oy < n)
        me = ids[ok]
        nb = me + oy * n + ox
        P[me[:, None, None], vK[None, :, None], vK[None, None, :]] += E[
            nb[:, None, None], vN[None, :, None], vN[None, None, :]
        ]
    return P


def _patch_indices(layout, vspace, pspace):
    """Global DoF indices of each cell patch, (n_cells, m): the cell's
    velocity and pressure DoFs of every collocation state, velocity blocks
    first."""
    l2g = vspace.loc2glob
    nc = len(l2g)
    vec = np.stack([2 * l2g, 2 * l2g + 1], axis=-1).reshape(nc, -1)
    blocks = [a * layout.n_v + vec for a in range(layout.n_nodes)]
    base = layout.n_nodes * layout.n_v
    nlp = pspace.n_loc
    pcell = np.arange(nc)[:, None] * nlp + np.arange(nlp)[None, :]
    blocks += [base + a * layout.n_p + pcell for a in range(layout.n_nodes)]
    return np.concatenate(blocks, axis=1)


def _invert_patches(big):
    try:
        return np.linalg.inv(big)
    except np.linalg.LinAlgError:
        scale = np.abs(big).max(axis=(1, 2))
        m = big.shape[1]
        shifted = big + (1e-12 * scale)[:, None, None] * np.eye(m)[None]
        return np.linalg.inv(shifted)


class _LevelContext:
    """Everything one multigrid level owns: discretization, per-slab
    problem, linearization velocity, and Vanka data."""

    def __init__(self, params, ops):
        self.params = params
        self.ops = ops
        self.layout = SlabLayout(
            params.k + 1, ops.vspace.n_dofs, ops.pspace.n_dofs
        )
        self.pairs = _overlap_pairs(ops.vspace.n_loc_1d)
        self.patch_idx = _patch_indices(self.layout, ops.vspace, ops.pspace)
        self.problem = None
        self.Vb = None
        self.inv = None
        self._Mpatch = None
        self._Spatch = None
        self._Del = None

    @property
    def patch_size(self):
        return self.patch_idx.shape[1]

    def _linear_patch_parts(self):
        if self._Mpatch is None:
            mesh = self.ops.level
            mass = np.repeat(
                self.ops.mass_element_matrix()[None], mesh.n_cells, axis=0
            )
            self._Mpatch = _accumulate_patches(mass, mesh, self.pairs)
            self._Spatch = _accumulate_patches(
                self.ops.linear_velocity_element_matrices(), mesh, self.pairs
            )
            self._Del = self.ops.pressure_coupling_element_matrix()
        return self._Mpatch, self._Spatch, self._Del

    def assemble_patches(self, conv_blocks):
        """Patch matrices (n_cells, m, m); conv_blocks is None (Stokes) or
        one accumulated convection block array per collocation state."""
        Mp, Sp, Del = self._linear_patch_parts()
        tm = self.problem.tm
        nn = tm.n_nodes
        mv1 = Mp.shape[1]
        mp1 = self.ops.pspace.n_loc
        m = nn * (mv1 + mp1)
        nc = self.ops.level.n_cells
        if nc * m * m * 8 * 2 > PATCH_MEMORY_LIMIT:
            raise MemoryError(
                f"Vanka patches of size {m} on {nc} cells exceed the "
                f"configured memory limit"
            )
        big = np.zeros((nc, m, m))
        for a in range(nn):
            ra = slice(a * mv1, (a + 1) * mv1)
            for b in range(nn):
                kab = tm.K[a, b]
                if kab != 0.0:
                    big[:, ra, b * mv1 : (b + 1) * mv1] += kab * Mp
            blk = Sp if conv_blocks is None else Sp + conv_blocks[a]
            big[:, ra, ra] += tm.M_diag[a] * blk
            pa = slice(nn * mv1 + a * mp1, nn * mv1 + (a + 1) * mp1)
            big[:, ra, pa] = tm.M_diag[a] * Del
            big[:, pa, ra] = tm.M_diag[a] * np.transpose(Del, (0, 2, 1))
        return big


# --------------------------------------------------------------------------
# the preconditioner
# --------------------------------------------------------------------------


class RebuildConfig:
    """Triggers that invalidate the frozen Vanka factorizations."""

    def __init__(self, theta_newton=2.0, theta_linear=1.5, kappa_abs=40.0,
                 stagnation_steps=5, stagnation_ratio=0.9):
        self.theta_newton = theta_newton
        self.theta_linear = theta_linear
        self.kappa_abs = kappa_abs
        self.stagnation_steps = stagnation_steps
        self.stagnation_ratio = stagnation_ratio


class STMGPreconditioner:
    """One V-cycle of the hp space-time multigrid per application.

    Built once per time march against the finest operator set; set_state
    (called every Newton step) re-links the current slab problem, carries
    the linearization down the level hierarchy and refactorizes the coarse
    direct solve. The Vanka patch inverses are built on first use and then
    reused -- across Newton steps and slabs -- until a rebuild trigger
    reported through notify_step fires.

    The additive patch sweep is stable only for damping below ~2/m where m
    is the largest patch multiplicity of a DoF (4 at cell vertices), so
    omega defaults to 0.4; larger values diverge on hierarchies deeper
    than two levels even for Stokes.
    """

    def __init__(self, ops, k, hierarchy, smoother="surrogate", n_smooth=2,
                 omega=0.4, rebuild=None):
        if smoother not in ("surrogate", "exact"):
            raise ValueError(f"unknown smoother mode {smoother!r}")
        if hierarchy.finest is not ops.vspace.mesh_level:
            raise ValueError(
                "operator set does not live on the hierarchy's finest level"
            )
        self.smoother = smoother
        self.n_smooth = int(n_smooth)
        self.omega = float(omega)
        self.rebuild = rebuild or RebuildConfig()
        self.hierarchy = hierarchy

        self.schedule = build_schedule(len(hierarchy) - 1, k, ops.pspace.r)
        self.levels = []
        for i, params in enumerate(self.schedule):
            if i == 0:
                level_ops = ops
            else:
                mesh = hierarchy[params.s]
                level_ops = SpatialOperatorSet(
                    build_velocity_space(mesh, params.r),
                    build_pressure_space(mesh, params.r),
                    ops.nu,
                    ops.nitsche,
                )
            self.levels.append(_LevelContext(params, level_ops))
        self.transfers = [
            SlabTransfer(self.levels[i], self.levels[i + 1], hierarchy)
            for i in range(len(self.levels) - 1)
        ]

        self._fine_problem = None
        self._built = False
        self._pending_rebuild = False
        self._coarse_lu = None
        self._pin_rows = None
        self._kappa_ref = 1.0
        self._last_rho = None
        self._last_kappa = None
        self.rebuild_count = 0
        self.trigger_log = []

    # ------------------------------------------------------------ lifecycle

    def set_state(self, problem, U):
        lv0 = self.levels[0]
        if problem.ops is not lv0.ops:
            raise ValueError(
                "slab problem uses a different operator set than this "
                "preconditioner"
            )
        if problem.tm.n_nodes != lv0.layout.n_nodes:
            raise ValueError(
                f"slab has {problem.tm.n_nodes} collocation states, "
                f"preconditioner was built for {lv0.layout.n_nodes}"
            )
        if problem is not self._fine_problem:
            self._fine_problem = problem
            lv0.problem = problem
            for lvl in self.levels[1:]:
                lvl.problem = SlabProblem(
                    lvl.ops, lvl.params.k, problem.t_start, problem.t_end,
                    np.zeros(lvl.ops.vspace.n_dofs), f=None, g=problem.g,
                    include_convection=problem.include_convection,
                )
            self._last_rho = None  # contraction ratios reset with the slab
            # refresh the patch factorizations once per slab: reusing them
            # across slabs lets the frozen convection state drift behind the
            # marched solution, which shows up as Krylov growth at small nu
            if self._built and problem.include_convection:
                self._pending_rebuild = True

        problem.set_linearization(U)
        Vb = problem.layout.split(U)[0]
        lv0.Vb = Vb.copy()
        for tr in self.transfers:
            Vb = tr.restrict_state(Vb)
            lvl = tr.coarse
            lvl.Vb = Vb
            lvl.problem.set_linearization(
                lvl.layout.join(Vb, np.zeros((lvl.layout.n_nodes, lvl.layout.n_p)))
            )
        if len(self.levels) > 1:
            self._refresh_coarse()

    def notify_step(self, record):
        rb = self.rebuild
        trigger = None
        rho = record.r_after / max(record.r_before, 1e-300)
        if self._last_rho is not None and rho >= rb.theta_newton * self._last_rho:
            trigger = "newton-contraction"
        self._last_rho = rho
        kappa = record.condition_estimate
        if np.isfinite(kappa):
            self._last_kappa = kappa
            if kappa >= max(rb.theta_linear * self._kappa_ref, rb.kappa_abs):
                trigger = "condition-growth"
        run = 0
        for q in record.krylov_ratios:
            run = run + 1 if q >= rb.stagnation_ratio else 0
            if run >= rb.stagnation_steps:
                trigger = "krylov-stagnation"
                break
        if trigger is not None:
            self._pending_rebuild = True
            self.trigger_log.append((record.step, trigger))

    # ------------------------------------------------------------ building

    def _smoothing_levels(self):
        if len(self.levels) == 1:
            return self.levels
        return self.levels[:-1]

    def _conv_blocks(self, lvl, mode):
        """Accumulated convection patch blocks, one per collocation state
        (shared in surrogate mode), or None for the Stokes limit."""
        if not lvl.problem.include_convection:
            return None
        if mode == "exact":
            states = lvl.problem.linearization_states
            return [
                _accumulate_patches(
                    lvl.ops.convection_element_matrices(
                        states[a], lvl.problem.g_vals[a]
                    ),
                    lvl.ops.level,
                    lvl.pairs,
                )
                for a in range(lvl.layout.n_nodes)
            ]
        basis_mid = temporal_basis(lvl.params.k).values(0.0)[0]
        state = lvl.ops.make_state(basis_mid @ lvl.Vb)
        g_mid = None
        if lvl.problem.g is not None:
            t_mid = 0.5 * (lvl.problem.t_start + lvl.problem.t_end)
            g_mid = lvl.ops.boundary_data_values(lvl.problem.g, t_mid)
        E = _accumulate_patches(
            lvl.ops.convection_element_matrices(state, g_mid),
            lvl.ops.level,
            lvl.pairs,
        )
        return [E] * lvl.layout.n_nodes

    def patch_matrices(self, level_index=0, mode=None):
        """Assembled (uninverted) Vanka patch matrices of one level at the
        current linearization state; ``mode`` overrides the configured
        smoother variant. Diagnostic hook for surrogate-accuracy studies."""
        lvl = self.levels[level_index]
        return lvl.assemble_patches(self._conv_blocks(lvl, mode or self.smoother))

    def _build_patches(self):
        for lvl in self._smoothing_levels():
            conv = self._conv_blocks(lvl, self.smoother)
            lvl.inv = _invert_patches(lvl.assemble_patches(conv))
        self._built = True
        self._pending_rebuild = False
        self.rebuild_count += 1
        if self._last_kappa is not None:
            self._kappa_ref = max(1.0, self._last_kappa)

    def _refresh_coarse(self):
        pr = self.levels[-1].problem
        n = pr.layout.n_unknowns
        J = np.empty((n, n))
        e = np.zeros(n)
        for j in range(n):
            e[j] = 1.0
            J[:, j] = pr.jacobian_action(e)
            e[j] = 0.0
        self._pin_rows = None
        if pr.ops.level.is_pure_dirichlet:
            lay = pr.layout
            rows = lay.n_nodes * lay.n_v + np.arange(lay.n_nodes) * lay.n_p
            J[rows, :] = 0.0
            J[rows, rows] = 1.0
            self._pin_rows = rows
        self._coarse_lu = lu_factor(J)

    # ------------------------------------------------------------ V-cycle

    def apply(self, v):
        if self._fine_problem is None:
            raise RuntimeError("preconditioner applied before set_state")
        if not self._built or self._pending_rebuild:
            self._build_patches()
        d = self._vcycle(0, v)
        project_pressure_gauge(self._fine_problem, d)
        return d

    def _sweep(self, lvl, rhs, d):
        defect = rhs if d is None else rhs - lvl.problem.jacobian_action(d)
        loc = defect[lvl.patch_idx]
        corr = np.einsum("cij,cj->ci", lvl.inv, loc)
        upd = np.zeros_like(rhs)
        np.add.at(upd, lvl.patch_idx.reshape(-1), corr.reshape(-1))
        upd *= self.omega
        return upd if d is None else d + upd

    def _coarse_solve(self, rhs):
        b = rhs.copy()
        if self._pin_rows is not None:
            b[self._pin_rows] = 0.0
        x = lu_solve(self._coarse_lu, b)
        project_pressure_gauge(self.levels[-1].problem, x)
        return x

    def _vcycle(self, i, rhs):
        last = len(self.levels) - 1
        if i == last and last > 0:
            return self._coarse_solve(rhs)
        lvl = self.levels[i]
        d = None
        for _ in range(self.n_smooth):
            d = self._sweep(lvl, rhs, d)
        if i < last:
            defect = rhs if d is None else rhs - lvl.problem.jacobian_action(d)
            dd = self.transfers[i].prolong(self._vcycle(i + 1, self.transfers[i].restrict(defect)))
            project_pressure_gauge(lvl.problem, dd)
            d = dd if d is None else d + dd
        for _ in range(self.n_smooth):
            d = self._sweep(lvl, rhs, d)
        return d if d is not None else np.zeros_like(rhs)
