"""Monolithic space-time slab systems: residual, Jacobian action, norms.

A slab couples k+1 temporal collocation states. The flat unknown layout is

    [ V^1 ... V^{k+1} | P^1 ... P^{k+1} ]

with interleaved velocity blocks of length 2*n_scalar and cell-contiguous
pressure blocks. Because the temporal basis is nodal at the Gauss-Radau
points, all spatial nonlinearities act block-diagonally (one state per
node) and the slab residual is

    R_V = (K ⊗ M) V + w_a [nu A V^a + N V^a + H(V^a) + I(V^a)
          + (B^T + G^T) P^a] - F - L - (C ⊗ M) V_prev
    R_P = w_a (B + G) V^a

The last temporal node sits at the slab end time, so V^{k+1} is the trace
handed to the next slab.

``DenseAssembler`` re-derives the same system densely with plain loops;
it exists purely as a test oracle and guards against large inputs.
"""

import numpy as np
from numpy.polynomial.legendre import leggauss

from .elements import gauss_legendre, temporal_basis
from .geometry import DIRICHLET
from .operators import QUADRATURE_MARGIN, assemble_rhs
from .temporal import assemble_temporal, kron_apply, jump_apply, pack_previous_trace

DENSE_GUARD = 5000


class SlabLayout:
    """Index bookkeeping for the flat slab vector."""

    def __init__(self, n_nodes, n_v, n_p):
        self.n_nodes = n_nodes
        self.n_v = n_v
        self.n_p = n_p
        self.n_unknowns = n_nodes * (n_v + n_p)
        self._split_at = n_nodes * n_v

    def split(self, U):
        """Views (V blocks, P blocks) of shapes (n_nodes, n_v) / (n_nodes, n_p)."""
        if U.shape != (self.n_unknowns,):
            raise ValueError(
                f"slab vector of shape {U.shape}, expected ({self.n_unknowns},)"
            )
        s = self._split_at
        return (
            U[:s].reshape(self.n_nodes, self.n_v),
            U[s:].reshape(self.n_nodes, self.n_p),
        )

    def join(self, Vb, Pb):
        return np.concatenate([np.ravel(Vb), np.ravel(Pb)])

    def zeros(self):
        return np.zeros(self.n_unknowns)


class SlabProblem:
    """Residual and Jacobian action of one space-time slab.

    Parameters
    ----------
    ops : SpatialOperatorSet of the discretization level.
    k : temporal degree.
    t_start, t_end : slab interval.
    v_prev : velocity trace from the previous slab (or the interpolated
        initial value for the first slab), interleaved layout.
    f, g : volume force and Dirichlet data, callables (points, t); either
        may be None (treated as zero).
    include_convection : drop all convective terms to get the Stokes limit.
    """

    def __init__(self, ops, k, t_start, t_end, v_prev, f=None, g=None,
                 include_convection=True):
        if t_end <= t_start:
            raise ValueError(f"empty slab ({t_start}, {t_end})")
        self.ops = ops
        self.tm = assemble_temporal(k, t_end - t_start)
        self.t_start = float(t_start)
        self.t_end = float(t_end)
        self.include_convection = include_convection
        self.v_prev = np.asarray(v_prev, dtype=float)
        self.f = f
        self.g = g
        self.layout = SlabLayout(
            self.tm.n_nodes, ops.vspace.n_dofs, ops.pspace.n_dofs
        )
        self.node_times = self.tm.node_times(t_start, t_end)

        F, L = assemble_rhs(ops, f, g, self.tm, t_start, t_end)
        self.jump = jump_apply(
            self.tm, ops.apply_mass, pack_previous_trace(self.tm, self.v_prev)
        )
        self.data = F + L + self.jump  # fixed right-hand side, (n_nodes, n_v)
        if g is not None and include_convection:
            self.g_vals = [
                ops.boundary_data_values(g, t) for t in self.node_times
            ]
        else:
            self.g_vals = [None] * self.tm.n_nodes
        self._lin_states = None

    # ------------------------------------------------------------- guesses

    def constant_guess(self):
        """Previous trace extended constantly in time, zero pressure."""
        Vb = np.tile(self.v_prev, (self.tm.n_nodes, 1))
        Pb = np.zeros((self.tm.n_nodes, self.layout.n_p))
        return self.layout.join(Vb, Pb)

    def end_velocity(self, U):
        """The slab end-time velocity trace (last collocation state)."""
        Vb, _ = self.layout.split(U)
        return Vb[-1].copy()

    # ------------------------------------------------------------ residual

    def residual(self, U):
        ops = self.ops
        Vb, Pb = self.layout.split(U)
        RV = kron_apply(self.tm.K, ops.apply_mass, Vb)
        RV -= self.data
        RP = np.empty((self.tm.n_nodes, self.layout.n_p))
        for a in range(self.tm.n_nodes):
            w = self.tm.M_diag[a]
            V = Vb[a]
            RV[a] += w * (
                ops.nu * ops.apply_stiffness(V)
                + ops.apply_nitsche_velocity(V)
                + ops.apply_div_transpose(Pb[a])
                + ops.apply_pressure_boundary_transpose(Pb[a])
            )
            if self.include_convection:
                st = ops.make_state(V)
                infl_op, infl_rhs = ops.convection_boundary_nitsche(
                    st, self.g_vals[a]
                )
                RV[a] += w * (ops.convection(st) + infl_op - infl_rhs)
            RP[a] = w * (ops.apply_div(V) + ops.apply_pressure_boundary(V))
        return self.layout.join(RV, RP)

    # ------------------------------------------------------------ Jacobian

    def set_linearization(self, U):
        """Fix the convection linearization state for jacobian_action."""
        if self.include_convection:
            Vb, _ = self.layout.split(U)
            self._lin_states = [
                self.ops.make_state(Vb[a].copy()) for a in range(self.tm.n_nodes)
            ]
        else:
            self._lin_states = []

    def set_linearization_states(self, states):
        """Install externally built convection states, one per temporal node
        (used to freeze the Jacobian at a surrogate state, e.g. the slab
        midpoint, instead of the nodal states of some iterate)."""
        states = list(states)
        if len(states) != self.tm.n_nodes:
            raise ValueError(
                f"{len(states)} states for {self.tm.n_nodes} temporal nodes"
            )
        self._lin_states = states

    @property
    def linearization_states(self):
        if self._lin_states is None:
            raise RuntimeError("jacobian used before set_linearization")
        return self._lin_states

    def jacobian_action(self, dU):
        ops = self.ops
        states = self.linearization_states
        dVb, dPb = self.layout.split(dU)
        JV = kron_apply(self.tm.K, ops.apply_mass, dVb)
        JP = np.empty((self.tm.n_nodes, self.layout.n_p))
        for a in range(self.tm.n_nodes):
            w = self.tm.M_diag[a]
            dV = dVb[a]
            JV[a] += w * (
                ops.nu * ops.apply_stiffness(dV)
                + ops.apply_nitsche_velocity(dV)
                + ops.apply_div_transpose(dPb[a])
                + ops.apply_pressure_boundary_transpose(dPb[a])
            )
            if self.include_convection:
                JV[a] += w * (
                    ops.convection_jacobian_action(states[a], dV)
                    + ops.convection_boundary_nitsche_jacobian(
                        states[a], dV, self.g_vals[a]
                    )
                )
            JP[a] = w * (ops.apply_div(dV) + ops.apply_pressure_boundary(dV))
        return self.layout.join(JV, JP)

    # --------------------------------------------------------------- norms

    def mass_apply(self, U):
        """Block mass weighting: w_a M_h on velocity, w_a M_h^p on pressure."""
        Vb, Pb = self.layout.split(U)
        MV = np.empty_like(Vb)
        MP = np.empty_like(Pb)
        for a in range(self.tm.n_nodes):
            w = self.tm.M_diag[a]
            MV[a] = w * self.ops.apply_mass(Vb[a])
            MP[a] = w * self.ops.apply_pressure_mass(Pb[a])
        return self.layout.join(MV, MP)

    def mass_inner(self, U, W):
        return float(U @ self.mass_apply(W))

    def mass_norm(self, U):
        return float(np.sqrt(max(self.mass_inner(U, U), 0.0)))


# --------------------------------------------------------------------------
# dense re-assembly (test oracle)
# --------------------------------------------------------------------------


class DenseAssembler:
    """Plain-loop dense reassembly of a slab system, for cross-checking.

    Everything is rebuilt from scratch: basis values point by point, dense
    matrices entry by entry, convection by quadrature-point loops. The only
    shared ingredients are the 1D polynomial evaluators and the mesh
    geometry. Refuses systems beyond a small size guard.
    """

    def __init__(self, problem):
        if problem.layout.n_unknowns > DENSE_GUARD:
            raise ValueError(
                f"dense oracle limited to {DENSE_GUARD} unknowns, "
                f"got {problem.layout.n_unknowns}"
            )
        self.problem = problem
        ops = problem.ops
        self.vspace = ops.vspace
        self.pspace = ops.pspace
        self.level = ops.level
        self.nu = ops.nu
        self.gamma1 = ops.nitsche.viscous_weight(ops.vspace.r + 1)
        self.gamma2 = ops.nitsche.gamma2
        # same rule as the matrix-free operators, so the comparison checks
        # the algebra rather than a quadrature difference
        self.rule = gauss_legendre(self.pspace.r + 1 + QUADRATURE_MARGIN)
        self._build_temporal()
        self._build_volume_matrices()
        self._build_face_matrices()

    # ----------------------------------------------------------- building

    def _build_temporal(self):
        tm = self.problem.tm
        basis = temporal_basis(tm.k)
        gx, gw = leggauss(tm.k + 3)  # heavier rule than strictly needed
        vals = basis.values(gx)
        ders = basis.derivatives(gx)
        left = basis.values(np.array([-1.0]))[0]
        n = tm.n_nodes
        K = np.zeros((n, n))
        for a in range(n):
            for b in range(n):
                K[a, b] = np.sum(gw * ders[:, b] * vals[:, a]) + left[b] * left[a]
        self.K_t = K
        self.jump_coeff = left  # C[:, -1]
        self.w_t = tm.M_diag

    def _scalar_basis(self, pt):
        """Values and physical gradients of all local scalar basis functions
        at one reference point of a cell."""
        vs = self.vspace
        bx = vs.basis_1d(np.array([pt[0]]))[0]
        by = vs.basis_1d(np.array([pt[1]]))[0]
        dbx = vs.basis_1d_deriv(np.array([pt[0]]))[0]
        dby = vs.basis_1d_deriv(np.array([pt[1]]))[0]
        nl = vs.n_loc_1d
        vals = np.empty(vs.n_loc)
        grads = np.empty((vs.n_loc, 2))
        for jy in range(nl):
            for jx in range(nl):
                j = jy * nl + jx
                vals[j] = by[jy] * bx[jx]
                grads[j, 0] = by[jy] * dbx[jx] / self.level.hx
                grads[j, 1] = dby[jy] * bx[jx] / self.level.hy
        return vals, grads

    def _build_volume_matrices(self):
        vs, ps, lvl = self.vspace, self.pspace, self.level
        nv, npre = vs.n_dofs, ps.n_dofs
        det = lvl.hx * lvl.hy
        M = np.zeros((nv, nv))
        A = np.zeros((nv, nv))
        B = np.zeros((npre, nv))
        Mp = np.zeros((npre, npre))
        pts2 = [
            (wx * wy * det, np.array([x, y]))
            for x, wx in zip(self.rule.points, self.rule.weights)
            for y, wy in zip(self.rule.points, self.rule.weights)
        ]
        self._vol_rule = pts2
        for cell in range(lvl.n_cells):
            dofs = vs.loc2glob[cell]
            for w, pt in pts2:
                phi, grad = self._scalar_basis(pt)
                chi = ps.basis_values(pt[None, :])[0]
                for i in range(vs.n_loc):
                    gi = dofs[i]
                    for j in range(vs.n_loc):
                        gj = dofs[j]
                        m = w * phi[i] * phi[j]
                        a_ = w * (grad[i] @ grad[j])
                        for c in (0, 1):
                            M[2 * gi + c, 2 * gj + c] += m
                            A[2 * gi + c, 2 * gj + c] += a_
                for l in range(ps.n_loc):
                    pg = cell * ps.n_loc + l
                    for j in range(vs.n_loc):
                        for c in (0, 1):
                            B[pg, 2 * dofs[j] + c] -= w * grad[j, c] * chi[l]
                    for m_ in range(ps.n_loc):
                        Mp[pg, cell * ps.n_loc + m_] += w * chi[l] * chi[m_]
        self.M = M
        self.A = A
        self.B = B
        self.Mp = Mp

    def _face_rule(self, side):
        """Quadrature on one boundary face: reference points of the cell,
        weights including the face length, outward normal."""
        fb = self.level.boundary_faces[side]
        axis = 0 if side in ("left", "right") else 1
        fixed = 1.0 if side in ("right", "top") else 0.0
        pts = []
        for s, ws in zip(self.rule.points, self.rule.weights):
            ref = np.empty(2)
            ref[axis] = fixed
            ref[1 - axis] = s
            pts.append((ws * fb.length, ref))
        return fb, pts

    def _build_face_matrices(self):
        vs, ps = self.vspace, self.pspace
        nv, npre = vs.n_dofs, ps.n_dofs
        N = np.zeros((nv, nv))
        Gp = np.zeros((npre, nv))
        for side in ("left", "right", "bottom", "top"):
            fb, pts = self._face_rule(side)
            n = fb.normal
            for cell, tag in zip(fb.cells, fb.tags):
                if tag != DIRICHLET:
                    continue
                dofs = vs.loc2glob[cell]
                for w, ref in pts:
                    phi, grad = self._scalar_basis(ref)
                    dn = grad @ n
                    chi = ps.basis_values(ref[None, :])[0]
                    for i in range(vs.n_loc):
                        gi = dofs[i]
                        for j in range(vs.n_loc):
                            gj = dofs[j]
                            cons = -self.nu * (dn[j] * phi[i] + phi[j] * dn[i])
                            pen = self.nu * self.gamma1 / fb.length * phi[i] * phi[j]
                            for c in (0, 1):
                                N[2 * gi + c, 2 * gj + c] += w * (cons + pen)
                                for d in (0, 1):
                                    N[2 * gi + c, 2 * gj + d] += (
                                        w * self.gamma2 / fb.length
                                        * n[c] * n[d] * phi[i] * phi[j]
                                    )
                    for l in range(ps.n_loc):
                        pg = cell * ps.n_loc + l
                        for j in range(vs.n_loc):
                            for c in (0, 1):
                                Gp[pg, 2 * dofs[j] + c] += (
                                    w * n[c] * phi[j] * chi[l]
                                )
        self.N = N
        self.Gp = Gp

    # --------------------------------------------------------- evaluation

    def _convection_dense(self, V):
        vs, lvl = self.vspace, self.level
        out = np.zeros(vs.n_dofs)
        V2 = V.reshape(-1, 2)
        for cell in range(lvl.n_cells):
            dofs = vs.loc2glob[cell]
            loc = V2[dofs]
            for w, pt in self._vol_rule:
                phi, grad = self._scalar_basis(pt)
                v = phi @ loc
                for i in range(vs.n_loc):
                    vdg = v @ grad[i]
                    for c in (0, 1):
                        out[2 * dofs[i] + c] -= w * v[c] * vdg
        for side in ("left", "right", "bottom", "top"):
            fb, pts = self._face_rule(side)
            for cell in fb.cells:
                dofs = vs.loc2glob[cell]
                loc = V2[dofs]
                for w, ref in pts:
                    phi, _ = self._scalar_basis(ref)
                    v = phi @ loc
                    y = v @ fb.normal
                    for i in range(vs.n_loc):
                        for c in (0, 1):
                            out[2 * dofs[i] + c] += w * y * v[c] * phi[i]
        return out

    def inflow_masks(self, V):
        """1[v.n < 0] at every Dirichlet-face quadrature point of V."""
        vs = self.vspace
        V2 = V.reshape(-1, 2)
        masks = {}
        for side in ("left", "right", "bottom", "top"):
            fb, pts = self._face_rule(side)
            rows = []
            for cell, tag in zip(fb.cells, fb.tags):
                loc = V2[vs.loc2glob[cell]]
                row = []
                for _, ref in pts:
                    phi, _ = self._scalar_basis(ref)
                    y = (phi @ loc) @ fb.normal
                    row.append(1.0 if (tag == DIRICHLET and y < 0.0) else 0.0)
                rows.append(row)
            masks[side] = np.array(rows)
        return masks

    def _face_g_values(self, side, t):
        """Dirichlet data at the quadrature points of one side's faces,
        rows indexed like fb.cells (zeros at non-Dirichlet faces)."""
        fb, pts = self._face_rule(side)
        g = self.problem.g
        vals = np.zeros((len(fb.cells), len(pts), 2))
        if g is None:
            return vals
        corner_scale = np.array([self.level.hx, self.level.hy])
        for row, (cell, tag) in enumerate(zip(fb.cells, fb.tags)):
            if tag != DIRICHLET:
                continue
            corner = self.level.cell_corners[cell]
            for q, (_, ref) in enumerate(pts):
                x = corner + ref * corner_scale
                vals[row, q] = np.asarray(g(x[None, :], t), dtype=float)[0]
        return vals

    def _inflow_dense(self, V, t, masks=None):
        """-<y_minus (v - g), chi> on Dirichlet faces; with ``masks`` given,
        y_minus is replaced by mask * (-y), making the term quadratic."""
        vs = self.vspace
        out = np.zeros(vs.n_dofs)
        V2 = V.reshape(-1, 2)
        for side in ("left", "right", "bottom", "top"):
            fb, pts = self._face_rule(side)
            gv = self._face_g_values(side, t)
            for row, (cell, tag) in enumerate(zip(fb.cells, fb.tags)):
                if tag != DIRICHLET:
                    continue
                dofs = vs.loc2glob[cell]
                loc = V2[dofs]
                for q, (w, ref) in enumerate(pts):
                    phi, _ = self._scalar_basis(ref)
                    v = phi @ loc
                    y = v @ fb.normal
                    if masks is None:
                        ym = max(-y, 0.0)
                    else:
                        ym = masks[side][row, q] * (-y)
                    diff = v - gv[row, q]
                    for i in range(vs.n_loc):
                        for c in (0, 1):
                            out[2 * dofs[i] + c] -= w * ym * diff[c] * phi[i]
        return out

    def _force_dense(self, t):
        vs = self.vspace
        out = np.zeros(vs.n_dofs)
        f = self.problem.f
        if f is None:
            return out
        scale = np.array([self.level.hx, self.level.hy])
        for cell in range(self.level.n_cells):
            dofs = vs.loc2glob[cell]
            corner = self.level.cell_corners[cell]
            for w, pt in self._vol_rule:
                phi, _ = self._scalar_basis(pt)
                fx = np.asarray(f((corner + pt * scale)[None, :], t), dtype=float)[0]
                for i in range(vs.n_loc):
                    for c in (0, 1):
                        out[2 * dofs[i] + c] += w * fx[c] * phi[i]
        return out

    def _dirichlet_dense(self, t):
        """-nu <g, d_n chi> + nu gamma1/h <g, chi> + gamma2/h <g.n, chi.n>."""
        vs = self.vspace
        out = np.zeros(vs.n_dofs)
        if self.problem.g is None:
            return out
        for side in ("left", "right", "bottom", "top"):
            fb, pts = self._face_rule(side)
            gv = self._face_g_values(side, t)
            n = fb.normal
            for row, (cell, tag) in enumerate(zip(fb.cells, fb.tags)):
                if tag != DIRICHLET:
                    continue
                dofs = vs.loc2glob[cell]
                for q, (w, ref) in enumerate(pts):
                    phi, grad = self._scalar_basis(ref)
                    dn = grad @ n
                    gx = gv[row, q]
                    gn = gx @ n
                    for i in range(vs.n_loc):
                        for c in (0, 1):
                            out[2 * dofs[i] + c] += w * (
                                -self.nu * gx[c] * dn[i]
                                + self.nu * self.gamma1 / fb.length * gx[c] * phi[i]
                                + self.gamma2 / fb.length * gn * n[c] * phi[i]
                            )
        return out

    def residual(self, U, masks=None):
        """Dense slab residual; ``masks`` (one dict per temporal node)
        freezes the inflow switching for derivative probes."""
        pr = self.problem
        Vb, Pb = pr.layout.split(U)
        n = pr.tm.n_nodes
        RV = np.zeros_like(Vb)
        RP = np.zeros_like(Pb)
        jump_v = self.M @ pr.v_prev
        for a in range(n):
            for b in range(n):
                RV[a] += self.K_t[a, b] * (self.M @ Vb[b])
            RV[a] -= self.jump_coeff[a] * jump_v
            w = self.w_t[a]
            t = pr.node_times[a]
            RV[a] += w * (
                self.nu * (self.A @ Vb[a])
                + self.N @ Vb[a]
                + (self.B + self.Gp).T @ Pb[a]
            )
            RV[a] -= w * (self._force_dense(t) + self._dirichlet_dense(t))
            if pr.include_convection:
                RV[a] += w * self._convection_dense(Vb[a])
                RV[a] += w * self._inflow_dense(
                    Vb[a], t, None if masks is None else masks[a]
                )
            RP[a] = w * ((self.B + self.Gp) @ Vb[a])
        return pr.layout.join(RV, RP)


def dense_oracle(problem, U):
    """Dense residual and Jacobian at U, independently reassembled.

    The Jacobian columns come from central probes of the mask-frozen dense
    residual, J[:, j] = (R_f(U + e_j) - R_f(U - e_j)) / 2, which is exact
    because the frozen residual is quadratic in the unknowns.
    """
    asm = DenseAssembler(problem)
    R = asm.residual(U)
    Vb, _ = problem.layout.split(U)
    masks = [asm.inflow_masks(Vb[a]) for a in range(problem.tm.n_nodes)]
    n = problem.layout.n_unknowns
    J = np.empty((n, n))
    for j in range(n):
        Up = U.copy()
        Um = U.copy()
        Up[j] += 1.0
        Um[j] -= 1.0
        J[:, j] = (asm.residual(Up, masks) - asm.residual(Um, masks)) / 2.0
    return R, J
