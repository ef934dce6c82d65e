"""Matrix-free spatial operators for the Q_{r+1}/P_r^disc pair.

Every cell of a level is congruent, so the linear operators reduce to one
local matrix per kind applied to all cells in a batch (gather, one matmul,
scatter-add); nothing global is ever assembled.  The nonlinear convection
terms are evaluated by quadrature from cached state values at the
quadrature points.

Velocity coefficient vectors are interleaved, dof = 2 * scalar_node + comp;
``vec.reshape(-1, 2)`` views the per-node pairs.  Pressure vectors reshape
to (n_cells, n_loc) without indirection.

Boundary conditions are weak throughout: Dirichlet faces carry the Nitsche
consistency/penalty terms

    N = -nu (G + G^T) + nu w1(p) / h M_face + gamma2 / h M_face^normal

with w1(p) = gamma1 * p (p+1) / 2 for velocity degree p = r+1, plus the
inflow pairing -<(v.n)^- (v - g), z>; all boundary faces carry the
convective consistency term <(v.n) v, z> regardless of tag.
"""

import numpy as np

from .elements import gauss_legendre, shape_tables, tensor_quadrature
from .geometry import DIRICHLET

# extra points beyond the polynomial degree used by the volume/face rules:
# r+2 points integrate every bilinear form exactly (mass/stiffness peak at
# per-direction degree 2r+2 <= 2r+3); only the convective triple products
# fall beyond the rule, matching the usual degree+1 Gauss convention
QUADRATURE_MARGIN = 1

_SIDE_AXIS = {"left": 0, "right": 0, "bottom": 1, "top": 1}
_SIDE_FIXED = {"left": 0.0, "right": 1.0, "bottom": 0.0, "top": 1.0}


class NitscheConfig:
    """Penalty configuration of the weak Dirichlet terms."""

    def __init__(self, gamma1=10.0, gamma2=10.0):
        self.gamma1 = float(gamma1)
        self.gamma2 = float(gamma2)

    def viscous_weight(self, degree):
        """Effective gamma1 for velocity degree p: gamma1 * p (p+1) / 2.

        The symmetric weak-Dirichlet form stays coercive only while the
        penalty dominates a trace inequality whose constant grows like
        p (p+1); a flat weight tuned at p = 2 silently loses coercivity
        around p = 4, after which convection at moderate amplitude can
        push a boundary-layer eigenmode of the Jacobian through zero and
        stall Newton on an almost-singular system.  The p (p+1) / 2
        scaling is the usual interior-penalty weight; the default
        gamma1 = 10 then gives 30, 60, 100, 150 for p = 2..5."""
        return self.gamma1 * degree * (degree + 1) / 2.0


class DirichletData:
    """Boundary velocity data g(x, t); wraps a vectorized callable."""

    def __init__(self, func):
        self._func = func

    def __call__(self, points, t):
        return np.asarray(self._func(points, t), dtype=float)

    @classmethod
    def zero(cls):
        return cls(lambda points, t: np.zeros((len(points), 2)))


class _FaceBlock:
    """Precomputed face data of one side of the rectangle."""

    def __init__(self, side, face_set, vspace, pspace, rule_1d):
        self.side = side
        self.cells = face_set.cells
        self.dirichlet = face_set.tags == DIRICHLET
        self.normal = face_set.normal
        self.axis = _SIDE_AXIS[side]
        self.h_face = face_set.length
        s = rule_1d.points
        fixed = np.full_like(s, _SIDE_FIXED[side])
        ref = np.empty((len(s), 2))
        ref[:, self.axis] = fixed
        ref[:, 1 - self.axis] = s
        self.ref_points = ref
        self.weights = rule_1d.weights * self.h_face

        lvl = vspace.mesh_level
        tabs = shape_tables(vspace, ref)
        self.basis = tabs.values  # (q1, n_s)
        grad_phys = tabs.gradients_physical(lvl.cell_map(0))
        self.dnormal = grad_phys @ self.normal  # (q1, n_s)
        self.p_basis = shape_tables(pspace, ref).values  # (q1, n_p)

        corners = lvl.cell_corners[self.cells]
        phys = corners[:, None, :] + ref[None, :, :] * np.array([lvl.hx, lvl.hy])
        self.points = phys  # (n_faces, q1, 2)


class SpatialState:
    """Velocity state cached at the volume and face quadrature points."""

    def __init__(self, ops, V):
        V = np.asarray(V, dtype=float)
        if V.shape != (ops.vspace.n_dofs,):
            raise ValueError(
                f"velocity vector of length {V.shape} does not match space "
                f"with {ops.vspace.n_dofs} dofs"
            )
        self.V = V
        self.local = ops.gather_velocity(V)  # (n_cells, n_s, 2)
        self.at_quad = np.einsum("qi,cis->cqs", ops.vol_basis, self.local)
        # v . grad(phi_i) at every volume quadrature point, reused by both
        # the convection value and its Jacobian action
        self.vdotgrad = np.einsum(
            "cqd,qid->cqi", self.at_quad, ops.vol_grad
        )
        self.traces = {}
        for side, fb in ops.faces.items():
            self.traces[side] = np.einsum(
                "qi,cis->cqs", fb.basis, self.local[fb.cells]
            )


class SpatialOperatorSet:
    """All spatial operator actions for one (level, r, nu, penalties)."""

    def __init__(self, vspace, pspace, nu, nitsche=None):
        if nu <= 0:
            raise ValueError(f"viscosity nu={nu} must be positive")
        self.vspace = vspace
        self.pspace = pspace
        self.level = vspace.mesh_level
        self.nu = float(nu)
        self.nitsche = nitsche or NitscheConfig()

        r = pspace.r
        rule_1d = gauss_legendre(r + 1 + QUADRATURE_MARGIN)
        self.rule_1d = rule_1d
        ref_pts, ref_wts = tensor_quadrature(rule_1d)
        lvl = self.level
        cm0 = lvl.cell_map(0)
        self.vol_weights = ref_wts * cm0.det  # (q2,)
        vtabs = shape_tables(vspace, ref_pts)
        self.vol_basis = vtabs.values  # (q2, n_s)
        self.vol_grad = vtabs.gradients_physical(cm0)  # (q2, n_s, 2)
        self.p_vol_basis = shape_tables(pspace, ref_pts).values  # (q2, n_p)

        # physical quadrature points of every cell, for data evaluation
        scale = np.array([lvl.hx, lvl.hy])
        self.vol_points = (
            lvl.cell_corners[:, None, :] + ref_pts[None, :, :] * scale
        )

        w = self.vol_weights
        B = self.vol_basis
        G = self.vol_grad
        P = self.p_vol_basis
        self.mass_loc = np.einsum("q,qi,qj->ij", w, B, B)
        self.stiff_loc = np.einsum("q,qid,qjd->ij", w, G, G)
        # (B_h)_{l,(c,j)} = -int (d_c phi_j) chi_l^p, stored (n_p, n_s, 2)
        self.div_loc = -np.einsum("q,qjc,ql->ljc", w, G, P)
        self.p_mass_loc = np.einsum("q,ql,qm->lm", w, P, P)

        self.faces = {
            side: _FaceBlock(side, fs, vspace, pspace, rule_1d)
            for side, fs in lvl.boundary_faces.items()
        }
        self._build_nitsche_locals()

        self.domain_area = lvl.n_cells * cm0.det
        self._p_const = pspace.constant_coefficients()

    # ------------------------------------------------------------ plumbing

    def gather_velocity(self, V):
        return V.reshape(self.vspace.n_scalar, 2)[self.vspace.loc2glob]

    def scatter_velocity(self, local, cells=None, out=None):
        if out is None:
            out = np.zeros((self.vspace.n_scalar, 2))
        idx = self.vspace.loc2glob if cells is None else self.vspace.loc2glob[cells]
        np.add.at(out, idx, local)
        return out

    def _build_nitsche_locals(self):
        """Per side: the combined Dirichlet boundary matrix, separately for
        the normal and the tangential velocity component (everything in it
        is component-diagonal on axis-aligned faces)."""
        nu = self.nu
        g1 = self.nitsche.viscous_weight(self.vspace.r + 1)
        g2 = self.nitsche.gamma2
        for fb in self.faces.values():
            wf = fb.weights
            Bf = fb.basis
            Dn = fb.dnormal
            mf = np.einsum("q,qi,qj->ij", wf, Bf, Bf)
            gv = np.einsum("q,qj,qi->ij", wf, Dn, Bf)  # int (d_n phi_j) phi_i
            base = -nu * (gv + gv.T) + nu * (g1 / fb.h_face) * mf
            fb.nitsche_normal = base + (g2 / fb.h_face) * mf
            fb.nitsche_tangential = base
            # int_f phi_j chi_l^p, the normal-trace pressure coupling
            fb.gp_loc = np.einsum("q,qj,ql->lj", wf, Bf, fb.p_basis)

    # ------------------------------------------------------- linear actions

    def apply_mass(self, V):
        local = self.gather_velocity(V)
        out = self.scatter_velocity(np.einsum("ij,cjs->cis", self.mass_loc, local))
        return out.ravel()

    def apply_stiffness(self, V):
        local = self.gather_velocity(V)
        out = self.scatter_velocity(np.einsum("ij,cjs->cis", self.stiff_loc, local))
        return out.ravel()

    def apply_div(self, V):
        """(B_h V)_l = -int (div v_h) chi_l^p."""
        local = self.gather_velocity(V)
        return np.einsum("ljd,ejd->el", self.div_loc, local).ravel()

    def apply_div_transpose(self, P):
        p_loc = P.reshape(self.level.n_cells, self.pspace.n_loc)
        local = np.einsum("ljd,el->ejd", self.div_loc, p_loc)
        return self.scatter_velocity(local).ravel()

    def apply_pressure_mass(self, P):
        p_loc = P.reshape(self.level.n_cells, self.pspace.n_loc)
        return np.einsum("lm,cm->cl", self.p_mass_loc, p_loc).ravel()

    def apply_nitsche_velocity(self, V):
        """The linear weak-Dirichlet operator on all Dirichlet faces."""
        V2 = V.reshape(self.vspace.n_scalar, 2)
        out = np.zeros_like(V2)
        for fb in self.faces.values():
            cells = fb.cells[fb.dirichlet]
            if len(cells) == 0:
                continue
            loc = V2[self.vspace.loc2glob[cells]]
            res = np.empty_like(loc)
            ax = fb.axis
            res[:, :, ax] = loc[:, :, ax] @ fb.nitsche_normal.T
            res[:, :, 1 - ax] = loc[:, :, 1 - ax] @ fb.nitsche_tangential.T
            self.scatter_velocity(res, cells=cells, out=out)
        return out.ravel()

    def apply_pressure_boundary(self, V):
        """(G^p V)_l = sum_Dirichlet int_f (v.n) chi_l^p."""
        V2 = V.reshape(self.vspace.n_scalar, 2)
        out = np.zeros(self.pspace.n_dofs).reshape(
            self.level.n_cells, self.pspace.n_loc
        )
        for fb in self.faces.values():
            cells = fb.cells[fb.dirichlet]
            if len(cells) == 0:
                continue
            vn = V2[self.vspace.loc2glob[cells]][:, :, fb.axis]
            sign = fb.normal[fb.axis]
            out[cells] += sign * (vn @ fb.gp_loc.T)
        return out.ravel()

    def apply_pressure_boundary_transpose(self, P):
        p_loc = P.reshape(self.level.n_cells, self.pspace.n_loc)
        out = np.zeros((self.vspace.n_scalar, 2))
        for fb in self.faces.values():
            cells = fb.cells[fb.dirichlet]
            if len(cells) == 0:
                continue
            sign = fb.normal[fb.axis]
            res = np.zeros((len(cells), self.vspace.n_loc, 2))
            res[:, :, fb.axis] = sign * (p_loc[cells] @ fb.gp_loc)
            self.scatter_velocity(res, cells=cells, out=out)
        return out.ravel()

    # --------------------------------------------------- nonlinear actions

    def make_state(self, V):
        return SpatialState(self, V)

    def convection(self, state):
        """H(V): divergence-form volume term plus the full-boundary
        consistency term <(v.n) v, z> on every boundary face."""
        out_loc = -np.einsum(
            "q,cqs,cqi->cis", self.vol_weights, state.at_quad, state.vdotgrad
        )
        out = self.scatter_velocity(out_loc)
        for side, fb in self.faces.items():
            T = state.traces[side]
            y = fb.normal[fb.axis] * T[:, :, fb.axis]
            loc = np.einsum("q,cq,cqs,qi->cis", fb.weights, y, T, fb.basis)
            self.scatter_velocity(loc, cells=fb.cells, out=out)
        return out.ravel()

    def convection_jacobian_action(self, state, Vhat):
        """H'(V) applied to an increment, volume and boundary parts."""
        hat_loc = self.gather_velocity(Vhat)
        hat_quad = np.einsum("qi,cis->cqs", self.vol_basis, hat_loc)
        hat_dot = np.einsum("cqd,qid->cqi", hat_quad, self.vol_grad)
        out_loc = -np.einsum(
            "q,cqs,cqi->cis", self.vol_weights, hat_quad, state.vdotgrad
        ) - np.einsum("q,cqs,cqi->cis", self.vol_weights, state.at_quad, hat_dot)
        out = self.scatter_velocity(out_loc)
        for side, fb in self.faces.items():
            T = state.traces[side]
            That = np.einsum("qi,cis->cqs", fb.basis, hat_loc[fb.cells])
            sign = fb.normal[fb.axis]
            y = sign * T[:, :, fb.axis]
            yhat = sign * That[:, :, fb.axis]
            mixed = yhat[:, :, None] * T + y[:, :, None] * That
            loc = np.einsum("q,cqs,qi->cis", fb.weights, mixed, fb.basis)
            self.scatter_velocity(loc, cells=fb.cells, out=out)
        return out.ravel()

    def boundary_data_values(self, g, t):
        """Evaluate g on the Dirichlet face quadrature points of each side."""
        vals = {}
        for side, fb in self.faces.items():
            cells_mask = fb.dirichlet
            pts = fb.points[cells_mask]
            if len(pts) == 0:
                vals[side] = np.zeros((0, len(fb.weights), 2))
                continue
            flat = pts.reshape(-1, 2)
            vals[side] = np.asarray(g(flat, t), dtype=float).reshape(pts.shape)
        return vals

    def convection_boundary_nitsche(self, state, g_vals=None):
        """Inflow stabilization on Dirichlet faces.

        Returns the operator part N(V)_i = -<(v.n)^- v, chi_i> and the
        data part R_i = -<(v.n)^- g, chi_i>; the slab residual subtracts
        the data part so the net contribution is -<(v.n)^- (v - g), chi>.
        """
        op = np.zeros((self.vspace.n_scalar, 2))
        rhs = np.zeros((self.vspace.n_scalar, 2))
        for side, fb in self.faces.items():
            cells = fb.cells[fb.dirichlet]
            if len(cells) == 0:
                continue
            T = state.traces[side][fb.dirichlet]
            y = fb.normal[fb.axis] * T[:, :, fb.axis]
            yminus = np.maximum(-y, 0.0)  # (|y| - y) / 2
            loc = -np.einsum("q,cq,cqs,qi->cis", fb.weights, yminus, T, fb.basis)
            self.scatter_velocity(loc, cells=cells, out=op)
            if g_vals is not None:
                gv = g_vals[side]
                loc_g = -np.einsum(
                    "q,cq,cqs,qi->cis", fb.weights, yminus, gv, fb.basis
                )
                self.scatter_velocity(loc_g, cells=cells, out=rhs)
        return op.ravel(), rhs.ravel()

    def convection_boundary_nitsche_jacobian(self, state, Vhat, g_vals=None):
        """Derivative of -<(v.n)^- (v - g), chi> in direction Vhat, with
        the subgradient of y^- taken as 0 at y = 0."""
        hat2 = Vhat.reshape(self.vspace.n_scalar, 2)
        out = np.zeros((self.vspace.n_scalar, 2))
        for side, fb in self.faces.items():
            cells = fb.cells[fb.dirichlet]
            if len(cells) == 0:
                continue
            T = state.traces[side][fb.dirichlet]
            That = np.einsum("qi,cis->cqs", fb.basis, hat2[self.vspace.loc2glob[cells]])
            sign = fb.normal[fb.axis]
            y = sign * T[:, :, fb.axis]
            yhat = sign * That[:, :, fb.axis]
            yminus = np.maximum(-y, 0.0)
            mask = (y < 0.0).astype(float)
            diff = T.copy()
            if g_vals is not None:
                diff = diff - g_vals[side]
            mixed = -yminus[:, :, None] * That - (mask * yhat)[:, :, None] * (-diff)
            loc = np.einsum("q,cqs,qi->cis", fb.weights, mixed, fb.basis)
            self.scatter_velocity(loc, cells=cells, out=out)
        return out.ravel()

    # ------------------------------------------------------------ rhs data

    def force_vector(self, f, t):
        """F_i = <f(t), chi_i> by volume quadrature."""
        flat = self.vol_points.reshape(-1, 2)
        fq = np.asarray(f(flat, t), dtype=float).reshape(self.vol_points.shape)
        loc = np.einsum("q,cqs,qi->cis", self.vol_weights, fq, self.vol_basis)
        return self.scatter_velocity(loc).ravel()

    def dirichlet_rhs(self, g, t):
        """Linear-in-g Nitsche data terms on Dirichlet faces:
        -nu <g, d_n chi> + nu w1/h <g, chi> + gamma2/h <g.n, chi.n>."""
        nu = self.nu
        g1 = self.nitsche.viscous_weight(self.vspace.r + 1)
        g2 = self.nitsche.gamma2
        out = np.zeros((self.vspace.n_scalar, 2))
        for side, fb in self.faces.items():
            cells = fb.cells[fb.dirichlet]
            if len(cells) == 0:
                continue
            pts = fb.points[fb.dirichlet].reshape(-1, 2)
            gq = np.asarray(g(pts, t), dtype=float).reshape(len(cells), -1, 2)
            loc = np.einsum(
                "q,cqs,qi->cis", fb.weights, gq, -nu * fb.dnormal
            ) + (nu * g1 / fb.h_face) * np.einsum(
                "q,cqs,qi->cis", fb.weights, gq, fb.basis
            )
            gn = fb.normal[fb.axis] * gq[:, :, fb.axis]
            loc[:, :, fb.axis] += (g2 / fb.h_face) * fb.normal[fb.axis] * np.einsum(
                "q,cq,qi->ci", fb.weights, gn, fb.basis
            )
            self.scatter_velocity(loc, cells=cells, out=out)
        return out.ravel()

    # --------------------------------------------------- pressure utilities

    def pressure_mean(self, P):
        """Integral mean of a pressure coefficient field over the domain."""
        return float(self._p_const @ self.apply_pressure_mass(P)) / self.domain_area

    def remove_pressure_mean(self, P):
        P -= self.pressure_mean(P) * self._p_const
        return P

    # ------------------------------------------- element matrices (Vanka)

    def mass_element_matrix(self):
        """Velocity-velocity local mass block (2 n_s, 2 n_s), interleaved."""
        return np.kron(self.mass_loc, np.eye(2))

    def linear_velocity_element_matrices(self):
        """nu A + Nitsche face terms per cell, (n_cells, 2 n_s, 2 n_s)."""
        n_s = self.vspace.n_loc
        base = self.nu * np.kron(self.stiff_loc, np.eye(2))
        out = np.repeat(base[None, :, :], self.level.n_cells, axis=0)
        for fb in self.faces.values():
            cells = fb.cells[fb.dirichlet]
            if len(cells) == 0:
                continue
            block = np.zeros((n_s, 2, n_s, 2))
            ax = fb.axis
            block[:, ax, :, ax] = fb.nitsche_normal
            block[:, 1 - ax, :, 1 - ax] = fb.nitsche_tangential
            out[cells] += block.reshape(2 * n_s, 2 * n_s)
        return out

    def pressure_coupling_element_matrix(self):
        """(B^T + G^p^T) element blocks per cell, (n_cells, 2 n_s, n_p):
        row = velocity local dof, column = pressure local dof."""
        n_s = self.vspace.n_loc
        base = np.transpose(self.div_loc, (1, 2, 0)).reshape(2 * n_s, -1)
        out = np.repeat(base[None, :, :], self.level.n_cells, axis=0)
        for fb in self.faces.values():
            cells = fb.cells[fb.dirichlet]
            if len(cells) == 0:
                continue
            block = np.zeros((n_s, 2, self.pspace.n_loc))
            block[:, fb.axis, :] = fb.normal[fb.axis] * fb.gp_loc.T
            out[cells] += block.reshape(2 * n_s, -1)
        return out

    def convection_element_matrices(self, state, g_vals=None):
        """Linearized convection element blocks at the given state,
        including the boundary consistency and inflow terms.

        Row (i, s), column (j, d), both interleaved node-major:
        volume part -delta_sd int phi_j (v.grad phi_i) - int v_s phi_j d_d phi_i.
        """
        n_s = self.vspace.n_loc
        w = self.vol_weights
        B = self.vol_basis
        G = self.vol_grad
        t1 = np.einsum("cqi,qj->cij", state.vdotgrad * w[None, :, None], B)
        t2 = np.einsum("q,cqs,qj,qid->cisjd", w, state.at_quad, B, G)
        out = -t2
        for c in range(2):
            out[:, :, c, :, c] -= t1
        for side, fb in self.faces.items():
            T = state.traces[side]
            sign = fb.normal[fb.axis]
            y = sign * T[:, :, fb.axis]
            wf = fb.weights
            Bf = fb.basis
            face = np.zeros((len(fb.cells), n_s, 2, n_s, 2))
            # <(vhat.n) v + (v.n) vhat, chi>
            nd = np.zeros(2)
            nd[fb.axis] = sign
            face += np.einsum(
                "q,cqs,qj,d,qi->cisjd", wf, T, Bf, nd, Bf
            )
            diag = np.einsum("q,cq,qj,qi->cij", wf, y, Bf, Bf)
            for c in range(2):
                face[:, :, c, :, c] += diag
            if fb.dirichlet.any():
                dmask = fb.dirichlet
                Td = T[dmask]
                yd = y[dmask]
                yminus = np.maximum(-yd, 0.0)
                mask = (yd < 0.0).astype(float)
                diff = Td.copy()
                if g_vals is not None:
                    diff = diff - g_vals[side]
                dface = np.zeros((dmask.sum(), n_s, 2, n_s, 2))
                ddiag = -np.einsum("q,cq,qj,qi->cij", wf, yminus, Bf, Bf)
                for c in range(2):
                    dface[:, :, c, :, c] += ddiag
                dface += np.einsum(
                    "q,cq,cqs,qj,d,qi->cisjd", wf, mask, diff, Bf, nd, Bf
                )
                face[dmask] += dface
            np.add.at(out, fb.cells, face)
        return out.reshape(self.level.n_cells, 2 * n_s, 2 * n_s)


def assemble_rhs(ops, f, g, tm, t_start, t_end):
    """Slab data vectors (F, L), one velocity block per Gauss-Radau node.

    With the nodal temporal basis the slab quadrature collapses to
    F^a = w_a <f(t_a), chi> and L^a = w_a * (Nitsche data terms at t_a);
    w_a are the scaled Radau weights on the slab.
    """
    times = tm.node_times(t_start, t_end)
    n_v = ops.vspace.n_dofs
    F = np.zeros((tm.n_nodes, n_v))
    L = np.zeros((tm.n_nodes, n_v))
    for a, t in enumerate(times):
        wa = tm.M_diag[a]
        if f is not None:
            F[a] = wa * ops.force_vector(f, t)
        if g is not None:
            L[a] = wa * ops.dirichlet_rhs(g, t)
    return F, L
