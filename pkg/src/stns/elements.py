"""Reference elements: quadrature rules, temporal DG bases, spatial spaces.

Temporal quadrature lives on [-1, 1] (right Gauss-Radau, rightmost node at
+1); the spatial reference cell is the unit square [0, 1]^2.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre as npleg
from numpy.polynomial.legendre import leggauss, Legendre
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights together with the exactness degree of the rule."""

    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int

    def __len__(self):
        return len(self.weights)


def gauss_radau(k):
    """Right-sided Gauss-Radau rule with k+1 nodes on [-1, 1].

    Exact for polynomials of degree <= 2k; the rightmost node is +1 so a
    DG(k) coefficient at the last node is the slab's end-time trace.
    """
    if k < 0:
        raise ValueError(f"temporal degree k={k} must be >= 0")
    if k == 0:
        nodes = np.array([1.0])
    else:
        # interior nodes of the *left* Radau rule are the roots of the
        # Jacobi polynomial P_k^(0,1); mirror to get the right-sided rule
        interior, _ = roots_jacobi(k, 0.0, 1.0)
        nodes = np.sort(np.concatenate([-interior, [1.0]]))
    # weights = integrals of the Lagrange basis (degree k, so a (k+1)-point
    # Gauss rule integrates them exactly)
    gx, gw = leggauss(k + 1)
    vals = _lagrange_values(nodes, gx)
    weights = vals.T @ gw
    return QuadratureRule(nodes, weights, 2 * k)


def gauss_legendre(n):
    """n-point Gauss-Legendre rule on [0, 1], exact for degree <= 2n-1."""
    if n < 1:
        raise ValueError(f"need at least one quadrature point, got {n}")
    x, w = leggauss(n)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w, 2 * n - 1)


def gauss_lobatto_nodes(degree):
    """The degree+1 Gauss-Lobatto points on [0, 1] (endpoints included)."""
    if degree < 1:
        raise ValueError(f"nodal degree {degree} must be >= 1")
    if degree == 1:
        return np.array([0.0, 1.0])
    interior = Legendre.basis(degree).deriv().roots()
    return 0.5 * (np.concatenate([[-1.0], np.sort(interior), [1.0]]) + 1.0)


def _lagrange_values(nodes, x):
    """Values of the Lagrange basis over ``nodes`` at points ``x``,
    shaped (len(x), len(nodes))."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(nodes)
    vals = np.ones((len(x), n))
    for a in range(n):
        for b in range(n):
            if b != a:
                vals[:, a] *= (x - nodes[b]) / (nodes[a] - nodes[b])
    return vals


def _lagrange_derivatives(nodes, x):
    """First derivatives of the Lagrange basis at points ``x``.

    Uses the product-rule expansion sum_c 1/(x_a - x_c) prod_{b != a,c} ...
    which stays finite at the nodes themselves.
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(nodes)
    ders = np.zeros((len(x), n))
    for a in range(n):
        for c in range(n):
            if c == a:
                continue
            term = np.full(len(x), 1.0 / (nodes[a] - nodes[c]))
            for b in range(n):
                if b != a and b != c:
                    term *= (x - nodes[b]) / (nodes[a] - nodes[b])
            ders[:, a] += term
    return ders


class TemporalBasis:
    """Lagrange basis of degree k at the right Gauss-Radau nodes on [-1, 1].

    phi_a(node_mu) = delta_{a,mu}, so DG coefficients are nodal values at
    the quadrature times and the temporal mass matrix is diagonal.
    """

    def __init__(self, k):
        self.k = k
        rule = gauss_radau(k)
        self.nodes = rule.points
        self.weights = rule.weights

    def values(self, x):
        return _lagrange_values(self.nodes, x)

    def derivatives(self, x):
        return _lagrange_derivatives(self.nodes, x)

    def value_matrix(self):
        return self.values(self.nodes)


def temporal_basis(k):
    """Temporal DG(k) Lagrange basis at the right Gauss-Radau nodes."""
    return TemporalBasis(k)


class VelocitySpace:
    """Continuous vector Q_{r+1} space on one mesh level.

    Scalar basis: tensor products of 1D Lagrange polynomials at the
    Gauss-Lobatto points of degree r+1; both vector components share the
    scalar node set. Global scalar nodes form an (n*q+1)^2 grid, numbered
    lexicographically (y-major); the vector DoF of node g and component c
    is 2*g + c. No strong elimination happens anywhere: boundary DoFs stay
    in the system and are listed for inspection only.
    """

    def __init__(self, mesh_level, r):
        if r < 0:
            raise ValueError(f"pair order r={r} must be >= 0")
        self.mesh_level = mesh_level
        self.r = r
        self.degree = r + 1
        q = self.degree
        n = mesh_level.n_cells_per_dim
        self.nodes_1d = gauss_lobatto_nodes(q)
        self.n_nodes_per_dim = n * q + 1
        self.n_scalar = self.n_nodes_per_dim**2
        self.n_dofs = 2 * self.n_scalar
        self.n_loc_1d = q + 1
        self.n_loc = self.n_loc_1d**2

        # global 1D node coordinates: per cell, its Gauss-Lobatto points
        cells = np.arange(n)
        pos = (cells[:, None] + self.nodes_1d[None, :-1]).ravel()
        self.node_coords_1d_x = (
            mesh_level.origin[0] + np.append(pos, n) * mesh_level.hx
        )
        self.node_coords_1d_y = (
            mesh_level.origin[1] + np.append(pos, n) * mesh_level.hy
        )

        # cell -> global scalar node map, local nodes ordered y-major to
        # match the tensor basis j = jy * (q+1) + jx
        gx = cells[:, None] * q + np.arange(q + 1)[None, :]  # (n, q+1)
        npd = self.n_nodes_per_dim
        loc2glob = np.empty((n, n, self.n_loc), dtype=int)
        for iy in range(n):
            rows = gx[iy] * npd  # (q+1,) y contribution per local jy
            loc2glob[iy] = (rows[None, :, None] + gx[:, None, :]).reshape(
                n, self.n_loc
            )
        self.loc2glob = loc2glob.reshape(mesh_level.n_cells, self.n_loc)

        bmask = np.zeros((npd, npd), dtype=bool)
        bmask[0, :] = bmask[-1, :] = True
        bmask[:, 0] = bmask[:, -1] = True
        self.boundary_scalar_nodes = np.flatnonzero(bmask.ravel())

    def node_coordinates(self):
        """Physical coordinates of all global scalar nodes, (n_scalar, 2)."""
        X, Y = np.meshgrid(self.node_coords_1d_x, self.node_coords_1d_y)
        return np.column_stack([X.ravel(), Y.ravel()])

    def interpolate(self, func, t=None):
        """Nodal interpolation of a vector field; func(points, [t]) -> (m, 2).

        Returns the interleaved coefficient vector of length 2 * n_scalar.
        """
        pts = self.node_coordinates()
        vals = func(pts) if t is None else func(pts, t)
        return np.asarray(vals, dtype=float).reshape(self.n_scalar, 2).ravel()

    def basis_1d(self, x):
        return _lagrange_values(self.nodes_1d, x)

    def basis_1d_deriv(self, x):
        return _lagrange_derivatives(self.nodes_1d, x)

    def evaluate_scalar(self, coeffs, points):
        """Evaluate a scalar coefficient field at physical points
        (used by transfers and tests; slow path, loops over points)."""
        lvl = self.mesh_level
        pts = np.atleast_2d(points)
        ref = (pts - lvl.origin) / np.array([lvl.hx, lvl.hy])
        n = lvl.n_cells_per_dim
        cx = np.clip(np.floor(ref[:, 0]).astype(int), 0, n - 1)
        cy = np.clip(np.floor(ref[:, 1]).astype(int), 0, n - 1)
        loc_x = ref[:, 0] - cx
        loc_y = ref[:, 1] - cy
        out = np.empty(len(pts))
        for p in range(len(pts)):
            cell = cy[p] * n + cx[p]
            lx = self.basis_1d(loc_x[p])[0]
            ly = self.basis_1d(loc_y[p])[0]
            local = coeffs[self.loc2glob[cell]].reshape(
                self.n_loc_1d, self.n_loc_1d
            )
            out[p] = ly @ local @ lx
        return out


def pressure_exponents(r):
    """Basis index pairs (i, j), i+j <= r, ordered by total degree so a
    lower-degree basis is a prefix of every higher-degree one."""
    return [(i, d - i) for d in range(r + 1) for i in range(d + 1)]


def _sh_legendre_1d(max_deg, x):
    """Values and derivatives of the shifted Legendre polynomials
    P_n(2x - 1), n = 0..max_deg, on [0, 1]; both arrays (max_deg+1, n_pts)."""
    u = 2.0 * np.asarray(x, dtype=float).ravel() - 1.0
    vals = npleg.legvander(u, max_deg).T
    ders = np.empty_like(vals)
    for n in range(max_deg + 1):
        c = np.zeros(n + 1)
        c[n] = 1.0
        ders[n] = 2.0 * npleg.legval(u, npleg.legder(c)) if n else 0.0
    return vals, ders


class PressureSpace:
    """Discontinuous P_r pressure space on one mesh level.

    Per cell: products of shifted Legendre polynomials on the cell's
    reference square,

        chi_{ij}(x, y) = sqrt((2i+1)(2j+1)) P_i(2x-1) P_j(2y-1),  i+j <= r,

    graded by total degree, so local dof 0 is the cell constant and a
    lower-degree basis is a prefix of every higher-degree one. The basis is
    L2-orthonormal on the reference cell; raw monomials span the same space
    but their Gram matrix is a Hilbert matrix whose conditioning collapses
    with the degree (~1e4 at r=3), and that distortion between coefficients
    and functions leaks into every coefficient-space solve.  Global DoF =
    cell * n_loc + local, so coefficient vectors reshape to
    (n_cells, n_loc) with no indirection.
    """

    def __init__(self, mesh_level, r):
        if r < 0:
            raise ValueError(f"pressure degree r={r} must be >= 0")
        self.mesh_level = mesh_level
        self.r = r
        self.exponents = np.array(pressure_exponents(r), dtype=int)
        self.n_loc = len(self.exponents)  # (r+1)(r+2)/2
        self.n_dofs = mesh_level.n_cells * self.n_loc
        i = self.exponents[:, 0]
        j = self.exponents[:, 1]
        self.norms = np.sqrt((2.0 * i + 1.0) * (2.0 * j + 1.0))

    def basis_values(self, ref_points):
        """Basis values at reference points, (n_pts, n_loc)."""
        pts = np.atleast_2d(ref_points)
        vx, _ = _sh_legendre_1d(self.r, pts[:, 0])
        vy, _ = _sh_legendre_1d(self.r, pts[:, 1])
        i = self.exponents[:, 0]
        j = self.exponents[:, 1]
        return self.norms[None, :] * (vx[i] * vy[j]).T

    def basis_gradients(self, ref_points):
        """Reference gradients of the basis, (n_pts, n_loc, 2)."""
        pts = np.atleast_2d(ref_points)
        vx, dx = _sh_legendre_1d(self.r, pts[:, 0])
        vy, dy = _sh_legendre_1d(self.r, pts[:, 1])
        i = self.exponents[:, 0]
        j = self.exponents[:, 1]
        gx = self.norms[None, :] * (dx[i] * vy[j]).T
        gy = self.norms[None, :] * (vx[i] * dy[j]).T
        return np.stack([gx, gy], axis=-1)

    def constant_coefficients(self):
        """Coefficient vector representing the constant function 1."""
        w = np.zeros(self.n_dofs)
        w[:: self.n_loc] = 1.0  # index (0,0) is first in the ordering
        return w

    def evaluate(self, coeffs, cell, ref_points):
        vals = self.basis_values(ref_points)
        local = coeffs[cell * self.n_loc : (cell + 1) * self.n_loc]
        return vals @ local


def build_velocity_space(mesh_level, r):
    """Continuous vector Q_{r+1} space with Gauss-Lobatto nodal basis."""
    return VelocitySpace(mesh_level, r)


def build_pressure_space(mesh_level, r):
    """Discontinuous P_r pressure space (orthonormal Legendre products)."""
    return PressureSpace(mesh_level, r)


@dataclass
class ShapeTables:
    """Basis values and reference gradients at a fixed set of reference
    points; identical for every cell of a level, so computed once."""

    values: np.ndarray  # (n_pts, n_loc)
    gradients_ref: np.ndarray  # (n_pts, n_loc, 2)

    def gradients_physical(self, cell_map):
        scale = np.array([1.0 / cell_map.hx, 1.0 / cell_map.hy])
        return self.gradients_ref * scale[None, None, :]


def shape_tables(space, ref_points):
    """Tabulate basis values/reference gradients of a scalar velocity factor
    basis or a pressure basis at the given reference points."""
    pts = np.atleast_2d(ref_points)
    if isinstance(space, VelocitySpace):
        bx = space.basis_1d(pts[:, 0])
        by = space.basis_1d(pts[:, 1])
        dx = space.basis_1d_deriv(pts[:, 0])
        dy = space.basis_1d_deriv(pts[:, 1])
        nl = space.n_loc_1d
        # local scalar numbering is y-major: node j = jy * (q+1) + jx
        vals = np.einsum("pj,pi->pji", by, bx).reshape(len(pts), nl * nl)
        gx = np.einsum("pj,pi->pji", by, dx).reshape(len(pts), nl * nl)
        gy = np.einsum("pj,pi->pji", dy, bx).reshape(len(pts), nl * nl)
        return ShapeTables(vals, np.stack([gx, gy], axis=-1))
    if isinstance(space, PressureSpace):
        return ShapeTables(space.basis_values(pts), space.basis_gradients(pts))
    raise TypeError(f"no shape tables for {type(space).__name__}")


def tensor_quadrature(rule_1d):
    """Tensorize a 1D rule on [0, 1] to the reference square; the point
    ordering is y-major to match the scalar basis numbering."""
    x = rule_1d.points
    w = rule_1d.weights
    X, Y = np.meshgrid(x, x)  # X varies fastest along rows
    pts = np.column_stack([X.ravel(), Y.ravel()])
    wts = np.outer(w, w).ravel()
    return pts, wts
