"""Structured mesh hierarchies, affine cell maps and time partitions.

The spatial domain is an axis-aligned rectangle, meshed by uniform
refinement of a coarse n0 x n0 grid; every level is a tensor grid of
congruent rectangular cells, which the operator kernels exploit heavily.
"""

import numpy as np

DIRICHLET = "dirichlet"
NEUMANN = "neumann"

_SIDES = ("left", "right", "bottom", "top")

# outward unit normal and the (axis, fixed index) describing each side
_SIDE_NORMALS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "bottom": (0.0, -1.0),
    "top": (0.0, 1.0),
}


class InvalidDomainError(ValueError):
    """Domain corners do not describe a 2D rectangle of positive area."""


class InvalidPartitionError(ValueError):
    """Time partition with a nonpositive horizon or slab count."""


class MeshLevel:
    """One uniformly refined level: an n x n grid of identical cells.

    Cells are numbered lexicographically, ``cell = iy * n + ix``; the
    lower-left corner of cell (ix, iy) is ``origin + (ix * hx, iy * hy)``.
    """

    def __init__(self, index, origin, extent, n_cells_per_dim, boundary_rule):
        self.index = index
        self.origin = np.asarray(origin, dtype=float)
        self.n_cells_per_dim = int(n_cells_per_dim)
        n = self.n_cells_per_dim
        self.hx = extent[0] / n
        self.hy = extent[1] / n
        self.h = max(self.hx, self.hy)
        self.n_cells = n * n

        ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        ix = ix.ravel()
        iy = iy.ravel()
        self.cell_ix = ix
        self.cell_iy = iy
        # lower-left corner of every cell
        self.cell_corners = np.column_stack(
            [self.origin[0] + ix * self.hx, self.origin[1] + iy * self.hy]
        )
        self.boundary_faces = self._tag_boundary(boundary_rule)

    def _tag_boundary(self, rule):
        """Tag every boundary face through the midpoint predicate ``rule``."""
        n = self.n_cells_per_dim
        x0, y0 = self.origin
        faces = {}
        idx = np.arange(n)
        mid = (idx + 0.5)
        for side in _SIDES:
            if side == "left":
                cells = idx * n
                midpoints = np.column_stack([np.full(n, x0), y0 + mid * self.hy])
                length = self.hy
            elif side == "right":
                cells = idx * n + (n - 1)
                midpoints = np.column_stack(
                    [np.full(n, x0 + n * self.hx), y0 + mid * self.hy]
                )
                length = self.hy
            elif side == "bottom":
                cells = idx
                midpoints = np.column_stack([x0 + mid * self.hx, np.full(n, y0)])
                length = self.hx
            else:
                cells = (n - 1) * n + idx
                midpoints = np.column_stack(
                    [x0 + mid * self.hx, np.full(n, y0 + n * self.hy)]
                )
                length = self.hx
            tags = np.array([rule(m) for m in midpoints], dtype=object)
            for tag in tags:
                if tag not in (DIRICHLET, NEUMANN):
                    raise ValueError(f"unknown boundary tag {tag!r}")
            faces[side] = BoundaryFaceSet(
                side=side,
                cells=cells.astype(int),
                midpoints=midpoints,
                tags=tags,
                length=length,
                normal=np.array(_SIDE_NORMALS[side]),
            )
        return faces

    def cell_map(self, cell):
        if not 0 <= cell < self.n_cells:
            raise IndexError(f"cell id {cell} outside level with {self.n_cells} cells")
        return CellMap(self.cell_corners[cell], self.hx, self.hy)

    def dirichlet_faces(self, side):
        fs = self.boundary_faces[side]
        return fs.cells[fs.tags == DIRICHLET]

    @property
    def is_pure_dirichlet(self):
        return all(
            (fs.tags == DIRICHLET).all() for fs in self.boundary_faces.values()
        )


class BoundaryFaceSet:
    """All boundary faces of one side of the rectangle, with tags."""

    def __init__(self, side, cells, midpoints, tags, length, normal):
        self.side = side
        self.cells = cells
        self.midpoints = midpoints
        self.tags = tags
        self.length = length
        self.normal = normal

    def __len__(self):
        return len(self.cells)


class CellMap:
    """Affine map x = corner + diag(hx, hy) x_ref from the unit square."""

    def __init__(self, corner, hx, hy):
        self.corner = np.asarray(corner, dtype=float)
        self.hx = hx
        self.hy = hy
        self.det = hx * hy

    def to_physical(self, ref_points):
        pts = np.atleast_2d(ref_points)
        return self.corner + pts * np.array([self.hx, self.hy])

    def to_reference(self, points):
        pts = np.atleast_2d(points)
        return (pts - self.corner) / np.array([self.hx, self.hy])

    @property
    def inv_jacobian_t(self):
        # diagonal Jacobian, so J^-T is just the reciprocal scalings
        return np.diag([1.0 / self.hx, 1.0 / self.hy])


class MeshHierarchy:
    """Nested uniform refinements of a rectangle.

    Parameters
    ----------
    corners : pair of 2D points, lower-left and upper-right.
    base_cells_per_dim : cells per direction on the coarsest level.
    levels : number of levels (>= 1); level ``s`` has base * 2^s cells
        per direction.
    boundary_rule : callable mapping a face midpoint to a tag; defaults
        to Dirichlet everywhere.
    """

    def __init__(self, corners, base_cells_per_dim=1, levels=1, boundary_rule=None):
        lo, hi = (np.asarray(c, dtype=float) for c in corners)
        if lo.shape != (2,) or hi.shape != (2,):
            raise InvalidDomainError("corners must be two 2D points")
        extent = hi - lo
        if not (extent > 0).all():
            raise InvalidDomainError(f"degenerate domain extent {extent}")
        if base_cells_per_dim < 1 or levels < 1:
            raise InvalidDomainError("need at least one cell and one level")
        if boundary_rule is None:
            boundary_rule = lambda midpoint: DIRICHLET
        self.origin = lo
        self.extent = extent
        self.levels = [
            MeshLevel(s, lo, extent, base_cells_per_dim * 2**s, boundary_rule)
            for s in range(levels)
        ]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, s):
        return self.levels[s]

    @property
    def finest(self):
        return self.levels[-1]

    def coarse_parent(self, s, cell):
        """Parent cell id on level s-1 of ``cell`` on level s."""
        if s <= 0 or s >= len(self.levels):
            raise IndexError(f"level {s} has no parent level")
        fine = self.levels[s]
        if not 0 <= cell < fine.n_cells:
            raise IndexError(f"cell id {cell} outside level {s}")
        ix = fine.cell_ix[cell] // 2
        iy = fine.cell_iy[cell] // 2
        return int(iy * self.levels[s - 1].n_cells_per_dim + ix)

    def children(self, s, cell):
        """The four child cell ids on level s+1, quadrant order
        (lower-left, lower-right, upper-left, upper-right)."""
        if s < 0 or s + 1 >= len(self.levels):
            raise IndexError(f"level {s} has no child level")
        coarse = self.levels[s]
        if not 0 <= cell < coarse.n_cells:
            raise IndexError(f"cell id {cell} outside level {s}")
        nf = self.levels[s + 1].n_cells_per_dim
        ix = 2 * coarse.cell_ix[cell]
        iy = 2 * coarse.cell_iy[cell]
        return [int((iy + cy) * nf + (ix + cx)) for cy in (0, 1) for cx in (0, 1)]


def build_hierarchy(corners, base_cells_per_dim=1, levels=1, boundary_rule=None):
    """Construct a nested hierarchy of uniformly refined rectangle meshes."""
    return MeshHierarchy(corners, base_cells_per_dim, levels, boundary_rule)


class TimePartition:
    """Uniform partition of (0, T] into N half-open slabs (t_{n-1}, t_n]."""

    def __init__(self, horizon, n_slabs):
        if horizon <= 0 or n_slabs < 1:
            raise InvalidPartitionError(
                f"invalid time partition: T={horizon}, N={n_slabs}"
            )
        self.horizon = float(horizon)
        self.n_slabs = int(n_slabs)
        self.tau = self.horizon / self.n_slabs
        self.edges = np.linspace(0.0, self.horizon, self.n_slabs + 1)

    def slab(self, n):
        """Endpoints (t_{n-1}, t_n) of slab n, 1-based as in the numbering
        of the slabs themselves."""
        if not 1 <= n <= self.n_slabs:
            raise IndexError(f"slab index {n} outside 1..{self.n_slabs}")
        return self.edges[n - 1], self.edges[n]

    def __len__(self):
        return self.n_slabs


def build_time_partition(horizon, n_slabs):
    """Uniform time partition; slab n covers (edges[n-1], edges[n]]."""
    return TimePartition(horizon, n_slabs)
