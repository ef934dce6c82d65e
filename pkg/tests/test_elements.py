import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stns.elements import (
    build_pressure_space,
    build_velocity_space,
    gauss_legendre,
    gauss_lobatto_nodes,
    gauss_radau,
    pressure_exponents,
    shape_tables,
    temporal_basis,
    tensor_quadrature,
)
from stns.geometry import build_hierarchy


# ---------------------------------------------------------------- quadrature


def test_gauss_radau_k0():
    rule = gauss_radau(0)
    assert np.allclose(rule.points, [1.0])
    assert np.allclose(rule.weights, [2.0])


def test_gauss_radau_k1():
    rule = gauss_radau(1)
    assert np.allclose(rule.points, [-1.0 / 3.0, 1.0], atol=1e-14)
    assert np.allclose(rule.weights, [1.5, 0.5], atol=1e-14)


@pytest.mark.parametrize("k", range(0, 7))
def test_gauss_radau_exactness(k):
    rule = gauss_radau(k)
    assert rule.points[-1] == pytest.approx(1.0, abs=1e-15)
    # exact for monomials up to degree 2k ...
    for d in range(2 * k + 1):
        exact = 0.0 if d % 2 else 2.0 / (d + 1)
        approx = np.dot(rule.weights, rule.points**d)
        assert abs(approx - exact) <= 1e-13, (k, d)
    # ... and provably inexact one degree higher
    d = 2 * k + 1
    exact = 0.0
    assert abs(np.dot(rule.weights, rule.points**d) - exact) > 1e-10


def test_gauss_radau_k2_degree4():
    rule = gauss_radau(2)
    assert np.dot(rule.weights, rule.points**4) == pytest.approx(0.4, abs=1e-14)
    assert abs(np.dot(rule.weights, rule.points**5)) > 1e-10


def test_gauss_legendre_unit_interval():
    rule = gauss_legendre(2)
    third = 1.0 / (2.0 * np.sqrt(3.0))
    assert np.allclose(np.sort(rule.points), [0.5 - third, 0.5 + third])
    for d in range(4):
        assert np.dot(rule.weights, rule.points**d) == pytest.approx(
            1.0 / (d + 1), abs=1e-14
        )


@given(n=st.integers(min_value=1, max_value=10))
@settings(deadline=None, max_examples=20)
def test_gauss_legendre_exactness_property(n):
    rule = gauss_legendre(n)
    for d in range(rule.exactness_degree + 1):
        assert np.dot(rule.weights, rule.points**d) == pytest.approx(
            1.0 / (d + 1), abs=1e-13
        )


# ------------------------------------------------------------ temporal basis


def test_temporal_basis_kronecker_property():
    for k in range(5):
        basis = temporal_basis(k)
        assert np.allclose(basis.value_matrix(), np.eye(k + 1), atol=1e-13)


def test_temporal_basis_k1_at_zero():
    vals = temporal_basis(1).values(0.0)[0]
    assert vals == pytest.approx([0.75, 0.25], abs=1e-14)


def test_temporal_partition_of_unity():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=40)
    for k in range(5):
        basis = temporal_basis(k)
        assert np.allclose(basis.values(x).sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(basis.derivatives(x).sum(axis=1), 0.0, atol=1e-11)


def test_temporal_derivative_matches_fd():
    basis = temporal_basis(3)
    x = np.linspace(-0.9, 0.9, 7)
    h = 1e-6
    fd = (basis.values(x + h) - basis.values(x - h)) / (2 * h)
    assert np.allclose(basis.derivatives(x), fd, atol=1e-8)


# ------------------------------------------------------------------- spaces


def test_velocity_dof_count():
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=3)
    for r in (1, 2, 3):
        space = build_velocity_space(hier.finest, r)
        n = hier.finest.n_cells_per_dim
        assert space.n_dofs == 2 * (n * (r + 1) + 1) ** 2


def test_velocity_shared_nodes_between_neighbors():
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=2)
    space = build_velocity_space(hier.finest, 2)
    l2g = space.loc2glob
    q = space.n_loc_1d
    # cells 0 and 1 share the right edge of cell 0 = left edge of cell 1
    right_of_0 = l2g[0].reshape(q, q)[:, -1]
    left_of_1 = l2g[1].reshape(q, q)[:, 0]
    assert (right_of_0 == left_of_1).all()
    # cells 0 and 2 share a horizontal edge (2x2 grid, cell 2 above cell 0)
    top_of_0 = l2g[0].reshape(q, q)[-1, :]
    bottom_of_2 = l2g[2].reshape(q, q)[0, :]
    assert (top_of_0 == bottom_of_2).all()


def test_velocity_deterministic_rebuild():
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=2)
    a = build_velocity_space(hier.finest, 3)
    b = build_velocity_space(hier.finest, 3)
    assert (a.loc2glob == b.loc2glob).all()
    assert np.array_equal(a.node_coordinates(), b.node_coordinates())


def test_velocity_interpolation_exact_for_tensor_polynomials():
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=2)
    space = build_velocity_space(hier.finest, 2)  # degree 3 per direction

    def field(p):
        u = p[:, 0] ** 3 - 2 * p[:, 0] * p[:, 1] ** 2
        v = 1.0 + p[:, 1] ** 3 + p[:, 0] ** 2
        return np.column_stack([u, v])

    coeffs = space.interpolate(field)
    rng = np.random.default_rng(11)
    pts = rng.uniform(0, 1, size=(30, 2))
    ux = space.evaluate_scalar(coeffs[0::2], pts)
    uy = space.evaluate_scalar(coeffs[1::2], pts)
    exact = field(pts)
    assert np.allclose(ux, exact[:, 0], atol=1e-12)
    assert np.allclose(uy, exact[:, 1], atol=1e-12)


def test_gauss_lobatto_nodes_include_endpoints():
    for q in (1, 2, 3, 4, 5):
        nodes = gauss_lobatto_nodes(q)
        assert len(nodes) == q + 1
        assert nodes[0] == pytest.approx(0.0, abs=1e-15)
        assert nodes[-1] == pytest.approx(1.0, abs=1e-15)
        assert np.all(np.diff(nodes) > 0)


def test_pressure_dims():
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=2)
    for r in (1, 2, 3, 4):
        space = build_pressure_space(hier.finest, r)
        assert space.n_loc == (r + 1) * (r + 2) // 2
        assert space.n_dofs == hier.finest.n_cells * space.n_loc


def test_pressure_exponent_ordering_nested():
    lo = pressure_exponents(2)
    hi = pressure_exponents(4)
    assert hi[: len(lo)] == lo


def test_pressure_constant_function():
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=2)
    space = build_pressure_space(hier.finest, 2)
    w = space.constant_coefficients()
    pts = np.random.default_rng(5).uniform(0, 1, size=(5, 2))
    for cell in range(hier.finest.n_cells):
        assert np.allclose(space.evaluate(w, cell, pts), 1.0)


def test_pressure_basis_orthonormal_on_reference_cell():
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=1)
    for r in (1, 2, 3, 4):
        space = build_pressure_space(hier.finest, r)
        pts, wts = tensor_quadrature(gauss_legendre(r + 2))
        vals = space.basis_values(pts)
        gram = np.einsum("q,ql,qm->lm", wts, vals, vals)
        assert np.allclose(gram, np.eye(space.n_loc), atol=1e-12)


def test_pressure_gradient_scaling_under_map():
    # P1 basis {1, sqrt(3)(2y-1), sqrt(3)(2x-1)}: reference gradient is
    # constant, the physical gradient picks up a 1/h factor through the
    # inverse affine map
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=3)
    lvl = hier.finest  # h = 1/4
    space = build_pressure_space(lvl, 1)
    tabs = shape_tables(space, np.array([[0.3, 0.6]]))
    phys = tabs.gradients_physical(lvl.cell_map(0))
    s3 = np.sqrt(3.0)
    assert np.allclose(tabs.gradients_ref[0, 0], [0.0, 0.0])
    assert np.allclose(tabs.gradients_ref[0, 1], [0.0, 2.0 * s3])
    assert np.allclose(phys[0, 1], [0.0, 2.0 * s3 / lvl.hy])
    assert np.allclose(phys[0, 2], [2.0 * s3 / lvl.hx, 0.0])


# ------------------------------------------------------------- shape tables


def test_shape_tables_partition_of_unity():
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=1)
    space = build_velocity_space(hier[0], 2)
    pts, wts = tensor_quadrature(gauss_legendre(4))
    tabs = shape_tables(space, pts)
    assert np.allclose(tabs.values.sum(axis=1), 1.0, atol=1e-13)
    assert np.allclose(tabs.gradients_ref.sum(axis=1), 0.0, atol=1e-12)
    assert wts.sum() == pytest.approx(1.0)


def test_shape_tables_nodal_property():
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=1)
    space = build_velocity_space(hier[0], 1)
    nodes = space.nodes_1d
    pts = np.array([[x, y] for y in nodes for x in nodes])
    tabs = shape_tables(space, pts)
    assert np.allclose(tabs.values, np.eye(space.n_loc), atol=1e-13)


def test_shape_tables_gradient_fd():
    hier = build_hierarchy([(0.0, 0.0), (1.0, 1.0)], levels=1)
    space = build_velocity_space(hier[0], 3)
    rng = np.random.default_rng(9)
    pts = rng.uniform(0.05, 0.95, size=(6, 2))
    tabs = shape_tables(space, pts)
    h = 1e-6
    for d in range(2):
        dp = pts.copy()
        dm = pts.copy()
        dp[:, d] += h
        dm[:, d] -= h
        fd = (shape_tables(space, dp).values - shape_tables(space, dm).values) / (
            2 * h
        )
        assert np.allclose(tabs.gradients_ref[:, :, d], fd, atol=1e-7)
