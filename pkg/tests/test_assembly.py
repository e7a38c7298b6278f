"""Assembly tests against an independent dense isoparametric oracle.

The oracle below loops over elements and 2x2 Gauss points with its own shape
functions and a general Jacobian, sharing no code path with the package's
precomputed reference-element arrays.

Closed forms for a single square element with unit coefficient:
  stiffness K = (1/6) [[ 4, -1, -2, -1], [-1, 4, -1, -2],
                       [-2, -1, 4, -1], [-1, -2, -1, 4]]    (size-independent)
  mass      M = (h^2/36) [[4, 2, 1, 2], [2, 4, 2, 1],
                          [1, 2, 4, 2], [2, 1, 2, 4]]
"""

import numpy as np
import pytest

from flowgrad import ops
from flowgrad.assembly import (
    assemble_advection_diffusion,
    assemble_convection_blocks,
    assemble_diffusion_block,
    assemble_grad_div_blocks,
    assemble_reaction_block,
    apply_dirichlet,
    constraint_plan,
    constrain_system,
    operators_for,
    pack_system,
)
from flowgrad.errors import ContractError
from flowgrad.grid import DirichletSpec, StructuredGrid
from flowgrad.sparse import SparseBlock, sparse_solve
from flowgrad.tape import Tape, finite_difference_check

_GP = 1.0 / np.sqrt(3.0)


def _shapes(xi, eta):
    n = 0.25 * np.array([(1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
                         (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)])
    d = 0.25 * np.array([
        [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
        [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)],
    ])
    return n, d


def dense_oracle(grid, coef=None, u=None, v=None):
    """Dense K(coef), M, C(u,v), Dx, Gx via independent isoparametric loops."""
    nn = grid.n_nodes
    k = np.zeros((nn, nn))
    m = np.zeros((nn, nn))
    c = np.zeros((nn, nn))
    dx = np.zeros((nn, nn))
    gx = np.zeros((nn, nn))
    coef = np.ones(nn) if coef is None else coef
    u = np.zeros(nn) if u is None else u
    v = np.zeros(nn) if v is None else v
    for e in range(grid.n_elems):
        nodes = grid.elems[e]
        xy = grid.coords[nodes]
        for xi in (-_GP, _GP):
            for eta in (-_GP, _GP):
                n, dref = _shapes(xi, eta)
                jac = dref @ xy
                det = np.linalg.det(jac)
                dphys = np.linalg.solve(jac, dref)
                w = det
                cq = n @ coef[nodes]
                uq = n @ u[nodes]
                vq = n @ v[nodes]
                for a, i in enumerate(nodes):
                    for b, j in enumerate(nodes):
                        k[i, j] += w * cq * (dphys[0, a] * dphys[0, b]
                                             + dphys[1, a] * dphys[1, b])
                        m[i, j] += w * n[a] * n[b]
                        c[i, j] += w * n[a] * (uq * dphys[0, b] + vq * dphys[1, b])
                        dx[i, j] += w * n[a] * dphys[0, b]
                        gx[i, j] += w * dphys[0, a] * n[b]
    return k, m, c, dx, gx


def _block_dense(tape, block):
    return block.pattern.to_scipy(tape.value(block.ref)).toarray()


def test_single_element_unit_stiffness_closed_form():
    g = StructuredGrid(2)
    t = Tape()
    coef = t.constant(np.ones(4))
    block = assemble_diffusion_block(t, g, coef)
    local = np.array([[4.0, -1, -2, -1], [-1, 4, -1, -2],
                      [-2, -1, 4, -1], [-1, -2, -1, 4]]) / 6.0
    # closed form is in CCW corner order; map through the connectivity
    expected = np.zeros((4, 4))
    expected[np.ix_(g.elems[0], g.elems[0])] = local
    got = _block_dense(t, block)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-14)
    np.testing.assert_allclose(got.sum(axis=1), 0.0, rtol=0, atol=1e-14)


def test_zero_coefficient_gives_zero_block():
    g = StructuredGrid(3)
    t = Tape()
    block = assemble_diffusion_block(t, g, t.constant(np.zeros(9)))
    assert np.all(t.value(block.ref) == 0.0)


def test_single_element_mass_closed_form():
    g = StructuredGrid(2)
    gops = operators_for(g)
    local = np.array([[4.0, 2, 1, 2], [2, 4, 2, 1],
                      [1, 2, 4, 2], [2, 1, 2, 4]]) / 36.0
    expected = np.zeros((4, 4))
    expected[np.ix_(g.elems[0], g.elems[0])] = local
    np.testing.assert_allclose(gops.scipy_matrix(gops.m_data).toarray(),
                               expected, rtol=0, atol=1e-15)


def test_multi_element_blocks_match_dense_oracle():
    g = StructuredGrid(4, 3)
    rng = np.random.default_rng(0)
    coef = rng.uniform(0.5, 2.0, g.n_nodes)
    u = rng.normal(size=g.n_nodes)
    v = rng.normal(size=g.n_nodes)
    k_d, m_d, c_d, dx_d, gx_d = dense_oracle(g, coef, u, v)

    t = Tape()
    kblock = assemble_diffusion_block(t, g, t.constant(coef))
    cblock, _ = assemble_convection_blocks(t, g, t.constant(u), t.constant(v))
    np.testing.assert_allclose(_block_dense(t, kblock), k_d, rtol=0, atol=1e-13)
    np.testing.assert_allclose(_block_dense(t, cblock), c_d, rtol=0, atol=1e-13)

    gops = operators_for(g)
    np.testing.assert_allclose(gops.scipy_matrix(gops.m_data).toarray(), m_d,
                               rtol=0, atol=1e-14)
    gx, gy, dx, dy = assemble_grad_div_blocks(g)
    np.testing.assert_allclose(dx.toarray(), dx_d, rtol=0, atol=1e-14)
    np.testing.assert_allclose(gx.toarray(), gx_d, rtol=0, atol=1e-14)
    np.testing.assert_allclose(gx.toarray(), dx.toarray().T, rtol=0, atol=0)
    np.testing.assert_allclose(gy.toarray(), dy.toarray().T, rtol=0, atol=0)


def test_stiffness_symmetric_psd_with_constant_nullspace():
    g = StructuredGrid(4)
    t = Tape()
    block = assemble_diffusion_block(t, g, t.constant(np.ones(g.n_nodes)))
    k = _block_dense(t, block)
    np.testing.assert_allclose(k, k.T, rtol=0, atol=1e-14)
    eig = np.linalg.eigvalsh(k)
    assert eig[0] > -1e-13
    assert np.sum(np.abs(eig) < 1e-12) == 1
    np.testing.assert_allclose(k @ np.ones(g.n_nodes), 0.0, rtol=0, atol=1e-13)


def test_convection_zero_velocity_and_constant_velocity():
    g = StructuredGrid(3)
    t = Tape()
    zero = t.constant(np.zeros(9))
    cblock, reactions = assemble_convection_blocks(t, g, zero, zero)
    assert np.all(t.value(cblock.ref) == 0.0)
    for r in reactions.values():
        assert np.all(t.value(r.ref) == 0.0)

    one = t.constant(np.ones(9))
    cblock1, reactions1 = assemble_convection_blocks(t, g, one, zero)
    _, _, dx, _ = assemble_grad_div_blocks(g)
    np.testing.assert_allclose(_block_dense(t, cblock1), dx.toarray(),
                               rtol=0, atol=1e-14)
    for r in reactions1.values():
        np.testing.assert_allclose(t.value(r.ref), 0.0, rtol=0, atol=1e-13)


def test_reaction_of_linear_field_is_mass_matrix():
    # w = x has dw/dx = 1, so R equals the mass matrix
    g = StructuredGrid(4)
    t = Tape()
    block = assemble_reaction_block(t, g, t.constant(g.coords[:, 0].copy()), 0)
    gops = operators_for(g)
    np.testing.assert_allclose(t.value(block.ref), gops.m_data, rtol=0, atol=1e-13)


def test_constant_pressure_gradient_vanishes_on_interior_rows():
    g = StructuredGrid(5)
    gx, _, _, _ = assemble_grad_div_blocks(g)
    r = gx @ np.ones(g.n_nodes)
    np.testing.assert_allclose(r[g.interior], 0.0, rtol=0, atol=1e-14)


def test_divergence_of_linear_u_is_mass_action_on_ones():
    g = StructuredGrid(3)
    _, _, dx, _ = assemble_grad_div_blocks(g)
    gops = operators_for(g)
    m = gops.scipy_matrix(gops.m_data)
    np.testing.assert_allclose(dx @ g.coords[:, 0], m @ np.ones(g.n_nodes),
                               rtol=0, atol=1e-14)


def _nu_reference(x, y):
    return 1.0 + 6.0 * x**2 + x / (1.0 + 2.0 * y**2)


def _k_reference(x, y):
    return 1.0 + x**2 + x / (1.0 + y**2)


def test_diffusion_block_gradient_matches_fd():
    # an unweighted entry sum is degenerate (stiffness row sums vanish for
    # any coefficient), so weight the entries randomly
    g = StructuredGrid(6)
    nu0 = _nu_reference(g.coords[:, 0], g.coords[:, 1])
    weights = np.random.default_rng(6).normal(size=operators_for(g).nnz)

    def f(theta):
        t = Tape()
        coef = t.variable(theta)
        block = assemble_diffusion_block(t, g, coef)
        loss = ops.dot(t, t.constant(weights), block.ref)
        return t.value(loss)[0], t.backward(loss)[coef]

    idx = range(0, g.n_nodes, 5)
    assert finite_difference_check(f, nu0, indices=idx) < 1e-6


def test_convection_blocks_gradient_matches_fd():
    g = StructuredGrid(5)
    rng = np.random.default_rng(1)
    theta0 = rng.normal(size=2 * g.n_nodes)

    def f(theta):
        t = Tape()
        th = t.variable(theta)
        u = ops.slice1d(t, th, 0, g.n_nodes)
        v = ops.slice1d(t, th, g.n_nodes, 2 * g.n_nodes)
        cblock, reactions = assemble_convection_blocks(t, g, u, v)
        acc = ops.vsum(t, cblock.ref)
        for r in reactions.values():
            acc = ops.add(t, acc, ops.vsum(t, ops.square(t, r.ref)))
        return t.value(acc)[0], t.backward(acc)[th]

    idx = range(0, theta0.size, 9)
    assert finite_difference_check(f, theta0, indices=idx) < 1e-6


def test_advection_diffusion_gradient_matches_fd():
    g = StructuredGrid(6)
    rng = np.random.default_rng(2)
    u = rng.normal(size=g.n_nodes) * 0.3
    v = rng.normal(size=g.n_nodes) * 0.3
    k0 = _k_reference(g.coords[:, 0], g.coords[:, 1])

    weights = np.random.default_rng(7).normal(size=operators_for(g).nnz)

    def f(theta):
        t = Tape()
        kc = t.variable(theta)
        block = assemble_advection_diffusion(t, g, t.constant(u), t.constant(v),
                                             kc, rho_cp=1.0)
        loss = ops.dot(t, t.constant(weights), block.ref)
        return t.value(loss)[0], t.backward(loss)[kc]

    idx = range(0, g.n_nodes, 7)
    assert finite_difference_check(f, k0, indices=idx) < 1e-6


def test_advection_diffusion_limits():
    g = StructuredGrid(3)
    t = Tape()
    zero = t.constant(np.zeros(9))
    ones = t.constant(np.ones(9))
    pure_k = assemble_advection_diffusion(t, g, zero, zero, ones)
    kblock = assemble_diffusion_block(t, g, ones)
    np.testing.assert_allclose(t.value(pure_k.ref), t.value(kblock.ref),
                               rtol=0, atol=0)
    pure_c = assemble_advection_diffusion(t, g, ones, zero, t.constant(np.zeros(9)))
    cblock, _ = assemble_convection_blocks(t, g, ones, zero)
    np.testing.assert_allclose(t.value(pure_c.ref), t.value(cblock.ref),
                               rtol=0, atol=0)


def test_pack_system_places_blocks():
    g = StructuredGrid(3)
    gops = operators_for(g)
    sys_pattern, bmap = gops.system_layout()
    n = g.n_nodes
    rng = np.random.default_rng(3)
    a_data = rng.normal(size=gops.nnz)

    t = Tape()
    a_ref = t.variable(a_data)
    const = np.zeros(sys_pattern.nnz)
    np.add.at(const, bmap[2][2], gops.s_data)
    sys_block = pack_system(t, sys_pattern, [(bmap[0][0], a_ref),
                                             (bmap[1][2], a_ref)], const)
    dense = sys_block.pattern.to_scipy(t.value(sys_block.ref)).toarray()
    a_dense = gops.scipy_matrix(a_data).toarray()
    s_dense = gops.scipy_matrix(gops.s_data).toarray()
    np.testing.assert_allclose(dense[:n, :n], a_dense, rtol=0, atol=0)
    np.testing.assert_allclose(dense[n:2 * n, 2 * n:], a_dense, rtol=0, atol=0)
    np.testing.assert_allclose(dense[2 * n:, 2 * n:], s_dense, rtol=0, atol=0)
    assert np.all(dense[:n, n:] == 0.0) and np.all(dense[n:2 * n, :2 * n] == 0.0)

    # backward sums gradients over every placement of the same block
    loss = ops.vsum(t, sys_block.ref)
    grads = t.backward(loss)
    np.testing.assert_allclose(grads[a_ref], 2.0, rtol=0, atol=0)


def test_constrain_empty_spec_is_identity():
    g = StructuredGrid(3)
    gops = operators_for(g)
    t = Tape()
    data = t.variable(gops.s_data)
    rhs = t.variable(np.arange(9.0))
    plan = constraint_plan(gops.pattern, np.array([], dtype=np.intp))
    block_c, rhs_c = constrain_system(t, plan, data, rhs, np.array([]))
    np.testing.assert_array_equal(t.value(block_c.ref), gops.s_data)
    np.testing.assert_array_equal(t.value(rhs_c), np.arange(9.0))


def test_constrain_all_nodes_returns_prescribed_values():
    g = StructuredGrid(3)
    gops = operators_for(g)
    gvals = g.coords[:, 0] + g.coords[:, 1]
    t = Tape()
    data = t.variable(gops.s_data)
    rhs = t.constant(np.zeros(9))
    spec = DirichletSpec(np.arange(9), gvals)
    block_c, rhs_c = apply_dirichlet(t, SparseBlock(gops.pattern, data), rhs, spec)
    x = sparse_solve(t, block_c, rhs_c)
    np.testing.assert_allclose(t.value(x), gvals, rtol=0, atol=1e-14)


def test_patch_test_linear_solution_machine_precision():
    # Poisson with boundary data x + y and zero interior load reproduces the
    # linear function exactly; acceptance threshold 1e-12
    g = StructuredGrid(5)
    gops = operators_for(g)
    exact = g.coords[:, 0] + g.coords[:, 1]
    bc = DirichletSpec(g.all_boundary, exact[g.all_boundary])
    t = Tape()
    kblock = assemble_diffusion_block(t, g, t.constant(np.ones(g.n_nodes)))
    rhs = t.constant(np.zeros(g.n_nodes))
    block_c, rhs_c = apply_dirichlet(t, kblock, rhs, bc)
    x = sparse_solve(t, block_c, rhs_c)
    assert np.max(np.abs(t.value(x) - exact)) < 1e-12


def test_pinning_one_node_raises_rank_by_one():
    g = StructuredGrid(4)
    gops = operators_for(g)
    k = gops.scipy_matrix(gops.s_data).toarray()
    rank_free = np.linalg.matrix_rank(k)
    t = Tape()
    data = t.constant(gops.s_data)
    rhs = t.constant(np.zeros(g.n_nodes))
    plan = constraint_plan(gops.pattern, np.array([0]))
    block_c, _ = constrain_system(t, plan, data, rhs, np.array([0.0]))
    k_pinned = block_c.pattern.to_scipy(t.value(block_c.ref)).toarray()
    assert np.linalg.matrix_rank(k_pinned) == rank_free + 1


def test_constrain_matches_dense_elimination_oracle():
    g = StructuredGrid(3)
    gops = operators_for(g)
    rng = np.random.default_rng(4)
    data0 = gops.s_data + 0.1 * rng.normal(size=gops.nnz)
    rhs0 = rng.normal(size=9)
    cidx = np.array([0, 4, 8])
    gvals = np.array([1.0, -2.0, 0.5])

    t = Tape()
    data = t.variable(data0)
    rhs = t.variable(rhs0)
    plan = constraint_plan(gops.pattern, cidx)
    block_c, rhs_c = constrain_system(t, plan, data, rhs, gvals)

    a = gops.scipy_matrix(data0).toarray()
    b = rhs0.copy()
    free = np.setdiff1d(np.arange(9), cidx)
    for s, cnode in enumerate(cidx):
        b[free] -= a[free, cnode] * gvals[s]
    a[cidx, :] = 0.0
    a[:, cidx] = 0.0
    a[cidx, cidx] = 1.0
    b[cidx] = gvals
    np.testing.assert_allclose(
        block_c.pattern.to_scipy(t.value(block_c.ref)).toarray(), a,
        rtol=0, atol=1e-14)
    np.testing.assert_allclose(t.value(rhs_c), b, rtol=0, atol=1e-14)


def test_constrained_solve_gradient_matches_fd():
    g = StructuredGrid(3)
    gops = operators_for(g)
    rng = np.random.default_rng(5)
    c = rng.normal(size=9)
    cidx = np.array([0, 2, 6, 8])
    gvals = np.array([0.5, -1.0, 2.0, 0.0])
    plan = constraint_plan(gops.pattern, cidx)
    nnz = gops.nnz

    def f(theta):
        t = Tape()
        th = t.variable(theta)
        data = ops.slice1d(t, th, 0, nnz)
        rhs = ops.slice1d(t, th, nnz, nnz + 9)
        block_c, rhs_c = constrain_system(t, plan, data, rhs, gvals)
        x = sparse_solve(t, block_c, rhs_c)
        loss = ops.dot(t, t.constant(c), x)
        return t.value(loss)[0], t.backward(loss)[th]

    # diagonally shifted stiffness keeps the constrained matrix invertible
    base = gops.s_data.copy()
    diag = np.array([gops.pattern.entry_index(i, i) for i in range(9)])
    base[diag] += 2.0
    theta0 = np.concatenate([base, rng.normal(size=9)])
    idx = list(range(0, nnz, 6)) + list(range(nnz, nnz + 9, 2))
    assert finite_difference_check(f, theta0, indices=idx) < 1e-6


def test_constraint_plan_rejects_duplicates_and_range():
    g = StructuredGrid(3)
    gops = operators_for(g)
    with pytest.raises(ContractError):
        constraint_plan(gops.pattern, np.array([1, 1]))
    with pytest.raises(ContractError):
        constraint_plan(gops.pattern, np.array([99]))
