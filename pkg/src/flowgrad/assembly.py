"""Differentiable assembly of weak-form matrix blocks on a structured grid.

All node-pair blocks (stiffness, advection, reaction, mass, pressure
gradient, divergence) share one CSR pattern derived from element
connectivity.  ``GridOperators`` precomputes that pattern, the
element-to-entry scatter map ``pos16``, and the constant blocks.  The
coefficient-dependent blocks are tape operators: forward interpolates the
nodal field to quadrature points, runs an element kernel, and scatters into
CSR data; backward runs the same maps in reverse.

The coupled velocity-pressure system is a 3x3 grid of base-pattern blocks
over unknowns [u; v; p].  ``pack_system`` gathers block data arrays into the
system CSR data array through precomputed index maps, and
``constrain_system`` imposes Dirichlet rows/columns differentiably.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError
from .sparse import SparseBlock, SparsePattern
from .tape import register_op

__all__ = [
    "GridOperators",
    "operators_for",
    "ConstraintPlan",
    "constraint_plan",
    "assemble_diffusion_block",
    "assemble_convection_blocks",
    "assemble_reaction_block",
    "assemble_advection_diffusion",
    "assemble_grad_div_blocks",
    "pack_system",
    "constrain_system",
    "apply_dirichlet",
]


class GridOperators:
    """Shared pattern, scatter maps, and constant blocks for one grid."""

    def __init__(self, grid):
        self.grid = grid
        n = grid.n_nodes
        elems = grid.elems
        q = grid.quad

        rows16 = np.repeat(elems, 4, axis=1)
        cols16 = np.tile(elems, (1, 4))
        keys = (rows16.astype(np.int64) * n + cols16).ravel()
        uniq, inverse = np.unique(keys, return_inverse=True)
        entry_rows = (uniq // n).astype(np.int32)
        entry_cols = (uniq % n).astype(np.int32)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(entry_rows, minlength=n))])
        self.pattern = SparsePattern(n, n, indptr.astype(np.int32), entry_cols,
                                     entry_rows)
        self.pos16 = inverse.astype(np.intp)

        self.wdet = q.wdet
        self.n_tab = q.n
        self.dndx_tab = q.dndx
        self.dndy_tab = q.dndy

        ones_q = np.ones((grid.n_elems, 4))
        zeros_q = np.zeros((grid.n_elems, 4))
        self.s_data = self.scatter(kernels.diffusion_fwd(
            ones_q, self.wdet, self.dndx_tab, self.dndy_tab))
        self.m_data = self.scatter(kernels.coefmass_fwd(ones_q, self.wdet, self.n_tab))
        dx_elem = kernels.advection_fwd(ones_q, zeros_q, self.wdet, self.n_tab,
                                        self.dndx_tab, self.dndy_tab)
        dy_elem = kernels.advection_fwd(zeros_q, ones_q, self.wdet, self.n_tab,
                                        self.dndx_tab, self.dndy_tab)
        # divergence rows test with phi_i, derivative on the trial function;
        # the pressure-gradient block is its transpose
        self.dx_data = self.scatter(dx_elem)
        self.dy_data = self.scatter(dy_elem)
        self.gx_data = self.scatter(np.ascontiguousarray(dx_elem.swapaxes(1, 2)))
        self.gy_data = self.scatter(np.ascontiguousarray(dy_elem.swapaxes(1, 2)))

        self._system = None

    @property
    def nnz(self):
        return self.pattern.nnz

    def scatter(self, elem_mats):
        """Accumulate (n_elems, 4, 4) element matrices into CSR data."""
        return np.bincount(self.pos16, weights=elem_mats.ravel(),
                           minlength=self.nnz)

    def gather(self, data_grad):
        """Adjoint of ``scatter``: pull entry gradients back per element."""
        return data_grad[self.pos16].reshape(-1, 4, 4)

    def at_quad(self, nodal, table):
        """Per-element quadrature values of a nodal field (table = n or dndx/y)."""
        return nodal[self.grid.elems] @ table.T

    def quad_to_nodal(self, gq, table):
        """Adjoint of ``at_quad``: scatter quadrature gradients to nodes."""
        contrib = gq @ table
        return np.bincount(self.grid.elems.ravel(), weights=contrib.ravel(),
                           minlength=self.grid.n_nodes)

    def scipy_matrix(self, data):
        return self.pattern.to_scipy(data)

    def system_layout(self):
        """(system pattern, blockmap) for the 3x3 [u; v; p] block system.

        ``blockmap[br][bc][k]`` is the system-data position of base entry
        ``k`` placed in block row ``br``, block column ``bc``.
        """
        if self._system is not None:
            return self._system
        base = self.pattern
        n = base.n_rows
        row_len = np.diff(base.indptr)
        sys_indptr = np.concatenate([[0], np.cumsum(np.tile(3 * row_len, 3))])
        sys_indices = np.empty(3 * base.nnz * 3, dtype=np.int32)
        at = 0
        for _ in range(3):
            for i in range(n):
                cols = base.indices[base.indptr[i]:base.indptr[i + 1]]
                for bc in range(3):
                    sys_indices[at:at + cols.size] = cols + bc * n
                    at += cols.size
        sys_pattern = SparsePattern.create(3 * n, 3 * n, sys_indptr, sys_indices,
                                           validate=False)
        offset_in_row = np.arange(base.nnz) - base.indptr[base.rows]
        blockmap = []
        for br in range(3):
            row_maps = []
            for bc in range(3):
                pos = (sys_indptr[br * n + base.rows]
                       + bc * row_len[base.rows] + offset_in_row)
                row_maps.append(pos.astype(np.intp))
            blockmap.append(row_maps)
        self._system = (sys_pattern, blockmap)
        return self._system


def operators_for(grid):
    """Memoized GridOperators for a grid instance."""
    ops = getattr(grid, "_operators", None)
    if ops is None:
        ops = GridOperators(grid)
        grid._operators = ops
    return ops


# ---------------------------------------------------------------------------
# coefficient-dependent block operators

def _diffusion_block_fwd(v, ctx):
    gops: GridOperators = ctx["gops"]
    coef = v[0]
    if coef.shape != (gops.grid.n_nodes,):
        raise ContractError(
            f"diffusion block: coefficient length {coef.shape} != "
            f"n_nodes {gops.grid.n_nodes}")
    coef_q = gops.at_quad(coef, gops.n_tab)
    elem = kernels.diffusion_fwd(coef_q, gops.wdet, gops.dndx_tab, gops.dndy_tab)
    return gops.scatter(elem)


def _diffusion_block_bwd(g, ctx):
    gops: GridOperators = ctx["gops"]
    gelem = gops.gather(g)
    gq = kernels.diffusion_bwd(gelem, gops.wdet, gops.dndx_tab, gops.dndy_tab)
    return (gops.quad_to_nodal(gq, gops.n_tab),)


def _convection_block_fwd(v, ctx):
    gops: GridOperators = ctx["gops"]
    u, w = v
    if u.shape != (gops.grid.n_nodes,) or w.shape != (gops.grid.n_nodes,):
        raise ContractError("convection block: velocity fields must be nodal")
    uq = gops.at_quad(u, gops.n_tab)
    vq = gops.at_quad(w, gops.n_tab)
    elem = kernels.advection_fwd(uq, vq, gops.wdet, gops.n_tab,
                                 gops.dndx_tab, gops.dndy_tab)
    return gops.scatter(elem)


def _convection_block_bwd(g, ctx):
    gops: GridOperators = ctx["gops"]
    gelem = gops.gather(g)
    guq, gvq = kernels.advection_bwd(gelem, gops.wdet, gops.n_tab,
                                     gops.dndx_tab, gops.dndy_tab)
    return (gops.quad_to_nodal(guq, gops.n_tab),
            gops.quad_to_nodal(gvq, gops.n_tab))


def _reaction_block_fwd(v, ctx):
    gops: GridOperators = ctx["gops"]
    w = v[0]
    if w.shape != (gops.grid.n_nodes,):
        raise ContractError("reaction block: field must be nodal")
    table = gops.dndx_tab if ctx["axis"] == 0 else gops.dndy_tab
    gq = gops.at_quad(w, table)
    return gops.scatter(kernels.coefmass_fwd(gq, gops.wdet, gops.n_tab))


def _reaction_block_bwd(g, ctx):
    gops: GridOperators = ctx["gops"]
    table = gops.dndx_tab if ctx["axis"] == 0 else gops.dndy_tab
    ggq = kernels.coefmass_bwd(gops.gather(g), gops.wdet, gops.n_tab)
    return (gops.quad_to_nodal(ggq, table),)


register_op("diffusion_block", _diffusion_block_fwd, _diffusion_block_bwd)
register_op("convection_block", _convection_block_fwd, _convection_block_bwd)
register_op("reaction_block", _reaction_block_fwd, _reaction_block_bwd)


def assemble_diffusion_block(tape, grid, coeff_at_nodes):
    """Stiffness block K(c): K_ij = sum_q w nu(x_q) grad(phi_j) . grad(phi_i).

    The nodal coefficient is interpolated bilinearly to quadrature points;
    backward maps entry gradients to nodal-coefficient gradients through the
    same interpolation weights.
    """
    gops = operators_for(grid)
    ref = tape.apply("diffusion_block", (coeff_at_nodes,), {"gops": gops})
    return SparseBlock(gops.pattern, ref)


def assemble_convection_blocks(tape, grid, u_k, v_k):
    """Advection block C(u_k, v_k) plus the four linearized reaction blocks.

    C_ij = sum_q w (u_k dphi_j/dx + v_k dphi_j/dy) phi_i.  The reaction
    blocks are mass-type matrices weighted by an iterate derivative,
    R(g)_ij = sum_q w g(x_q) phi_j phi_i, returned as a dict with keys
    "ux", "uy", "vx", "vy" for g = du/dx, du/dy, dv/dx, dv/dy; the full
    Newton linearization places them at the (u,u), (u,v), (v,u), (v,v)
    Jacobian slots respectively.
    """
    gops = operators_for(grid)
    cref = tape.apply("convection_block", (u_k, v_k), {"gops": gops})
    reactions = {
        "ux": assemble_reaction_block(tape, grid, u_k, 0),
        "uy": assemble_reaction_block(tape, grid, u_k, 1),
        "vx": assemble_reaction_block(tape, grid, v_k, 0),
        "vy": assemble_reaction_block(tape, grid, v_k, 1),
    }
    return SparseBlock(gops.pattern, cref), reactions


def assemble_reaction_block(tape, grid, w, axis):
    """Mass block weighted by the quadrature values of d(w)/d(axis)."""
    gops = operators_for(grid)
    ref = tape.apply("reaction_block", (w,), {"gops": gops, "axis": int(axis)})
    return SparseBlock(gops.pattern, ref)


def assemble_advection_diffusion(tape, grid, u, v, k_at_nodes, rho_cp=1.0):
    """Heat operator rho*C_p*C(u, v) + K(k) as one block."""
    from . import ops as _ops

    gops = operators_for(grid)
    cref = tape.apply("convection_block", (u, v), {"gops": gops})
    kblock = assemble_diffusion_block(tape, grid, k_at_nodes)
    data = _ops.add(tape, _ops.scale(tape, cref, float(rho_cp)), kblock.ref)
    return SparseBlock(gops.pattern, data)


def assemble_grad_div_blocks(grid):
    """Constant pressure-gradient (Gx, Gy) and divergence (Dx, Dy) matrices.

    Gx_ij = sum_q w dphi_i/dx phi_j (derivative on the test function, used in
    momentum rows scaled by -1/rho); Dx = Gx^T (derivative on the trial
    function, used in continuity rows).  Returned as scipy CSR matrices.
    """
    gops = operators_for(grid)
    return (gops.scipy_matrix(gops.gx_data), gops.scipy_matrix(gops.gy_data),
            gops.scipy_matrix(gops.dx_data), gops.scipy_matrix(gops.dy_data))


# ---------------------------------------------------------------------------
# system packing

def _pack_system_fwd(v, ctx):
    out = ctx["base"].copy()
    for data, pos in zip(v, ctx["maps"]):
        if data.shape != pos.shape:
            raise ContractError(
                f"pack_system: block data length {data.shape} != map {pos.shape}")
        np.add.at(out, pos, data)
    return out


def _pack_system_bwd(g, ctx):
    return tuple(g[pos] for pos in ctx["maps"])


register_op("pack_system", _pack_system_fwd, _pack_system_bwd)


def pack_system(tape, sys_pattern, placements, const_data=None):
    """Assemble system CSR data from blocks.

    ``placements`` is a list of (position map, data ref) pairs; gradients
    flow back to every placed block.  ``const_data`` holds contributions of
    constant blocks already mapped to system positions.
    """
    base = np.zeros(sys_pattern.nnz) if const_data is None else const_data
    maps = [pos for pos, _ in placements]
    refs = tuple(ref for _, ref in placements)
    ref = tape.apply("pack_system", refs, {"maps": maps, "base": base})
    return SparseBlock(sys_pattern, ref)


# ---------------------------------------------------------------------------
# Dirichlet constraints

@dataclass(frozen=True)
class ConstraintPlan:
    """Precomputed index sets for imposing Dirichlet rows on one pattern.

    ``row_entries``: data positions in constrained rows (zeroed, diagonal
    reset to 1).  ``col_entries``: positions (r, c) with c constrained and r
    free; their values move to the rhs (symmetric column elimination).
    """

    pattern: SparsePattern
    idx: np.ndarray
    row_entries: np.ndarray
    col_entries: np.ndarray
    col_rows: np.ndarray
    col_slot: np.ndarray
    diag_pos: np.ndarray


def constraint_plan(pattern, idx):
    idx = np.asarray(idx, dtype=np.intp)
    if np.unique(idx).size != idx.size:
        raise ContractError("duplicate constrained index")
    idx = np.sort(idx)
    n = pattern.n_rows
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise ContractError("constrained index outside system")
    cmask = np.zeros(n, dtype=bool)
    cmask[idx] = True
    row_entries = np.flatnonzero(cmask[pattern.rows])
    col_entries = np.flatnonzero(cmask[pattern.indices] & ~cmask[pattern.rows])
    col_rows = pattern.rows[col_entries].astype(np.intp)
    col_slot = np.searchsorted(idx, pattern.indices[col_entries])
    diag_pos = np.empty(idx.size, dtype=np.intp)
    for s, c in enumerate(idx):
        k = pattern.entry_index(c, c)
        if k < 0:
            raise ContractError(f"pattern has no diagonal entry for row {c}")
        diag_pos[s] = k
    return ConstraintPlan(pattern, idx, row_entries, col_entries,
                          col_rows, col_slot, diag_pos)


def _constrain_fwd(v, ctx):
    data, rhs = v
    plan: ConstraintPlan = ctx["plan"]
    vals = ctx["vals"]
    n = plan.pattern.n_rows
    if data.shape != (plan.pattern.nnz,) or rhs.shape != (n,):
        raise ContractError("constrain_system: data/rhs shape mismatch")
    d = data.copy()
    r = rhs.copy()
    if plan.col_entries.size:
        moved = d[plan.col_entries] * vals[plan.col_slot]
        r -= np.bincount(plan.col_rows, weights=moved, minlength=n)
        d[plan.col_entries] = 0.0
    d[plan.row_entries] = 0.0
    d[plan.diag_pos] = 1.0
    r[plan.idx] = vals
    return np.concatenate([d, r])


def _constrain_bwd(g, ctx):
    plan: ConstraintPlan = ctx["plan"]
    vals = ctx["vals"]
    nnz = plan.pattern.nnz
    gd_out, gr_out = g[:nnz], g[nnz:]
    gd = gd_out.copy()
    gd[plan.row_entries] = 0.0
    if plan.col_entries.size:
        gd[plan.col_entries] = -vals[plan.col_slot] * gr_out[plan.col_rows]
    gr = gr_out.copy()
    gr[plan.idx] = 0.0
    return gd, gr


register_op("constrain_system", _constrain_fwd, _constrain_bwd)


def constrain_system(tape, plan, data_ref, rhs_ref, vals):
    """Row replacement + symmetric column elimination on the tape.

    Constrained rows become identity rows with rhs set to the prescribed
    values; column contributions of constrained unknowns move to the rhs.
    Returns (constrained matrix block, constrained rhs ref).
    """
    from . import ops as _ops

    vals = np.asarray(vals, dtype=np.float64)
    if vals.shape != (plan.idx.size,):
        raise ContractError(
            f"constraint values length {vals.shape} != {plan.idx.size}")
    packed = tape.apply("constrain_system", (data_ref, rhs_ref),
                        {"plan": plan, "vals": vals})
    nnz = plan.pattern.nnz
    data_c = _ops.slice1d(tape, packed, 0, nnz)
    rhs_c = _ops.slice1d(tape, packed, nnz, nnz + plan.pattern.n_rows)
    return SparseBlock(plan.pattern, data_c), rhs_c


def apply_dirichlet(tape, block, rhs_ref, spec):
    """Constrain a base-pattern block by a DirichletSpec (plan built ad hoc)."""
    plan = constraint_plan(block.pattern, spec.idx)
    return constrain_system(tape, plan, block.ref, rhs_ref, spec.vals)
