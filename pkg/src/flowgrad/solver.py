"""Forward solvers recorded on the tape.

``newton_solve`` iterates x_{k+1} = x_k - J(x_k)^-1 F(x_k) for the coupled
[u; v; p] system.  Every iteration's assembly, constraint application, and
linear solve is a tape operator, so the backward pass differentiates through
each iteration rather than invoking an implicit-function shortcut.  The
momentum Jacobian carries the full convection linearization: advection
C(u_k, v_k) plus the four reaction blocks from the iterate gradients.

Continuity rows carry pressure stabilization (a pressure stiffness weighted
by beta h^2 / nu) so the equal-order discretization is solvable; the 1/nu
scaling keeps the divergence perturbation viscosity-independent, so the
large-viscosity solution approaches the Stokes solution.  The pressure gauge
is fixed by pinning one node.

``heat_solve`` is one differentiable linear solve for the temperature;
``transport_integrate`` advances nodal particle velocities by implicit
Euler.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .assembly import (
    assemble_advection_diffusion,
    assemble_diffusion_block,
    assemble_reaction_block,
    apply_dirichlet,
    constraint_plan,
    constrain_system,
    operators_for,
    pack_system,
)
from .errors import ContractError, NewtonDivergedError, NumericError
from .grid import cavity_velocity_bcs, uniform_boundary_bc
from .sparse import SparseBlock, sparse_solve, spmv_fixed, spmv_pattern

__all__ = [
    "PhysicsConstants",
    "NewtonConfig",
    "CavityBCs",
    "NSState",
    "ParticleState",
    "default_cavity_bcs",
    "ns_residual",
    "newton_solve",
    "heat_solve",
    "transport_integrate",
]

DEFAULT_BETA = 0.01


@dataclass(frozen=True)
class PhysicsConstants:
    rho: float = 1.0
    cp: float = 1.0
    body_force_f: float = 0.0
    body_force_g: float = 0.0
    heat_source_q: float = 1.0
    kappa1: float = 1.0
    kappa2: float = 1.0
    q1: float = 0.0
    q2: float = 0.0

    def __post_init__(self):
        if self.rho <= 0 or self.cp <= 0:
            raise ContractError("rho and cp must be positive")
        if self.kappa1 <= 0 or self.kappa2 <= 0:
            raise ContractError("particle coupling rates must be positive")


@dataclass(frozen=True)
class NewtonConfig:
    tol_residual: float = 1e-8
    max_iter: int = 10

    def __post_init__(self):
        if self.tol_residual <= 0:
            raise ContractError("Newton tolerance must be positive")
        if self.max_iter < 1:
            raise ContractError("Newton needs at least one iteration")


@dataclass(frozen=True)
class CavityBCs:
    """Velocity Dirichlet data plus the pinned pressure node."""

    u: object
    v: object
    pressure_pin: int = 0


def default_cavity_bcs(grid, lid_speed=1.0):
    u_bc, v_bc = cavity_velocity_bcs(grid, lid_speed)
    return CavityBCs(u_bc, v_bc, pressure_pin=0)


@dataclass
class NSState:
    u: int
    v: int
    p: int
    newton_iterations_used: int
    final_residual_norm: float
    trace: list = field(default_factory=list)


@dataclass
class ParticleState:
    w1_steps: list
    w2_steps: list
    dt: float
    n_steps: int

    @property
    def w1(self):
        return self.w1_steps[-1]

    @property
    def w2(self):
        return self.w2_steps[-1]


def _nodal(value, n):
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 0:
        return np.full(n, float(value))
    if value.shape != (n,):
        raise ContractError(f"field length {value.shape} != n_nodes {n}")
    return value


class _NsSetup:
    """Constant matrices, system maps, and the constraint plan for one solve."""

    def __init__(self, grid, bc, constants, beta):
        gops = operators_for(grid)
        self.gops = gops
        n = grid.n_nodes
        self.n = n
        self.sys_pattern, self.bmap = gops.system_layout()
        self.stab_coef = beta * grid.hx * grid.hy

        const = np.zeros(self.sys_pattern.nnz)
        np.add.at(const, self.bmap[0][2], -(1.0 / constants.rho) * gops.gx_data)
        np.add.at(const, self.bmap[1][2], -(1.0 / constants.rho) * gops.gy_data)
        np.add.at(const, self.bmap[2][0], gops.dx_data)
        np.add.at(const, self.bmap[2][1], gops.dy_data)
        self.const_sys = const

        self.gx_m = gops.scipy_matrix(-(1.0 / constants.rho) * gops.gx_data)
        self.gy_m = gops.scipy_matrix(-(1.0 / constants.rho) * gops.gy_data)
        self.dx = gops.scipy_matrix(gops.dx_data)
        self.dy = gops.scipy_matrix(gops.dy_data)

        cidx = np.concatenate([bc.u.idx, bc.v.idx + n,
                               np.array([2 * n + bc.pressure_pin])])
        self.plan = constraint_plan(self.sys_pattern, cidx)
        self.zero_vals = np.zeros(cidx.size)

        mass = gops.scipy_matrix(gops.m_data)
        self.load_u = mass @ _nodal(constants.body_force_f, n)
        self.load_v = mass @ _nodal(constants.body_force_g, n)

    def stab_block(self, tape, nu_nodal):
        """Pressure stabilization stiffness weighted by beta h^2 / nu."""
        coef = ops.div(tape, tape.constant(np.full(self.n, self.stab_coef)),
                       nu_nodal)
        return assemble_diffusion_block(tape, self.gops.grid, coef)


def _residual(tape, setup, c_ref, k_ref, stab_ref, u, v, p):
    """Stacked [momentum-x; momentum-y; continuity] with Dirichlet rows zeroed."""
    pat = setup.gops.pattern
    fu = ops.add(tape, spmv_pattern(tape, SparseBlock(pat, c_ref), u),
                 spmv_pattern(tape, SparseBlock(pat, k_ref), u))
    fu = ops.add(tape, fu, spmv_fixed(tape, setup.gx_m, p))
    if np.any(setup.load_u):
        fu = ops.sub(tape, fu, tape.constant(setup.load_u))
    fv = ops.add(tape, spmv_pattern(tape, SparseBlock(pat, c_ref), v),
                 spmv_pattern(tape, SparseBlock(pat, k_ref), v))
    fv = ops.add(tape, fv, spmv_fixed(tape, setup.gy_m, p))
    if np.any(setup.load_v):
        fv = ops.sub(tape, fv, tape.constant(setup.load_v))
    fp = ops.add(tape, spmv_fixed(tape, setup.dx, u),
                 spmv_fixed(tape, setup.dy, v))
    fp = ops.add(tape, fp, spmv_pattern(tape, SparseBlock(pat, stab_ref), p))
    full = ops.concat1d(tape, [fu, fv, fp])
    zeros = tape.constant(np.zeros(setup.plan.idx.size))
    res = ops.set_at(tape, full, setup.plan.idx, zeros)
    if not np.all(np.isfinite(tape.value(res))):
        raise NumericError("non-finite residual")
    return res


def ns_residual(tape, grid, state, nu_nodal, constants, bc, beta=DEFAULT_BETA):
    """Public residual evaluation for a given state (see ``_residual``)."""
    setup = _NsSetup(grid, bc, constants, beta)
    c_ref = tape.apply("convection_block", (state.u, state.v),
                       {"gops": setup.gops})
    kblock = assemble_diffusion_block(tape, grid, nu_nodal)
    stab = setup.stab_block(tape, nu_nodal)
    return _residual(tape, setup, c_ref, kblock.ref, stab.ref,
                     state.u, state.v, state.p)


def newton_solve(tape, grid, nu_nodal, constants, bc, config=None,
                 beta=DEFAULT_BETA, trace_cb=None):
    """Newton iteration for the steady velocity-pressure system.

    Always performs at least one iteration; convergence is judged on the
    post-update residual, so a state that already solves the system reports
    one iteration.  Raises on nonconvergence with the last residual attached.
    """
    config = config or NewtonConfig()
    setup = _NsSetup(grid, bc, constants, beta)
    gops = setup.gops
    n = setup.n

    u_vals = tape.constant(bc.u.vals)
    v_vals = tape.constant(bc.v.vals)
    pin_idx = np.array([bc.pressure_pin])
    pin_zero = tape.constant(np.zeros(1))

    u = ops.set_at(tape, tape.constant(np.zeros(n)), bc.u.idx, u_vals)
    v = ops.set_at(tape, tape.constant(np.zeros(n)), bc.v.idx, v_vals)
    p = ops.set_at(tape, tape.constant(np.zeros(n)), pin_idx, pin_zero)

    kblock = assemble_diffusion_block(tape, grid, nu_nodal)
    stab = setup.stab_block(tape, nu_nodal)
    c_ref = tape.apply("convection_block", (u, v), {"gops": gops})
    f_ref = _residual(tape, setup, c_ref, kblock.ref, stab.ref, u, v, p)

    trace = []
    res_norm = float(np.max(np.abs(tape.value(f_ref))))
    for it in range(1, config.max_iter + 1):
        rux = assemble_reaction_block(tape, grid, u, 0)
        ruy = assemble_reaction_block(tape, grid, u, 1)
        rvx = assemble_reaction_block(tape, grid, v, 0)
        rvy = assemble_reaction_block(tape, grid, v, 1)
        ck = ops.add(tape, c_ref, kblock.ref)
        juu = ops.add(tape, ck, rux.ref)
        jvv = ops.add(tape, ck, rvy.ref)
        placements = [
            (setup.bmap[0][0], juu), (setup.bmap[0][1], ruy.ref),
            (setup.bmap[1][0], rvx.ref), (setup.bmap[1][1], jvv),
            (setup.bmap[2][2], stab.ref),
        ]
        sys_block = pack_system(tape, setup.sys_pattern, placements,
                                setup.const_sys)
        blk_c, rhs_c = constrain_system(tape, setup.plan, sys_block.ref,
                                        f_ref, setup.zero_vals)
        delta = sparse_solve(tape, blk_c, rhs_c)

        du = ops.slice1d(tape, delta, 0, n)
        dv = ops.slice1d(tape, delta, n, 2 * n)
        dp = ops.slice1d(tape, delta, 2 * n, 3 * n)
        u = ops.set_at(tape, ops.sub(tape, u, du), bc.u.idx, u_vals)
        v = ops.set_at(tape, ops.sub(tape, v, dv), bc.v.idx, v_vals)
        p = ops.set_at(tape, ops.sub(tape, p, dp), pin_idx, pin_zero)

        c_ref = tape.apply("convection_block", (u, v), {"gops": gops})
        f_ref = _residual(tape, setup, c_ref, kblock.ref, stab.ref, u, v, p)
        res_norm = float(np.max(np.abs(tape.value(f_ref))))
        trace.append((it, res_norm))
        if trace_cb is not None:
            trace_cb(it, res_norm)
        if res_norm < config.tol_residual:
            return NSState(u, v, p, it, res_norm, trace)

    raise NewtonDivergedError(
        f"Newton did not reach {config.tol_residual:g} in {config.max_iter} "
        f"iterations (last residual {res_norm:.3e})",
        last_residual=res_norm, iterations=config.max_iter)


def heat_solve(tape, grid, ns, k_nodal, constants, bc_t=None):
    """One differentiable solve of rho Cp C(u, v) T + K(k) T = M Q."""
    bc_t = bc_t or uniform_boundary_bc(grid, 0.0)
    gops = operators_for(grid)
    ablock = assemble_advection_diffusion(tape, grid, ns.u, ns.v, k_nodal,
                                          rho_cp=constants.rho * constants.cp)
    mass = gops.scipy_matrix(gops.m_data)
    load = mass @ _nodal(constants.heat_source_q, grid.n_nodes)
    blk_c, rhs_c = apply_dirichlet(tape, ablock, tape.constant(load), bc_t)
    return sparse_solve(tape, blk_c, rhs_c)


def transport_integrate(tape, ns, constants, w_init=None, dt=0.1, n_steps=50,
                        kappa_refs=None):
    """Implicit-Euler recursion for nodal particle velocities.

    w^{m+1} = (w^m + dt (kappa u + q)) / (1 + dt kappa) per component;
    ``kappa_refs`` optionally supplies on-tape kappa scalars so sensitivities
    to the coupling rates are available.
    """
    if dt <= 0:
        raise ContractError("time step must be positive")
    if n_steps < 1:
        raise ContractError("need at least one transport step")
    n = tape.value(ns.u).shape[0]
    if kappa_refs is None:
        k1 = tape.constant([constants.kappa1])
        k2 = tape.constant([constants.kappa2])
    else:
        k1, k2 = kappa_refs

    def advance(w, vel_ref, kappa_ref, q):
        num = ops.add(tape, w, ops.scale(tape, ops.mul(tape, kappa_ref, vel_ref), dt))
        if q:
            num = ops.add_scalar(tape, num, dt * q)
        den = ops.add_scalar(tape, ops.scale(tape, kappa_ref, dt), 1.0)
        return ops.div(tape, num, den)

    if w_init is None:
        w1 = tape.constant(np.zeros(n))
        w2 = tape.constant(np.zeros(n))
    else:
        w1 = tape.constant(_nodal(w_init[0], n))
        w2 = tape.constant(_nodal(w_init[1], n))
    w1_steps, w2_steps = [w1], [w2]
    for _ in range(n_steps):
        w1 = advance(w1, ns.u, k1, constants.q1)
        w2 = advance(w2, ns.v, k2, constants.q2)
        w1_steps.append(w1)
        w2_steps.append(w2)
    return ParticleState(w1_steps, w2_steps, dt, n_steps)
