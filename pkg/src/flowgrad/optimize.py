"""Limited-memory BFGS with a strong Wolfe line search and lower bounds.

The direction comes from the standard two-loop recursion over the last ``m``
curvature pairs.  Lower bounds are handled by gradient projection: variables
sitting on their bound with an outward-pointing gradient are frozen for the
step, trial steps are capped where a free variable would cross its bound, and
convergence is judged on the projected gradient.

A trial evaluation that raises a solver error (Newton nonconvergence,
singular Jacobian, non-finite values) is treated as infinite loss: the trial
is rejected and the step shrunk toward the current iterate.  Twenty rejected
trials within one line search abort the run with diagnostics.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, LineSearchError, NumericError

__all__ = ["OptimizerConfig", "OptimizeResult", "lbfgs_optimize"]

_MAX_REJECTIONS = 20
_MAX_SEARCH_EVALS = 40
_CURVATURE_FLOOR = 1e-10
_ACTIVE_EPS = 1e-10


@dataclass(frozen=True)
class OptimizerConfig:
    max_steps: int = 100
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    lower_bounds: object = None
    tol_projected_grad: float = 1e-10
    tol_rel_loss: float = 1e-12
    debug_fd_check: bool = False
    fd_seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.c1 < self.c2 < 1.0):
            raise ContractError("line search needs 0 < c1 < c2 < 1")
        if self.max_steps < 1 or self.memory < 1:
            raise ContractError("max_steps and memory must be at least 1")


@dataclass
class OptimizeResult:
    theta: np.ndarray
    loss: float
    loss_history: list
    initial_loss: float
    n_steps: int
    converged: bool
    stop_reason: str
    projected_grad_norm: float
    n_evals: int
    rejections: int


def _bounds_array(lower_bounds, n):
    if lower_bounds is None:
        return np.full(n, -np.inf)
    arr = np.asarray(lower_bounds, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ContractError(f"lower bound length {arr.shape} != parameters {n}")
    return arr


def _two_loop(g, pairs, free):
    q = np.where(free, g, 0.0)
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q = q - a * y
    s, y, _ = pairs[-1]
    q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q = q + (a - b) * s
    return np.where(free, -q, 0.0)


def _spot_check_gradient(problem, x, f, g, rng):
    """Central-difference check of three random coordinates."""
    coords = rng.choice(x.size, size=min(3, x.size), replace=False)
    for i in coords:
        h = 1e-5 * (1.0 + abs(x[i]))
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        try:
            fp = float(problem(xp)[0])
            fm = float(problem(xm)[0])
        except NumericError:
            continue
        g_fd = (fp - fm) / (2.0 * h)
        # the floor keeps roundoff noise at stationary points from tripping it
        err = abs(g[i] - g_fd) / max(abs(g[i]), abs(g_fd), 1e-8)
        if err > 1e-4:
            raise NumericError(
                f"gradient spot check failed at coordinate {i}: "
                f"reverse-mode {g[i]:.6e} vs central difference {g_fd:.6e}")


def lbfgs_optimize(problem, theta0, config=None, callback=None):
    """Minimize ``problem(theta) -> (loss, gradient)`` from ``theta0``.

    ``callback(step, theta, loss, grad)`` runs after every accepted step.
    The returned loss history holds the loss after each accepted step and is
    nonincreasing.
    """
    config = config or OptimizerConfig()
    x = np.asarray(theta0, dtype=np.float64).copy()
    lb = _bounds_array(config.lower_bounds, x.size)
    x = np.maximum(x, lb)

    evals = [0]

    def evaluate(theta):
        evals[0] += 1
        f, g = problem(theta)
        f = float(f)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != theta.shape:
            raise ContractError(
                f"gradient shape {g.shape} != parameter shape {theta.shape}")
        return f, g

    fd_rng = np.random.default_rng(config.fd_seed)
    f, g = evaluate(x)
    if not np.isfinite(f):
        raise NumericError("objective is non-finite at the starting point")
    if config.debug_fd_check:
        _spot_check_gradient(problem, x, f, g, fd_rng)

    initial_loss = f
    history = []
    pairs = []
    total_rejections = 0

    def projected_grad(xc, gc):
        return xc - np.maximum(xc - gc, lb)

    pg_norm = float(np.max(np.abs(projected_grad(x, g)))) if x.size else 0.0
    if pg_norm < config.tol_projected_grad:
        return OptimizeResult(x, f, history, initial_loss, 0, True,
                              "projected gradient below tolerance", pg_norm,
                              evals[0], 0)

    stop_reason = "step limit reached"
    converged = False
    steps = 0
    for step in range(1, config.max_steps + 1):
        active = (x <= lb + _ACTIVE_EPS) & (g > 0.0)
        free = ~active
        if pairs:
            d = _two_loop(g, pairs, free)
        else:
            d = np.where(free, -g, 0.0)
        dphi0 = float(g @ d)
        if dphi0 >= 0.0:
            d = np.where(free, -g, 0.0)
            dphi0 = float(g @ d)
        if dphi0 >= 0.0:
            stop_reason = "no descent direction"
            converged = pg_norm < 1e-8
            break

        # cap the step where a free variable would leave the feasible set
        neg = d < 0.0
        finite_lb = np.isfinite(lb)
        limiting = neg & finite_lb
        if np.any(limiting):
            alpha_max = float(np.min((lb[limiting] - x[limiting]) / d[limiting]))
            alpha_max = max(alpha_max, 1e-16)
        else:
            alpha_max = np.inf

        if pairs:
            alpha0 = min(1.0, alpha_max)
        else:
            alpha0 = min(1.0, 1.0 / max(1e-12, float(np.max(np.abs(d)))),
                         alpha_max)

        accepted, rejections = _wolfe_search(
            evaluate, x, d, f, g, dphi0, alpha0, alpha_max, lb, config, step)
        total_rejections += rejections
        alpha, f_new, g_new = accepted
        x_new = np.maximum(x + alpha * d, lb)

        if config.debug_fd_check:
            _spot_check_gradient(problem, x_new, f_new, g_new, fd_rng)

        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        if sy > _CURVATURE_FLOOR * float(np.linalg.norm(s)) * float(np.linalg.norm(yv)):
            pairs.append((s, yv, 1.0 / sy))
            if len(pairs) > config.memory:
                pairs.pop(0)

        rel_change = abs(f - f_new) / max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        history.append(f)
        steps = step
        if callback is not None:
            callback(step, x, f, g)

        pg_norm = float(np.max(np.abs(projected_grad(x, g))))
        if pg_norm < config.tol_projected_grad:
            stop_reason = "projected gradient below tolerance"
            converged = True
            break
        if rel_change < config.tol_rel_loss:
            stop_reason = "relative loss change below tolerance"
            converged = True
            break

    return OptimizeResult(x, f, history, initial_loss, steps, converged,
                          stop_reason, pg_norm, evals[0], total_rejections)


def _wolfe_search(evaluate, x, d, f0, g0, dphi0, alpha0, alpha_max, lb,
                  config, step):
    """Strong Wolfe search with the rejection protocol folded in.

    Returns ((alpha, f, g), rejections).  Raises LineSearchError when no
    acceptable point exists within the evaluation budget or after 20
    rejected (failed or non-finite) trials.
    """
    c1, c2 = config.c1, config.c2
    rejections = [0]
    budget = [_MAX_SEARCH_EVALS]

    def fail(reason):
        raise LineSearchError(
            f"line search failed at step {step}: {reason}",
            diagnostics={"step": step, "f0": f0, "dphi0": dphi0,
                         "rejections": rejections[0],
                         "evals_left": budget[0]})

    # smallest step length that produced a rejected trial; later trials stay
    # below it, treating the failure like a bound on the step
    ceil = [np.inf]

    def phi(alpha):
        """None signals a rejected trial (solver failure or non-finite loss)."""
        if budget[0] <= 0:
            fail("evaluation budget exhausted")
        budget[0] -= 1
        try:
            f_a, g_a = evaluate(np.maximum(x + alpha * d, lb))
        except NumericError:
            f_a, g_a = np.inf, None
        if not np.isfinite(f_a):
            rejections[0] += 1
            ceil[0] = min(ceil[0], alpha)
            if rejections[0] >= _MAX_REJECTIONS:
                fail(f"{_MAX_REJECTIONS} rejected trial steps")
            return None
        return f_a, g_a, float(g_a @ d)

    def armijo(alpha, f_a):
        return f_a <= f0 + c1 * alpha * dphi0

    def zoom(lo, f_lo, g_lo, hi):
        # invariant: lo satisfies the sufficient-decrease condition (or is 0)
        for _ in range(_MAX_SEARCH_EVALS):
            if abs(hi - lo) < 1e-14 * max(1.0, abs(lo)):
                break
            alpha = 0.5 * (lo + hi)
            res = phi(alpha)
            if res is None:
                hi = alpha  # shrink toward the acceptable end
                continue
            f_a, g_a, dphi_a = res
            if not armijo(alpha, f_a) or f_a >= f_lo:
                hi = alpha
            else:
                if abs(dphi_a) <= -c2 * dphi0:
                    return alpha, f_a, g_a
                if dphi_a * (hi - lo) >= 0.0:
                    hi = lo
                lo, f_lo, g_lo = alpha, f_a, g_a
        if lo > 0.0 and f_lo < f0:
            return lo, f_lo, g_lo
        fail("zoom could not find an acceptable point")

    alpha_prev, f_prev, g_prev = 0.0, f0, g0
    alpha = alpha0
    first = True
    for _ in range(_MAX_SEARCH_EVALS):
        res = phi(alpha)
        if res is None:
            alpha = 0.5 * (alpha_prev + alpha)  # halve toward the last good point
            continue
        f_a, g_a, dphi_a = res
        if not armijo(alpha, f_a) or (f_a >= f_prev and not first):
            return zoom(alpha_prev, f_prev, g_prev, alpha), rejections[0]
        if abs(dphi_a) <= -c2 * dphi0:
            return (alpha, f_a, g_a), rejections[0]
        if dphi_a >= 0.0:
            return zoom(alpha, f_a, g_a, alpha_prev), rejections[0]
        cap = min(alpha_max, 0.999 * ceil[0])
        if alpha >= cap:
            # pressed against a bound or a failure barrier: sufficient
            # decrease is all we can ask
            return (alpha, f_a, g_a), rejections[0]
        alpha_prev, f_prev, g_prev = alpha, f_a, g_a
        alpha = min(2.0 * alpha, cap)
        first = False
    fail("bracketing budget exhausted")
