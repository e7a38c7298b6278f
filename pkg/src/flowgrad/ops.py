"""Standard differentiable operators registered on the global tape registry.

Each operator is a pure forward function plus a backward rule mapping the
downstream gradient to per-input gradients.  Elementwise binary operators
accept equal shapes or a shape-``(1,)`` scalar on either side; the backward
rule sums the gradient back down to the scalar.

The module-level helpers (``add``, ``matmul``, ...) are thin wrappers around
``tape.apply`` so calling code reads like plain arithmetic.
"""

import numpy as np

from .errors import ContractError
from .tape import register_op

__all__ = [
    "add", "sub", "mul", "div", "neg", "scale", "add_scalar",
    "dot", "vsum", "tanh", "clamp_min", "square",
    "matmul", "matvec", "add_rowvec",
    "reshape", "slice1d", "concat1d", "gather", "set_at",
]


def _bcast_shape(a, b, op):
    if a.shape == b.shape:
        return a.shape
    if a.shape == (1,):
        return b.shape
    if b.shape == (1,):
        return a.shape
    raise ContractError(f"op {op!r}: shapes {a.shape} and {b.shape} do not broadcast")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if shape == (1,):
        return np.array([g.sum()])
    raise ContractError(f"cannot reduce gradient {g.shape} to {shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _add_fwd(v, ctx):
    a, b = v
    _bcast_shape(a, b, "add")
    return a + b


def _add_bwd(g, ctx):
    return _reduce_to(g, ctx["sa"]), _reduce_to(g, ctx["sb"])


def _sub_fwd(v, ctx):
    a, b = v
    _bcast_shape(a, b, "sub")
    return a - b


def _sub_bwd(g, ctx):
    return _reduce_to(g, ctx["sa"]), _reduce_to(-g, ctx["sb"])


def _mul_fwd(v, ctx):
    a, b = v
    _bcast_shape(a, b, "mul")
    ctx["a"], ctx["b"] = a, b
    return a * b


def _mul_bwd(g, ctx):
    a, b = ctx["a"], ctx["b"]
    return _reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)


def _div_fwd(v, ctx):
    a, b = v
    _bcast_shape(a, b, "div")
    ctx["a"], ctx["b"] = a, b
    return a / b


def _div_bwd(g, ctx):
    a, b = ctx["a"], ctx["b"]
    return _reduce_to(g / b, a.shape), _reduce_to(-g * a / (b * b), b.shape)


def _neg_fwd(v, ctx):
    return -v[0]


def _neg_bwd(g, ctx):
    return (-g,)


def _scale_fwd(v, ctx):
    return ctx["c"] * v[0]


def _scale_bwd(g, ctx):
    return (ctx["c"] * g,)


def _add_scalar_fwd(v, ctx):
    return v[0] + ctx["c"]


def _add_scalar_bwd(g, ctx):
    return (g,)


def _square_fwd(v, ctx):
    ctx["x"] = v[0]
    return v[0] * v[0]


def _square_bwd(g, ctx):
    return (2.0 * ctx["x"] * g,)


# ---------------------------------------------------------------------------
# reductions and nonlinearities

def _dot_fwd(v, ctx):
    a, b = v
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"op 'dot': expects equal 1-d shapes, got {a.shape} and {b.shape}")
    ctx["a"], ctx["b"] = a, b
    return np.array([a @ b])


def _dot_bwd(g, ctx):
    return g[0] * ctx["b"], g[0] * ctx["a"]


def _vsum_fwd(v, ctx):
    ctx["shape"] = v[0].shape
    return np.array([v[0].sum()])


def _vsum_bwd(g, ctx):
    return (np.full(ctx["shape"], g[0]),)


def _tanh_fwd(v, ctx):
    y = np.tanh(v[0])
    ctx["y"] = y
    return y


def _tanh_bwd(g, ctx):
    y = ctx["y"]
    return (g * (1.0 - y * y),)


def _clamp_min_fwd(v, ctx):
    x = v[0]
    floor = ctx["floor"]
    mask = x >= floor
    ctx["mask"] = mask
    ctx["clamped"] = int(x.size - mask.sum())
    return np.where(mask, x, floor)


def _clamp_min_bwd(g, ctx):
    return (np.where(ctx["mask"], g, 0.0),)


# ---------------------------------------------------------------------------
# linear algebra

def _matmul_fwd(v, ctx):
    a, b = v
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"op 'matmul': incompatible shapes {a.shape} and {b.shape}")
    ctx["a"], ctx["b"] = a, b
    return a @ b


def _matmul_bwd(g, ctx):
    a, b = ctx["a"], ctx["b"]
    return g @ b.T, a.T @ g


def _matvec_fwd(v, ctx):
    a, x = v
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ContractError(f"op 'matvec': incompatible shapes {a.shape} and {x.shape}")
    ctx["a"], ctx["x"] = a, x
    return a @ x


def _matvec_bwd(g, ctx):
    return np.outer(g, ctx["x"]), ctx["a"].T @ g


def _add_rowvec_fwd(v, ctx):
    x, b = v
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ContractError(f"op 'add_rowvec': incompatible shapes {x.shape} and {b.shape}")
    return x + b


def _add_rowvec_bwd(g, ctx):
    return g, g.sum(axis=0)


# ---------------------------------------------------------------------------
# structural ops

def _reshape_fwd(v, ctx):
    x = v[0]
    ctx["shape_in"] = x.shape
    return x.reshape(ctx["shape"])


def _reshape_bwd(g, ctx):
    return (g.reshape(ctx["shape_in"]),)


def _slice1d_fwd(v, ctx):
    x = v[0]
    if x.ndim != 1:
        raise ContractError("op 'slice1d': expects a 1-d input")
    start, stop = ctx["start"], ctx["stop"]
    if not 0 <= start <= stop <= x.shape[0]:
        raise ContractError(f"op 'slice1d': range [{start}, {stop}) outside length {x.shape[0]}")
    ctx["n"] = x.shape[0]
    return x[start:stop].copy()


def _slice1d_bwd(g, ctx):
    out = np.zeros(ctx["n"])
    out[ctx["start"]:ctx["stop"]] = g
    return (out,)


def _concat1d_fwd(v, ctx):
    for x in v:
        if x.ndim != 1:
            raise ContractError("op 'concat1d': expects 1-d inputs")
    ctx["sizes"] = [x.shape[0] for x in v]
    return np.concatenate(v)


def _concat1d_bwd(g, ctx):
    out = []
    at = 0
    for n in ctx["sizes"]:
        out.append(g[at:at + n].copy())
        at += n
    return tuple(out)


def _gather_fwd(v, ctx):
    x = v[0]
    idx = ctx["idx"]
    if x.ndim != 1:
        raise ContractError("op 'gather': expects a 1-d input")
    ctx["n"] = x.shape[0]
    return x[idx].copy()


def _gather_bwd(g, ctx):
    out = np.zeros(ctx["n"])
    np.add.at(out, ctx["idx"], g)
    return (out,)


def _set_at_fwd(v, ctx):
    x, vals = v
    idx = ctx["idx"]
    if x.ndim != 1 or vals.shape != idx.shape:
        raise ContractError("op 'set_at': expects 1-d input and matching index/value lengths")
    out = x.copy()
    out[idx] = vals
    return out


def _set_at_bwd(g, ctx):
    idx = ctx["idx"]
    gx = g.copy()
    gx[idx] = 0.0
    return gx, g[idx].copy()


register_op("add", _add_fwd, _add_bwd)
register_op("sub", _sub_fwd, _sub_bwd)
register_op("mul", _mul_fwd, _mul_bwd)
register_op("div", _div_fwd, _div_bwd)
register_op("neg", _neg_fwd, _neg_bwd)
register_op("scale", _scale_fwd, _scale_bwd)
register_op("add_scalar", _add_scalar_fwd, _add_scalar_bwd)
register_op("square", _square_fwd, _square_bwd)
register_op("dot", _dot_fwd, _dot_bwd)
register_op("vsum", _vsum_fwd, _vsum_bwd)
register_op("tanh", _tanh_fwd, _tanh_bwd)
register_op("clamp_min", _clamp_min_fwd, _clamp_min_bwd)
register_op("matmul", _matmul_fwd, _matmul_bwd)
register_op("matvec", _matvec_fwd, _matvec_bwd)
register_op("add_rowvec", _add_rowvec_fwd, _add_rowvec_bwd)
register_op("reshape", _reshape_fwd, _reshape_bwd)
register_op("slice1d", _slice1d_fwd, _slice1d_bwd)
register_op("concat1d", _concat1d_fwd, _concat1d_bwd)
register_op("gather", _gather_fwd, _gather_bwd)
register_op("set_at", _set_at_fwd, _set_at_bwd)


# ---------------------------------------------------------------------------
# tape-facing helpers

def add(tape, a, b):
    ctx = {"sa": tape.value(a).shape, "sb": tape.value(b).shape}
    return tape.apply("add", (a, b), ctx)


def sub(tape, a, b):
    ctx = {"sa": tape.value(a).shape, "sb": tape.value(b).shape}
    return tape.apply("sub", (a, b), ctx)


def mul(tape, a, b):
    return tape.apply("mul", (a, b))


def div(tape, a, b):
    return tape.apply("div", (a, b))


def neg(tape, a):
    return tape.apply("neg", (a,))


def scale(tape, a, c):
    return tape.apply("scale", (a,), {"c": float(c)})


def add_scalar(tape, a, c):
    return tape.apply("add_scalar", (a,), {"c": float(c)})


def square(tape, a):
    return tape.apply("square", (a,))


def dot(tape, a, b):
    return tape.apply("dot", (a, b))


def vsum(tape, a):
    return tape.apply("vsum", (a,))


def tanh(tape, a):
    return tape.apply("tanh", (a,))


def clamp_min(tape, a, floor):
    """Clamp from below; the node's ctx reports how many entries were clamped."""
    return tape.apply("clamp_min", (a,), {"floor": float(floor)})


def matmul(tape, a, b):
    return tape.apply("matmul", (a, b))


def matvec(tape, a, x):
    return tape.apply("matvec", (a, x))


def add_rowvec(tape, x, b):
    return tape.apply("add_rowvec", (x, b))


def reshape(tape, a, shape):
    return tape.apply("reshape", (a,), {"shape": tuple(shape)})


def slice1d(tape, a, start, stop):
    return tape.apply("slice1d", (a,), {"start": int(start), "stop": int(stop)})


def concat1d(tape, parts):
    return tape.apply("concat1d", tuple(parts))


def gather(tape, a, idx):
    return tape.apply("gather", (a,), {"idx": np.asarray(idx, dtype=np.intp)})


def set_at(tape, a, idx, vals):
    """Copy ``a`` and overwrite positions ``idx`` with the values node ``vals``.

    Indices must be unique: with duplicates the forward keeps only the last
    write, which the backward rule does not model.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if np.unique(idx).size != idx.size:
        raise ContractError("op 'set_at': duplicate indices")
    return tape.apply("set_at", (a, vals), {"idx": idx})
