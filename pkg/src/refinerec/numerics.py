"""Dense-array substrate: reverse-mode autodiff on numpy, Adam, seeded RNG streams.

Reals are float32 by default; wrap gradient-check code in ``precision("float64")``
for tight finite-difference tolerances. Operations record onto the active Tape
only when an input is connected to a trainable parameter, so inference code runs
tape-free at plain numpy speed. The tape is rebuilt for every training step.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError, UsageError

_FLOAT = {"dtype": np.dtype(np.float32)}
_LN_EPS = 1e-12


def default_dtype() -> np.dtype:
    return _FLOAT["dtype"]


def set_default_dtype(name) -> None:
    dt = np.dtype(name)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported real dtype {name!r}")
    _FLOAT["dtype"] = dt


@contextmanager
def precision(name):
    """Temporarily switch the default real dtype ("float32" or "float64")."""
    old = _FLOAT["dtype"]
    set_default_dtype(name)
    try:
        yield
    finally:
        _FLOAT["dtype"] = old


class Tensor:
    """Dense numeric array with an optional gradient slot.

    ``grad`` exists exactly on requires_grad tensors and accumulates additively
    across backward passes until zeroed (by ``zero_grad`` or an Adam step).
    """

    __slots__ = ("values", "requires_grad", "grad", "watched")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=default_dtype())
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.watched = self.requires_grad

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def detach(self) -> "Tensor":
        """Same values, no tape ancestry: upstream gradients become exactly zero."""
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager around one forward pass; ``backward`` then walks
    the records in exact reverse execution order.
    """

    _active: list = []

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn) in execution order

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    @staticmethod
    def current():
        return Tape._active[-1] if Tape._active else None

    def __len__(self):
        return len(self._records)


def _emit(out: Tensor, inputs: tuple, bwd) -> Tensor:
    tape = Tape.current()
    if tape is not None and any(t.watched for t in inputs):
        out.watched = True
        tape._records.append((out, inputs, bwd))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` for every requires_grad tensor on the path to ``loss``."""
    if loss.values.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    grads = {id(loss): np.ones_like(loss.values)}
    leaves = {}
    for out, inputs, bwd in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, c in zip(inputs, bwd(g)):
            if c is None or not t.watched:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + c
            else:
                grads[key] = c
            if t.requires_grad:
                leaves[key] = t
    if loss.requires_grad:
        leaves[id(loss)] = loss
        grads.setdefault(id(loss), np.ones_like(loss.values))
    for key, t in leaves.items():
        if key in grads:
            t.grad += grads[key]


def _check_dtypes(op, *tensors):
    dt = tensors[0].values.dtype
    for t in tensors[1:]:
        if t.values.dtype != dt:
            raise UsageError(f"{op}: mixed dtypes {dt} and {t.values.dtype}")


def _binary_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.values.shape == b.values.shape:
        return "same"
    if b.values.size == 1:
        return "b_scalar"
    if a.values.size == 1:
        return "a_scalar"
    raise ShapeError(f"{op}: incompatible shapes {a.values.shape} and {b.values.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    kind = _binary_kind(a, b, "add")
    out = Tensor(a.values + b.values)

    def bwd(g):
        ga = np.sum(g).reshape(a.values.shape) if kind == "a_scalar" else g
        gb = np.sum(g).reshape(b.values.shape) if kind == "b_scalar" else g
        return ga, gb

    return _emit(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", a, b)
    kind = _binary_kind(a, b, "sub")
    out = Tensor(a.values - b.values)

    def bwd(g):
        ga = np.sum(g).reshape(a.values.shape) if kind == "a_scalar" else g
        gb = -(np.sum(g).reshape(b.values.shape) if kind == "b_scalar" else g)
        return ga, gb

    return _emit(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    kind = _binary_kind(a, b, "mul")
    va, vb = a.values, b.values
    out = Tensor(va * vb)

    def bwd(g):
        ga = g * vb
        gb = g * va
        if kind == "a_scalar":
            ga = np.sum(ga).reshape(va.shape)
        if kind == "b_scalar":
            gb = np.sum(gb).reshape(vb.shape)
        return ga, gb

    return _emit(out, (a, b), bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a (d,) bias vector along the last axis of x."""
    _check_dtypes("bias_add", x, b)
    if b.values.shape != (x.values.shape[-1],):
        raise ShapeError(f"bias_add: bias {b.values.shape} does not match last axis of {x.values.shape}")
    out = Tensor(x.values + b.values)

    def bwd(g):
        return g, np.sum(g, axis=tuple(range(g.ndim - 1)))

    return _emit(out, (x, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.values.dtype.type(c)
    out = Tensor(x.values * c)

    def bwd(g):
        return (g * c,)

    return _emit(out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.values))
    o = out.values

    def bwd(g):
        return (g * (1.0 - o * o),)

    return _emit(out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.values))
    o = out.values

    def bwd(g):
        # derivative 1/(2*sqrt); denominator clamped so a zero input cannot emit inf
        return (g * (0.5 / np.maximum(o, _LN_EPS)),)

    return _emit(out, (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    va, vb = a.values, b.values
    if va.ndim != 2 or vb.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {va.shape} and {vb.shape}")
    if va.shape[1] != vb.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {va.shape} and {vb.shape}")
    out = Tensor(va @ vb)

    def bwd(g):
        return g @ vb.T, va.T @ g

    return _emit(out, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (B,m,k) @ (B,k,n) -> (B,m,n)."""
    _check_dtypes("bmm", a, b)
    va, vb = a.values, b.values
    if va.ndim != 3 or vb.ndim != 3 or va.shape[0] != vb.shape[0] or va.shape[2] != vb.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {va.shape} and {vb.shape}")
    out = Tensor(np.matmul(va, vb))

    def bwd(g):
        return np.matmul(g, vb.swapaxes(-1, -2)), np.matmul(va.swapaxes(-1, -2), g)

    return _emit(out, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.values.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got {x.values.shape}")
    out = Tensor(x.values.swapaxes(-1, -2))

    def bwd(g):
        return (g.swapaxes(-1, -2),)

    return _emit(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.values.reshape(shape))
    orig = x.values.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _emit(out, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction for stability."""
    v = x.values
    m = np.max(v, axis=-1, keepdims=True)
    e = np.exp(v - m)
    s = np.sum(e, axis=-1, keepdims=True)
    out = Tensor(e / s)
    o = out.values

    def bwd(g):
        dot = np.sum(g * o, axis=-1, keepdims=True)
        return (o * (g - dot),)

    return _emit(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    _check_dtypes("layer_norm", x, gain, bias)
    v = x.values
    d = v.shape[-1]
    if gain.values.shape != (d,) or bias.values.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.values.shape} and {bias.values.shape}"
        )
    mu = np.mean(v, axis=-1, keepdims=True)
    xc = v - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    out = Tensor(xhat * gain.values + bias.values)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = np.sum(g * xhat, axis=lead)
        dbias = np.sum(g, axis=lead)
        gd = g * gain.values
        m1 = np.mean(gd, axis=-1, keepdims=True)
        m2 = np.mean(gd * xhat, axis=-1, keepdims=True)
        dx = inv * (gd - m1 - xhat * m2)
        return dx, dgain, dbias

    return _emit(out, (x, gain, bias), bwd)


def row_sum(x: Tensor) -> Tensor:
    """Sum over the last axis, keeping the axis with length 1."""
    out = Tensor(np.sum(x.values, axis=-1, keepdims=True))
    shape = x.values.shape

    def bwd(g):
        return (np.broadcast_to(g, shape) * np.ones((), dtype=g.dtype),)

    return _emit(out, (x,), bwd)


def row_logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis (keepdims), stable under large logits."""
    v = x.values
    m = np.max(v, axis=-1, keepdims=True)
    e = np.exp(v - m)
    s = np.sum(e, axis=-1, keepdims=True)
    out = Tensor(m + np.log(s))
    soft = e / s

    def bwd(g):
        return (g * soft,)

    return _emit(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.values).reshape(1, 1))
    shape, dt = x.values.shape, x.values.dtype

    def bwd(g):
        return (np.full(shape, g.reshape(()), dtype=dt),)

    return _emit(out, (x,), bwd)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a 2-D tensor by integer index; gradients scatter-add back."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.values.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.values.shape}")
    out = Tensor(table.values[ids])
    tv = table.values

    def bwd(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit(out, (table,), bwd)


def concat(parts, axis: int) -> Tensor:
    if axis not in (-1, -2):
        raise UsageError("concat supports axis -1 or -2 only")
    parts = list(parts)
    _check_dtypes("concat", *parts)
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    sizes = [p.values.shape[axis] for p in parts]

    def bwd(g):
        contribs = []
        lo = 0
        for size in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, lo + size)
            contribs.append(g[tuple(idx)])
            lo += size
        return tuple(contribs)

    return _emit(out, tuple(parts), bwd)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-2)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)


def stack_rows(parts) -> Tensor:
    return concat(parts, axis=-2)


def narrow(x: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    """Contiguous slice [lo, hi) along axis -1 or -2."""
    if axis not in (-1, -2):
        raise UsageError("narrow supports axis -1 or -2 only")
    ndim = x.values.ndim
    idx = [slice(None)] * ndim
    idx[ndim + axis] = slice(lo, hi)
    idx = tuple(idx)
    out = Tensor(x.values[idx])
    shape, dt = x.values.shape, x.values.dtype

    def bwd(g):
        gx = np.zeros(shape, dtype=dt)
        gx[idx] = g
        return (gx,)

    return _emit(out, (x,), bwd)


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    return narrow(x, -2, lo, hi)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    return narrow(x, -1, lo, hi)


def scatter_cols(x: Tensor, cols, width: int) -> Tensor:
    """Place the columns of x at positions ``cols`` of a zero tensor of given width."""
    cols = np.asarray(cols, dtype=np.int64)
    v = x.values
    if v.shape[-1] != len(cols):
        raise ShapeError(f"scatter_cols: {v.shape[-1]} columns but {len(cols)} targets")
    shape = v.shape[:-1] + (width,)
    buf = np.zeros(shape, dtype=v.dtype)
    buf[..., cols] = v
    out = Tensor(buf)

    def bwd(g):
        return (g[..., cols],)

    return _emit(out, (x,), bwd)


class AdamState:
    """Adam optimizer state: per-parameter first/second moments plus a step counter."""

    def __init__(self, params, lr: float = 0.002, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]
        self.t = 0


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    params = list(params)
    if len(params) != len(state.m):
        raise UsageError(f"adam_step: {len(params)} params but state holds {len(state.m)}")
    for p in params:
        if p.grad is None:
            raise UsageError("adam_step: parameter without a gradient slot")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad.fill(0.0)


class RngHub:
    """Named, seedable counter-based random streams (Philox).

    ``stream(name)`` always returns a fresh generator whose sequence depends
    only on (seed, name), so independent consumers get reproducible,
    non-overlapping randomness.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}/{name}".encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))


def generator_state(gen: np.random.Generator) -> dict:
    """JSON-safe snapshot of a Philox generator."""
    st = gen.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "counter": [int(x) for x in st["state"]["counter"]],
        "key": [int(x) for x in st["state"]["key"]],
        "buffer": [int(x) for x in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def generator_from_state(snap: dict) -> np.random.Generator:
    if snap["bit_generator"] != "Philox":
        raise UsageError(f"unsupported bit generator {snap['bit_generator']!r}")
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(snap["counter"], dtype=np.uint64),
            "key": np.array(snap["key"], dtype=np.uint64),
        },
        "buffer": np.array(snap["buffer"], dtype=np.uint64),
        "buffer_pos": snap["buffer_pos"],
        "has_uint32": snap["has_uint32"],
        "uinteger": snap["uinteger"],
    }
    return np.random.Generator(bg)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(size=shape) * std).astype(default_dtype())
