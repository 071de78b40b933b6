"""Dense float32 tensors with a reverse-mode tape over a small closed primitive set.

The primitive set is exactly what the denoiser and memory modules need:
add, mul, matmul, concat, split, transpose, softmax (last axis), layernorm
(last axis), gelu, mean_square, scale, plus three plumbing primitives
(permute for fixed element rearrangements, elu1 and recip for the
linear-attention baseline). Reductions accumulate in float64; the
finite-difference oracle promotes the perturbed input to float64 so the
reference gradient has headroom over the float32 forward path.

Recording happens only inside an active ``tape()`` context, so inference
code pays no tape overhead. Within a context, any primitive whose inputs
include a ``requires_grad`` tensor appends a node; ``backward`` walks the
tape in reverse.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf


class ShapeMismatchError(ValueError):
    """Raised when primitive inputs have incompatible shapes."""


class UnknownPrimitiveError(ValueError):
    """Raised for a primitive kind that is not registered."""


class Tensor:
    """Dense n-d array, row-major float32, optionally attached to a tape.

    ``node_id`` is ``(tape, index)`` for tensors produced by a recorded
    primitive, else None. Tensors are value-immutable by convention; the
    optimizer swaps ``.data`` between steps when no tape is active.
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self):
        """Value-identical tensor with no tape history and no grad flag."""
        return Tensor(self.data.copy(), requires_grad=False, dtype=None)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Append-only record of primitive applications, in topological order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("kind", "inputs", "output", "attrs", "ctx")

    def __init__(self, kind, inputs, output, attrs, ctx):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.attrs = attrs
        self.ctx = ctx


_ACTIVE_TAPE = None

# Observers receive (kind, input_shapes, output_shape, attrs) for every
# primitive application; used by the analytic FLOP counter.
_OBSERVERS = []
_OBSERVERS_SUSPENDED = 0


@contextmanager
def tape():
    """Record primitives applied to requires_grad tensors inside the block."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    t = Tape()
    _ACTIVE_TAPE = t
    try:
        yield t
    finally:
        _ACTIVE_TAPE = prev


@contextmanager
def observe(callback):
    _OBSERVERS.append(callback)
    try:
        yield
    finally:
        _OBSERVERS.remove(callback)


@contextmanager
def observers_suspended():
    """Temporarily mute observers (e.g. one-time setup outside per-frame cost)."""
    global _OBSERVERS_SUSPENDED
    _OBSERVERS_SUSPENDED += 1
    try:
        yield
    finally:
        _OBSERVERS_SUSPENDED -= 1


def _notify(kind, in_shapes, out_shape, attrs):
    if _OBSERVERS and not _OBSERVERS_SUSPENDED:
        for cb in _OBSERVERS:
            cb(kind, in_shapes, out_shape, attrs)


def _unbroadcast(g, shape):
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _require(cond, kind, msg):
    if not cond:
        raise ShapeMismatchError(f"{kind}: {msg}")


# ---------------------------------------------------------------------------
# Primitive definitions. forward: (arrays, attrs) -> (out_array, ctx).
# backward: (g, arrays, out_array, ctx, attrs) -> per-input gradients.
# ---------------------------------------------------------------------------

def _fw_add(xs, attrs):
    a, b = xs
    try:
        out = a + b
    except ValueError:
        raise ShapeMismatchError(f"add: cannot broadcast {a.shape} with {b.shape}")
    return out, None


def _bw_add(g, xs, out, ctx, attrs):
    a, b = xs
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _fw_mul(xs, attrs):
    a, b = xs
    try:
        out = a * b
    except ValueError:
        raise ShapeMismatchError(f"mul: cannot broadcast {a.shape} with {b.shape}")
    return out, None


def _bw_mul(g, xs, out, ctx, attrs):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _fw_matmul(xs, attrs):
    a, b = xs
    _require(a.ndim == 2 and b.ndim == 2, "matmul", f"expects 2-d operands, got {a.shape} @ {b.shape}")
    _require(a.shape[1] == b.shape[0], "matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    return a @ b, None


def _bw_matmul(g, xs, out, ctx, attrs):
    a, b = xs
    return [g @ b.T, a.T @ g]


def _fw_concat(xs, attrs):
    axis = attrs["axis"]
    base = list(xs[0].shape)
    for x in xs[1:]:
        s = list(x.shape)
        s[axis] = base[axis]
        _require(s == base, "concat", f"shapes {[x.shape for x in xs]} differ off axis {axis}")
    return np.concatenate(xs, axis=axis), None


def _bw_concat(g, xs, out, ctx, attrs):
    axis = attrs["axis"]
    sizes = [x.shape[axis] for x in xs]
    offs = np.cumsum([0] + sizes)
    idx = [slice(None)] * g.ndim
    grads = []
    for i in range(len(xs)):
        idx[axis] = slice(offs[i], offs[i + 1])
        grads.append(g[tuple(idx)])
    return grads


def _fw_split(xs, attrs):
    (x,) = xs
    axis, sizes, index = attrs["axis"], attrs["sizes"], attrs["index"]
    _require(sum(sizes) == x.shape[axis], "split",
             f"sizes {sizes} do not sum to axis length {x.shape[axis]}")
    _require(0 <= index < len(sizes), "split", f"piece index {index} out of range")
    start = int(np.sum(sizes[:index]))
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + sizes[index])
    # view, not copy: tensors are value-immutable by convention
    return x[tuple(sl)], start


def _bw_split(g, xs, out, ctx, attrs):
    (x,) = xs
    axis, sizes, index = attrs["axis"], attrs["sizes"], attrs["index"]
    start = ctx
    gx = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + sizes[index])
    gx[tuple(sl)] = g
    return [gx]


def _fw_transpose(xs, attrs):
    (x,) = xs
    _require(x.ndim == 2, "transpose", f"expects a matrix, got shape {x.shape}")
    return x.T, None


def _bw_transpose(g, xs, out, ctx, attrs):
    return [g.T]


def _fw_softmax(xs, attrs):
    (x,) = xs
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    return (e / denom).astype(x.dtype), None


def _bw_softmax(g, xs, out, ctx, attrs):
    dot = (g * out).sum(axis=-1, keepdims=True)
    return [out * (g - dot)]


def _fw_layernorm(xs, attrs):
    (x,) = xs
    eps = attrs.get("eps", 1e-5)
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.square(x.astype(np.float64) - mu).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x - mu) * inv).astype(x.dtype)
    return xhat, inv.astype(x.dtype)


def _bw_layernorm(g, xs, out, ctx, attrs):
    inv = ctx
    n = out.shape[-1]
    gm = g.mean(axis=-1, keepdims=True)
    gxm = (g * out).mean(axis=-1, keepdims=True)
    return [inv * (g - gm - out * gxm)]


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _fw_gelu(xs, attrs):
    (x,) = xs
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return (x * cdf).astype(x.dtype), cdf.astype(x.dtype)


def _bw_gelu(g, xs, out, ctx, attrs):
    (x,) = xs
    cdf = ctx
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * np.square(x.astype(np.float64)))
    return [g * (cdf + x * pdf.astype(x.dtype))]


def _fw_mean_square(xs, attrs):
    (x,) = xs
    val = np.mean(np.square(x, dtype=np.float64))
    return np.asarray(val, dtype=x.dtype), None


def _bw_mean_square(g, xs, out, ctx, attrs):
    (x,) = xs
    return [(2.0 / x.size) * x * g]


def _fw_scale(xs, attrs):
    (x,) = xs
    return x * x.dtype.type(attrs["value"]), None


def _bw_scale(g, xs, out, ctx, attrs):
    x = xs[0]
    return [g * x.dtype.type(attrs["value"])]


def _fw_permute(xs, attrs):
    (x,) = xs
    idx = attrs["index"]
    out_shape = attrs["out_shape"]
    _require(x.size == idx.size == int(np.prod(out_shape)), "permute",
             f"index size {idx.size} incompatible with input {x.shape} -> {out_shape}")
    return x.reshape(-1)[idx].reshape(out_shape).copy(), None


def _bw_permute(g, xs, out, ctx, attrs):
    (x,) = xs
    idx = attrs["index"]
    gx = np.empty(x.size, dtype=g.dtype)
    gx[idx] = g.reshape(-1)
    return [gx.reshape(x.shape)]


def _fw_elu1(xs, attrs):
    (x,) = xs
    pos = x > 0
    out = np.where(pos, x + 1.0, np.exp(np.minimum(x, 0.0))).astype(x.dtype)
    return out, pos


def _bw_elu1(g, xs, out, ctx, attrs):
    pos = ctx
    # elu(x)+1 has derivative 1 for x>0 and exp(x) (== out) for x<=0
    return [g * np.where(pos, np.ones_like(out), out)]


def _fw_recip(xs, attrs):
    (x,) = xs
    return (1.0 / x).astype(x.dtype), None


def _bw_recip(g, xs, out, ctx, attrs):
    return [-g * out * out]


_PRIMITIVES = {
    "add": (_fw_add, _bw_add),
    "mul": (_fw_mul, _bw_mul),
    "matmul": (_fw_matmul, _bw_matmul),
    "concat": (_fw_concat, _bw_concat),
    "split": (_fw_split, _bw_split),
    "transpose": (_fw_transpose, _bw_transpose),
    "softmax": (_fw_softmax, _bw_softmax),
    "layernorm": (_fw_layernorm, _bw_layernorm),
    "gelu": (_fw_gelu, _bw_gelu),
    "mean_square": (_fw_mean_square, _bw_mean_square),
    "scale": (_fw_scale, _bw_scale),
    "permute": (_fw_permute, _bw_permute),
    "elu1": (_fw_elu1, _bw_elu1),
    "recip": (_fw_recip, _bw_recip),
}


def primitive_kinds():
    return tuple(_PRIMITIVES)


def apply_primitive(kind, inputs, attrs=None):
    """Run one primitive; record a tape node if recording and grads are wanted."""
    if kind not in _PRIMITIVES:
        raise UnknownPrimitiveError(f"unknown primitive {kind!r}")
    fw, _ = _PRIMITIVES[kind]
    attrs = attrs or {}
    arrays = [t.data for t in inputs]
    out_arr, ctx = fw(arrays, attrs)
    _notify(kind, [a.shape for a in arrays], out_arr.shape, attrs)
    out = Tensor(out_arr, dtype=None)
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.nodes.append(_Node(kind, tuple(inputs), out, attrs, ctx))
        out.node_id = (_ACTIVE_TAPE, len(_ACTIVE_TAPE.nodes) - 1)
    return out


class NonScalarLossError(ValueError):
    pass


class DetachedLossError(ValueError):
    pass


def backward(loss, params=None):
    """Reverse sweep from a recorded scalar; returns {tensor: gradient tensor}.

    Leaves that never reached the loss get zero gradients when listed in
    ``params``. The tape itself is left untouched.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.node_id is None:
        raise DetachedLossError("loss is not on any tape")
    tp, last = loss.node_id
    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    for node in reversed(tp.nodes[: last + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        _, bw = _PRIMITIVES[node.kind]
        in_grads = bw(g, [t.data for t in node.inputs], node.output.data, node.ctx, node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = t
    result = {}
    for key, g in grads.items():
        t = tensors[key]
        if t.node_id is None:  # leaf
            result[t] = Tensor(g, dtype=None)
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = Tensor(np.zeros_like(p.data), dtype=None)
    return result


def finite_difference_grad(f, x, eps=1e-3):
    """Central-difference gradient of scalar ``f`` at ``x``, per coordinate.

    Evaluates f on float64 copies of x so the perturbed path promotes to
    double precision; the float32 parameters inside ``f`` act as exact
    constants. Returns a float32 tensor shaped like x.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.astype(np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base.copy(), dtype=None)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(base.copy(), dtype=None)).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad.astype(np.float32), dtype=None)


def gradient_check(f, x, eps=1e-3, rtol=1e-3, atol=1e-5):
    """Compare reverse-mode and finite-difference gradients of scalar f at x.

    Returns (ok, max_rel_err). The tolerance is |ad - fd| <= atol + rtol*|fd|
    per coordinate; atol guards coordinates whose true gradient is zero.
    """
    xt = Tensor(x.data.copy(), requires_grad=True, dtype=None)
    with tape():
        loss = f(xt)
        ad = backward(loss)[xt].data
    fd = finite_difference_grad(f, xt, eps=eps).data
    err = np.abs(ad - fd)
    bound = atol + rtol * np.abs(fd)
    ok = bool(np.all(err <= bound))
    denom = np.maximum(np.abs(fd), atol)
    return ok, float(np.max(err / denom))


# ---------------------------------------------------------------------------
# Functional sugar over apply_primitive
# ---------------------------------------------------------------------------

def add(a, b):
    return apply_primitive("add", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def concat(tensors, axis=0):
    return apply_primitive("concat", list(tensors), {"axis": axis})


def split(x, sizes, axis=0):
    """All pieces of x split along ``axis`` into the given sizes."""
    sizes = list(sizes)
    return [apply_primitive("split", [x], {"axis": axis, "sizes": sizes, "index": i})
            for i in range(len(sizes))]


def transpose(x):
    return apply_primitive("transpose", [x])


def softmax(x):
    return apply_primitive("softmax", [x])


def layernorm(x, eps=1e-5):
    return apply_primitive("layernorm", [x], {"eps": eps})


def gelu(x):
    return apply_primitive("gelu", [x])


def mean_square(x):
    return apply_primitive("mean_square", [x])


def scale(x, value):
    return apply_primitive("scale", [x], {"value": float(value)})


def permute(x, index, out_shape):
    return apply_primitive("permute", [x], {"index": index, "out_shape": tuple(out_shape)})


def elu1(x):
    return apply_primitive("elu1", [x])


def recip(x):
    return apply_primitive("recip", [x])


def sub(a, b):
    return add(a, scale(b, -1.0))


def reshape(x, shape):
    idx = np.arange(x.data.size)
    return permute(x, idx, shape)
