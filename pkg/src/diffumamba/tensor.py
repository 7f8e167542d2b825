"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

Everything downstream (convolutions, state-space scans, the noise
reduction module) is built from the primitives in this file.  Data lives
in contiguous row-major numpy buffers; the autodiff tape is the implicit
graph of parent links plus per-node backward closures, replayed in
reverse topological order by ``Tensor.backward``.

Scalars default to float32.  A float64 mode (``set_default_dtype``)
exists for tight finite-difference testing.  Any op that produces a
NaN/Inf from finite inputs raises ``NumericError`` immediately instead
of letting the poison propagate.
"""

from __future__ import annotations

import hashlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN/Inf, or a numeric invariant was violated."""


class GradError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar root, double backward, ...)."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
# Testing hook: when not None, matmul input adjoints are scaled by this
# factor, which makes every downstream gradient check fail on purpose.
_GRAD_FAULT = None


def set_default_dtype(dtype):
    """Select the scalar type for newly created tensors ('f32'/'f64')."""
    global _DEFAULT_DTYPE
    if dtype in ("f32", "float32", np.float32):
        _DEFAULT_DTYPE = np.float32
    elif dtype in ("f64", "float64", np.float64):
        _DEFAULT_DTYPE = np.float64
    else:
        raise ValueError(f"unsupported default dtype: {dtype!r}")


def default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def set_gradient_fault(scale):
    """Testing hook: corrupt matmul adjoints by ``scale`` (None to clear)."""
    global _GRAD_FAULT
    _GRAD_FAULT = scale


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy-backed value that optionally participates in the grad tape.

    ``data`` is always a contiguous row-major ndarray.  ``grad`` is
    lazily allocated during ``backward`` and has the same shape as
    ``data``.  Tensors are immutable after construction as far as the
    tape is concerned; optimizers mutate ``data`` in place between
    forward passes, never mid-graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_backward_ran")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d to (1,); keep rank
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._backward_ran = False

    # ------------------------------------------------------------------
    # basic introspection

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # tape plumbing

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every reachable tensor in the graph.

        The root must be a scalar produced under an active tape.  Each
        node's closure runs exactly once, in reverse topological order.
        Calling backward twice on the same root is an error.
        """
        if self.shape != ():
            raise GradError(f"backward root must be scalar, got shape {self.shape}")
        if self._backward_fn is None and not self._parents:
            raise GradError("backward called on a detached tensor (no tape)")
        if self._backward_ran:
            raise GradError("backward already ran for this root; rebuild the graph")
        self._backward_ran = True

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # ------------------------------------------------------------------
    # operator sugar

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, p):
        return pow_scalar(self, p)

    # method aliases for the functional API
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)

    def matmul(self, other):
        return matmul(self, _wrap(other))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    """Iterative DFS post-order over parent links; inputs precede users."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def make_op(data, parents, op, backward):
    """Construct a graph node for a custom primitive.

    ``backward`` receives the output adjoint (ndarray) and must
    accumulate into the parents via ``Tensor._accumulate``.  Used by the
    NN layers for ops (conv, pooling) whose adjoints are hand-written.
    """
    _check_finite(data, op)
    data = np.asarray(data)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(data)
    out.grad = None
    out._op = op
    out._backward_ran = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _binary_shapes_ok(a, b):
    # numpy trailing-dims broadcast rule; surface a named error on failure
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes_ok(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_op(out_data, (a, b), "add", backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes_ok(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_op(out_data, (a, b), "sub", backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes_ok(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_op(out_data, (a, b), "mul", backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes_ok(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_op(out_data, (a, b), "div", backward)


def neg(a):
    def backward(g):
        a._accumulate(-g)

    return make_op(-a.data, (a,), "neg", backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return make_op(out_data, (a,), "exp", backward)


def log(a):
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return make_op(out_data, (a,), "log", backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return make_op(out_data, (a,), "sqrt", backward)


def pow_scalar(a, p):
    p = float(p)
    out_data = a.data ** p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return make_op(out_data, (a,), "pow", backward)


def sigmoid(a):
    # stable: exponentiate only negative magnitudes
    z = np.exp(-np.abs(a.data))
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return make_op(out_data, (a,), "sigmoid", backward)


def softplus(a):
    out_data = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)
    sig = None

    def backward(g):
        nonlocal sig
        if sig is None:
            z = np.exp(-np.abs(a.data))
            sig = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        a._accumulate(g * sig)

    return make_op(out_data, (a,), "softplus", backward)


def where(mask, a, b):
    """Select ``a`` where ``mask`` (plain bool array) is true, else ``b``.

    The mask itself carries no gradient; adjoints route to the selected
    branch only, so a NaN-producing untaken branch must be masked by the
    caller before this op (see the ZOH fallback in ``ssm``).
    """
    a, b = _wrap(a), _wrap(b)
    mask = np.asarray(mask, dtype=bool)
    out_data = np.where(mask, a.data, b.data)

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return make_op(out_data, (a, b), "where", backward)


# ----------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            gg = g.reshape(shape)
        a._accumulate(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

    return make_op(out_data, (a,), "sum", backward)


def tmean(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ----------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    n_new = int(np.prod(shape)) if shape else 1
    if n_new != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elems) to {shape}")
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return make_op(out_data, (a,), "reshape", backward)


def permute(a, axes):
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank-{a.ndim} tensor")
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return make_op(out_data, (a,), "permute", backward)


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis``."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range "
                         f"for axis {axis} of shape {a.shape}")
    idx = (slice(None),) * axis + (slice(start, start + length),)
    out_data = np.ascontiguousarray(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)

    return make_op(out_data, (a,), "narrow", backward)


def pad(a, pads):
    """Zero-pad; ``pads`` is a per-axis sequence of (before, after)."""
    pads = tuple((int(lo), int(hi)) for lo, hi in pads)
    if len(pads) != a.ndim:
        raise ShapeError(f"pad spec rank {len(pads)} != tensor rank {a.ndim}")
    out_data = np.pad(a.data, pads)
    idx = tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, a.shape))

    def backward(g):
        a._accumulate(g[idx])

    return make_op(out_data, (a,), "pad", backward)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    axis = axis % tensors[0].ndim
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                idx = (slice(None),) * axis + (slice(lo, hi),)
                t._accumulate(g[idx])

    return make_op(out_data, tuple(tensors), "concat", backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if _GRAD_FAULT is not None:
            g = g * _GRAD_FAULT
        if a.requires_grad or a._parents:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._parents:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return make_op(out_data, (a, b), "matmul", backward)


def log_softmax(a, axis):
    """Numerically stable log-softmax along ``axis``."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax requires finite inputs")
    shift = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=axis, keepdims=True))
    out_data = shift - lse

    def backward(g):
        p = np.exp(out_data)
        a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return make_op(out_data, (a,), "log_softmax", backward)


# ----------------------------------------------------------------------
# constructors


def zeros(shape, requires_grad=False, dtype=None):
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE),
                  requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=None):
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE),
                  requires_grad=requires_grad)


def full(shape, value, requires_grad=False, dtype=None):
    return Tensor(np.full(shape, value, dtype=dtype or _DEFAULT_DTYPE),
                  requires_grad=requires_grad)


# ----------------------------------------------------------------------
# random numbers


def _stable_tag(tag) -> int:
    """Deterministic 64-bit integer from a str/int tag (hash() is salted)."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) & (2 ** 63 - 1)
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


class Rng:
    """Named, seedable counter-based generator (Philox) owned per run.

    No global state: every consumer receives an ``Rng`` or spawns a
    child stream with ``derive``; identical (seed, tag path) pairs give
    identical streams across threads and platforms.
    """

    def __init__(self, seed, name="run", _ss=None):
        self.seed = int(seed)
        self.name = str(name)
        self._ss = _ss if _ss is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._ss))

    def derive(self, tag) -> "Rng":
        """Independent child stream keyed by a stable tag."""
        child = np.random.SeedSequence(entropy=self._ss.entropy,
                                       spawn_key=self._ss.spawn_key + (_stable_tag(tag),))
        return Rng(self.seed, name=f"{self.name}/{tag}", _ss=child)

    def normal(self, shape=(), std=1.0, mean=0.0, dtype=None):
        arr = self._gen.normal(mean, std, size=shape)
        return np.asarray(arr, dtype=dtype or _DEFAULT_DTYPE)

    def uniform(self, low, high, shape=(), dtype=None):
        arr = self._gen.uniform(low, high, size=shape)
        return np.asarray(arr, dtype=dtype or _DEFAULT_DTYPE)

    def integers(self, low, high, shape=()):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, shape=()):
        return self._gen.random(size=shape)

    def state(self) -> dict:
        """JSON-serializable bit-generator state (for checkpoints)."""
        st = self._gen.bit_generator.state
        return {
            "name": self.name,
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, payload: dict):
        st = self._gen.bit_generator.state
        st["state"]["counter"] = np.array(payload["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(payload["key"], dtype=np.uint64)
        st["buffer"] = np.array(payload["buffer"], dtype=np.uint64)
        st["buffer_pos"] = payload["buffer_pos"]
        st["has_uint32"] = payload["has_uint32"]
        st["uinteger"] = payload["uinteger"]
        self._gen.bit_generator.state = st
        self.name = payload.get("name", self.name)
        self.seed = payload.get("seed", self.seed)
