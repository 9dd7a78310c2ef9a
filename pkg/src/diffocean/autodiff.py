"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every primitive accepts either :class:`Node` operands (recorded on their
tape) or plain arrays/scalars. When no operand is a ``Node`` the primitive
just returns the numpy result, so the same model code runs untaped for
data generation and rollouts.

Example::

    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0, 3.0]))
    y = ad.sum(x * x)
    grads = tape.backward(y)
    grads[x.id]          # array([2., 4., 6.])
"""
from __future__ import annotations

import numbers

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


class Node:
    """A value recorded on a :class:`Tape`.

    ``parents`` holds ``(parent, vjp)`` pairs, where ``vjp`` maps the
    output cotangent to the parent's cotangent contribution.
    """

    __slots__ = ("id", "value", "parents", "requires_grad", "trainable", "tape", "name")
    # let numpy hand mixed expressions (array * node) to Node's operators
    __array_ufunc__ = None

    def __init__(self, tape, id_, value, parents, requires_grad, trainable=False, name=None):
        self.tape = tape
        self.id = id_
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node(id={self.id}{tag}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Append-only record of a forward evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, trainable=True, name=None) -> Node:
        """Register an input. Only ``trainable`` leaves receive gradients."""
        arr = np.array(value, dtype=DTYPE)
        node = Node(self, len(self.nodes), arr, (), trainable, trainable, name)
        self.nodes.append(node)
        return node

    def _record(self, value, parents) -> Node:
        live = tuple(p for p in parents if p[0].requires_grad)
        node = Node(self, len(self.nodes), value, live, bool(live))
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> dict[int, np.ndarray]:
        """Gradients of the scalar ``root`` w.r.t. every trainable leaf.

        Nodes are visited in strictly decreasing id order. Trainable leaves
        that ``root`` does not depend on get zero gradients.
        """
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.size != 1:
            raise ShapeError("backward", root.value.shape, detail="root must be scalar")
        grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
        nodes = self.nodes
        for i in range(root.id, -1, -1):
            node = nodes[i]
            g = grads.get(i)
            if g is None or not node.parents:
                continue
            if not node.trainable:
                del grads[i]
            for parent, vjp in node.parents:
                contrib = vjp(g)
                prev = grads.get(parent.id)
                grads[parent.id] = contrib if prev is None else prev + contrib
        out = {}
        for node in nodes:
            if node.trainable:
                g = grads.get(node.id)
                out[node.id] = np.zeros_like(node.value) if g is None else g
        return out


def value(x):
    """Underlying numpy value of a Node, array, or scalar."""
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(name, a, b):
    sa, sb = np.shape(a), np.shape(b)
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(name, sa, sb) from None


def _edges(tape, pairs):
    return [(x, fn) for x, fn in pairs if isinstance(x, Node)]


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    va, vb = value(a), value(b)
    _broadcast_check("add", va, vb)
    out = va + vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return tape._record(out, _edges(tape, [
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: _unbroadcast(g, sb)),
    ]))


def sub(a, b):
    va, vb = value(a), value(b)
    _broadcast_check("subtract", va, vb)
    out = va - vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return tape._record(out, _edges(tape, [
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: _unbroadcast(-g, sb)),
    ]))


def mul(a, b):
    va, vb = value(a), value(b)
    _broadcast_check("multiply", va, vb)
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return tape._record(out, _edges(tape, [
        (a, lambda g: _unbroadcast(g * vb, sa)),
        (b, lambda g: _unbroadcast(g * va, sb)),
    ]))


def scale(a, c):
    """Multiply by a Python/numpy scalar constant."""
    if not isinstance(c, numbers.Real):
        raise TypeError("scale expects a real scalar")
    c = float(c)
    out = value(a) * c
    if not isinstance(a, Node):
        return out
    return a.tape._record(out, [(a, lambda g: g * c)])


def square(a):
    va = value(a)
    out = va * va
    if not isinstance(a, Node):
        return out
    return a.tape._record(out, [(a, lambda g: 2.0 * va * g)])


def softplus(a):
    """log(1 + exp(a)), evaluated stably."""
    va = value(a)
    out = np.logaddexp(0.0, va)
    if not isinstance(a, Node):
        return out
    sig = _sigmoid(va)
    return a.tape._record(out, [(a, lambda g: g * sig)])


def _sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.exp(-np.logaddexp(0.0, -x))


def inverse_softplus(y):
    """Inverse of :func:`softplus` for y > 0 (plain numpy)."""
    y = np.asarray(y, dtype=DTYPE)
    if np.any(y <= 0):
        raise ValueError("inverse_softplus requires strictly positive input")
    return y + np.log(-np.expm1(-y))


def relu(a):
    va = value(a)
    out = np.maximum(va, 0.0)
    if not isinstance(a, Node):
        return out
    on = va > 0
    return a.tape._record(out, [(a, lambda g: g * on)])


def silu(a):
    """x * sigmoid(x): a smooth stand-in for ReLU with no kink."""
    va = value(a)
    sig = _sigmoid(va)
    out = va * sig
    if not isinstance(a, Node):
        return out
    local = sig * (1.0 + va * (1.0 - sig))
    return a.tape._record(out, [(a, lambda g: g * local)])


def softmax(a, axis=-1):
    va = value(a)
    shifted = va - va.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    if not isinstance(a, Node):
        return s

    def vjp(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return a.tape._record(s, [(a, vjp)])


def where(cond, a, b):
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    va, vb = value(a), value(b)
    try:
        shape = np.broadcast_shapes(cond.shape, np.shape(va), np.shape(vb))
    except ValueError:
        raise ShapeError("where", cond.shape, np.shape(va), np.shape(vb)) from None
    out = np.where(cond, va, vb)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    cond_b = np.broadcast_to(cond, shape)
    return tape._record(out, _edges(tape, [
        (a, lambda g: _unbroadcast(np.where(cond_b, g, 0.0), sa)),
        (b, lambda g: _unbroadcast(np.where(cond_b, 0.0, g), sb)),
    ]))


def masked_fill(a, fill_mask, fill_value=0.0):
    """Replace entries where ``fill_mask`` is true by a constant."""
    return where(fill_mask, float(fill_value), a)


# -- reductions --------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    va = value(a)
    out = np.sum(va, axis=axis, keepdims=keepdims)
    if not isinstance(a, Node):
        return out
    shape = va.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return a.tape._record(np.asarray(out, dtype=DTYPE), [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    va = value(a)
    if axis is None:
        n = va.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([va.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra and shape manipulation -----------------------------------

def matmul(a, b):
    va, vb = value(a), value(b)
    if va.ndim < 2 or vb.ndim < 2 or va.shape[-1] != vb.shape[-2]:
        raise ShapeError("matmul", va.shape, vb.shape)
    try:
        np.broadcast_shapes(va.shape[:-2], vb.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", va.shape, vb.shape, detail="batch dims") from None
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = va.shape, vb.shape
    return tape._record(out, _edges(tape, [
        (a, lambda g: _unbroadcast(g @ np.swapaxes(vb, -1, -2), sa)),
        (b, lambda g: _unbroadcast(np.swapaxes(va, -1, -2) @ g, sb)),
    ]))


def concat(xs, axis=0):
    vals = [value(x) for x in xs]
    ref = vals[0]
    ax = axis % ref.ndim
    for v in vals[1:]:
        if v.ndim != ref.ndim or any(
            v.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError("concat", ref.shape, v.shape, detail=f"axis={axis}")
    out = np.concatenate(vals, axis=ax)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])
    pairs = []
    for k, x in enumerate(xs):
        lo, hi = int(bounds[k]), int(bounds[k + 1])
        sl = (slice(None),) * ax + (slice(lo, hi),)
        pairs.append((x, lambda g, sl=sl: g[sl]))
    return tape._record(out, _edges(tape, pairs))


def getitem(a, idx):
    """Basic (slice/integer) indexing."""
    va = value(a)
    out = va[idx]
    if not isinstance(a, Node):
        return out
    shape = va.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] += g
        return full

    return a.tape._record(np.array(out, dtype=DTYPE), [(a, vjp)])


def take(a, indices, axis):
    """Gather along ``axis``; repeated indices accumulate in the adjoint."""
    indices = np.asarray(indices, dtype=np.intp)
    va = value(a)
    out = np.take(va, indices, axis=axis)
    if not isinstance(a, Node):
        return out
    shape = va.shape
    ax = axis % va.ndim

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return full

    return a.tape._record(out, [(a, vjp)])


def reshape(a, shape):
    va = value(a)
    try:
        out = va.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", va.shape, tuple(shape)) from None
    if not isinstance(a, Node):
        return out
    orig = va.shape
    return a.tape._record(out, [(a, lambda g: g.reshape(orig))])


def transpose(a, axes):
    va = value(a)
    out = np.transpose(va, axes)
    if not isinstance(a, Node):
        return out
    inv = np.argsort(axes)
    return a.tape._record(out, [(a, lambda g: np.transpose(g, inv))])


# -- padding and stencils ----------------------------------------------------

def _axis_slice(ndim, axis, sl):
    return (slice(None),) * (axis % ndim) + (sl,)


def pad_periodic(a, axis, width=1):
    """Wrap-around padding of ``width`` cells on both sides of ``axis``."""
    va = value(a)
    n = va.shape[axis]
    if width > n:
        raise ShapeError("pad_periodic", va.shape, detail=f"width {width} > axis length {n}")
    nd = va.ndim
    left = va[_axis_slice(nd, axis, slice(n - width, n))]
    right = va[_axis_slice(nd, axis, slice(0, width))]
    out = np.concatenate([left, va, right], axis=axis)
    if not isinstance(a, Node):
        return out

    def vjp(g):
        core = g[_axis_slice(nd, axis, slice(width, width + n))].copy()
        core[_axis_slice(nd, axis, slice(n - width, n))] += g[_axis_slice(nd, axis, slice(0, width))]
        core[_axis_slice(nd, axis, slice(0, width))] += g[_axis_slice(nd, axis, slice(width + n, None))]
        return core

    return a.tape._record(out, [(a, vjp)])


def pad_replicate(a, axis, width=1):
    """Edge-value padding of ``width`` cells on both sides of ``axis``."""
    va = value(a)
    n = va.shape[axis]
    nd = va.ndim
    first = va[_axis_slice(nd, axis, slice(0, 1))]
    last = va[_axis_slice(nd, axis, slice(n - 1, n))]
    reps = [1] * nd
    reps[axis % nd] = width
    out = np.concatenate([np.tile(first, reps), va, np.tile(last, reps)], axis=axis)
    if not isinstance(a, Node):
        return out

    def vjp(g):
        core = g[_axis_slice(nd, axis, slice(width, width + n))].copy()
        core[_axis_slice(nd, axis, slice(0, 1))] += g[_axis_slice(nd, axis, slice(0, width))].sum(
            axis=axis, keepdims=True)
        core[_axis_slice(nd, axis, slice(n - 1, n))] += g[_axis_slice(nd, axis, slice(width + n, None))].sum(
            axis=axis, keepdims=True)
        return core

    return a.tape._record(out, [(a, vjp)])


def correlate(a, kernel):
    """Valid-mode 2-D correlation of the last two axes with a fixed kernel.

    ``out[..., i, j] = sum_{p,q} kernel[p, q] * a[..., i + p, j + q]``,
    accumulated tap by tap in row-major order, zero taps skipped. The
    adjoint is the correlation with the flipped kernel.
    """
    kernel = np.asarray(kernel, dtype=DTYPE)
    if kernel.ndim != 2:
        raise ShapeError("correlate", kernel.shape, detail="kernel must be 2-D")
    va = value(a)
    kh, kw = kernel.shape
    if va.ndim < 2 or va.shape[-2] < kh or va.shape[-1] < kw:
        raise ShapeError("correlate", va.shape, kernel.shape)
    ho, wo = va.shape[-2] - kh + 1, va.shape[-1] - kw + 1
    taps = [(p, q, float(kernel[p, q])) for p in range(kh) for q in range(kw) if kernel[p, q] != 0.0]
    out = None
    for p, q, k in taps:
        term = k * va[..., p:p + ho, q:q + wo]
        out = term if out is None else out + term
    if out is None:
        out = np.zeros(va.shape[:-2] + (ho, wo), dtype=DTYPE)
    if not isinstance(a, Node):
        return out
    shape = va.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        for p, q, k in taps:
            full[..., p:p + ho, q:q + wo] += k * g
        return full

    return a.tape._record(out, [(a, vjp)])


# -- learnable convolutions --------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of (B, Ci, H, W) with weights (Co, Ci, k, k).

    Zero padding on both spatial axes; optional bias of shape (Co,).
    """
    vx, vw = value(x), value(w)
    if vx.ndim != 4 or vw.ndim != 4 or vx.shape[1] != vw.shape[1] or vw.shape[2] != vw.shape[3]:
        raise ShapeError("conv2d", vx.shape, vw.shape)
    k = vw.shape[2]
    xp = np.pad(vx, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else vx
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", vx.shape, vw.shape, detail="kernel larger than input")
    out = np.zeros((vx.shape[0], vw.shape[0], ho, wo), dtype=DTYPE)
    windows = []
    for p in range(k):
        for q in range(k):
            win = xp[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride]
            windows.append((p, q, win))
            out += np.einsum("oc,bchw->bohw", vw[:, :, p, q], win)
    vb = None
    if b is not None:
        vb = value(b)
        if vb.shape != (vw.shape[0],):
            raise ShapeError("conv2d", vw.shape, vb.shape, detail="bias")
        out += vb[None, :, None, None]
    tape = _tape_of(x, w, b)
    if tape is None:
        return out

    def vjp_x(g):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for p, q, _ in windows:
            gxp[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += np.einsum(
                "oc,bohw->bchw", vw[:, :, p, q], g)
        if padding:
            return gxp[:, :, padding:hp - padding, padding:wp - padding]
        return gxp

    def vjp_w(g):
        gw = np.zeros(vw.shape, dtype=DTYPE)
        for p, q, win in windows:
            gw[:, :, p, q] = np.einsum("bohw,bchw->oc", g, win)
        return gw

    pairs = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        pairs.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return tape._record(out, _edges(tape, pairs))


def upsample_conv2d(x, w, b=None):
    """Stride-2 transposed convolution with a 2x2 kernel.

    ``x`` is (B, Ci, H, W), ``w`` is (Ci, Co, 2, 2); the output is
    (B, Co, 2H, 2W) and every input cell writes its own 2x2 block.
    """
    vx, vw = value(x), value(w)
    if vx.ndim != 4 or vw.ndim != 4 or vx.shape[1] != vw.shape[0] or vw.shape[2:] != (2, 2):
        raise ShapeError("upsample_conv2d", vx.shape, vw.shape)
    bsz, _, h, wd = vx.shape
    co = vw.shape[1]
    out = np.empty((bsz, co, 2 * h, 2 * wd), dtype=DTYPE)
    for p in range(2):
        for q in range(2):
            out[:, :, p::2, q::2] = np.einsum("co,bchw->bohw", vw[:, :, p, q], vx)
    if b is not None:
        vb = value(b)
        if vb.shape != (co,):
            raise ShapeError("upsample_conv2d", vw.shape, vb.shape, detail="bias")
        out += vb[None, :, None, None]
    tape = _tape_of(x, w, b)
    if tape is None:
        return out

    def vjp_x(g):
        gx = np.zeros(vx.shape, dtype=DTYPE)
        for p in range(2):
            for q in range(2):
                gx += np.einsum("co,bohw->bchw", vw[:, :, p, q], g[:, :, p::2, q::2])
        return gx

    def vjp_w(g):
        gw = np.zeros(vw.shape, dtype=DTYPE)
        for p in range(2):
            for q in range(2):
                gw[:, :, p, q] = np.einsum("bohw,bchw->co", g[:, :, p::2, q::2], vx)
        return gw

    pairs = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        pairs.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return tape._record(out, _edges(tape, pairs))


def is_finite(x) -> bool:
    return bool(np.all(np.isfinite(value(x))))
