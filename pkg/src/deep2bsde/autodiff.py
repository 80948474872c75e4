"""Dense-tensor engine with reverse-mode automatic differentiation.

Everything is 64-bit floating point.  A ``Tape`` records primitive
applications in topological (creation) order; one ``Tape.backward`` pass
per scalar loss populates gradients for every recorded node.  Primitives
accept plain ``numpy`` arrays alongside ``Tensor`` operands: if no operand
is recorded on a tape, the plain numpy result is returned, so the same
expression code serves both differentiable and oracle (no-tape) paths.

Gradient conventions: ReLU uses subgradient 0 at the kink; broadcasting
follows numpy and is undone in backward by summing over the broadcast
axes.  Reductions over a batch use numpy's pairwise summation, so
accumulation is order-independent well below 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, UsageError

Array = np.ndarray


def _as_array(x) -> Array:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def value_of(x) -> Array:
    """Forward value of a Tensor or array-like, as a float64 ndarray."""
    return _as_array(x)


class Node:
    """One recorded primitive: op name, parent node ids, backward closure."""

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple[int, ...], backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class _Scatter:
    """Sparse gradient contribution: add ``values`` at ``index`` of a buffer.

    Lets slice-style ops (segment, take, rows) avoid materializing a
    full-size zero array per backward call; the tape accumulates them
    in place into one owned buffer per parent.
    """

    __slots__ = ("shape", "index", "values", "add_at")

    def __init__(self, shape, index, values, add_at=False):
        self.shape = shape
        self.index = index
        self.values = values
        self.add_at = add_at  # index may repeat; use unbuffered accumulation


class Tape:
    """Append-only computation record for one forward pass.

    A tape is confined to a single worker and is rebuilt for every
    training step.  Nodes are appended in evaluation order, so every
    node's parents precede it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: list[Array | None] | None = None

    def leaf(self, data) -> "Tensor":
        """Record an input tensor (e.g. the parameter vector) on this tape."""
        arr = np.asarray(data, dtype=np.float64)
        return self._emit("leaf", (), arr, None, check=False)

    def _emit(self, op, parents, data, backward, check=True) -> "Tensor":
        if check:
            # one reduction, no temporary: a NaN/Inf entry poisons the sum
            # (finite data can only trip this at ~1e308 scale, a blow-up anyway)
            total = data.sum() if isinstance(data, np.ndarray) else data
            if not np.isfinite(total):
                raise NonFiniteError(f"primitive '{op}' produced non-finite values")
        nid = len(self.nodes)
        self.nodes.append(Node(op, parents, backward))
        return Tensor(data, self, nid)

    def backward(self, loss: "Tensor") -> None:
        """Populate gradients of ``loss`` with respect to every reachable node."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise UsageError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: list[Array | None] = [None] * len(self.nodes)
        # in-place accumulation is only safe on buffers this pass allocated;
        # borrowed contribution arrays may alias forward data or other grads
        owned = bytearray(len(self.nodes))
        grads[loss.nid] = np.ones_like(loss.data)
        for nid in range(loss.nid, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for pid, contrib in zip(node.parents, node.backward(g)):
                if contrib is None:
                    continue
                buf = grads[pid]
                if isinstance(contrib, _Scatter):
                    if buf is None:
                        buf = np.zeros(contrib.shape)
                        grads[pid] = buf
                        owned[pid] = 1
                    elif not owned[pid]:
                        buf = buf.copy()
                        grads[pid] = buf
                        owned[pid] = 1
                    if contrib.add_at:
                        np.add.at(buf, contrib.index, contrib.values)
                    else:
                        buf[contrib.index] += contrib.values
                elif buf is None:
                    grads[pid] = contrib
                elif owned[pid] and getattr(buf, "ndim", 0) > 0:
                    buf += contrib
                else:
                    # 0-d operations yield immutable numpy scalars: rebind
                    grads[pid] = buf + contrib
                    owned[pid] = 1
        self.grads = grads


class Tensor:
    """A float64 ndarray plus an optional reference into the active Tape.

    Tensors without a tape reference are plain immutable values; recorded
    tensors participate in backward.
    """

    __slots__ = ("data", "tape", "nid")
    __array_ufunc__ = None  # defer mixed numpy/Tensor arithmetic to Tensor

    def __init__(self, data: Array, tape: Tape | None = None, nid: int | None = None):
        self.data = data
        self.tape = tape
        self.nid = nid

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
    def grad(self) -> Array:
        if self.tape is None or self.tape.grads is None:
            raise UsageError("no backward pass has populated this tensor's gradient")
        g = self.tape.grads[self.nid]
        if g is None:
            g = np.zeros_like(self.data)
        return g

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.nid}"
        return f"Tensor({tag}, shape={self.data.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _tape_of(*operands) -> Tape | None:
    tape = None
    for x in operands:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise UsageError("operands recorded on different tapes")
    return tape


def _parent(x) -> int | None:
    return x.nid if isinstance(x, Tensor) and x.tape is not None else None


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ops that cannot produce non-finite output from finite input; their
# finiteness check is skipped (the invariant holds inductively)
_SHAPE_SAFE = frozenset({
    "leaf", "neg", "relu", "reshape", "segment", "take", "diagonal",
    "transpose", "rows", "columns", "vec_to_square", "square_to_vec",
})


def _record(op, operands, data, grad_fns):
    """Emit a node whose parents are the recorded operands.

    ``grad_fns`` maps each operand (same order) to a function of the
    output gradient, or None for operands that never need gradients.
    """
    tape = _tape_of(*operands)
    if tape is None:
        return data
    parents = []
    fns = []
    for x, fn in zip(operands, grad_fns):
        pid = _parent(x)
        if pid is not None and fn is not None:
            parents.append(pid)
            fns.append(fn)

    def backward(g):
        return [fn(g) for fn in fns]

    return tape._emit(op, tuple(parents), data, backward, check=op not in _SHAPE_SAFE)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b):
    av, bv = _as_array(a), _as_array(b)
    return _record("add", (a, b), av + bv,
                   (lambda g: _unbroadcast(g, av.shape),
                    lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _as_array(a), _as_array(b)
    return _record("sub", (a, b), av - bv,
                   (lambda g: _unbroadcast(g, av.shape),
                    lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _as_array(a), _as_array(b)
    return _record("mul", (a, b), av * bv,
                   (lambda g: _unbroadcast(g * bv, av.shape),
                    lambda g: _unbroadcast(g * av, bv.shape)))


def neg(a):
    av = _as_array(a)
    return _record("neg", (a,), -av, (lambda g: -g,))


def square(a):
    av = _as_array(a)
    return _record("square", (a,), av * av, (lambda g: 2.0 * av * g,))


def matmul(a, b):
    """Matrix product for 2-D@2-D, 2-D@1-D and 1-D@2-D operands."""
    av, bv = _as_array(a), _as_array(b)
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise DimensionError(f"matmul {av.shape} @ {bv.shape}")
        return _record("matmul", (a, b), av @ bv,
                       (lambda g: g @ bv.T, lambda g: av.T @ g))
    if av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise DimensionError(f"matmul {av.shape} @ {bv.shape}")
        return _record("matvec", (a, b), av @ bv,
                       (lambda g: np.outer(g, bv), lambda g: av.T @ g))
    if av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise DimensionError(f"matmul {av.shape} @ {bv.shape}")
        return _record("vecmat", (a, b), av @ bv,
                       (lambda g: bv @ g, lambda g: np.outer(av, g)))
    raise DimensionError(f"unsupported matmul ranks {av.ndim} @ {bv.ndim}")


def transpose(a):
    av = _as_array(a)
    if av.ndim != 2:
        raise DimensionError("transpose expects a rank-2 tensor")
    return _record("transpose", (a,), av.T.copy(), (lambda g: g.T,))


def relu(a):
    """Elementwise max(x, 0); gradient passes only where the input is > 0."""
    av = _as_array(a)
    mask = av > 0.0
    return _record("relu", (a,), np.where(mask, av, 0.0),
                   (lambda g: g * mask,))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - numpy-style reduction name
    av = _as_array(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _record("sum", (a,), np.asarray(out, dtype=np.float64), (back,))


def mean(a, axis=None, keepdims=False):
    av = _as_array(a)
    if axis is None:
        count = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= av.shape[ax]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    av = _as_array(a)
    return _record("reshape", (a,), av.reshape(shape),
                   (lambda g: g.reshape(av.shape),))


def segment(a, offset: int, length: int):
    """Contiguous 1-D slice a[offset:offset+length]."""
    av = _as_array(a)
    if av.ndim != 1:
        raise DimensionError("segment expects a flat tensor")
    if offset < 0 or offset + length > av.shape[0]:
        raise DimensionError(f"segment [{offset}, {offset + length}) out of bounds for length {av.shape[0]}")
    return _record("segment", (a,), av[offset:offset + length].copy(),
                   (lambda g: _Scatter(av.shape, slice(offset, offset + length), g),))


def take(a, indices: Array):
    """Gather entries of a flat tensor into an arbitrarily shaped tensor."""
    av = _as_array(a)
    if av.ndim != 1:
        raise DimensionError("take expects a flat tensor")
    idx = np.asarray(indices)
    return _record("take", (a,), av[idx],
                   (lambda g: _Scatter(av.shape, idx.ravel(), np.asarray(g).ravel(), add_at=True),))


def diagonal(a):
    """Diagonal of the trailing two axes: (..., d, d) -> (..., d)."""
    av = _as_array(a)
    if av.ndim < 2 or av.shape[-1] != av.shape[-2]:
        raise DimensionError(f"diagonal expects trailing square axes, got {av.shape}")
    idx = np.arange(av.shape[-1])
    lead = (slice(None),) * (av.ndim - 2)
    return _record("diagonal", (a,), np.einsum("...ii->...i", av).copy(),
                   (lambda g: _Scatter(av.shape, lead + (idx, idx), g),))


def matvec(mat, vec):
    """Batched matrix-vector product G dX: (J, d, d) or (d, d) times constant (J, d).

    The vector operand is treated as data (no gradient), matching its use
    on path increments.
    """
    mv, vv = _as_array(mat), _as_array(vec)
    if vv.ndim != 2:
        raise DimensionError(f"matvec expects a (J, d) vector batch, got {vv.shape}")
    if mv.ndim == 3:
        if mv.shape[1:] != (vv.shape[1], vv.shape[1]) or mv.shape[0] != vv.shape[0]:
            raise DimensionError(f"matvec {mv.shape} with {vv.shape}")
        return _record("matvec_batch", (mat, vec),
                       np.einsum("jab,jb->ja", mv, vv),
                       (lambda g: np.einsum("ja,jb->jab", g, vv), None))
    if mv.ndim == 2:
        if mv.shape != (vv.shape[1], vv.shape[1]):
            raise DimensionError(f"matvec {mv.shape} with {vv.shape}")
        return _record("matvec_batch", (mat, vec), vv @ mv.T,
                       (lambda g: g.T @ vv, None))
    raise DimensionError(f"matvec expects a rank-2 or rank-3 matrix, got rank {mv.ndim}")


def diag_dot(mat, coef):
    """Weighted diagonal sum per sample: sum_i mat[.., i, i] * coef[j, i] -> (J,).

    ``coef`` is constant data (the diagonal of sigma sigma* along the path).
    """
    mv, cv = _as_array(mat), _as_array(coef)
    if cv.ndim != 2:
        raise DimensionError(f"diag_dot expects (J, d) coefficients, got {cv.shape}")
    d = cv.shape[1]
    idx = np.arange(d)
    if mv.ndim == 3:
        if mv.shape[1:] != (d, d) or mv.shape[0] != cv.shape[0]:
            raise DimensionError(f"diag_dot {mv.shape} with {cv.shape}")
        diag = np.einsum("jii->ji", mv)
        return _record("diag_dot", (mat, coef), np.einsum("ji,ji->j", diag, cv),
                       (lambda g: _Scatter(mv.shape, (slice(None), idx, idx), g[:, None] * cv),
                        None))
    if mv.ndim == 2:
        if mv.shape != (d, d):
            raise DimensionError(f"diag_dot {mv.shape} with {cv.shape}")
        diag = np.einsum("ii->i", mv)
        return _record("diag_dot", (mat, coef), cv @ diag,
                       (lambda g: _Scatter(mv.shape, (idx, idx), g @ cv), None))
    raise DimensionError(f"diag_dot expects a rank-2 or rank-3 matrix, got rank {mv.ndim}")


# ---------------------------------------------------------------------------
# layer primitives


def linear(x, weight, bias):
    """Fused x W^T + b for a batch x of shape (J, l); one node per layer."""
    xv, wv, bv = _as_array(x), _as_array(weight), _as_array(bias)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise DimensionError(f"linear: batch {xv.shape} incompatible with weight {wv.shape}")
    if bv.shape != (wv.shape[0],):
        raise DimensionError(f"linear: bias {bv.shape} does not match {wv.shape[0]} outputs")
    return _record("linear", (x, weight, bias), xv @ wv.T + bv,
                   (lambda g: g @ wv,
                    lambda g: g.T @ xv,
                    lambda g: g.sum(axis=0)))


def affine(weight, bias, x):
    """P x + Q with P of shape (k, l) and Q of shape (k,).

    Accepts a single input of shape (l,) or a batch of shape (J, l); the
    batch case returns (J, k) with the bias broadcast over rows.
    """
    wv, xv = _as_array(weight), _as_array(x)
    if wv.ndim != 2:
        raise DimensionError("affine weight must be a matrix")
    if xv.ndim == 1:
        if xv.shape[0] != wv.shape[1]:
            raise DimensionError(f"affine: weight {wv.shape} incompatible with input {xv.shape}")
        return add(matmul(weight, x), bias)
    if xv.ndim == 2:
        return linear(x, weight, bias)
    raise DimensionError("affine input must have rank 1 or 2")


def rows(x, start: int, stop: int):
    """Contiguous slice of the leading axis: x[start:stop]."""
    xv = _as_array(x)
    if not (0 <= start <= stop <= xv.shape[0]):
        raise DimensionError(f"rows [{start}, {stop}) out of bounds for leading extent {xv.shape[0]}")
    return _record("rows", (x,), xv[start:stop].copy(),
                   (lambda g: _Scatter(xv.shape, slice(start, stop), g),))


def conv3x3(x, kernels, bias):
    """3x3 convolution, stride 1, zero padding 1: spatial size is preserved.

    x: (J, c_in, s, s); kernels: (c_out, c_in, 3, 3); bias: (c_out,).
    """
    xv, kv, bv = _as_array(x), _as_array(kernels), _as_array(bias)
    if xv.ndim != 4 or kv.ndim != 4 or kv.shape[2:] != (3, 3):
        raise DimensionError(f"conv3x3: input {xv.shape}, kernels {kv.shape}")
    if xv.shape[1] != kv.shape[1]:
        raise DimensionError(f"conv3x3: {xv.shape[1]} input channels vs kernels for {kv.shape[1]}")
    if bv.shape != (kv.shape[0],):
        raise DimensionError(f"conv3x3: bias {bv.shape} vs {kv.shape[0]} output channels")
    s = xv.shape[2]
    xp = np.pad(xv, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.tile(bv[None, :, None, None], (xv.shape[0], 1, s, s)).astype(np.float64)
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,jcyx->joyx", kv[:, :, dy, dx], xp[:, :, dy:dy + s, dx:dx + s])

    def back_x(g):
        gp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                gp[:, :, dy:dy + s, dx:dx + s] += np.einsum("oc,joyx->jcyx", kv[:, :, dy, dx], g)
        return gp[:, :, 1:1 + s, 1:1 + s]

    def back_k(g):
        gk = np.zeros_like(kv)
        for dy in range(3):
            for dx in range(3):
                gk[:, :, dy, dx] = np.einsum("joyx,jcyx->oc", g, xp[:, :, dy:dy + s, dx:dx + s])
        return gk

    return _record("conv3x3", (x, kernels, bias), out,
                   (back_x, back_k, lambda g: g.sum(axis=(0, 2, 3))))


def depthwise_conv3x3(x, kernels, bias):
    """Per-channel 3x3 convolution (no cross-channel mixing).

    x: (J, c, s, s); kernels: (c, 3, 3); bias: (c,).
    """
    xv, kv, bv = _as_array(x), _as_array(kernels), _as_array(bias)
    if xv.ndim != 4 or kv.ndim != 3 or kv.shape[1:] != (3, 3):
        raise DimensionError(f"depthwise_conv3x3: input {xv.shape}, kernels {kv.shape}")
    if xv.shape[1] != kv.shape[0]:
        raise DimensionError(f"depthwise_conv3x3: {xv.shape[1]} channels vs {kv.shape[0]} kernels")
    if bv.shape != (kv.shape[0],):
        raise DimensionError(f"depthwise_conv3x3: bias {bv.shape} vs {kv.shape[0]} channels")
    s = xv.shape[2]
    xp = np.pad(xv, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.tile(bv[None, :, None, None], (xv.shape[0], 1, s, s)).astype(np.float64)
    for dy in range(3):
        for dx in range(3):
            out += kv[None, :, dy, dx, None, None] * xp[:, :, dy:dy + s, dx:dx + s]

    def back_x(g):
        gp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                gp[:, :, dy:dy + s, dx:dx + s] += kv[None, :, dy, dx, None, None] * g
        return gp[:, :, 1:1 + s, 1:1 + s]

    def back_k(g):
        gk = np.zeros_like(kv)
        for dy in range(3):
            for dx in range(3):
                gk[:, dy, dx] = np.einsum("jcyx,jcyx->c", g, xp[:, :, dy:dy + s, dx:dx + s])
        return gk

    return _record("depthwise_conv3x3", (x, kernels, bias), out,
                   (back_x, back_k, lambda g: g.sum(axis=(0, 2, 3))))


# ---------------------------------------------------------------------------
# stencil form of the 3x3 convolutions
#
# On an s x s grid with zero padding 1 and stride 1, a 3x3 convolution is a
# sparse (s^2, s^2) linear map whose entries are kernel taps.  For the small
# grids used here, materializing that matrix per channel turns each
# convolution layer into one batched GEMM, which is far faster than shifted
# accumulation.  Spatial positions are flattened row-major: q = r * s + c.

_STENCIL_CACHE: dict[int, tuple] = {}


def _stencil_indices(side: int):
    """(q_in, q_out, tap) triples of the 3x3 stencil, grouped by tap."""
    cached = _STENCIL_CACHE.get(side)
    if cached is not None:
        return cached
    q_in, q_out, taps = [], [], []
    for r_out in range(side):
        for c_out in range(side):
            for dy in range(3):
                for dx in range(3):
                    r_in, c_in = r_out + dy - 1, c_out + dx - 1
                    if 0 <= r_in < side and 0 <= c_in < side:
                        q_in.append(r_in * side + c_in)
                        q_out.append(r_out * side + c_out)
                        taps.append(dy * 3 + dx)
    order = np.argsort(np.asarray(taps), kind="stable")
    q_in = np.asarray(q_in)[order]
    q_out = np.asarray(q_out)[order]
    taps = np.asarray(taps)[order]
    bounds = np.searchsorted(taps, np.arange(10))
    cached = (q_in, q_out, bounds)
    _STENCIL_CACHE[side] = cached
    return cached


def _stencil_matrix(kernels: Array, side: int) -> Array:
    """Dense (…, s^2, s^2) map out = in @ A from 3x3 kernels (..., 3, 3)."""
    q_in_idx, q_out_idx, bounds = _stencil_indices(side)
    lead = kernels.shape[:-2]
    flat = kernels.reshape(lead + (9,))
    tap_ids = np.repeat(np.arange(9), np.diff(bounds))
    mat = np.zeros(lead + (side * side, side * side))
    mat[..., q_in_idx, q_out_idx] = flat[..., tap_ids]
    return mat


def _stencil_kernel_grad(mat_grad: Array, side: int) -> Array:
    """Collapse a stencil-matrix gradient back onto the 9 kernel taps."""
    q_in_idx, q_out_idx, bounds = _stencil_indices(side)
    vals = mat_grad[..., q_in_idx, q_out_idx]
    lead = mat_grad.shape[:-2]
    out = np.empty(lead + (3, 3))
    flat = out.reshape(lead + (9,))
    for tap in range(9):
        flat[..., tap] = vals[..., bounds[tap]:bounds[tap + 1]].sum(axis=-1)
    return out


def conv_stencil_expand(x, kernels, bias, side: int):
    """Single-channel input to c channels: (J, p) -> (c, J, p), p = side^2."""
    xv, kv, bv = _as_array(x), _as_array(kernels), _as_array(bias)
    p = side * side
    if xv.ndim != 2 or xv.shape[1] != p:
        raise DimensionError(f"conv_stencil_expand: input {xv.shape}, side {side}")
    if kv.ndim != 3 or kv.shape[1:] != (3, 3) or bv.shape != (kv.shape[0],):
        raise DimensionError(f"conv_stencil_expand: kernels {kv.shape}, bias {bv.shape}")
    mat = _stencil_matrix(kv, side)  # (c, p, p)
    out = np.matmul(xv, mat) + bv[:, None, None]

    return _record("conv_stencil", (x, kernels, bias), out,
                   (lambda g: np.matmul(g, mat.transpose(0, 2, 1)).sum(axis=0),
                    lambda g: _stencil_kernel_grad(np.matmul(xv.T[None], g), side),
                    lambda g: g.sum(axis=(1, 2))))


def conv_stencil_depthwise(h, kernels, bias, side: int):
    """Per-channel convolution on channel-major activations: (c, J, p) -> (c, J, p)."""
    hv, kv, bv = _as_array(h), _as_array(kernels), _as_array(bias)
    p = side * side
    if hv.ndim != 3 or hv.shape[2] != p or hv.shape[0] != kv.shape[0]:
        raise DimensionError(f"conv_stencil_depthwise: input {hv.shape}, kernels {kv.shape}")
    if kv.ndim != 3 or kv.shape[1:] != (3, 3) or bv.shape != (kv.shape[0],):
        raise DimensionError(f"conv_stencil_depthwise: kernels {kv.shape}, bias {bv.shape}")
    mat = _stencil_matrix(kv, side)  # (c, p, p)
    out = np.matmul(hv, mat) + bv[:, None, None]

    return _record("conv_stencil", (h, kernels, bias), out,
                   (lambda g: np.matmul(g, mat.transpose(0, 2, 1)),
                    lambda g: _stencil_kernel_grad(np.matmul(hv.transpose(0, 2, 1), g), side),
                    lambda g: g.sum(axis=(1, 2))))


def conv_stencil_single(h, kernel, bias, side: int):
    """One 3x3 kernel on a single channel: (J, p) -> (J, p)."""
    hv, kv, bv = _as_array(h), _as_array(kernel), _as_array(bias)
    p = side * side
    if hv.ndim != 2 or hv.shape[1] != p:
        raise DimensionError(f"conv_stencil_single: input {hv.shape}, side {side}")
    if kv.shape != (3, 3) or bv.shape != (1,):
        raise DimensionError(f"conv_stencil_single: kernel {kv.shape}, bias {bv.shape}")
    mat = _stencil_matrix(kv, side)  # (p, p)
    out = hv @ mat + bv[0]

    return _record("conv_stencil", (h, kernel, bias), out,
                   (lambda g: g @ mat.T,
                    lambda g: _stencil_kernel_grad(hv.T @ g, side),
                    lambda g: g.sum(keepdims=True).reshape(1)))


def columns(x, index: Array):
    """Reorder trailing-axis columns: x[:, index] for a permutation index."""
    xv = _as_array(x)
    if xv.ndim != 2:
        raise DimensionError("columns expects a rank-2 tensor")
    idx = np.asarray(index)
    return _record("columns", (x,), xv[:, idx].copy(),
                   (lambda g: _Scatter(xv.shape, (slice(None), idx), g),))


def square_permutation(side: int) -> Array:
    """Permutation mapping vector order to row-major square order.

    The square holds the vector column-major (entry [r, c] is x[c*s + r]),
    so flattening it row-major reads x through this permutation.  It is an
    involution: applying it twice restores vector order.
    """
    q = np.arange(side * side)
    return (q % side) * side + q // side


# ---------------------------------------------------------------------------
# reshapes between vectors and square matrices (column-major layout)


def _square_side(d: int) -> int:
    from .errors import ConfigurationError

    s = int(np.sqrt(d))
    while s * s < d:
        s += 1
    if s * s != d:
        raise ConfigurationError(f"dimension {d} is not a perfect square")
    return s


def vec_to_square(x):
    """Reshape a d-vector into a 1 x sqrt(d) x sqrt(d) tensor, column-major.

    Entry [r, c] holds x[c * sqrt(d) + r], matching a matrix whose columns
    are consecutive blocks of the vector.  Batched input (J, d) maps to
    (J, 1, s, s).  The inverse is ``square_to_vec``.
    """
    xv = _as_array(x)
    batched = xv.ndim == 2
    d = xv.shape[-1]
    s = _square_side(d)
    if batched:
        data = xv.reshape(xv.shape[0], 1, s, s).transpose(0, 1, 3, 2).copy()
        back = lambda g: g.transpose(0, 1, 3, 2).reshape(xv.shape)
    elif xv.ndim == 1:
        data = xv.reshape(1, s, s).transpose(0, 2, 1).copy()
        back = lambda g: g.transpose(0, 2, 1).reshape(d)
    else:
        raise DimensionError("vec_to_square expects rank 1 or 2 input")
    return _record("vec_to_square", (x,), data, (back,))


def square_to_vec(z):
    """Inverse of ``vec_to_square``: pull the matrix back into the vector."""
    zv = _as_array(z)
    if zv.ndim == 4:
        if zv.shape[1] != 1:
            raise DimensionError("square_to_vec expects a single channel")
        j, _, s, s2 = zv.shape
        if s != s2:
            raise DimensionError("square_to_vec expects square spatial axes")
        data = zv.transpose(0, 1, 3, 2).reshape(j, s * s).copy()
        back = lambda g: g.reshape(j, 1, s, s).transpose(0, 1, 3, 2)
    elif zv.ndim == 3:
        if zv.shape[0] != 1 or zv.shape[1] != zv.shape[2]:
            raise DimensionError(f"square_to_vec expects (1, s, s), got {zv.shape}")
        s = zv.shape[1]
        data = zv.transpose(0, 2, 1).reshape(s * s).copy()
        back = lambda g: g.reshape(1, s, s).transpose(0, 2, 1)
    else:
        raise DimensionError("square_to_vec expects rank 3 or 4 input")
    return _record("square_to_vec", (z,), data, (back,))


# ---------------------------------------------------------------------------
# parameter vector and gradient checking


@dataclass(frozen=True)
class Segment:
    """A named block of the flat parameter vector."""

    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        n = 1
        for e in self.shape:
            n *= e
        return n

    @property
    def end(self) -> int:
        return self.offset + self.size


class ParamVector:
    """Flat trainable vector with a documented layout of named segments.

    Segments are disjoint and cover [0, nu).  ``view`` returns a reshaped
    write-through view into the underlying storage.
    """

    def __init__(self, values: Array, segments: Sequence[Segment]):
        values = np.asarray(values, dtype=np.float64)
        ordered = sorted(segments, key=lambda s: s.offset)
        cursor = 0
        for seg in ordered:
            if seg.offset != cursor:
                raise UsageError(f"segment '{seg.name}' leaves a gap at offset {cursor}")
            cursor = seg.end
        if cursor != values.shape[0]:
            raise UsageError(f"segments cover [0, {cursor}) but the vector has length {values.shape[0]}")
        self.values = values
        self.segments = {seg.name: seg for seg in ordered}

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def view(self, name: str) -> Array:
        seg = self.segments[name]
        return self.values[seg.offset:seg.end].reshape(seg.shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.segments.values()))


def gradient(loss: Tensor, wrt: Tensor) -> Array:
    """Run backward from a scalar loss and return d(loss)/d(wrt)."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise UsageError("loss is not recorded on a tape")
    loss.tape.backward(loss)
    return wrt.grad


def grad_check(f: Callable[[Tensor], Tensor], theta: Array, h: float = 1e-6) -> float:
    """Max relative error between tape gradients and centered differences.

    ``f`` must be deterministic in theta and should be evaluated away from
    ReLU kinks (the subgradient convention makes the comparison meaningless
    exactly at 0).  Error metric per coordinate:
    |analytic - centered| / max(1, |analytic|).
    """
    theta = np.asarray(theta, dtype=np.float64)

    def loss_at(values: Array) -> float:
        tape = Tape()
        out = f(tape.leaf(values))
        return float(value_of(out))

    tape = Tape()
    leaf = tape.leaf(theta)
    analytic = gradient(f(leaf), leaf)
    worst = 0.0
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] += h
        up = loss_at(bumped)
        bumped[i] -= 2.0 * h
        down = loss_at(bumped)
        centered = (up - down) / (2.0 * h)
        err = abs(analytic[i] - centered) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
