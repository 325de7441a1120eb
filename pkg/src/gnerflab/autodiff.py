"""Reverse-mode automatic differentiation over dense numpy tensors.

A `Tape` records every primitive applied to tracked tensors during one
optimization step.  `backward` walks the record in reverse and produces a
gradient map keyed by node id; gradients of leaves marked `requires_grad`
are also written to `Tensor.grad`.  Tensors are treated as immutable after
creation; one tape belongs to one worker and is discarded after backward.

Plain numpy arrays (or scalars) may be passed anywhere a tensor is
expected; they are wrapped as untracked constants, so the same rendering
code runs with or without gradient recording.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

DEFAULT_DTYPE = np.float32

ELEMENTWISE_KINDS = (
    "add", "sub", "mul", "div", "neg",
    "exp", "log", "relu", "softplus", "sigmoid", "clamp",
)

_TAPE_STACK: list["Tape"] = []


def active_tape():
    """The innermost open tape, or None."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense multi-dimensional value with an optional gradient slot.

    `values` is a numpy float array, row-major.  `grad`, when populated by
    backward, has the same shape.  `node_id` is the handle into the tape
    that recorded the tensor (None for tensors created outside any tape or
    constants that never met a tracked input).
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.node_id = None
        tape = active_tape()
        if tape is not None and self.requires_grad:
            tape._register_leaf(self)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, tracked={self.node_id is not None})"

    # arithmetic sugar; all routes through the primitive registry
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Entry:
    """One primitive application in a computation record."""

    __slots__ = ("op", "input_ids", "out_id", "forward_fn", "backward_fn",
                 "input_values", "out_values", "needs")

    def __init__(self, op, input_ids, out_id, forward_fn, backward_fn,
                 input_values, out_values, needs):
        self.op = op
        self.input_ids = input_ids
        self.out_id = out_id
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn
        self.input_values = input_values
        self.out_values = out_values
        self.needs = needs


class Tape:
    """Computation record: an ordered list of primitive applications.

    Use as a context manager around one forward pass:

        with Tape() as tape:
            loss = ...
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._next_id = 0
        self._tracked: set[int] = set()
        self._leaf_tensors: dict[int, Tensor] = {}
        self._leaf_values: dict[int, np.ndarray] = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _new_id(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def _register_leaf(self, tensor):
        tensor.tape = self
        tensor.node_id = self._new_id()
        self._leaf_values[tensor.node_id] = tensor.values
        if tensor.requires_grad:
            self._tracked.add(tensor.node_id)
            self._leaf_tensors[tensor.node_id] = tensor

    def _record(self, op, inputs, out_values, forward_fn, backward_fn):
        input_ids = []
        for t in inputs:
            if t.node_id is None or t.tape is not self:
                self._register_leaf(t)
            input_ids.append(t.node_id)
        out = Tensor.__new__(Tensor)
        out.values = out_values
        out.grad = None
        out.requires_grad = False
        out.tape = self
        out.node_id = self._new_id()
        self._tracked.add(out.node_id)
        needs = tuple(t.node_id in self._tracked for t in inputs)
        self.entries.append(_Entry(op, tuple(input_ids), out.node_id,
                                   forward_fn, backward_fn,
                                   tuple(t.values for t in inputs),
                                   out.values, needs))
        return out

    def backward(self, loss):
        """Accumulate adjoints from a scalar loss back to every tracked node.

        Returns the gradient map {node_id: array}; leaf tensors created with
        requires_grad=True additionally get their `.grad` populated.
        Gradients of a node used by several consumers accumulate additively.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        if loss.values.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.values.shape}")
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.values)
        }
        for entry in reversed(self.entries):
            g = grads.get(entry.out_id)
            if g is None:
                continue
            input_grads = entry.backward_fn(g, entry.input_values,
                                            entry.out_values, entry.needs)
            for nid, ig in zip(entry.input_ids, input_grads):
                if ig is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = ig if acc is None else acc + ig
        for nid, tensor in self._leaf_tensors.items():
            tensor.grad = grads.get(nid)
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.values)
                grads[nid] = tensor.grad
        return grads

    def replay(self):
        """Re-execute the record from leaf values; returns {node_id: values}."""
        vals = dict(self._leaf_values)
        for entry in self.entries:
            vals[entry.out_id] = entry.forward_fn(
                *[vals[i] for i in entry.input_ids])
        return vals

    def verify_replay(self):
        """True iff replay reproduces every stored output bit-exactly."""
        vals = self.replay()
        for entry in self.entries:
            if not np.array_equal(vals[entry.out_id], entry.out_values,
                                  equal_nan=True):
                return False
        return True


def backward(loss):
    """Module-level backward: gradient map of a scalar loss (spec surface)."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise ValueError("loss is not recorded on any tape")
    return loss.tape.backward(loss)


def merge_grad_maps(maps):
    """Sum gradient maps from independent ray batches in fixed list order."""
    out: dict[int, np.ndarray] = {}
    for m in maps:
        for k, v in m.items():
            out[k] = v.copy() if k not in out else out[k] + v
    return out


# ---------------------------------------------------------------------------
# primitive machinery


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _apply(op, inputs, forward_fn, backward_fn):
    inputs = tuple(as_tensor(x) for x in inputs)
    out_values = forward_fn(*[t.values for t in inputs])
    tape = active_tape()
    tracked = tape is not None and any(
        t.requires_grad or (t.tape is tape and t.node_id in tape._tracked)
        for t in inputs)
    if not tracked:
        return Tensor(out_values)
    return tape._record(op, inputs, out_values, forward_fn, backward_fn)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the shape of its source."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


def _pair(a, b):
    """Wrap the operands of a binary op; a bare scalar adopts the dtype of
    its tensor peer, so python-float constants never widen a float32 graph."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        b = Tensor(np.asarray(b, dtype=a.values.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        a = Tensor(np.asarray(a, dtype=b.values.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a.values, b.values)

    def bwd(g, ins, out, needs):
        return (_unbroadcast(g, ins[0].shape) if needs[0] else None,
                _unbroadcast(g, ins[1].shape) if needs[1] else None)

    return _apply("add", (a, b), lambda x, y: x + y, bwd)


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a.values, b.values)

    def bwd(g, ins, out, needs):
        return (_unbroadcast(g, ins[0].shape) if needs[0] else None,
                _unbroadcast(-g, ins[1].shape) if needs[1] else None)

    return _apply("sub", (a, b), lambda x, y: x - y, bwd)


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a.values, b.values)

    def bwd(g, ins, out, needs):
        x, y = ins
        return (_unbroadcast(g * y, x.shape) if needs[0] else None,
                _unbroadcast(g * x, y.shape) if needs[1] else None)

    return _apply("mul", (a, b), lambda x, y: x * y, bwd)


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast("div", a.values, b.values)

    def bwd(g, ins, out, needs):
        x, y = ins
        return (_unbroadcast(g / y, x.shape) if needs[0] else None,
                _unbroadcast(-g * x / (y * y), y.shape) if needs[1] else None)

    return _apply("div", (a, b), lambda x, y: x / y, bwd)


def neg(a):
    return _apply("neg", (a,), lambda x: -x,
                  lambda g, ins, out, needs: (-g,))


def exp(a):
    return _apply("exp", (a,), np.exp,
                  lambda g, ins, out, needs: (g * out,))


def log(a):
    return _apply("log", (a,), np.log,
                  lambda g, ins, out, needs: (g / ins[0],))


def relu(a):
    return _apply("relu", (a,), lambda x: np.maximum(x, 0),
                  lambda g, ins, out, needs: (g * (ins[0] > 0),))


def softplus(a):
    def bwd(g, ins, out, needs):
        return (g * _sigmoid_values(ins[0]),)

    return _apply("softplus", (a,), lambda x: np.logaddexp(0, x), bwd)


def _sigmoid_values(x):
    # tanh form is overflow-safe for both signs
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    return _apply("sigmoid", (a,), _sigmoid_values,
                  lambda g, ins, out, needs: (g * out * (1.0 - out),))


def clamp(a, lo, hi):
    """Elementwise clip; subgradient 0 at and beyond the saturation points."""
    lo, hi = float(lo), float(hi)

    def bwd(g, ins, out, needs):
        x = ins[0]
        return (g * ((x > lo) & (x < hi)),)

    return _apply("clamp", (a,), lambda x: np.clip(x, lo, hi), bwd)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "exp": exp, "log": log, "relu": relu, "softplus": softplus,
    "sigmoid": sigmoid, "clamp": clamp,
}


def elementwise(kind, *inputs, **kwargs):
    """Dispatch an elementwise primitive by kind (see ELEMENTWISE_KINDS)."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _ELEMENTWISE[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# linear algebra / structural primitives


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(f"matmul inner extents disagree: {a.values.shape} @ {b.values.shape}")

    def bwd(g, ins, out, needs):
        x, y = ins
        return (g @ y.T if needs[0] else None,
                x.T @ g if needs[1] else None)

    return _apply("matmul", (a, b), lambda x, y: x @ y, bwd)


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)

    def bwd(g, ins, out, needs):
        return (g.reshape(ins[0].shape),)

    return _apply("reshape", (a,), lambda x: x.reshape(shape), bwd)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(int(x) for x in axes)
    inv = tuple(int(x) for x in np.argsort(axes))

    def bwd(g, ins, out, needs):
        return (g.transpose(inv),)

    return _apply(f"transpose[{axes}]", (a,),
                  lambda x: np.ascontiguousarray(x.transpose(axes)), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one input")
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g, ins, out, needs):
        pieces = np.split(g, offsets, axis=axis)
        return [p if need else None for p, need in zip(pieces, needs)]

    return _apply(f"concat[axis={axis}]", tensors,
                  lambda *xs: np.concatenate(xs, axis=axis), bwd)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack needs at least one input")

    def bwd(g, ins, out, needs):
        pieces = np.moveaxis(g, axis, 0)
        return [pieces[i] if need else None for i, need in enumerate(needs)]

    return _apply(f"stack[axis={axis}]", tensors,
                  lambda *xs: np.stack(xs, axis=axis), bwd)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if np.isscalar(axes):
        axes = (axes,)
    out = []
    for ax in axes:
        ax = int(ax)
        if ax < -ndim or ax >= ndim:
            raise ValueError(f"axis {ax} invalid for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(a, axes=None, keepdims=False):
    a = as_tensor(a)
    axes_n = _normalize_axes(axes, a.values.ndim)

    def expand(g, in_shape):
        if keepdims:
            return np.broadcast_to(g, in_shape)
        shape = list(in_shape)
        for ax in axes_n:
            shape[ax] = 1
        return np.broadcast_to(g.reshape(shape), in_shape)

    def bwd(g, ins, out, needs):
        return (expand(g, ins[0].shape),)

    return _apply(f"sum[axes={axes_n}]", (a,),
                  lambda x: x.sum(axis=axes_n, keepdims=keepdims), bwd)


def reduce_mean(a, axes=None, keepdims=False):
    a = as_tensor(a)
    axes_n = _normalize_axes(axes, a.values.ndim)
    count = int(np.prod([a.values.shape[ax] for ax in axes_n])) or 1

    def bwd(g, ins, out, needs):
        in_shape = ins[0].shape
        if keepdims:
            gg = np.broadcast_to(g, in_shape)
        else:
            shape = list(in_shape)
            for ax in axes_n:
                shape[ax] = 1
            gg = np.broadcast_to(g.reshape(shape), in_shape)
        return (gg / count,)

    return _apply(f"mean[axes={axes_n}]", (a,),
                  lambda x: x.mean(axis=axes_n, keepdims=keepdims), bwd)


def reduce(kind, a, axes=None, keepdims=False):
    """Dispatch a reduction primitive by kind ('sum' or 'mean')."""
    if kind == "sum":
        return reduce_sum(a, axes, keepdims)
    if kind == "mean":
        return reduce_mean(a, axes, keepdims)
    raise ValueError(f"unknown reduce kind {kind!r}")


def _ordered_sum_values(x, axis):
    """Sum along `axis` in ascending value order (permutation invariant).

    Small extents use a min/max sorting network, which is several times
    faster than a strided np.sort; both routes add the sorted values
    sequentially, so any input ordering yields bit-identical sums.
    """
    n = x.shape[axis]
    if n <= 4:
        rows = np.moveaxis(x, axis, 0)
        if n == 1:
            return rows[0].copy()
        if n == 2:
            return np.minimum(rows[0], rows[1]) + np.maximum(rows[0], rows[1])
        if n == 3:
            lo = np.minimum(rows[0], rows[1])
            hi = np.maximum(rows[0], rows[1])
            mn = np.minimum(lo, rows[2])
            mx = np.maximum(hi, rows[2])
            mid = (lo + hi + rows[2]) - mn - mx
            return (mn + mid) + mx
        lo1, hi1 = np.minimum(rows[0], rows[1]), np.maximum(rows[0], rows[1])
        lo2, hi2 = np.minimum(rows[2], rows[3]), np.maximum(rows[2], rows[3])
        mn = np.minimum(lo1, lo2)
        mx = np.maximum(hi1, hi2)
        mid_lo = np.minimum(np.maximum(lo1, lo2), np.minimum(hi1, hi2))
        mid_hi = np.maximum(np.maximum(lo1, lo2), np.minimum(hi1, hi2))
        return ((mn + mid_lo) + mid_hi) + mx
    srt = np.sort(x, axis=axis)
    rows = np.moveaxis(srt, axis, 0)
    acc = rows[0].copy()
    for i in range(1, n):
        acc += rows[i]
    return acc


def sorted_sum(a, axis):
    """Sum along one axis in ascending value order.

    The canonical ordering makes the result independent of the input
    ordering along the reduced axis (bit-exact permutation invariance);
    the adjoint of a sum is order-free, so backward is the plain
    broadcast.
    """
    a = as_tensor(a)
    axis = int(axis)

    def fwd(x):
        return _ordered_sum_values(x, axis)

    def bwd(g, ins, out, needs):
        return (np.broadcast_to(np.expand_dims(g, axis), ins[0].shape),)

    return _apply(f"sorted_sum[axis={axis}]", (a,), fwd, bwd)


def cumsum_exclusive(a, axis=-1):
    """Exclusive prefix sum: out[i] = sum of inputs before i along axis."""
    a = as_tensor(a)
    axis = int(axis)

    def fwd(x):
        out = np.cumsum(x, axis=axis)
        out = np.roll(out, 1, axis=axis)
        idx = [slice(None)] * x.ndim
        idx[axis] = 0
        out[tuple(idx)] = 0
        return out

    def bwd(g, ins, out, needs):
        # adjoint is the reversed exclusive prefix sum of g
        rg = np.flip(g, axis=axis)
        acc = np.cumsum(rg, axis=axis)
        acc = np.roll(acc, 1, axis=axis)
        idx = [slice(None)] * g.ndim
        idx[axis] = 0
        acc[tuple(idx)] = 0
        return (np.flip(acc, axis=axis),)

    return _apply(f"cumsum_exclusive[axis={axis}]", (a,), fwd, bwd)


# ---------------------------------------------------------------------------
# convolution and image sampling


def _im2col(x, k, stride, padding):
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[1], x.shape[2]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # [C, Ho, Wo, k, k]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x, kernels, stride=1, padding=0):
    """2-D cross-correlation of a [C,H,W] input with [C',C,k,k] kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.values.ndim != 3 or kernels.values.ndim != 4:
        raise ValueError("conv2d expects input [C,H,W] and kernels [C',C,k,k]")
    co, ci, k, k2 = kernels.values.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernels must be square with odd extent, got {k}x{k2}")
    if ci != x.values.shape[0]:
        raise ValueError("conv2d channel mismatch")
    c, h, w = x.values.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError("conv2d kernel larger than padded input")
    stride = int(stride)
    padding = int(padding)

    def fwd(xv, kv):
        cols, ho, wo = _im2col(xv, k, stride, padding)
        out = cols @ kv.reshape(co, -1).T
        return out.T.reshape(co, ho, wo).copy()

    def bwd(g, ins, out, needs):
        xv, kv = ins
        ho, wo = out.shape[1], out.shape[2]
        g2 = g.reshape(co, ho * wo)
        gx = gk = None
        if needs[1]:
            cols, _, _ = _im2col(xv, k, stride, padding)
            gk = (g2 @ cols).reshape(co, ci, k, k)
        if needs[0]:
            gcols = g2.T @ kv.reshape(co, -1)      # [Ho*Wo, C*k*k]
            gcols = gcols.reshape(ho, wo, ci, k, k)
            hp, wp = xv.shape[1] + 2 * padding, xv.shape[2] + 2 * padding
            gpad = np.zeros((ci, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gpad[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        gcols[:, :, :, i, j].transpose(2, 0, 1)
            if padding:
                gx = gpad[:, padding:-padding, padding:-padding]
            else:
                gx = gpad
        return (gx, gk)

    return _apply(f"conv2d[k={k},s={stride},p={padding}]", (x, kernels), fwd, bwd)


def bilinear_sample(featmap, coords):
    """Bilinear lookup of a [C,H,W] map at [N,2] (u,v) pixel coordinates.

    Integer coordinates address pixel centers (coord (u,v) -> featmap[:,v,u]).
    Out-of-support neighbors contribute zero; coordinates outside
    [0,W-1]x[0,H-1] are flagged False in the returned mask, and fully
    outside coordinates produce exact zero rows.  The result is
    differentiable w.r.t. the feature map only; coordinates are data.

    Returns (samples [N,C], inside_mask [N]).
    """
    featmap = as_tensor(featmap)
    if featmap.values.ndim != 3:
        raise ValueError("bilinear_sample expects a [C,H,W] feature map")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coords must be [N,2]")
    c, h, w = featmap.values.shape
    u = coords[:, 0]
    v = coords[:, 1]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xs = x0 + dx
            ys = y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
            corners.append((np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1),
                            wgt * valid))
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)

    def fwd(fv):
        rows = fv.reshape(c, h * w).T
        if not rows.flags.c_contiguous:
            rows = np.ascontiguousarray(rows)
        out = np.zeros((coords.shape[0], c), dtype=fv.dtype)
        for xs, ys, wgt in corners:
            out += rows[ys * w + xs] * wgt[:, None].astype(fv.dtype)
        return out

    def bwd(g, ins, out, needs):
        gf = np.zeros((c, h * w))  # float64: bincount accumulates in double
        for xs, ys, wgt in corners:
            flat = ys * w + xs
            weighted = np.ascontiguousarray((g * wgt[:, None].astype(g.dtype)).T)
            for ch in range(c):
                gf[ch] += np.bincount(flat, weights=weighted[ch],
                                      minlength=h * w)
        return (gf.reshape(c, h, w).astype(g.dtype),)

    return _apply("bilinear_sample", (featmap,), fwd, bwd), inside


# ---------------------------------------------------------------------------
# weight / gradient serialization (NFT1)

_NFT1_MAGIC = "NFT1 "


def save_nft1(path, arrays, meta=None):
    """Write arrays as flat little-endian float32 behind a one-line header.

    Header: `NFT1 {"shapes": [...], ...meta}\n` (UTF-8), then the raw
    float32 payload of every array concatenated in order.  The write is
    atomic (temp file + rename).
    """
    arrays = [np.asarray(a) for a in arrays]
    header = {"shapes": [list(a.shape) for a in arrays]}
    if meta:
        if "shapes" in meta:
            raise ValueError("meta may not override 'shapes'")
        header.update(meta)
    blob = (_NFT1_MAGIC + json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    payload = b"".join(a.astype("<f4", copy=False).tobytes(order="C") for a in arrays)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_nft1(path):
    """Read an NFT1 file; returns (list of float32 arrays, meta dict)."""
    with open(path, "rb") as f:
        header_line = f.readline().decode("utf-8")
        if not header_line.startswith(_NFT1_MAGIC):
            raise ValueError(f"{path}: not an NFT1 file")
        header = json.loads(header_line[len(_NFT1_MAGIC):])
        shapes = [tuple(s) for s in header.pop("shapes")]
        payload = f.read()
    arrays = []
    offset = 0
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 4
        if offset + nbytes > len(payload):
            raise ValueError(f"{path}: truncated NFT1 payload")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4")
        arrays.append(arr.reshape(shape).copy())
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: trailing bytes in NFT1 payload")
    return arrays, header
