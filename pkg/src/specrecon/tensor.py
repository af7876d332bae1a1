"""
Dense N x C x H x W tensors with define-by-run reverse-mode differentiation.

Only the operations the reconstruction network needs are provided:

    conv2d            "same"-padded 2-D convolution (reflect or zero padding)
    pixel_shuffle     depth -> space, channel-major sub-pixel layout
    pixel_unshuffle   space -> depth, exact inverse of pixel_shuffle
    activation        leaky_relu / sigmoid / identity
    global_avg_pool   spatial mean per channel
    linear            affine map on N x C x 1 x 1 tensors
    combine           add / mul (with channel broadcast) / channel concat
    sub, absolute, mean, total   helpers for losses

Every op returns a new Tensor. When at least one input requires a gradient
(and recording is enabled) the output remembers its parents and a closure
mapping the output gradient to parent gradients. ``backward`` walks the
recorded graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import PaddingError, ShapeError

__all__ = [
    "Tensor", "Graph", "CheckReport", "no_grad", "backward", "grad_check",
    "conv2d", "pixel_shuffle", "pixel_unshuffle", "activation", "leaky_relu",
    "sigmoid", "global_avg_pool", "linear", "combine", "add", "mul", "concat",
    "sub", "absolute", "mean", "total",
]

_state = threading.local()


def _recording():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def _record_branches():
    """Collect the branch masks taken by piecewise ops (leaky_relu, abs)."""
    prev = getattr(_state, "branches", None)
    _state.branches = []
    try:
        yield _state.branches
    finally:
        _state.branches = prev


def _note_branch(mask):
    rec = getattr(_state, "branches", None)
    if rec is not None:
        rec.append(mask)


class Tensor:
    """A float array that can take part in a differentiation graph.

    ``data`` is treated as immutable once the tensor exists; only ``grad``
    is ever written to.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self.parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, op, parents, backward_fn):
        out = cls(data)
        if _recording() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.op = op
            out.parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.op is None

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Graph and backward pass
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Recorded ops reachable from one output, inputs before consumers."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor, graph: Graph | None = None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf.

    Intermediate gradients are kept in a local table and discarded.
    Returns the graph that was walked.
    """
    if loss.data.size != 1 or loss.ndim != 4:
        raise ShapeError(f"backward needs a 1x1x1x1 loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

_PAD_MODES = {"reflect": "reflect", "zero": "constant"}


def _fold_axis(g, pad, axis, mode):
    """Adjoint of padding ``g`` by ``pad`` on both ends of ``axis``."""
    if pad == 0:
        return g
    n = g.shape[axis] - 2 * pad
    g = np.moveaxis(g, axis, 0)
    out = g[pad:pad + n].copy()
    if mode == "reflect":
        # padded index t < pad mirrors row pad - t; bottom rows mirror n - 2 - k
        out[1:pad + 1] += g[pad - 1::-1][:pad]
        out[n - 1 - pad:n - 1] += g[pad + n:][::-1]
    return np.moveaxis(out, 0, axis)


def _pad_adjoint(gp, ph, pw, mode):
    return _fold_axis(_fold_axis(gp, ph, 2, mode), pw, 3, mode)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "reflect") -> Tensor:
    """2-D cross-correlation with "same" padding of ``k // 2`` per side.

    Output spatial size is ``ceil(H / stride)``. Kernels must be odd-sized.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    O, Ci, kH, kW = weight.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Ci}")
    if kH % 2 == 0 or kW % 2 == 0:
        raise ShapeError(f"conv2d: even kernel {kH}x{kW} not supported")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if padding not in _PAD_MODES:
        raise PaddingError(f"unknown padding mode {padding!r}")
    ph, pw = kH // 2, kW // 2
    if padding == "reflect" and (ph >= H or pw >= W):
        raise PaddingError(f"reflect pad ({ph},{pw}) too wide for {H}x{W} input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=_PAD_MODES[padding])
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    M = N * Ho * Wo
    # channels-last columns: rows are output pixels, columns (kh, kw, c)
    xcl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = np.lib.stride_tricks.sliding_window_view(xcl, (kH, kW), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :Ho, :Wo]                  # N,Ho,Wo,C,kH,kW
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(M, kH * kW * C)
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(O, kH * kW * C)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))

    def _back(g):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(M, O)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if weight.requires_grad:
            gw = (cols.T @ g2).T.reshape(O, kH, kW, C).transpose(0, 3, 1, 2)
            gw = np.ascontiguousarray(gw)
        if x.requires_grad:
            if stride == 1:
                # full correlation of the zero-padded gradient with the flipped kernel
                gcl = np.pad(g2.reshape(N, Ho, Wo, O),
                             ((0, 0), (kH - 1, kH - 1), (kW - 1, kW - 1), (0, 0)))
                gwin = np.lib.stride_tricks.sliding_window_view(gcl, (kH, kW), axis=(1, 2))
                gcols = gwin.transpose(0, 1, 2, 4, 5, 3).reshape(N * Hp * Wp, kH * kW * O)
                wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kH * kW * O, C)
                gp = (gcols @ wflip).reshape(N, Hp, Wp, C)
            else:
                gcols = (g2 @ w2).reshape(N, Ho, Wo, kH, kW, C)
                gp = np.zeros((N, Hp, Wp, C), dtype=gcols.dtype)
                for i in range(kH):
                    for j in range(kW):
                        gp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, i, j]
            gx = _pad_adjoint(gp.transpose(0, 3, 1, 2), ph, pw, padding)
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, "conv2d", parents, _back)


# ---------------------------------------------------------------------------
# Sub-pixel reshapes
# ---------------------------------------------------------------------------

def _shuffle(a, r):
    N, C, H, W = a.shape
    c = C // (r * r)
    return a.reshape(N, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(N, c, H * r, W * r)


def _unshuffle(a, r):
    N, C, H, W = a.shape
    h, w = H // r, W // r
    return a.reshape(N, C, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(N, C * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: ``out[n, c, h*r+dy, w*r+dx] = x[n, c*r*r + dy*r + dx, h, w]``."""
    if r < 1 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^2={r * r}")
    return Tensor._from_op(_shuffle(x.data, r), "pixel_shuffle", (x,),
                           lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: spatial {x.shape[2:]} not divisible by {r}")
    return Tensor._from_op(_unshuffle(x.data, r), "pixel_unshuffle", (x,),
                           lambda g: (_shuffle(g, r),))


# ---------------------------------------------------------------------------
# Elementwise and reductions
# ---------------------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data >= 0
    _note_branch(mask)
    out = np.where(mask, x.data, slope * x.data)
    return Tensor._from_op(out, "leaky_relu", (x,),
                           lambda g: (np.where(mask, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._from_op(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    H, W = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _back(g):
        return (np.broadcast_to(g / (H * W), x.shape).copy(),)

    return Tensor._from_op(out, "global_avg_pool", (x,), _back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``W @ x + b`` per batch element; x is N x C x 1 x 1."""
    if x.ndim != 4 or x.shape[2:] != (1, 1):
        raise ShapeError(f"linear expects N x C x 1 x 1 input, got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: weight {weight.shape} incompatible with input {x.shape}")
    N, C = x.shape[:2]
    O = weight.shape[0]
    flat = x.data.reshape(N, C)
    out = flat @ weight.data.T
    if bias is not None:
        if bias.shape != (O,):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({O},)")
        out = out + bias.data

    def _back(g):
        g2 = g.reshape(N, O)
        gx = (g2 @ weight.data).reshape(N, C, 1, 1) if x.requires_grad else None
        gw = g2.T @ flat if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out.reshape(N, O, 1, 1), "linear", parents, _back)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=(2, 3), keepdims=True)


def _check_binary(a, b, name, allow_channel_broadcast):
    if a.shape == b.shape:
        return
    if allow_channel_broadcast and a.ndim == 4 and b.ndim == 4 and a.shape[:2] == b.shape[:2] \
            and (a.shape[2:] == (1, 1) or b.shape[2:] == (1, 1)):
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add", False)
    return Tensor._from_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub", False)
    return Tensor._from_op(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; N x C x 1 x 1 broadcasts against N x C x H x W."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul", True)

    def _back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, "mul", (a, b), _back)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along channels."""
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat: shape {t.shape} does not match {ref} outside channels")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return Tensor._from_op(out, "concat", tuple(tensors),
                           lambda g: tuple(np.split(g, splits, axis=1)))


def combine(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "concat_channels":
        return concat([a, b])
    raise ValueError(f"unknown combine kind {kind!r}")


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    _note_branch(np.sign(x.data))
    return Tensor._from_op(np.abs(x.data), "abs", (x,), lambda g: (g * np.sign(x.data),))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 1 x 1 x 1 x 1 tensor."""
    out = x.data.sum().reshape(1, 1, 1, 1)
    return Tensor._from_op(out, "sum", (x,),
                           lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = (x.data.sum() / n).reshape(1, 1, 1, 1)
    return Tensor._from_op(out, "mean", (x,),
                           lambda g: (np.broadcast_to(g.reshape(()) / n, x.shape).copy(),))


# ---------------------------------------------------------------------------
# Finite-difference checker
# ---------------------------------------------------------------------------

@dataclass
class CheckReport:
    max_rel_err: float
    passed: bool
    per_input: list
    checked: int
    # probes that flipped a leaky_relu/abs branch and were retried with a finer step
    reprobed: int = 0
    # probes still straddling a kink at the finest step; excluded from max_rel_err
    skipped: int = 0

    def __bool__(self):
        return bool(self.passed)


def grad_check(op: Callable[..., Tensor], input_shapes=None, seed: int = 0,
               tolerance: float = 1e-3, step: float = 1e-4, max_samples: int | None = None,
               inputs: Sequence[np.ndarray] | None = None, floor: float = 1e-6,
               fallback_steps=(1e-6,)) -> CheckReport:
    """Compare backward() against central differences for ``op``.

    The scalar under test is ``sum(op(*inputs) * P)`` with a fixed random
    projection ``P``. Inputs are drawn from N(0, 1) in float64 unless given
    explicitly. With ``max_samples`` set, at most that many elements per
    input are probed, chosen by the seeded generator.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.

    A central difference is only meaningful if neither probe crosses a kink
    of a piecewise-linear op. Each probe records the branch taken by every
    leaky_relu/abs; when that differs from the unperturbed pass, the element
    is re-probed with the ``fallback_steps`` in turn, and skipped if every
    step straddles a kink.
    """
    rng = np.random.default_rng(seed)
    if inputs is None:
        inputs = [rng.standard_normal(s) for s in input_shapes]
    arrays = [np.array(a, dtype=np.float64) for a in inputs]

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*leaves)
    proj = rng.standard_normal(out.shape)
    backward(total(mul(out, Tensor(proj))))

    def f(vals):
        with no_grad(), _record_branches() as branches:
            value = float(np.sum(op(*[Tensor(v) for v in vals]).data * proj))
        return value, branches

    _, base = f(arrays)

    def same_branches(other):
        return len(other) == len(base) and all(np.array_equal(a, b) for a, b in zip(other, base))

    worst, per_input, checked, reprobed, skipped = 0.0, [], 0, 0, 0
    for i, arr in enumerate(arrays):
        analytic = leaves[i].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        idx = np.arange(arr.size)
        if max_samples is not None and arr.size > max_samples:
            idx = np.sort(rng.choice(arr.size, size=max_samples, replace=False))
        err_i = 0.0
        for k in idx:
            numeric = None
            for attempt, h in enumerate((step,) + tuple(fallback_steps)):
                vals = [a.copy() for a in arrays]
                flat = vals[i].reshape(-1)
                orig = flat[k]
                flat[k] = orig + h
                fp, bp = f(vals)
                flat[k] = orig - h
                fm, bm = f(vals)
                if same_branches(bp) and same_branches(bm):
                    numeric = (fp - fm) / (2 * h)
                    reprobed += attempt > 0
                    break
            if numeric is None:
                skipped += 1
                continue
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            err_i = max(err_i, err)
            checked += 1
        per_input.append(err_i)
        worst = max(worst, err_i)
    return CheckReport(max_rel_err=worst, passed=worst <= tolerance, per_input=per_input,
                       checked=checked, reprobed=reprobed, skipped=skipped)
