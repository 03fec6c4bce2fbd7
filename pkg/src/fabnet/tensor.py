"""Rank-4 NHWC tensors with a reverse-mode differentiation tape.

All arithmetic is 64-bit. Every forward operation either runs untracked
(pure numpy, no graph) or records one node on the tape of its tracked
operands, holding just enough state to produce exact gradients when
``backward`` replays the tape in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import GraphError, ShapeError


class Shape4(NamedTuple):
    """Extents of a rank-4 tensor in (batch, height, width, channel) order."""

    batch: int
    height: int
    width: int
    channels: int

    @property
    def element_count(self) -> int:
        return self.batch * self.height * self.width * self.channels


class Tensor:
    """A rank-4 float64 array, optionally tied to a tape node.

    ``data`` is row-major (batch, height, width, channel). Tensors are
    value-immutable once created; only the optimizer mutates parameter
    data, under exclusive ownership. ``tape``/``node_id`` are rebound
    each forward pass when a persistent tensor is watched on a new tape.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: Optional["Tape"] = None,
                 node_id: Optional[int] = None):
        if data.ndim != 4:
            raise ShapeError(f"tensor data must be rank 4, got rank {data.ndim}")
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> Shape4:
        return Shape4(*self.data.shape)

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the element values."""
        return self.data.reshape(-1)

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        track = f", node_id={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={tuple(self.shape)}{track})"


# GradientMap: node_id -> gradient tensor of identical shape.
GradientMap = dict

# Test hook: op name -> scale factor applied to that op's parent gradients.
# Lets the verification CLI demonstrate that a wrong backward rule is caught.
_BACKWARD_FAULTS: dict = {}


@contextlib.contextmanager
def backward_fault(op: str, scale: float = 2.0):
    """Deliberately corrupt the backward rule of ``op`` while active."""
    _BACKWARD_FAULTS[op] = scale
    try:
        yield
    finally:
        _BACKWARD_FAULTS.pop(op, None)


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of one forward pass.

    Node ids are assigned in creation order, so every operand id is
    smaller than its consumer's id and a single reverse sweep visits
    each node exactly once. A tape is owned by one forward/backward
    pass and discarded afterwards.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list = []

    def record(self, op: str, parents: Sequence[Optional[int]],
               backward: Optional[Callable]) -> int:
        if backward is not None and op in _BACKWARD_FAULTS:
            scale = _BACKWARD_FAULTS[op]
            inner = backward
            backward = lambda g: tuple(
                None if pg is None else pg * scale for pg in inner(g)
            )
        self.nodes.append(_Node(op, tuple(parents), backward))
        return len(self.nodes) - 1

    def watch(self, t: Tensor) -> None:
        """Register an existing tensor as a leaf of this tape."""
        t.tape = self
        t.node_id = self.record("leaf", (), None)


def _result_tape(op: str, operands: Sequence[Tensor]) -> Optional[Tape]:
    """Tape shared by the tracked operands, or None if all are constants."""
    tape = None
    for t in operands:
        if not t.tracked:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise GraphError(f"{op}: operands recorded on different tapes")
    return tape


def tensor_new(shape, values, track: bool = False,
               tape: Optional[Tape] = None) -> Tensor:
    """Create a tensor from flat row-major values.

    With ``track=True`` the tensor is registered as a leaf on ``tape``
    and will receive a gradient from ``backward``.
    """
    shape = Shape4(*shape)
    if min(shape) < 1:
        raise ShapeError(f"all extents must be >= 1, got {tuple(shape)}")
    data = np.asarray(values, dtype=np.float64).reshape(-1)
    if data.size != shape.element_count:
        raise ShapeError(
            f"got {data.size} values for shape {tuple(shape)} "
            f"({shape.element_count} elements)")
    if not np.all(np.isfinite(data)):
        raise ValueError("tensor values must be finite")
    out = Tensor(data.reshape(shape).copy())
    if track:
        if tape is None:
            raise GraphError("track=True requires a tape")
        tape.watch(out)
    return out


def _emit(op: str, operands: Sequence[Tensor], data: np.ndarray,
          backward: Optional[Callable]) -> Tensor:
    tape = _result_tape(op, operands)
    if tape is None:
        return Tensor(data)
    nid = tape.record(op, tuple(t.node_id for t in operands), backward)
    return Tensor(data, tape, nid)


def ew_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; gradients pass through unchanged to both operands."""
    if a.shape != b.shape:
        raise ShapeError(f"ew_add: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return _emit("ew_add", (a, b), a.data + b.data, lambda g: (g, g))


def ew_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.

    ``b`` may alternatively have shape (batch, 1, 1, channels), in which
    case it gates every spatial position of ``a`` and its gradient is
    the spatial sum of ``g * a``. No other broadcast is permitted.
    """
    na, ha, wa, ca = a.shape
    if a.shape == b.shape:
        def back(g):
            return (g * b.data, g * a.data)
        return _emit("ew_mul", (a, b), a.data * b.data, back)
    if b.shape == (na, 1, 1, ca):
        def back(g):
            return (g * b.data, (g * a.data).sum(axis=(1, 2), keepdims=True))
        return _emit("ew_mul", (a, b), a.data * b.data, back)
    raise ShapeError(f"ew_mul: shapes {tuple(a.shape)} and {tuple(b.shape)} "
                     "are neither equal nor (batch,1,1,channels) gate-compatible")


def mean_spatial(x: Tensor) -> Tensor:
    """Per-channel mean over the spatial extent: (N,H,W,C) -> (N,1,1,C)."""
    _, h, w, _ = x.shape
    out = x.data.mean(axis=(1, 2), keepdims=True)
    shape = tuple(x.shape)

    def back(g):
        return (np.broadcast_to(g / (h * w), shape).copy(),)

    return _emit("mean_spatial", (x,), out, back)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on flattened (N,1,1,Din) inputs.

    ``w`` holds a Dout x Din matrix as a (1,1,Dout,Din) tensor and ``b``
    a Dout vector as (1,1,1,Dout); the output is (N,1,1,Dout).
    """
    n, h, ww, din = x.shape
    if (h, ww) != (1, 1):
        raise ShapeError(f"dense: input spatial extent must be 1x1, got {tuple(x.shape)}")
    if w.shape.batch != 1 or w.shape.height != 1 or w.shape.channels != din:
        raise ShapeError(f"dense: weight {tuple(w.shape)} does not accept "
                         f"{din}-channel input")
    dout = w.shape.width
    if b.shape != (1, 1, 1, dout):
        raise ShapeError(f"dense: bias {tuple(b.shape)} does not match "
                         f"{dout} outputs")
    x2 = x.data.reshape(n, din)
    wm = w.data.reshape(dout, din)
    out = (x2 @ wm.T + b.data.reshape(dout)).reshape(n, 1, 1, dout)

    def back(g):
        g2 = g.reshape(n, dout)
        return ((g2 @ wm).reshape(n, 1, 1, din),
                (g2.T @ x2).reshape(1, 1, dout, din),
                g2.sum(axis=0).reshape(1, 1, 1, dout))

    return _emit("dense", (x, w, b), out, back)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0.0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0),
                 lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function in the sign-branched form, overflow-free."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a (1,1,1,1) scalar tensor."""
    out = np.array(x.data.sum(), dtype=np.float64).reshape(1, 1, 1, 1)
    shape = tuple(x.shape)

    def back(g):
        return (np.full(shape, g.reshape(-1)[0]),)

    return _emit("sum_all", (x,), out, back)


def backward(tape: Tape, loss: Union[Tensor, int]) -> GradientMap:
    """Reverse-mode gradients of a scalar loss for every tracked node.

    Seeds the loss gradient with 1 and sweeps the tape once in reverse
    id order, so repeated runs are bit-identical.
    """
    if isinstance(loss, Tensor):
        if loss.tape is not tape or loss.node_id is None:
            raise GraphError("loss tensor was not recorded on this tape")
        loss_id = loss.node_id
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    else:
        loss_id = int(loss)
    if not 0 <= loss_id < len(tape.nodes):
        raise GraphError(f"node {loss_id} is not on the tape")

    grads: dict = {loss_id: np.ones((1, 1, 1, 1))}
    for nid in range(loss_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward is None:
            continue
        for pid, pg in zip(node.parents, node.backward(g)):
            if pid is None or pg is None:
                continue
            prev = grads.get(pid)
            grads[pid] = pg if prev is None else prev + pg
    return {nid: Tensor(g) for nid, g in grads.items()}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must map one leaf tensor to a scalar tensor and be
    deterministic. Returns the max over coordinates of
    ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tape = Tape()
    leaf = tensor_new(x.shape, x.values, track=True, tape=tape)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise ValueError("grad_check: function produced a non-finite value")
    grads = backward(tape, out)
    analytic = grads.get(leaf.node_id)
    aflat = (analytic.values if analytic is not None
             else np.zeros(x.shape.element_count))

    base = x.values.copy()
    worst = 0.0
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + eps
        fp = f(tensor_new(x.shape, bumped)).item()
        bumped[i] = base[i] - eps
        fm = f(tensor_new(x.shape, bumped)).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("grad_check: function produced a non-finite value")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(aflat[i] - numeric) / max(1e-12, abs(aflat[i]) + abs(numeric))
        if err > worst:
            worst = err
    return worst
