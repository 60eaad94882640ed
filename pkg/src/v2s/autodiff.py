"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Every operation returns a new :class:`Node` holding its value and a closure
that pushes the output gradient back to its parents. ``backward`` walks the
graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Node:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; their gradient
    accumulates across ``backward`` calls until :meth:`zero_grad` is called.
    """

    __slots__ = ("value", "_grad", "op", "parents", "_backward", "requires_grad")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        backward: Optional[Callable[[np.ndarray], None]] = None,
        requires_grad: Optional[bool] = None,
    ):
        self.value = np.asarray(value)
        self._grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray) -> None:
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)
        if self._grad is None:
            self._grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self._grad += g

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def parameter(value, dtype=np.float32) -> Node:
    return Node(np.asarray(value, dtype=dtype), requires_grad=True)


def constant(value, dtype=None) -> Node:
    arr = np.asarray(value) if dtype is None else np.asarray(value, dtype=dtype)
    return Node(arr, requires_grad=False)


def as_node(x, like: Optional[Node] = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else None
    return constant(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``.grad`` on every node reachable from a scalar ``loss``.

    Interior gradients are recomputed from scratch on each call; leaf
    gradients accumulate.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        if node.parents:
            node.zero_grad()
    loss._grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = as_node(a, b if isinstance(b, Node) else None), as_node(b, a if isinstance(a, Node) else None)
    out = a.value + b.value

    def _bw(g):
        a._accumulate(g)
        b._accumulate(g)

    return Node(out, (a, b), "add", _bw)


def sub(a, b) -> Node:
    a, b = as_node(a, b if isinstance(b, Node) else None), as_node(b, a if isinstance(a, Node) else None)

    def _bw(g):
        a._accumulate(g)
        b._accumulate(-g)

    return Node(a.value - b.value, (a, b), "sub", _bw)


def mul(a, b) -> Node:
    a, b = as_node(a, b if isinstance(b, Node) else None), as_node(b, a if isinstance(a, Node) else None)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g * b.value)
        if b.requires_grad:
            b._accumulate(g * a.value)

    return Node(a.value * b.value, (a, b), "mul", _bw)


def square(x: Node) -> Node:
    def _bw(g):
        x._accumulate(2.0 * g * x.value)

    return Node(x.value * x.value, (x,), "square", _bw)


def sigmoid(x: Node) -> Node:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def _bw(g):
        x._accumulate(g * out * (1.0 - out))

    return Node(out, (x,), "sigmoid", _bw)


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)

    def _bw(g):
        x._accumulate(g * (1.0 - out * out))

    return Node(out, (x,), "tanh", _bw)


# When a list is installed here, piecewise ops append the branch each element
# took. Finite-difference checks use it to spot probes that straddle a kink.
_branch_log: Optional[list] = None


@contextlib.contextmanager
def record_branches():
    """Collect the branch pattern of every relu/leaky-relu/max-pool evaluated inside."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _log_branch(pattern: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(pattern)


def relu(x: Node) -> Node:
    mask = x.value > 0
    _log_branch(mask)

    def _bw(g):
        x._accumulate(g * mask)

    return Node(x.value * mask, (x,), "relu", _bw)


def leaky_relu(x: Node, alpha: float = 0.3) -> Node:
    pos = x.value > 0
    _log_branch(pos)
    slope = np.where(pos, 1.0, alpha).astype(x.dtype)

    def _bw(g):
        x._accumulate(g * slope)

    return Node(x.value * slope, (x,), "leaky_relu", _bw)


def activation(x: Node, kind: str, alpha: float = 0.3) -> Node:
    if kind == "leaky-relu":
        return leaky_relu(x, alpha)
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------------- shaping


def reshape(x: Node, shape) -> Node:
    def _bw(g):
        x._accumulate(g.reshape(x.shape))

    return Node(x.value.reshape(shape), (x,), "reshape", _bw)


def transpose(x: Node, axes) -> Node:
    inv = np.argsort(axes)

    def _bw(g):
        x._accumulate(g.transpose(inv))

    return Node(x.value.transpose(axes), (x,), "transpose", _bw)


def getitem(x: Node, idx) -> Node:
    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)

    def _bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.value)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            x._accumulate(full)

    return Node(x.value[idx], (x,), "getitem", _bw)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = list(nodes)
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            if n.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                n._accumulate(g[tuple(sl)])

    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes, "concat", _bw)


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = list(nodes)

    def _bw(g):
        for i, n in enumerate(nodes):
            n._accumulate(np.take(g, i, axis=axis))

    return Node(np.stack([n.value for n in nodes], axis=axis), nodes, "stack", _bw)


def flip(x: Node, axis: int) -> Node:
    def _bw(g):
        x._accumulate(np.flip(g, axis=axis))

    return Node(np.flip(x.value, axis=axis).copy(), (x,), "flip", _bw)


# ---------------------------------------------------------------- reductions


def sum_(x: Node, axis=None, keepdims: bool = False) -> Node:
    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Node(np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,), "sum", _bw)


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), np.asarray(1.0 / count, dtype=x.dtype))


def mse(pred: Node, target) -> Node:
    target = as_node(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.value - target.value
    n = diff.size

    def _bw(g):
        d = (2.0 / n) * g * diff
        pred._accumulate(d)
        target._accumulate(-d)

    return Node(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred, target), "mse", _bw)


def global_avg_pool(x: Node) -> Node:
    """Mean over the spatial axes of a ``B×C×H×W`` map."""
    b, c, h, w = x.shape

    def _bw(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return Node(x.value.mean(axis=(2, 3)), (x,), "global_avg_pool", _bw)


# --------------------------------------------------------------------- layers


def matmul(a: Node, b: Node) -> Node:
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    return Node(a.value @ b.value, (a, b), "matmul", _bw)


def dense(x: Node, weights: Node, bias: Node) -> Node:
    """``x @ weights + bias`` for ``x`` of shape ``(..., in)``."""
    if x.shape[-1] != weights.shape[0] or weights.shape[1] != bias.shape[-1]:
        raise ShapeError(
            f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} do not agree"
        )
    out = x.value @ weights.value + bias.value

    def _bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate(g @ weights.value.T)
        if weights.requires_grad:
            weights._accumulate(x.value.reshape(-1, x.shape[-1]).T @ g2)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return Node(out, (x, weights, bias), "dense", _bw)


def _same_pads(size: int, k: int, s: int) -> tuple[int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def conv2d(
    x: Node,
    kernels: Node,
    stride=(1, 1),
    padding: str = "same",
) -> Node:
    """Cross-correlation of ``B×C×H×W`` input with ``F×C×kh×kw`` kernels."""
    if isinstance(stride, int):
        stride = (stride, stride)
    sh, sw = stride
    b, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, kernels {kernels.shape} expect {kc}")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pads(h, kh, sh), _same_pads(w, kw, sw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    xv = x.value
    wmat = kernels.value.reshape(f, -1)

    if kh == 1 and kw == 1 and not (pt or pb or pl or pr):
        xs = xv[:, :, ::sh, ::sw]
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(xv, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xv
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    out = (cols @ wmat.T).reshape(b, ho, wo, f).transpose(0, 3, 1, 2)

    def _bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if kernels.requires_grad:
            kernels._accumulate((gm.T @ cols).reshape(kernels.shape))
        if not x.requires_grad:
            return
        dcols = gm @ wmat
        if kh == 1 and kw == 1 and not (pt or pb or pl or pr):
            dx = np.zeros_like(xv)
            dx[:, :, ::sh, ::sw] = dcols.reshape(b, ho, wo, c).transpose(0, 3, 1, 2)
            x._accumulate(dx)
            return
        dcols = dcols.reshape(b, ho, wo, c, kh, kw)
        dxp = np.zeros((b, c, hp, wp), dtype=xv.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
        x._accumulate(dxp[:, :, pt : pt + h, pl : pl + w])

    return Node(np.ascontiguousarray(out), (x, kernels), "conv2d", _bw)


def conv1d(x: Node, kernels: Node) -> Node:
    """Same-padded convolution over time for ``B×C×T`` input, ``F×C×k`` kernels."""
    b, c, t = x.shape
    f, kc, k = kernels.shape
    out = conv2d(reshape(x, (b, c, 1, t)), reshape(kernels, (f, kc, 1, k)), (1, 1), "same")
    return reshape(out, (b, f, t))


def max_pool_time(x: Node, width: int = 2) -> Node:
    """Stride-1 max pool over the last axis; the tail is edge-padded."""
    t = x.shape[-1]
    pad = [(0, 0)] * (x.value.ndim - 1) + [(0, width - 1)]
    xp = np.pad(x.value, pad, mode="edge")
    win = sliding_window_view(xp, width, axis=-1)
    arg = win.argmax(axis=-1)
    _log_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        src = np.minimum(np.arange(t) + arg, t - 1).reshape(-1, t)
        dx = np.zeros(src.shape, dtype=x.dtype)
        rows = np.repeat(np.arange(src.shape[0]), t)
        np.add.at(dx, (rows, src.ravel()), g.reshape(-1))
        x._accumulate(dx.reshape(x.shape))

    return Node(out, (x,), "max_pool_time", _bw)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.99, eps: float = 1e-5):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Node, gamma: Node, beta: Node, state: BatchNormState, mode: str = "train") -> Node:
    """Normalize per channel (axis 1) over every other axis."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(a for a in range(x.value.ndim) if a != 1)
    bshape = [1] * x.value.ndim
    bshape[1] = c
    if mode == "train":
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        m = state.momentum
        state.mean = (m * state.mean + (1 - m) * mu).astype(state.mean.dtype)
        state.var = (m * state.var + (1 - m) * var).astype(state.var.dtype)
    elif mode == "infer":
        mu, var = state.mean.astype(x.dtype), state.var.astype(x.dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.value - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.value.reshape(bshape) + beta.value.reshape(bshape)
    count = x.value.size // c

    def _bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if not x.requires_grad:
            return
        gx = g * gamma.value.reshape(bshape)
        if mode == "infer":
            x._accumulate(gx * inv.reshape(bshape))
            return
        s1 = gx.sum(axis=axes).reshape(bshape)
        s2 = (gx * xhat).sum(axis=axes).reshape(bshape)
        x._accumulate(inv.reshape(bshape) / count * (count * gx - s1 - xhat * s2))

    return Node(out, (x, gamma, beta), "batch_norm", _bw)


def dropout(x: Node, rate: float, mode: str = "train", rng: Optional[np.random.Generator] = None) -> Node:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def _bw(g):
        x._accumulate(g * mask)

    return Node(x.value * mask, (x,), "dropout", _bw)


def gru_step(x: Node, h_prev: Node, params: dict) -> Node:
    """One GRU update; ``params`` holds ``W`` (in×3h), ``U`` (h×3h), ``b`` (3h).

    Gate order along the last axis is update, reset, candidate. The new state
    is ``z*h_prev + (1-z)*candidate``.
    """
    return gru_step_projected(dense(x, params["W"], params["b"]), h_prev, params)


def gru_step_projected(xw: Node, h_prev: Node, params: dict) -> Node:
    hid = h_prev.shape[-1]
    if params["U"].shape != (hid, 3 * hid) or xw.shape[-1] != 3 * hid:
        raise ShapeError(f"gru: hidden size {hid} does not match U {params['U'].shape}")
    U = params["U"]
    hu = h_prev @ U[:, : 2 * hid]
    z = sigmoid(xw[:, :hid] + hu[:, :hid])
    r = sigmoid(xw[:, hid : 2 * hid] + hu[:, hid:])
    cand = tanh(xw[:, 2 * hid :] + (r * h_prev) @ U[:, 2 * hid :])
    return z * h_prev + (1.0 - z) * cand


def gru_sequence(seq: Node, params: dict, reverse: bool = False) -> Node:
    """Run a GRU over ``B×T×D`` input from a zero state; returns ``B×T×h``."""
    b, t, _ = seq.shape
    hid = params["U"].shape[0]
    xw = dense(seq, params["W"], params["b"])
    h = constant(np.zeros((b, hid), dtype=seq.dtype))
    outs: list[Optional[Node]] = [None] * t
    steps = range(t - 1, -1, -1) if reverse else range(t)
    for i in steps:
        h = gru_step_projected(xw[:, i, :], h, params)
        outs[i] = h
    return stack(outs, axis=1)


def bidirectional_gru(seq: Node, forward_params: dict, backward_params: dict) -> Node:
    fw = gru_sequence(seq, forward_params)
    bw = gru_sequence(seq, backward_params, reverse=True)
    return concat([fw, bw], axis=-1)


def highway(x: Node, params: dict) -> Node:
    """``T*H + (1-T)*x`` with ``H = relu(x W_h + b_h)`` and sigmoid gate ``T``."""
    if params["W_h"].shape != (x.shape[-1], x.shape[-1]):
        raise ShapeError(f"highway needs a square transform, got {params['W_h'].shape} for input {x.shape}")
    h = relu(dense(x, params["W_h"], params["b_h"]))
    t = sigmoid(dense(x, params["W_t"], params["b_t"]))
    return t * h + (1.0 - t) * x


def parameters_of(nodes: Iterable[Node]) -> list[Node]:
    return [n for n in nodes if n.requires_grad and not n.parents]
