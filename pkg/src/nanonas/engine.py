"""Minimal reverse-mode autodiff engine on numpy arrays.

Provides exactly the primitives the supernet needs: dense linear algebra,
grouped/depthwise convolution, batch norm, channel shuffle/split, softmax
and cross-entropy. Values are float32 by default; a float64 mode exists for
gradient verification. Convolution has two interchangeable forwards: a
patch-matrix (im2col) fast path and a direct sliding-window path that can
count multiply-accumulates for cost oracles.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operands do not satisfy a primitive's shape rules."""


class NumericsError(ArithmeticError):
    """Non-finite values or domain violations in a numeric operation."""


# ---------------------------------------------------------------------------
# engine-wide modes
# ---------------------------------------------------------------------------

_DTYPE_STACK: list[type] = [np.float32]
_CONV_IMPL_STACK: list[str] = ["im2col"]
_STRICT_FINITE: list[bool] = [False]
_MAC_COUNTER: list["MacCounter | None"] = [None]


def current_dtype():
    return _DTYPE_STACK[-1]


@contextmanager
def precision(dtype):
    """Set the engine value dtype ("float32" or "float64") for a scope."""
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported engine dtype {dtype!r}")
    _DTYPE_STACK.append(dt)
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


@contextmanager
def conv_direct():
    """Route conv2d forwards through the direct sliding-window implementation."""
    _CONV_IMPL_STACK.append("direct")
    try:
        yield
    finally:
        _CONV_IMPL_STACK.pop()


@contextmanager
def strict_finite():
    """Validate every op output for NaN/Inf (slow; for invariant tests)."""
    _STRICT_FINITE.append(True)
    try:
        yield
    finally:
        _STRICT_FINITE.pop()


class MacCounter:
    """Accumulates multiply-accumulate counts from instrumented ops."""

    def __init__(self):
        self.macs = 0


@contextmanager
def count_macs():
    """Count MACs performed by direct convolutions and matmuls in this scope."""
    counter = MacCounter()
    _MAC_COUNTER.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTER.pop()


def _macs():
    return _MAC_COUNTER[-1]


def _check_finite(op, arr):
    if _STRICT_FINITE[-1] and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")
    return arr


# ---------------------------------------------------------------------------
# tensors and the recorded graph
# ---------------------------------------------------------------------------


class Tensor:
    """Dense n-d value array with an optional gradient of identical shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or current_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detached(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("op", "input_ids", "output_ids", "out_shapes", "backward_fn", "needs")

    def __init__(self, op, input_ids, output_ids, out_shapes, backward_fn, needs):
        self.op = op
        self.input_ids = input_ids
        self.output_ids = output_ids
        self.out_shapes = out_shapes
        self.backward_fn = backward_fn
        self.needs = needs


class Graph:
    """Ordered record of primitive applications for one backward pass.

    Inputs always enter the record before their consumers, and backward
    sweeps the record in reverse exactly once.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._tensors: list[Tensor] = []
        self._ids: dict[int, int] = {}
        self._needs: set[int] = set()
        self.dtype = current_dtype()

    def __enter__(self):
        _GRAPHS.append(self)
        return self

    def __exit__(self, *exc):
        _GRAPHS.pop()
        return False

    def _register(self, t: Tensor) -> int:
        gid = self._ids.get(id(t))
        if gid is None:
            gid = len(self._tensors)
            self._tensors.append(t)
            self._ids[id(t)] = gid
            if t.requires_grad:
                self._needs.add(gid)
        return gid

    def tensor_needs(self, t: Tensor) -> bool:
        if t.requires_grad:
            return True
        gid = self._ids.get(id(t))
        return gid is not None and gid in self._needs

    def record(self, op, inputs, outputs, backward_fn):
        needs = [self.tensor_needs(t) for t in inputs]
        input_ids = [self._register(t) for t in inputs]
        output_ids = [self._register(t) for t in outputs]
        for gid in output_ids:
            self._needs.add(gid)
        self.nodes.append(
            Node(op, input_ids, output_ids, [t.shape for t in outputs], backward_fn, needs)
        )

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of a scalar loss w.r.t. every tensor recorded in the graph.

        Returns a map from graph tensor id to gradient array and fills the
        .grad of every requires_grad tensor seen by the graph (zeros when the
        tensor does not participate in the loss).
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        loss_gid = self._ids.get(id(loss))
        if loss_gid is None:
            raise ValueError("backward: loss was not produced under this graph")
        if not np.all(np.isfinite(loss.data)):
            raise NumericsError("backward: loss is not finite")

        grads: dict[int, np.ndarray] = {
            loss_gid: np.ones_like(np.asarray(loss.data))
        }
        for node in reversed(self.nodes):
            if not any(gid in grads for gid in node.output_ids):
                continue
            gouts = [
                grads.get(gid, np.zeros(shape, dtype=self.dtype))
                for gid, shape in zip(node.output_ids, node.out_shapes)
            ]
            gins = node.backward_fn(gouts, node.needs)
            for gid, need, gin in zip(node.input_ids, node.needs, gins):
                if not need or gin is None:
                    continue
                if gid in grads:
                    grads[gid] = grads[gid] + gin
                else:
                    grads[gid] = gin

        for t in self._tensors:
            if t.requires_grad:
                gid = self._ids[id(t)]
                t.grad = grads.get(gid, np.zeros_like(t.data))
        return grads

    def grad_of(self, t: Tensor):
        gid = self._ids.get(id(t))
        return None if gid is None else gid


_GRAPHS: list[Graph] = []


def active_graph() -> Graph | None:
    return _GRAPHS[-1] if _GRAPHS else None


def _record(op, inputs, outputs, backward_fn):
    g = active_graph()
    if g is None:
        return
    if not any(g.tensor_needs(t) for t in inputs):
        return
    g.record(op, inputs, outputs, backward_fn)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    c = _macs()
    if c is not None:
        c.macs += a.shape[0] * a.shape[1] * b.shape[1]
    out = Tensor(_check_finite("matmul", a.data @ b.data))

    def bwd(gouts, needs):
        (g,) = gouts
        return [
            g @ b.data.T if needs[0] else None,
            a.data.T @ g if needs[1] else None,
        ]

    _record("matmul", [a, b], [out], bwd)
    return out


def _reduce_broadcast(g, shape):
    # sum gradient over axes numpy broadcasting expanded
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(_check_finite("add", out_data))

    def bwd(gouts, needs):
        (g,) = gouts
        return [
            _reduce_broadcast(g, a.shape) if needs[0] else None,
            _reduce_broadcast(g, b.shape) if needs[1] else None,
        ]

    _record("add", [a, b], [out], bwd)
    return out


def scalar_mul(x: Tensor, s) -> Tensor:
    """x scaled by s, where s is a python scalar or a one-element Tensor."""
    x = _as_tensor(x)
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scalar-mul: scale must be one element, got shape {s.shape}")
        sval = s.data.reshape(())
        out = Tensor(_check_finite("scalar-mul", x.data * sval))

        def bwd(gouts, needs):
            (g,) = gouts
            gx = g * sval if needs[0] else None
            gs = None
            if needs[1]:
                gs = np.asarray(np.sum(g * x.data), dtype=x.data.dtype).reshape(s.shape)
            return [gx, gs]

        _record("scalar-mul", [x, s], [out], bwd)
        return out

    sval = float(s)
    out = Tensor(_check_finite("scalar-mul", x.data * sval))

    def bwd(gouts, needs):
        (g,) = gouts
        return [g * sval if needs[0] else None]

    _record("scalar-mul", [x], [out], bwd)
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0  # subgradient at 0 is 0
    out = Tensor(np.where(mask, x.data, 0))

    def bwd(gouts, needs):
        (g,) = gouts
        return [g * mask if needs[0] else None]

    _record("relu", [x], [out], bwd)
    return out


# -- convolution -------------------------------------------------------------


def _conv_out_size(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def _pad_input(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp, kh, kw, stride):
    # xp: (N, C, Hp, Wp) -> (N, C*kh*kw, Ho*Wo)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols, n, c, hp, wp, kh, kw, ho, wo, stride, padding):
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for u in range(kh):
        for v in range(kw):
            xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += cols[
                :, :, u, v
            ]
    if padding:
        xp = xp[:, :, padding:-padding, padding:-padding]
    return xp


def _conv_forward_im2col(xd, wd, stride, padding, groups):
    n, c, _, _ = xd.shape
    o, i_pg, kh, kw = wd.shape
    xp = _pad_input(xd, padding)
    if groups == 1:
        cols, ho, wo = _im2col(xp, kh, kw, stride)
        out = np.matmul(wd.reshape(o, -1), cols).reshape(n, o, ho, wo)
    elif groups == c and o == c and i_pg == 1:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.einsum("nchwuv,cuv->nchw", win, wd[:, 0], optimize=True)
        out = np.ascontiguousarray(out)
    else:
        c_pg = c // groups
        o_pg = o // groups
        parts = []
        for gi in range(groups):
            xg = xp[:, gi * c_pg : (gi + 1) * c_pg]
            wg = wd[gi * o_pg : (gi + 1) * o_pg]
            cols, ho, wo = _im2col(xg, kh, kw, stride)
            parts.append(np.matmul(wg.reshape(o_pg, -1), cols).reshape(n, o_pg, ho, wo))
        out = np.concatenate(parts, axis=1)
    return out


def _conv_forward_direct(xd, wd, stride, padding, groups):
    """Direct sliding-window convolution; instruments the MAC counter."""
    n, c, _, _ = xd.shape
    o, i_pg, kh, kw = wd.shape
    xp = _pad_input(xd, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=xd.dtype)
    o_pg = o // groups
    counter = _macs()
    for bn in range(n):
        for oc in range(o):
            gi = oc // o_pg
            ci = gi * i_pg
            ker = wd[oc]
            for i in range(ho):
                hi = i * stride
                for j in range(wo):
                    wj = j * stride
                    window = xp[bn, ci : ci + i_pg, hi : hi + kh, wj : wj + kw]
                    out[bn, oc, i, j] = np.sum(window * ker)
                    if counter is not None:
                        counter.macs += window.size
    return out


def _conv_backward(gout, xd, wd, stride, padding, groups, needs):
    n, c, h, w = xd.shape
    o, i_pg, kh, kw = wd.shape
    xp = _pad_input(xd, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    _, _, ho, wo = gout.shape
    gx = gw = None
    if groups == 1:
        cols, _, _ = _im2col(xp, kh, kw, stride)
        g2 = gout.reshape(n, o, ho * wo)
        if needs[1]:
            gw = np.einsum("nol,nkl->ok", g2, cols, optimize=True).reshape(wd.shape)
        if needs[0]:
            gcols = np.einsum("ok,nol->nkl", wd.reshape(o, -1), g2, optimize=True)
            gx = _col2im(gcols, n, c, hp, wp, kh, kw, ho, wo, stride, padding)
    elif groups == c and o == c and i_pg == 1:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        if needs[1]:
            gw = np.einsum("nchwuv,nchw->cuv", win, gout, optimize=True)[:, None]
        if needs[0]:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                        gout * wd[:, 0, u, v][None, :, None, None]
                    )
            gx = gxp[:, :, padding : hp - padding, padding : wp - padding] if padding else gxp
    else:
        c_pg = c // groups
        o_pg = o // groups
        gx_parts, gw_parts = [], []
        for gi in range(groups):
            xg = xp[:, gi * c_pg : (gi + 1) * c_pg]
            wg = wd[gi * o_pg : (gi + 1) * o_pg]
            gg = gout[:, gi * o_pg : (gi + 1) * o_pg]
            cols, _, _ = _im2col(xg, kh, kw, stride)
            g2 = gg.reshape(n, o_pg, ho * wo)
            if needs[1]:
                gw_parts.append(
                    np.einsum("nol,nkl->ok", g2, cols, optimize=True).reshape(wg.shape)
                )
            if needs[0]:
                gcols = np.einsum("ok,nol->nkl", wg.reshape(o_pg, -1), g2, optimize=True)
                gx_parts.append(
                    _col2im(gcols, n, c_pg, hp, wp, kh, kw, ho, wo, stride, padding)
                )
        if needs[1]:
            gw = np.concatenate(gw_parts, axis=0)
        if needs[0]:
            gx = np.concatenate(gx_parts, axis=1)
    return gx, gw


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0, groups=1) -> Tensor:
    """2-D convolution, NCHW input and OIHW weight; groups==channels is depthwise."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape}, {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    n, c, h, wdim = x.shape
    o, i_pg, kh, kw = w.shape
    if c % groups or o % groups:
        raise ShapeError(
            f"conv2d: groups {groups} must divide channels (in {c}, out {o})"
        )
    if c != i_pg * groups:
        raise ShapeError(
            f"conv2d: input channels {c} != weight in-channels {i_pg} x groups {groups}"
        )
    if h + 2 * padding < kh or wdim + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded spatial ({h + 2 * padding}, {wdim + 2 * padding}) "
            f"smaller than kernel ({kh}, {kw})"
        )
    if _CONV_IMPL_STACK[-1] == "direct":
        out_data = _conv_forward_direct(x.data, w.data, stride, padding, groups)
    else:
        out_data = _conv_forward_im2col(x.data, w.data, stride, padding, groups)
    out = Tensor(_check_finite("conv2d", out_data))

    def bwd(gouts, needs):
        (g,) = gouts
        gx, gw = _conv_backward(g, x.data, w.data, stride, padding, groups, needs)
        return [gx, gw]

    _record("conv2d", [x, w], [out], bwd)
    return out


# -- normalization / pooling -------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum=0.1,
    eps=1e-5,
) -> Tensor:
    """Per-channel normalization: batch statistics in training, running averages in eval."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape_c = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    gdata = gamma.data.reshape(shape_c)
    bdata = beta.data.reshape(shape_c)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape_c)) * inv.reshape(shape_c)
    out = Tensor(_check_finite("batch_norm", gdata * xhat + bdata))
    m = x.data.size // c

    def bwd(gouts, needs):
        (g,) = gouts
        ggamma = gbeta = gx = None
        if needs[1]:
            ggamma = np.sum(g * xhat, axis=axes)
        if needs[2]:
            gbeta = np.sum(g, axis=axes)
        if needs[0]:
            if training:
                sum_g = np.sum(g, axis=axes, keepdims=True)
                sum_gx = np.sum(g * xhat, axis=axes, keepdims=True)
                gx = (gdata * inv.reshape(shape_c) / m) * (m * g - sum_g - xhat * sum_gx)
            else:
                gx = g * gdata * inv.reshape(shape_c)
        return [gx, ggamma, gbeta]

    _record("batch_norm", [x, gamma, beta], [out], bwd)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(gouts, needs):
        (g,) = gouts
        if not needs[0]:
            return [None]
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype)
        return [gx.copy()]

    _record("global_avg_pool", [x], [out], bwd)
    return out


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_shuffle: expected 4-d input, got {x.shape}")
    c = x.shape[1]
    if c % groups:
        raise ShapeError(f"channel_shuffle: groups {groups} does not divide channels {c}")
    perm = np.arange(c).reshape(groups, c // groups).T.ravel()
    inv = np.argsort(perm)
    out = Tensor(np.ascontiguousarray(x.data[:, perm]))

    def bwd(gouts, needs):
        (g,) = gouts
        return [np.ascontiguousarray(g[:, inv]) if needs[0] else None]

    _record("channel_shuffle", [x], [out], bwd)
    return out


def channel_split(x: Tensor, sections=2):
    """Split channels into equal contiguous parts; returns a tuple of tensors."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_split: expected 4-d input, got {x.shape}")
    c = x.shape[1]
    if c % sections:
        raise ShapeError(f"channel_split: {sections} sections do not divide channels {c}")
    step = c // sections
    outs = tuple(
        Tensor(np.ascontiguousarray(x.data[:, i * step : (i + 1) * step]))
        for i in range(sections)
    )

    def bwd(gouts, needs):
        if not needs[0]:
            return [None]
        return [np.concatenate(gouts, axis=1)]

    _record("channel_split", [x], list(outs), bwd)
    return outs


def concat(tensors, axis=1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: needs at least one input")
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and a != b for i, (a, b) in enumerate(zip(base, other))
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ts[0].shape} on axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))

    def bwd(gouts, needs):
        (g,) = gouts
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return [p if need else None for p, need in zip(pieces, needs)]

    _record("concat", ts, [out], bwd)
    return out


def softmax(x: Tensor, axis=-1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(_check_finite("softmax", s))

    def bwd(gouts, needs):
        (g,) = gouts
        if not needs[0]:
            return [None]
        return [s * (g - np.sum(g * s, axis=axis, keepdims=True))]

    _record("softmax", [x], [out], bwd)
    return out


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericsError("log: input must be strictly positive")
    out = Tensor(np.log(x.data))

    def bwd(gouts, needs):
        (g,) = gouts
        return [g / x.data if needs[0] else None]

    _record("log", [x], [out], bwd)
    return out


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_loss: expected (batch, classes), got {logits.shape}")
    y = np.asarray(labels)
    n, k = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy_loss: labels shape {y.shape} != ({n},)")
    if y.min() < 0 or y.max() >= k:
        raise ShapeError(f"cross_entropy_loss: label out of range for {k} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), y] - lse
    out = Tensor(np.asarray(-logp.mean(), dtype=logits.data.dtype))
    if not np.isfinite(out.data):
        raise NumericsError("cross_entropy_loss: non-finite loss")

    def bwd(gouts, needs):
        (g,) = gouts
        if not needs[0]:
            return [None]
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), y] -= 1.0
        return [p * (g / n)]

    _record("cross_entropy_loss", [logits], [out], bwd)
    return out


# ---------------------------------------------------------------------------
# scalar helpers used by the search objective (not public primitives)
# ---------------------------------------------------------------------------


def pick(x: Tensor, index: int) -> Tensor:
    """Extract element `index` of a 1-d tensor as a scalar tensor."""
    x = _as_tensor(x)
    if x.ndim != 1:
        raise ShapeError(f"pick: expected 1-d tensor, got {x.shape}")
    if not 0 <= index < x.shape[0]:
        raise ShapeError(f"pick: index {index} out of range for length {x.shape[0]}")
    out = Tensor(np.asarray(x.data[index]))

    def bwd(gouts, needs):
        (g,) = gouts
        if not needs[0]:
            return [None]
        gx = np.zeros_like(x.data)
        gx[index] = g
        return [gx]

    _record("pick", [x], [out], bwd)
    return out


def dot_const(x: Tensor, const) -> Tensor:
    """Inner product of a 1-d tensor with a constant vector."""
    x = _as_tensor(x)
    c = np.asarray(const, dtype=x.data.dtype)
    if x.ndim != 1 or c.shape != x.shape:
        raise ShapeError(f"dot_const: shapes {x.shape} and {c.shape} differ")
    out = Tensor(np.asarray(x.data @ c))

    def bwd(gouts, needs):
        (g,) = gouts
        return [g * c if needs[0] else None]

    _record("dot_const", [x], [out], bwd)
    return out


def clamp_min(x: Tensor, floor: float) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > floor
    out = Tensor(np.maximum(x.data, floor))

    def bwd(gouts, needs):
        (g,) = gouts
        return [g * mask if needs[0] else None]

    _record("clamp_min", [x], [out], bwd)
    return out


def pow_const(x: Tensor, exponent: float) -> Tensor:
    x = _as_tensor(x)
    if exponent == 0:
        out = Tensor(np.ones_like(x.data))

        def bwd0(gouts, needs):
            return [np.zeros_like(x.data) if needs[0] else None]

        _record("pow_const", [x], [out], bwd0)
        return out
    if exponent != int(exponent) and np.any(x.data < 0):
        raise NumericsError("pow_const: negative base with fractional exponent")
    out = Tensor(_check_finite("pow_const", x.data**exponent))

    def bwd(gouts, needs):
        (g,) = gouts
        return [g * exponent * x.data ** (exponent - 1) if needs[0] else None]

    _record("pow_const", [x], [out], bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum()))

    def bwd(gouts, needs):
        (g,) = gouts
        if not needs[0]:
            return [None]
        return [np.broadcast_to(g, x.shape).astype(x.data.dtype).copy()]

    _record("sum_all", [x], [out], bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(_check_finite("mul", a.data * b.data))

    def bwd(gouts, needs):
        (g,) = gouts
        return [g * b.data if needs[0] else None, g * a.data if needs[1] else None]

    _record("mul", [a, b], [out], bwd)
    return out


# ---------------------------------------------------------------------------
# public primitive dispatch
# ---------------------------------------------------------------------------


def _prim_matmul(inputs, attrs):
    return matmul(*inputs)


def _prim_add(inputs, attrs):
    return add(*inputs)


def _prim_scalar_mul(inputs, attrs):
    if len(inputs) == 2:
        return scalar_mul(inputs[0], inputs[1])
    return scalar_mul(inputs[0], attrs["scale"])


def _prim_conv2d(inputs, attrs):
    return conv2d(
        inputs[0],
        inputs[1],
        stride=attrs.get("stride", 1),
        padding=attrs.get("padding", 0),
        groups=attrs.get("groups", 1),
    )


def _prim_batch_norm(inputs, attrs):
    return batch_norm(
        inputs[0],
        inputs[1],
        inputs[2],
        attrs["running_mean"],
        attrs["running_var"],
        attrs.get("training", True),
        momentum=attrs.get("momentum", 0.1),
        eps=attrs.get("eps", 1e-5),
    )


_PRIMITIVES = {
    "matmul": _prim_matmul,
    "add": _prim_add,
    "scalar-mul": _prim_scalar_mul,
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "conv2d": _prim_conv2d,
    "batch_norm": _prim_batch_norm,
    "global_avg_pool": lambda inputs, attrs: global_avg_pool(inputs[0]),
    "channel_shuffle": lambda inputs, attrs: channel_shuffle(inputs[0], attrs["groups"]),
    "channel_split": lambda inputs, attrs: channel_split(inputs[0], attrs.get("sections", 2)),
    "concat": lambda inputs, attrs: concat(inputs, axis=attrs.get("axis", 1)),
    "softmax": lambda inputs, attrs: softmax(inputs[0], axis=attrs.get("axis", -1)),
    "log": lambda inputs, attrs: log(inputs[0]),
    "cross_entropy_loss": lambda inputs, attrs: cross_entropy_loss(inputs[0], attrs["labels"]),
}


def forward_primitive(op: str, inputs, attrs=None):
    """Apply a primitive by id; rejects ids outside the supported set."""
    fn = _PRIMITIVES.get(op)
    if fn is None:
        raise ValueError(f"unknown primitive {op!r}")
    return fn([_as_tensor(t) for t in inputs], attrs or {})


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(f, x: Tensor, h=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a tensor to a scalar tensor and must be evaluable at x +/- h per
    coordinate. Requires float64 values.
    """
    if x.data.dtype != np.float64:
        raise ValueError("finite_diff_check: requires float64 input (use precision('float64'))")
    if not x.requires_grad:
        raise ValueError("finite_diff_check: input must require grad")
    with precision("float64"):
        with Graph() as g:
            y = f(x)
            if y.size != 1:
                raise ShapeError(f"finite_diff_check: f must return a scalar, got {y.shape}")
        g.backward(y)
        analytic = x.grad.copy()

        flat = x.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(x.detached()).item()
            flat[i] = orig - h
            lo = f(x.detached()).item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NumericsError("finite_diff_check: non-finite evaluation")
            numeric[i] = (hi - lo) / (2 * h)
    numeric = numeric.reshape(x.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
