"""Dense float64 tensor engine with tape-based reverse-mode differentiation.

Everything the network needs is built from the small op set in this module:
2D convolution, pooling, elementwise arithmetic, channel-axis linear maps,
concat/split, L2 normalization and softmax cross-entropy, plus a handful of
shape utilities (expand/reshape/gather/reductions) the losses are assembled
from.  Ops executed while a Tape is active append a record holding the
backward closure; ``backward`` replays the tape in reverse and accumulates
gradients into every reachable tensor with ``requires_grad`` set.

All data is float64.  Tensors are immutable after construction except for
gradient accumulation; parameter updates between steps replace the data
array rather than writing into it.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_EPS_NORM = 1e-12


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Internal constructor: takes ownership of a freshly computed array.
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named leaf tensor; always participates in differentiation."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Record:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops, replayed in reverse by backward.

    Records are appended in execution order, which is a topological order of
    the computation graph by construction.  Use as a context manager around a
    forward pass; ops executed outside any tape do not record and are cheap.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _pop_tape(self)


_tape_stack: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _tape_stack.append(tape)


def _pop_tape(tape: Tape) -> None:
    if not _tape_stack or _tape_stack[-1] is not tape:
        raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
    _tape_stack.pop()


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def apply_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable | None,
) -> Tensor:
    """Wrap a computed array as a Tensor, recording ``backward`` on the
    active tape when any input requires grad.

    ``backward`` receives the output gradient array and must call
    ``accumulate_grad`` for each differentiable input.  This is also the hook
    other modules use to define ops outside the core set.
    """
    tape = _active_tape()
    rg = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=rg)
    if rg:
        tape.records.append(_Record(tuple(inputs), (out,), backward))
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into the gradient slot of ``t`` (no-op unless it requires grad)."""
    _accumulate(t, g)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of everything reachable from ``loss`` through ``tape``.

    Gradients accumulate additively across uses, so zero parameter grads
    before a fresh pass.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        gs = [o.grad for o in rec.outputs]
        if all(g is None for g in gs):
            continue
        gs = [np.zeros_like(o.data) if g is None else g for o, g in zip(rec.outputs, gs)]
        rec.backward(*gs)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return apply_op(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return apply_op(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return apply_op(a.data * b.data, (a, b), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        _accumulate(x, g * s * (1.0 - s))

    return apply_op(s, (x,), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bw(g):
        _accumulate(x, g * (x.data > 0.0))

    return apply_op(out, (x,), bw)


def broadcast_add(a: Tensor, b: Tensor) -> Tensor:
    """[N,C,1,1] + [N,1,H,W] -> [N,C,H,W]."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("broadcast_add requires rank-4 inputs")
    if a.shape[2:] != (1, 1) or b.shape[1] != 1 or a.shape[0] != b.shape[0]:
        raise ValueError(
            f"broadcast_add expects [N,C,1,1] and [N,1,H,W], got {a.shape} and {b.shape}"
        )

    def bw(g):
        _accumulate(a, g.sum(axis=(2, 3), keepdims=True))
        _accumulate(b, g.sum(axis=1, keepdims=True))

    return apply_op(a.data + b.data, (a, b), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_same_shape(name, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{name} requires equal shapes, got {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution with zero padding.

    x [N,C,H,W], weight [O,C,k,k], bias [O] -> [N,O,H',W'] with
    H' = (H + 2*pad - k)//stride + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d requires rank-4 input and weight")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if kh != kw:
        raise ValueError("conv2d supports square kernels only")
    k = kh
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ValueError("conv2d kernel larger than padded input")
    if bias.shape != (co,):
        raise ValueError(f"conv2d bias must have shape ({co},), got {bias.shape}")

    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    if pad > 0:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
        xp[:, :, pad : pad + h, pad : pad + w] = x.data
    else:
        xp = x.data
    sn, sc, sh, sw = xp.strides
    cols = as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    cols_m = np.ascontiguousarray(cols).reshape(n, c * k * k, ho * wo)
    w_m = weight.data.reshape(co, c * k * k)
    out = np.matmul(w_m, cols_m).reshape(n, co, ho, wo)
    out += bias.data.reshape(1, co, 1, 1)

    def bw(g):
        g_m = g.reshape(n, co, ho * wo)
        _accumulate(bias, g.sum(axis=(0, 2, 3)))
        gw = np.matmul(g_m, cols_m.transpose(0, 2, 1)).sum(axis=0)
        _accumulate(weight, gw.reshape(co, c, k, k))
        if x.requires_grad:
            gcols = np.matmul(w_m.T, g_m).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, i, j
                    ]
            if pad > 0:
                gxp = gxp[:, :, pad : pad + h, pad : pad + w]
            _accumulate(x, gxp)

    return apply_op(out, (x, weight, bias), bw)


def pool(x: Tensor, kind: str) -> Tensor:
    """Pooling over a rank-4 tensor.

    spatial_avg -> [N,C,1,1]; channel_avg / channel_max -> [N,1,H,W];
    channel_avgmax -> [N,2,H,W] (average stacked before max).  The gradient
    of channel_max splits evenly across tied maximal channels, matching
    central differences at exact ties (zero-initialized biases make such
    ties reachable in practice).
    """
    if x.ndim != 4:
        raise ValueError(f"pool requires a rank-4 input, got shape {x.shape}")
    n, c, h, w = x.shape
    if kind == "spatial_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def bw(g):
            _accumulate(x, np.broadcast_to(g / (h * w), x.shape))

        return apply_op(out, (x,), bw)
    if kind == "channel_avg":
        out = x.data.mean(axis=1, keepdims=True)

        def bw(g):
            _accumulate(x, np.broadcast_to(g / c, x.shape))

        return apply_op(out, (x,), bw)
    if kind == "channel_max":
        mx = x.data.max(axis=1, keepdims=True)

        def bw(g):
            ties = x.data == mx
            _accumulate(x, np.where(ties, g / ties.sum(axis=1, keepdims=True), 0.0))

        return apply_op(mx.copy(), (x,), bw)
    if kind == "channel_avgmax":
        mx = x.data.max(axis=1, keepdims=True)
        out = np.concatenate([x.data.mean(axis=1, keepdims=True), mx], axis=1)

        def bw(g):
            gx = np.broadcast_to(g[:, 0:1] / c, x.shape).copy()
            ties = x.data == mx
            gx += np.where(ties, g[:, 1:2] / ties.sum(axis=1, keepdims=True), 0.0)
            _accumulate(x, gx)

        return apply_op(out, (x,), bw)
    raise ValueError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the last axis: [...,I] @ [I,O] + [O]."""
    i, o = weight.shape
    if x.shape[-1] != i:
        raise ValueError(f"linear expects last extent {i}, got input shape {x.shape}")
    if bias.shape != (o,):
        raise ValueError(f"linear bias must have shape ({o},), got {bias.shape}")
    x2 = x.data.reshape(-1, i)
    out = (x2 @ weight.data + bias.data).reshape(x.shape[:-1] + (o,))

    def bw(g):
        g2 = g.reshape(-1, o)
        _accumulate(bias, g2.sum(axis=0))
        _accumulate(weight, x2.T @ g2)
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data.T).reshape(x.shape))

    return apply_op(out, (x, weight, bias), bw)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [N,C,H,W] tensors along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("channel_concat requires rank-4 inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"channel_concat batch/spatial mismatch: {a.shape} vs {b.shape}")
    c1 = a.shape[1]

    def bw(g):
        _accumulate(a, g[:, :c1])
        _accumulate(b, g[:, c1:])

    return apply_op(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


def channel_split(x: Tensor, parts: int) -> list[Tensor]:
    """Split the channel axis into ``parts`` equal tensors, in channel order."""
    if x.ndim != 4:
        raise ValueError("channel_split requires a rank-4 input")
    c = x.shape[1]
    if c % parts != 0:
        raise ValueError(f"channel count {c} not divisible into {parts} parts")
    step = c // parts
    tape = _active_tape()
    rg = tape is not None and x.requires_grad
    outs = [
        Tensor._wrap(x.data[:, i * step : (i + 1) * step].copy(), requires_grad=rg)
        for i in range(parts)
    ]
    if rg:

        def bw(*gs):
            _accumulate(x, np.concatenate(gs, axis=1))

        tape.records.append(_Record((x,), tuple(outs), bw))
    return outs


def l2_normalize(v: Tensor) -> Tensor:
    """Scale to unit Euclidean norm along the last axis.

    Raises on any (row) norm below 1e-12 rather than returning zeros.
    """
    norms = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    if np.any(norms < _EPS_NORM):
        raise ValueError("l2_normalize: vector norm below 1e-12")
    u = v.data / norms

    def bw(g):
        # Exact Jacobian (I - u u^T) / ||v|| applied row-wise.
        proj = (g * u).sum(axis=-1, keepdims=True)
        _accumulate(v, (g - u * proj) / norms)

    return apply_op(u, (v,), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects [N,cls] logits, got {logits.shape}")
    n, cls = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= cls:
        raise ValueError(f"label out of range [0, {cls})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        gl = np.exp(logp)
        gl[np.arange(n), labels] -= 1.0
        _accumulate(logits, g.reshape(()) * gl / n)

    return apply_op(np.float64(loss).reshape(()), (logits,), bw)


# ---------------------------------------------------------------------------
# shape and reduction utilities


def expand(x: Tensor, shape: tuple) -> Tensor:
    """Broadcast size-1 axes of ``x`` up to ``shape`` (same rank)."""
    if x.ndim != len(shape):
        raise ValueError(f"expand requires matching rank: {x.shape} -> {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    if any(x.shape[i] != 1 for i in axes):
        raise ValueError(f"expand can only grow size-1 axes: {x.shape} -> {shape}")

    def bw(g):
        _accumulate(x, g.sum(axis=axes, keepdims=True) if axes else g)

    return apply_op(np.broadcast_to(x.data, shape).copy(), (x,), bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return apply_op(x.data.reshape(shape).copy(), (x,), bw)


def select_rows(x: Tensor, indices) -> Tensor:
    """Gather rows along the first axis; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return apply_op(x.data[idx].copy(), (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        _accumulate(x, g / (2.0 * out))

    return apply_op(out, (x,), bw)


def sum_last(x: Tensor) -> Tensor:
    def bw(g):
        _accumulate(x, np.broadcast_to(g[..., None], x.shape))

    return apply_op(x.data.sum(axis=-1), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size

    def bw(g):
        _accumulate(x, np.broadcast_to(g.reshape(()) / size, x.shape))

    return apply_op(np.float64(x.data.mean()).reshape(()), (x,), bw)


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """scale * x + shift with python-float coefficients."""

    def bw(g):
        _accumulate(x, g * scale)

    return apply_op(scale * x.data + shift, (x,), bw)


# ---------------------------------------------------------------------------
# numerical validation


def grad_check(
    closure: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float | Sequence[float] = 1e-5,
) -> float:
    """Compare analytic gradients of ``closure`` against central differences.

    ``closure`` must rebuild the scalar loss from scratch on every call and
    depend on the parameters only through their current data.  Returns the
    maximum relative error over every entry of every parameter, with
    denominator max(|analytic|, |numeric|, 1e-6).  The floor keeps the
    comparison absolute for near-zero gradients: central differences on an
    order-one loss carry ulp-level noise of about 1e-11, which would
    otherwise dominate entries whose true gradient is smaller than that.

    ``eps`` may be a sequence of step sizes.  Each entry's error is the best
    agreement over the steps, tried in order and stopped early once an error
    is below 1e-6.  A piecewise objective (hinge, hard mining, channel max)
    can bend inside one step's window while staying smooth in a smaller one,
    so a single step size either loses accuracy at bends (too large) or
    amplifies roundoff on near-zero gradients (too small); trying both
    separates the two regimes.
    """
    eps_list = (eps,) if isinstance(eps, float) else tuple(eps)
    if not eps_list:
        raise ValueError("grad_check needs at least one eps value")
    for e in eps_list:
        if not (1e-7 <= e <= 1e-3):
            raise ValueError(f"grad_check eps must lie in [1e-7, 1e-3], got {e}")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = closure()
        backward(loss, tape)
    analytic = []
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite analytic gradient for {p.name}")
        analytic.append(g)

    max_rel = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            best = np.inf
            for e in eps_list:
                flat[i] = orig + e
                f_plus = closure().item()
                flat[i] = orig - e
                f_minus = closure().item()
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise ValueError(f"non-finite loss during finite differencing of {p.name}")
                numeric = (f_plus - f_minus) / (2.0 * e)
                denom = max(abs(gflat[i]), abs(numeric), 1e-6)
                best = min(best, abs(gflat[i] - numeric) / denom)
                if best <= 1e-6:
                    break
            if best > max_rel:
                max_rel = best
    return max_rel
