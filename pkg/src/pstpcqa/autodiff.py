"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: it provides exactly the operations the quality
network needs (grouped/strided 1-D convolution, batch normalization, linear
layers, ELU, max/mean/variance reductions, concatenation, gathers) plus the
scalar arithmetic required by the training loss. Values are numpy arrays;
gradients are accumulated into ``Tensor.grad`` by :func:`backward`.

Double precision is used in tests; single precision is fine for inference.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GroupIndivisible(ValueError):
    """Channel count is not divisible by the convolution group count."""


class AxisOutOfRange(ValueError):
    """Reduction axis does not exist for the operand's rank."""


class NonScalarLoss(ValueError):
    """backward() was called on a tensor with more than one element."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-dimensional array with optional gradient tracking.

    ``data`` is a numpy float array (row-major). ``grad`` has the same shape
    once populated by a backward pass and accumulates across passes until the
    caller zeroes it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Scalar/elementwise arithmetic used by the loss and by tests.
    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, _neg(_as_tensor(other)))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __neg__(self):
        return _neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, attaching the closure only when grads can flow."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Reverse-mode pass from a scalar: populates grad on reachable tensors.

    Gradients accumulate across passes (the caller zeroes them between
    optimizer steps). The graph is released afterwards, so a tensor cannot be
    backpropagated twice without re-running the forward computation.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")

    # Iterative postorder topological sort (graphs can be deep).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
        # Release the graph; leaf grads stay in place.
        node._parents = ()
        node._backward_fn = None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
            raise ShapeMismatch(f"add: {a.data.shape} vs {b.data.shape}")
        out = a.data + b.data

        def back(g):
            if a.requires_grad:
                _accumulate(a, g if a.data.shape == out.shape else g.sum().reshape(a.data.shape))
            if b.requires_grad:
                _accumulate(b, g if b.data.shape == out.shape else g.sum().reshape(b.data.shape))

        return _make(out, (a, b), back)
    val = a.data + b

    def back_scalar(g):
        if a.requires_grad:
            _accumulate(a, g)

    return _make(val, (a,), back_scalar)


def _mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
            raise ShapeMismatch(f"mul: {a.data.shape} vs {b.data.shape}")
        out = a.data * b.data

        def back(g):
            if a.requires_grad:
                ga = g * b.data
                _accumulate(a, ga if a.data.shape == out.shape else ga.sum().reshape(a.data.shape))
            if b.requires_grad:
                gb = g * a.data
                _accumulate(b, gb if b.data.shape == out.shape else gb.sum().reshape(b.data.shape))

        return _make(out, (a, b), back)
    val = a.data * b

    def back_scalar(g):
        if a.requires_grad:
            _accumulate(a, g * b)

    return _make(val, (a,), back_scalar)


def _neg(a: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make(-a.data, (a,), back)


def square(a: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            _accumulate(a, g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), back)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, g / n))

    return _make(np.asarray(a.data.mean()), (a,), back)


def sum_all(a: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, g))

    return _make(np.asarray(a.data.sum()), (a,), back)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    return _make(out, (a,), back)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def back(g):
        if a.requires_grad:
            _accumulate(a, np.ascontiguousarray(np.transpose(g, inv)))

    return _make(out, (a,), back)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeMismatch("concat: empty input list")
    rank = ts[0].data.ndim
    if not -rank <= axis < rank:
        raise AxisOutOfRange(f"concat axis {axis} out of range for rank {rank}")
    axis = axis % rank
    ref = list(ts[0].data.shape)
    for t in ts[1:]:
        s = list(t.data.shape)
        if len(s) != rank or s[:axis] != ref[:axis] or s[axis + 1:] != ref[axis + 1:]:
            raise ShapeMismatch(f"concat: {t.data.shape} incompatible with {ts[0].data.shape} on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * rank
                sl[axis] = slice(lo, hi)
                _accumulate(t, np.ascontiguousarray(g[tuple(sl)]))

    return _make(out, ts, back)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    rank = a.data.ndim
    if not -rank <= axis < rank:
        raise AxisOutOfRange(f"slice axis {axis} out of range for rank {rank}")
    axis = axis % rank
    sl = [slice(None)] * rank
    sl[axis] = slice(start, stop)
    out = np.ascontiguousarray(a.data[tuple(sl)])

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[tuple(sl)] = g
            _accumulate(a, full)

    return _make(out, (a,), back)


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along an axis; repeated indices scatter-add in the backward."""
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if axis == 0:
                np.add.at(full, idx.reshape(-1), g.reshape((-1,) + a.data.shape[1:]))
            else:
                moved = np.moveaxis(full, axis, 0)
                np.add.at(moved, idx.reshape(-1),
                          np.moveaxis(g, axis, 0).reshape((-1,) + moved.shape[1:]))
            _accumulate(a, full)

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def reduce(a: Tensor, axis: int, kind: str) -> Tensor:
    """Remove an axis by max, mean, or population variance.

    Max routes its gradient to the lowest-index argmax; variance divides by n
    (not n-1), so a constant slice reduces to exactly zero.
    """
    rank = a.data.ndim
    if not -rank <= axis < rank:
        raise AxisOutOfRange(f"axis {axis} out of range for rank {rank}")
    axis = axis % rank
    n = a.data.shape[axis]

    if kind == "max":
        out = a.data.max(axis=axis)
        arg = np.expand_dims(a.data.argmax(axis=axis), axis)

        def back_max(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
                _accumulate(a, full)

        return _make(out, (a,), back_max)

    if kind == "mean":
        out = a.data.mean(axis=axis)

        def back_mean(g):
            if a.requires_grad:
                _accumulate(a, np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy())

        return _make(out, (a,), back_mean)

    if kind == "variance":
        mu = a.data.mean(axis=axis, keepdims=True)
        centered = a.data - mu
        out = (centered * centered).mean(axis=axis)

        def back_var(g):
            if a.requires_grad:
                _accumulate(a, (2.0 / n) * centered * np.expand_dims(g, axis))

        return _make(out, (a,), back_var)

    raise ValueError(f"unknown reduction kind {kind!r}")


# ---------------------------------------------------------------------------
# Neural layers
# ---------------------------------------------------------------------------

def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    """x for x > 0, alpha*(exp(x)-1) otherwise."""
    neg_mask = a.data <= 0
    exp_neg = np.exp(a.data[neg_mask])  # exp only where it matters
    out = a.data.copy()
    out[neg_mask] = alpha * (exp_neg - 1.0)

    def back(g):
        if a.requires_grad:
            ga = g.copy()
            ga[neg_mask] = g[neg_mask] * (alpha * exp_neg)
            _accumulate(a, ga)

    return _make(out, (a,), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on the last dimension: y = x @ W.T + b."""
    f_out, f_in = weight.data.shape
    if x.data.shape[-1] != f_in:
        raise ShapeMismatch(f"linear: input last dim {x.data.shape[-1]} != F_in {f_in}")
    if bias.data.shape != (f_out,):
        raise ShapeMismatch(f"linear: bias shape {bias.data.shape} != ({f_out},)")
    out = x.data @ weight.data.T + bias.data

    def back(g):
        g2 = g.reshape(-1, f_out)
        x2 = x.data.reshape(-1, f_in)
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data).reshape(x.data.shape))
        if weight.requires_grad:
            _accumulate(weight, g2.T @ x2)
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))

    return _make(out, (x, weight, bias), back)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, groups: int = 1) -> Tensor:
    """Grouped strided cross-correlation along the last axis, no padding.

    Args:
        x: (C_in, L) or (B, C_in, L).
        weight: (C_out, C_in // groups, k_w).
        bias: (C_out,).
        stride: step between output positions; L_out = (L - k_w)//stride + 1.
        groups: channel group count; C_in and C_out must both divide by it.
    """
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeMismatch(f"conv1d: expected rank 2 or 3 input, got shape {x.data.shape}")
    b, c_in, length = xd.shape
    c_out, c_in_g, k_w = weight.data.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise GroupIndivisible(f"conv1d: groups={groups} does not divide C_in={c_in}, C_out={c_out}")
    if c_in_g != c_in // groups:
        raise ShapeMismatch(f"conv1d: weight expects {c_in_g * groups} input channels, got {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeMismatch(f"conv1d: bias shape {bias.data.shape} != ({c_out},)")
    if length < k_w:
        raise ShapeMismatch(f"conv1d: input length {length} < kernel width {k_w}")
    if stride < 1:
        raise ShapeMismatch(f"conv1d: stride must be positive, got {stride}")

    l_out = (length - k_w) // stride + 1
    c_out_g = c_out // groups

    # Non-contiguous (B, C_in, L_out, k_w) window view, then group for matmul.
    win = np.lib.stride_tricks.sliding_window_view(xd, k_w, axis=2)[:, :, ::stride, :]
    win_g = win.reshape(b, groups, c_in_g, l_out, k_w)
    # (groups, B*L_out, C_in_g*k_w) @ (groups, C_in_g*k_w, C_out_g)
    lhs = np.ascontiguousarray(win_g.transpose(1, 0, 3, 2, 4)).reshape(groups, b * l_out, c_in_g * k_w)
    w_g = weight.data.reshape(groups, c_out_g, c_in_g * k_w)
    prod = np.matmul(lhs, w_g.transpose(0, 2, 1))  # (groups, B*L_out, C_out_g)
    out = prod.reshape(groups, b, l_out, c_out_g).transpose(1, 0, 3, 2).reshape(b, c_out, l_out)
    out = out + bias.data[:, None]
    if squeeze:
        out = out[0]

    def back(g):
        g3 = g[None] if squeeze else g
        go = np.ascontiguousarray(g3.reshape(b, groups, c_out_g, l_out).transpose(1, 0, 3, 2)) \
            .reshape(groups, b * l_out, c_out_g)
        if bias.requires_grad:
            _accumulate(bias, g3.sum(axis=(0, 2)))
        if weight.requires_grad:
            gw = np.matmul(go.transpose(0, 2, 1), lhs)  # (groups, C_out_g, C_in_g*k_w)
            _accumulate(weight, gw.reshape(c_out, c_in_g, k_w))
        if x.requires_grad:
            gwin = np.matmul(go, w_g)  # (groups, B*L_out, C_in_g*k_w)
            gwin = gwin.reshape(groups, b, l_out, c_in_g, k_w).transpose(1, 0, 3, 2, 4) \
                .reshape(b, c_in, l_out, k_w)
            gx = np.zeros((b, c_in, length), dtype=g3.dtype)
            for t in range(k_w):
                gx[:, :, t:t + stride * l_out:stride] += gwin[:, :, :, t]
            _accumulate(x, gx[0] if squeeze else gx)

    return _make(out, (x, weight, bias), back)


class BatchNormState:
    """Running mean/variance buffers for one batch-norm layer."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        out = BatchNormState.__new__(BatchNormState)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str, momentum: float = 0.1, epsilon: float = 1e-5) -> Tensor:
    """Normalize per channel over all non-channel axes.

    Accepts (B, C) or (B, C, L). Train mode uses batch statistics (population
    variance, epsilon-guarded) and updates the running buffers in place as
    running <- (1-momentum)*running + momentum*batch; eval mode normalizes by
    the running statistics. Gradients flow through the batch statistics.
    """
    if x.data.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.data.ndim == 3:
        axes, bshape = (0, 2), (1, -1, 1)
    else:
        raise ShapeMismatch(f"batchnorm1d: expected rank 2 or 3 input, got shape {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatch(f"batchnorm1d: gamma/beta must have shape ({c},)")
    if state.mean.shape != (c,):
        raise ShapeMismatch(f"batchnorm1d: running stats have {state.mean.shape[0]} channels, input has {c}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    gamma_b = gamma.data.reshape(bshape)
    beta_b = beta.data.reshape(bshape)

    if mode == "train":
        n = int(np.prod([x.data.shape[a] for a in axes]))
        mu = x.data.mean(axis=axes)
        centered = x.data - mu.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        state.mean[...] = (1.0 - momentum) * state.mean + momentum * mu
        state.var[...] = (1.0 - momentum) * state.var + momentum * var
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = centered * inv_std.reshape(bshape)
        out = gamma_b * xhat + beta_b

        def back_train(g):
            ghat = g * gamma_b
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).sum(axis=axes))
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=axes))
            if x.requires_grad:
                istd_b = inv_std.reshape(bshape)
                gvar = (ghat * centered).sum(axis=axes) * (-0.5) * inv_std ** 3
                gmu = (ghat * (-istd_b)).sum(axis=axes)
                gx = ghat * istd_b + (2.0 / n) * centered * gvar.reshape(bshape) + gmu.reshape(bshape) / n
                _accumulate(x, gx)

        return _make(out, (x, gamma, beta), back_train)

    inv_std = 1.0 / np.sqrt(state.var + epsilon)
    xhat = (x.data - state.mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma_b * xhat + beta_b

    def back_eval(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            _accumulate(x, g * gamma_b * inv_std.reshape(bshape))

    return _make(out, (x, gamma, beta), back_eval)
