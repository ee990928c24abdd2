"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built eagerly: every operation returns a new :class:`Tensor` that
keeps references to its parents and a closure pushing gradients backwards.
``backward()`` on a scalar output runs the chain rule once over a topological
ordering and then severs the graph so intermediate buffers can be reclaimed;
leaves (parameters, inputs) keep their accumulated ``grad``.

The operation set is deliberately small: elementwise arithmetic, exp / log /
tanh / sigmoid, full-sum reduction, even/odd channel split and interleave,
time-to-channel squeezing, dilated 1-D convolution (causal or centered) and
softmax cross-entropy -- exactly what the two signal priors and the Langevin
sampler consume.

Arrays are ``(channels, time)`` or scalar ``()``; everything is float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError


class DomainError(NumericalError):
    """A log/exp left its numerical domain (would have produced NaN/Inf)."""


class GraphError(ShapeError):
    """Misuse of the graph API (non-scalar backward, bad input)."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"tensors are (channels, time) or scalar, got shape {arr.shape}")
    return arr


class Tensor:
    """Node of the eager computation graph.

    Leaves are tensors created directly from data (parameters, inputs); they
    are validated to be finite and keep a persistent ``grad`` buffer so
    optimizers can read accumulated gradients after ``backward``.
    """

    __slots__ = ("data", "grad", "_parents", "_backprop")

    def __init__(self, data, _parents: tuple = (), _backprop=None):
        arr = _as_array(data)
        if _backprop is None:
            if not np.all(np.isfinite(arr)):
                raise GraphError("graph inputs must be finite (no NaN/Inf)")
            self.grad = np.zeros_like(arr)
        else:
            self.grad = None
        self.data = arr
        self._parents = _parents
        self._backprop = _backprop

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents and self._backprop is None

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g)
        else:
            self.grad += g

    def _accum_owned(self, g: np.ndarray) -> None:
        # caller guarantees g is freshly allocated and not aliased elsewhere
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    # ------------------------------------------------------------------
    def backward(self, free: bool = True) -> None:
        """Push d(self)/d(node) into every node reachable from this scalar.

        ``free`` severs parent links afterwards; the graph cannot be
        backpropagated twice, matching the build-per-evaluation contract.
        """
        if self.data.shape != ():
            raise GraphError(f"backward requires a scalar output, got shape {self.data.shape}")
        order = _toposort(self)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + 1.0
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)
        if free:
            for node in order:
                if node._backprop is not None:
                    node._parents = ()
                    node._backprop = None

    # convenience arithmetic ------------------------------------------
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

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, leaf={self.is_leaf})"


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _const(x) -> np.ndarray:
    arr = _as_array(x)
    if not np.all(np.isfinite(arr)):
        raise GraphError("constant operands must be finite")
    return arr


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        def bp(g):
            a._accum(_unbroadcast(g, a.data.shape))
            b._accum(_unbroadcast(g, b.data.shape))

        return Tensor(a.data + b.data, (a, b), bp)
    if isinstance(a, Tensor):
        return affine(a, 1.0, _const(b))
    return affine(b, 1.0, _const(a))


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        def bp(g):
            a._accum(_unbroadcast(g, a.data.shape))
            b._accum_owned(_unbroadcast(-g, b.data.shape))

        return Tensor(a.data - b.data, (a, b), bp)
    if isinstance(a, Tensor):
        return affine(a, 1.0, -_const(b))
    return affine(b, -1.0, _const(a))


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        def bp(g):
            a._accum_owned(_unbroadcast(g * b.data, a.data.shape))
            b._accum_owned(_unbroadcast(g * a.data, b.data.shape))

        return Tensor(a.data * b.data, (a, b), bp)
    if isinstance(a, Tensor):
        return affine(a, _const(b), 0.0)
    return affine(b, _const(a), 0.0)


def affine(x: Tensor, scale, shift) -> Tensor:
    """scale * x + shift with non-graph (constant) scale and shift."""
    scale = _const(scale)
    shift = _const(shift)

    def bp(g):
        x._accum_owned(_unbroadcast(g * scale, x.data.shape))

    return Tensor(scale * x.data + shift, (x,), bp)


# ----------------------------------------------------------------------
# nonlinearities
# ----------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    with np.errstate(over="raise"):
        try:
            val = np.exp(x.data)
        except FloatingPointError as e:
            raise DomainError(f"exp overflow (max argument {x.data.max():.3g})") from e
    def bp(g):
        x._accum_owned(g * val)

    return Tensor(val, (x,), bp)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError(f"log of non-positive value (min argument {x.data.min():.3g})")
    val = np.log(x.data)

    def bp(g):
        x._accum_owned(g / x.data)

    return Tensor(val, (x,), bp)


def tanh(x: Tensor) -> Tensor:
    val = np.tanh(x.data)

    def bp(g):
        x._accum_owned(g * (1.0 - val * val))

    return Tensor(val, (x,), bp)


def sigmoid(x: Tensor) -> Tensor:
    # exp(-|x|) never overflows
    t = np.exp(-np.abs(x.data))
    val = np.where(x.data >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))

    def bp(g):
        x._accum_owned(g * val * (1.0 - val))

    return Tensor(val, (x,), bp)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    """Full reduction to a scalar."""

    def bp(g):
        x._accum(np.broadcast_to(g, x.data.shape))

    return Tensor(np.asarray(x.data.sum()), (x,), bp)


def mean(x: Tensor) -> Tensor:
    return affine(tsum(x), 1.0 / x.data.size, 0.0)


# ----------------------------------------------------------------------
# structural ops: channel splits, interleave, squeeze
# ----------------------------------------------------------------------

def _require_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} requires a (channels, time) tensor, got shape {x.data.shape}")


def even_channels(x: Tensor) -> Tensor:
    _require_2d(x, "even_channels")
    def bp(g):
        gx = np.zeros_like(x.data)
        gx[0::2] = g
        x._accum_owned(gx)

    return Tensor(x.data[0::2].copy(), (x,), bp)


def odd_channels(x: Tensor) -> Tensor:
    _require_2d(x, "odd_channels")
    def bp(g):
        gx = np.zeros_like(x.data)
        gx[1::2] = g
        x._accum_owned(gx)

    return Tensor(x.data[1::2].copy(), (x,), bp)


def interleave(even: Tensor, odd: Tensor) -> Tensor:
    """Merge two (C, T) halves into (2C, T): even rows 0,2,..., odd rows 1,3,..."""
    _require_2d(even, "interleave")
    if even.data.shape != odd.data.shape:
        raise ShapeError(f"interleave halves must match: {even.data.shape} vs {odd.data.shape}")
    c, t = even.data.shape
    val = np.empty((2 * c, t), dtype=np.float64)
    val[0::2] = even.data
    val[1::2] = odd.data

    def bp(g):
        even._accum(g[0::2])
        odd._accum(g[1::2])

    return Tensor(val, (even, odd), bp)


def squeeze(x: Tensor) -> Tensor:
    """Fold time into channels by 2: out[2c + p, t] = in[c, 2t + p]."""
    _require_2d(x, "squeeze")
    c, t = x.data.shape
    if t % 2 != 0:
        raise ShapeError(f"squeeze requires even time length, got {t}")
    val = x.data.reshape(c, t // 2, 2).transpose(0, 2, 1).reshape(2 * c, t // 2)

    def bp(g):
        x._accum_owned(g.reshape(c, 2, t // 2).transpose(0, 2, 1).reshape(c, t))

    return Tensor(val, (x,), bp)


def unsqueeze(x: Tensor) -> Tensor:
    """Inverse of :func:`squeeze`: out[c, 2t + p] = in[2c + p, t]."""
    _require_2d(x, "unsqueeze")
    c, t = x.data.shape
    if c % 2 != 0:
        raise ShapeError(f"unsqueeze requires an even channel count, got {c}")
    val = x.data.reshape(c // 2, 2, t).transpose(0, 2, 1).reshape(c // 2, 2 * t)

    def bp(g):
        x._accum_owned(g.reshape(c // 2, t, 2).transpose(0, 2, 1).reshape(c, t))

    return Tensor(val, (x,), bp)


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, dilation: int = 1,
           mode: str = "causal") -> Tensor:
    """Dilated 1-D convolution.

    ``x`` is (C_in, T), ``w`` is flattened (C_out * C_in, k) storing the
    kernel as (C_out, C_in, k); ``b`` broadcasts as (C_out, 1). ``causal``
    zero-pads only on the left so output t sees inputs {t, t-d, ..., t-(k-1)d};
    ``centered`` pads both sides symmetrically (odd kernels only).

    All taps are evaluated with one stacked GEMM per pass; tap j contributes
    at the time offset ``j * dilation - pad_left``.
    """
    _require_2d(x, "conv1d")
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    c_in, t = x.data.shape
    wk = w.data
    if wk.ndim != 2 or wk.shape[0] % c_in != 0:
        raise ShapeError(f"conv1d weight shape {wk.shape} incompatible with {c_in} input channels")
    k = wk.shape[1]
    c_out = wk.shape[0] // c_in
    span = (k - 1) * dilation
    if mode == "causal":
        pad_l = span
    elif mode == "centered":
        if k % 2 == 0:
            raise ShapeError("centered conv1d requires an odd kernel size")
        pad_l = span // 2
    else:
        raise ShapeError(f"unknown conv1d mode {mode!r}")

    # tap j reads the input at time offset o_j; output range [a_j, b_j) is
    # where that offset stays inside the frame
    offsets = [j * dilation - pad_l for j in range(k)]
    ranges = [(max(0, -o), max(min(t, t - o), max(0, -o))) for o in offsets]

    w_flat = wk.reshape(c_out, c_in, k).transpose(2, 0, 1).reshape(k * c_out, c_in)
    taps = w_flat @ x.data  # (k*C_out, T)
    val = np.zeros((c_out, t))
    for j, (o, (a, bnd)) in enumerate(zip(offsets, ranges)):
        val[:, a:bnd] += taps[j * c_out:(j + 1) * c_out, a + o:bnd + o]
    if b is not None:
        if b.data.shape != (c_out, 1):
            raise ShapeError(f"conv1d bias must be ({c_out}, 1), got {b.data.shape}")
        val += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bp(g):
        gstack = np.zeros((k * c_out, t))
        for j, (o, (a, bnd)) in enumerate(zip(offsets, ranges)):
            gstack[j * c_out:(j + 1) * c_out, a + o:bnd + o] = g[:, a:bnd]
        x._accum_owned(w_flat.T @ gstack)
        gw = (gstack @ x.data.T).reshape(k, c_out, c_in).transpose(1, 2, 0)
        w._accum_owned(np.ascontiguousarray(gw.reshape(c_out * c_in, k)))
        if b is not None:
            b._accum_owned(g.sum(axis=1, keepdims=True))

    return Tensor(val, parents, bp)


def conv_weight_shape(c_out: int, c_in: int, k: int) -> tuple[int, int]:
    return (c_out * c_in, k)


# ----------------------------------------------------------------------
# softmax cross-entropy
# ----------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over time of -log softmax(logits)[target].

    ``logits`` is (K, T); ``targets`` holds integer class indices (T,).
    """
    _require_2d(logits, "softmax_cross_entropy")
    k, t = logits.data.shape
    targets = np.asarray(targets)
    if targets.shape != (t,):
        raise ShapeError(f"targets must be ({t},), got {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError("targets must be integers")
    if targets.min() < 0 or targets.max() >= k:
        raise ShapeError(f"target classes must lie in 0..{k - 1}")
    m = logits.data.max(axis=0)
    ex = np.exp(logits.data - m)
    z = ex.sum(axis=0)
    lse = m + np.log(z)
    picked = logits.data[targets, np.arange(t)]

    def bp(g):
        sm = ex / z
        sm[targets, np.arange(t)] -= 1.0
        logits._accum_owned(sm * (float(g) / t))

    return Tensor(np.asarray((lse - picked).mean()), (logits,), bp)


# ----------------------------------------------------------------------
# finite differences
# ----------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], point: np.ndarray,
                      epsilon: float = 1e-5) -> float:
    """Worst-case relative error between backward() and central differences.

    ``f`` maps a tensor to a scalar tensor and is re-evaluated at perturbed
    points; denominators are floored at 1 so near-zero gradients are compared
    absolutely.
    """
    point = np.asarray(point, dtype=np.float64)
    x = Tensor(point.copy())
    out = f(x)
    out.backward()
    analytic = x.grad.copy()

    worst = 0.0
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = float(f(Tensor(point.copy())).data)
        flat[i] = orig - epsilon
        lo = float(f(Tensor(point.copy())).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * epsilon)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
        worst = max(worst, err)
    return worst


def finite_diff_check_params(f: Callable[[], Tensor], params: Sequence[Tensor],
                             epsilon: float = 1e-5) -> float:
    """Like :func:`finite_diff_check` but sweeping existing leaf tensors in place."""
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f().data)
            flat[i] = orig - epsilon
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
