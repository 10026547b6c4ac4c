"""Minimal reverse-mode differentiable array engine on numpy.

Tensors wrap row-major numpy arrays (float32 or float64) and record the
computation graph as they are combined.  Calling :meth:`DiffTensor.backward`
on a scalar walks the graph once and accumulates gradients into every
``requires_grad`` node; repeated backward passes are additive.

All reductions delegate to numpy's deterministic kernels, so a fixed input
always yields bit-identical output within one environment.  Training code
uses float32; gradient checks build float64 graphs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class DiffTensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[DiffTensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Reverse pass from a scalar; accumulates into ``grad`` additively."""
        if self.data.size != 1:
            raise DimensionError(
                f"backward requires a scalar, got shape {self.shape}"
            )
        order = _toposort(self)
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad += g
            if node._backward is not None:
                node._backward_apply(g, flowing)

    def _backward_apply(self, g: np.ndarray, flowing: dict[int, np.ndarray]) -> None:
        for parent, contrib in self._backward(g):
            if contrib is None:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + contrib
            else:
                flowing[key] = contrib

    # Arithmetic sugar; the functional API below does the real work.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _toposort(root: DiffTensor) -> list[DiffTensor]:
    order: list[DiffTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x, dtype=dtype)


def _coerce_pair(a, b) -> tuple[DiffTensor, DiffTensor]:
    if isinstance(a, DiffTensor) and not isinstance(b, DiffTensor):
        b = DiffTensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, DiffTensor) and not isinstance(a, DiffTensor):
        a = DiffTensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, DiffTensor):
        a, b = DiffTensor(a), DiffTensor(b)
    if a.dtype != b.dtype:
        raise DimensionError(f"mixed dtypes {a.dtype} vs {b.dtype}")
    return a, b


def _make(data: np.ndarray, parents: Sequence[DiffTensor], backward) -> DiffTensor:
    out = DiffTensor.__new__(DiffTensor)
    out.data = data
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.grad = np.zeros_like(data) if track else None
    out._parents = tuple(p for p in parents if p.requires_grad) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> DiffTensor:
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, (a, b), backward)


def sub(a, b) -> DiffTensor:
    a, b = _coerce_pair(a, b)
    data = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(data, (a, b), backward)


def mul(a, b) -> DiffTensor:
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _make(data, (a, b), backward)


def div(a, b) -> DiffTensor:
    a, b = _coerce_pair(a, b)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * data / b.data, b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _make(data, (a, b), backward)


def square(x: DiffTensor) -> DiffTensor:
    data = x.data * x.data

    def backward(g):
        return ((x, 2.0 * x.data * g),)

    return _make(data, (x,), backward)


def sqrt(x: DiffTensor) -> DiffTensor:
    data = np.sqrt(x.data)

    def backward(g):
        return ((x, g / (2.0 * data)),)

    return _make(data, (x,), backward)


def absolute(x: DiffTensor) -> DiffTensor:
    data = np.abs(x.data)

    def backward(g):
        return ((x, g * np.sign(x.data)),)

    return _make(data, (x,), backward)


def relu(x: DiffTensor) -> DiffTensor:
    data = np.maximum(x.data, 0.0)

    def backward(g):
        return ((x, g * (x.data > 0.0).astype(x.dtype)),)

    return _make(data, (x,), backward)


def tanh(x: DiffTensor) -> DiffTensor:
    data = np.tanh(x.data)

    def backward(g):
        return ((x, g * (1.0 - data * data)),)

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=x.dtype)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            return ((x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=True)),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return ((x, np.broadcast_to(g, x.shape).copy()),)

    return _make(data, (x,), backward)


def mean(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    if axis is None:
        count = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for a in ax:
            count *= x.shape[a]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: DiffTensor, shape) -> DiffTensor:
    data = x.data.reshape(shape)

    def backward(g):
        return ((x, g.reshape(x.shape)),)

    return _make(data, (x,), backward)


def transpose(x: DiffTensor, axes: Sequence[int]) -> DiffTensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = np.argsort(axes)

    def backward(g):
        return ((x, np.ascontiguousarray(g.transpose(inverse))),)

    return _make(data, (x,), backward)


def getitem(x: DiffTensor, idx) -> DiffTensor:
    data = np.ascontiguousarray(x.data[idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return ((x, gx),)

    return _make(data, (x,), backward)


def concat(tensors: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((t, np.ascontiguousarray(g[tuple(sl)])))
        return tuple(out)

    return _make(data, tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> DiffTensor:
    a, b = _coerce_pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.shape} x {b.shape}"
        )
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ((a, ga), (b, gb))

    return _make(data, (a, b), backward)


def softmax(x: DiffTensor, axis: int = -1) -> DiffTensor:
    """Stabilized softmax along ``axis``; rows sum to one."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((x, data * (g - inner)),)

    return _make(data, (x,), backward)


def layer_norm(x: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] < 2:
        raise DimensionError("layer_norm needs a normalized extent >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (dxhat - m1 - xhat * m2) * inv
        reduce_axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        return ((x, gx), (gain, ggain), (bias, gbias))

    return _make(data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# convolutions


def _conv2d_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padding stride-1 cross-correlation, x (B,C,H,W), w (O,C,k,k)."""
    cout, cin, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # windows: (B, C, H, W, k, k) -> (B, H, W, C*k*k)
    b, _, h, wd = x.shape
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, h, wd, cin * k * k)
    out = cols @ w.reshape(cout, cin * k * k).T
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv2d_grad_w(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    b, cin, h, wd = x.shape
    cout = g.shape[1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * wd, cin * k * k)
    gf = g.transpose(0, 2, 3, 1).reshape(b * h * wd, cout)
    return (gf.T @ cols).reshape(cout, cin, k, k)


def conv2d(x: DiffTensor, w: DiffTensor, padding: str = "same") -> DiffTensor:
    """Cross-correlation with odd square kernels and same padding.

    ``x`` is (C,H,W) or (B,C,H,W); ``w`` is (C_out,C_in,k,k).
    """
    if padding != "same":
        raise DimensionError(f"only same padding supported, got {padding!r}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects (B,C,H,W) and (O,C,k,k), got {x.shape} and {w.shape}"
        )
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel must be odd square, got {w.shape}")
    if xd.shape[1] != cin:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    data = _conv2d_raw(xd, w.data)
    if squeeze:
        data = data[0]

    def backward(g):
        gd = g[None] if squeeze else g
        gx = gw = None
        if x.requires_grad:
            wflip = np.ascontiguousarray(np.flip(w.data, axis=(2, 3)).transpose(1, 0, 2, 3))
            gx = _conv2d_raw(gd, wflip)
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = _conv2d_grad_w(xd, gd, k)
        return ((x, gx), (w, gw))

    return _make(data, (x, w), backward)


def _conv1d_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    cout, cin, k = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    b, _, length = x.shape
    cols = windows.transpose(0, 2, 1, 3).reshape(b, length, cin * k)
    out = cols @ w.reshape(cout, cin * k).T
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def conv1d(x: DiffTensor, w: DiffTensor) -> DiffTensor:
    """Same-padding stride-1 1D cross-correlation, x (B,C,L), w (O,C,k)."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise DimensionError(
            f"conv1d expects (B,C,L) and (O,C,k), got {x.shape} and {w.shape}"
        )
    cout, cin, k = w.shape
    if k % 2 == 0:
        raise DimensionError(f"kernel must be odd, got k={k}")
    if x.shape[1] != cin:
        raise DimensionError(
            f"conv1d channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    data = _conv1d_raw(x.data, w.data)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            wflip = np.ascontiguousarray(np.flip(w.data, axis=2).transpose(1, 0, 2))
            gx = _conv1d_raw(g, wflip)
        if w.requires_grad:
            b, _, length = x.shape
            p = k // 2
            xp = np.pad(x.data, ((0, 0), (0, 0), (p, p)))
            windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
            cols = windows.transpose(0, 2, 1, 3).reshape(b * length, cin * k)
            gf = g.transpose(0, 2, 1).reshape(b * length, cout)
            gw = (gf.T @ cols).reshape(cout, cin, k)
        return ((x, gx), (w, gw))

    return _make(data, (x, w), backward)


def modulated_conv2d(
    x: DiffTensor,
    w: DiffTensor,
    phi: DiffTensor,
    eps_prime: float = 1e-8,
) -> DiffTensor:
    """Demodulated convolution: scale weights per input channel, renormalize.

    Per output channel j the effective weight is
    ``phi_i * w_ijk / sqrt(sum_{i,k} (phi_i * w_ijk)^2 + eps_prime)``.
    ``phi`` is (C_in,) shared across the batch or (B,C_in) per sample; the
    per-sample case is computed as conv(x*phi, w) scaled by the demodulation
    factor, which is algebraically identical.
    """
    if eps_prime <= 0:
        raise NumericError(f"eps_prime must be positive, got {eps_prime}")
    if phi.data.ndim not in (1, 2):
        raise DimensionError(f"phi must be (C_in,) or (B,C_in), got {phi.shape}")
    cout, cin = w.shape[0], w.shape[1]
    if phi.shape[-1] != cin:
        raise DimensionError(
            f"phi length {phi.shape[-1]} does not match input channels {cin}"
        )
    # norm2[..., j] = sum_i phi_i^2 * (sum_k w_jik^2)
    phi_mat = _ensure_2d(phi)
    wsq = sum_(square(w), axis=(2, 3))                     # (C_out, C_in)
    norm2 = matmul(square(phi_mat), transpose(wsq, (1, 0)))
    inv = div(as_tensor(np.ones((), dtype=w.dtype)), sqrt(add(norm2, eps_prime)))
    if phi.data.ndim == 1:
        scaled_w = mul(w, reshape(phi, (1, cin, 1, 1)))
        out = conv2d(x, scaled_w)
        shape = (cout, 1, 1) if x.data.ndim == 3 else (1, cout, 1, 1)
        return mul(out, reshape(inv, shape))
    if x.data.ndim != 4 or x.shape[0] != phi.shape[0]:
        raise DimensionError(
            f"batched phi {phi.shape} needs matching batched input, got {x.shape}"
        )
    scaled_x = mul(x, reshape(phi, (phi.shape[0], cin, 1, 1)))
    out = conv2d(scaled_x, w)
    return mul(out, reshape(inv, (phi.shape[0], cout, 1, 1)))


def _ensure_2d(phi: DiffTensor) -> DiffTensor:
    if phi.data.ndim == 1:
        return reshape(phi, (1, phi.shape[0]))
    return phi


def demodulated_weight_norms(w: np.ndarray, phi: np.ndarray, eps_prime: float) -> np.ndarray:
    """Per-output-channel squared norm of the demodulated weights (oracle aid)."""
    scaled = phi.reshape(1, -1, 1, 1) * w
    n2 = (scaled ** 2).sum(axis=(1, 2, 3))
    wprime_sq = n2 / (n2 + eps_prime)
    return wprime_sq


def avg_pool2d(x: DiffTensor, factor: int = 2) -> DiffTensor:
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"pool factor {factor} does not divide {x.shape}")
    data = x.data.reshape(b, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) / (factor * factor)
        return ((x, gx),)

    return _make(data, (x,), backward)


def upsample2d(x: DiffTensor, factor: int = 2) -> DiffTensor:
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        b, c, h, w = x.shape
        gx = g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5))
        return ((x, gx),)

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# attention


def multi_head_attention(
    q: DiffTensor,
    k: DiffTensor,
    v: DiffTensor,
    heads: int,
    w_out: DiffTensor | None = None,
) -> tuple[DiffTensor, np.ndarray]:
    """Scaled dot-product attention over ``heads`` head splits.

    ``q`` is (..., Lq, d); ``k``/``v`` are (..., Lk, d).  The per-head
    dimension d/heads enters the 1/sqrt scaling.  Returns the attended
    output (optionally projected by ``w_out``) and the post-softmax
    weights averaged over heads, shape (..., Lq, Lk), detached.
    """
    d = q.shape[-1]
    if d % heads:
        raise DimensionError(f"model dim {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(
            f"q/k/v widths disagree: {q.shape}, {k.shape}, {v.shape}"
        )
    hd = d // heads
    lq, lk = q.shape[-2], k.shape[-2]
    batch = q.shape[:-2]

    def split(t, length):
        t = reshape(t, batch + (length, heads, hd))
        axes = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
        return transpose(t, axes)  # (..., heads, L, hd)

    qh = split(q, lq)
    kh = split(k, lk)
    vh = split(v, lk)
    scores = mul(matmul(qh, transpose(kh, _swap_last2(kh))), 1.0 / math.sqrt(hd))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, vh)  # (..., heads, Lq, hd)
    axes = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
    out = reshape(transpose(out, axes), batch + (lq, d))
    if w_out is not None:
        out = matmul(out, w_out)
    weights = attn.data.mean(axis=-3)
    return out, weights


def _swap_last2(t: DiffTensor) -> tuple[int, ...]:
    n = t.data.ndim
    axes = list(range(n))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Per-parameter moment accumulators plus hyperparameters."""

    def __init__(self, params: dict[str, DiffTensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps_opt: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps_opt = eps_opt
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(
    params: dict[str, DiffTensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, DiffTensor], AdamState]:
    """One bias-corrected Adam update, in place on ``params``."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps_opt)).astype(p.dtype)
    return params, state


def zero_grads(params: Iterable[DiffTensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_check(
    f: Callable[[DiffTensor], DiffTensor],
    x: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps a DiffTensor to a scalar DiffTensor.  The relative error per
    coordinate uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = DiffTensor(x, requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = leaf.grad.copy()

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(DiffTensor(x)).item()
        flat[i] = orig - h
        fm = f(DiffTensor(x)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
