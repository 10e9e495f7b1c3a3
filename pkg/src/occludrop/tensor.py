"""Reverse-mode automatic differentiation over dense numpy arrays.

Values are computed eagerly; every primitive records a backward closure so
that calling ``backward()`` on a scalar propagates exact gradients through
the recorded graph. Tensors default to float64 (``set_default_dtype`` can
switch training runs to float32; gradient checking only makes sense at
64-bit). Reductions and matmuls go through numpy, so repeated forward
passes with identical inputs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, InsufficientBatchError

_DEFAULT_DTYPE = np.dtype(np.float64)


def set_default_dtype(dtype) -> None:
    """Set the dtype for new tensors and parameters (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported default dtype {dt}")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class Tensor:
    """Dense array plus optional gradient and a recorded backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward, op: str) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        t.op = op
        if t.requires_grad:
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, grad={'set' if self.grad is not None else 'none'})"

    # -- graph traversal ------------------------------------------------

    def graph_nodes(self):
        """All reachable nodes, dependencies first (topological order)."""
        order, seen, stack = [], set(), [(self, False)]
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
                stack.append((p, False))
        return order

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        order = self.graph_nodes()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, *axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise primitives -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor._from_op(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor._from_op(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return Tensor._from_op(-a.data, (a,), backward, "neg")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (0.5 / out))

    return Tensor._from_op(out, (a,), backward, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return Tensor._from_op(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return Tensor._from_op(out, (a,), backward, "log")


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def backward(g):
        _accum(a, g * np.sign(a.data))

    return Tensor._from_op(out, (a,), backward, "abs")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return Tensor._from_op(out, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return Tensor._from_op(out, (a,), backward, "sigmoid")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed through inside [lo, hi] only."""
    out = np.clip(a.data, lo, hi)

    def backward(g):
        _accum(a, g * ((a.data >= lo) & (a.data <= hi)))

    return Tensor._from_op(out, (a,), backward, "clip")


# -- shape and reduction primitives ------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor._from_op(out, (a,), backward, "reshape")


def transpose(a: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    out = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return Tensor._from_op(out, (a,), backward, "transpose")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            gg = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return Tensor._from_op(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / count, dtype=a.data.dtype)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: a axis 1 is {a.data.shape[1]}, "
            f"b axis 0 is {b.data.shape[0]}"
        )
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return Tensor._from_op(out, (a, b), backward, "matmul")


def einsum_pair(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum whose every input index appears in the output or
    in the other operand (that restriction makes the adjoint another einsum).
    """
    ins, out_spec = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s in (sa, sb):
        if len(set(s)) != len(s):
            raise ContractError(f"einsum_pair: repeated index within operand in {spec!r}")
    for ch in sa:
        if ch not in sb and ch not in out_spec:
            raise ContractError(f"einsum_pair: index {ch!r} of operand a is unrecoverable in {spec!r}")
    for ch in sb:
        if ch not in sa and ch not in out_spec:
            raise ContractError(f"einsum_pair: index {ch!r} of operand b is unrecoverable in {spec!r}")
    out = np.einsum(spec, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.einsum(f"{out_spec},{sb}->{sa}", g, b.data))
        if b.requires_grad:
            _accum(b, np.einsum(f"{out_spec},{sa}->{sb}", g, a.data))

    return Tensor._from_op(out, (a, b), backward, "einsum")


# -- network primitives -------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, n, c, hp, wp, kh, kw, stride, oh, ow) -> np.ndarray:
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (n,c_in,h,w) input with (c_out,c_in,kh,kw) filters."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and weights, got {x.data.shape} and {w.data.shape}"
        )
    n, c_in, h, wd = x.data.shape
    c_out, cw, kh, kw = w.data.shape
    if cw != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input axis 1 is {c_in}, weight axis 1 is {cw}"
        )
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} exceeds padded input "
            f"{h + 2 * padding}x{wd + 2 * padding} (input axes 2,3)"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = w.data.reshape(c_out, -1)
    out = np.matmul(w2, cols).reshape(n, c_out, oh, ow)
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        g2 = g.reshape(n, c_out, oh * ow)
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gxp = _col2im(gcols, n, c_in, hp, wp, kh, kw, stride, oh, ow)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accum(x, gxp)

    return Tensor._from_op(out, (x, w), backward, "conv2d")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: x (n,d_in) times w (d_out,d_in) transposed, plus bias (d_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(
            f"linear expects 2-D input and weights, got {x.data.shape} and {w.data.shape}"
        )
    if x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"linear inner dimensions disagree: input axis 1 is {x.data.shape[1]}, "
            f"weight axis 1 is {w.data.shape[1]}"
        )
    if b.data.shape != (w.data.shape[0],):
        raise DimensionError(
            f"linear bias shape {b.data.shape} does not match output width {w.data.shape[0]}"
        )
    return add(matmul(x, transpose(w)), b)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an (n,c,h,w) feature map, returning (n,c)."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    pooled = tsum(x, axis=(2, 3))
    out = mul(pooled, Tensor(np.asarray(1.0 / (h * w), dtype=x.data.dtype)))
    out.op = "global_avg_pool"
    return out


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.data.shape[0], -1))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along one axis (max shift is treated as constant)."""
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = sub(x, Tensor(m))
    s = tsum(exp(shifted), axis=axis, keepdims=True)
    return add(log(s), Tensor(m))


# -- batch normalization ------------------------------------------------------


@dataclass
class BatchStats:
    """Per-channel batch and running statistics for one normalization layer."""

    mean: np.ndarray
    variance: np.ndarray
    running_mean: np.ndarray
    running_variance: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def for_channels(cls, c: int, momentum: float = 0.9, epsilon: float = 1e-5) -> "BatchStats":
        dt = default_dtype()
        return cls(
            mean=np.zeros(c, dtype=dt),
            variance=np.ones(c, dtype=dt),
            running_mean=np.zeros(c, dtype=dt),
            running_variance=np.ones(c, dtype=dt),
            momentum=momentum,
            epsilon=epsilon,
        )

    def update_running(self, mean: np.ndarray, variance: np.ndarray, valid=None) -> None:
        m = self.momentum
        if valid is None:
            self.running_mean = m * self.running_mean + (1.0 - m) * mean
            self.running_variance = m * self.running_variance + (1.0 - m) * variance
        else:
            upd_m = m * self.running_mean + (1.0 - m) * mean
            upd_v = m * self.running_variance + (1.0 - m) * variance
            self.running_mean = np.where(valid, upd_m, self.running_mean)
            self.running_variance = np.where(valid, upd_v, self.running_variance)


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, stats: BatchStats, training: bool) -> Tensor:
    """Per-channel normalization of an (n,c,h,w) tensor.

    Training mode normalizes by batch mean/variance (biased) and updates the
    running statistics; eval mode normalizes by the running statistics.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    g = reshape(scale, (1, c, 1, 1))
    b = reshape(shift, (1, c, 1, 1))
    eps = Tensor(np.asarray(stats.epsilon, dtype=x.data.dtype))
    if training:
        if n * h * w < 2:
            raise InsufficientBatchError(
                f"batchnorm needs n*h*w >= 2 in training mode, got {n}*{h}*{w}"
            )
        u = tmean(x, axis=(0, 2, 3), keepdims=True)
        xc = sub(x, u)
        var = tmean(mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        stats.mean = u.data.reshape(c).copy()
        stats.variance = var.data.reshape(c).copy()
        stats.update_running(stats.mean, stats.variance)
        xhat = div(xc, sqrt(add(var, eps)))
    else:
        rm = Tensor(stats.running_mean.reshape(1, c, 1, 1).astype(x.data.dtype))
        rv = Tensor(stats.running_variance.reshape(1, c, 1, 1).astype(x.data.dtype))
        xhat = div(sub(x, rm), sqrt(add(rv, eps)))
    out = add(mul(xhat, g), b)
    out.op = "batchnorm"
    return out
