"""Dense tensors with reverse-mode gradients.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a closure computing the vector-Jacobian product for each
parent; :meth:`Tensor.backward` replays them in reverse topological order.
Only the operations the model needs are provided, and broadcasting is limited
to the trailing-axis bias / scalar cases the model uses.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, InputError, NonFiniteError

_grad_enabled = True
_negated_backward: set[str] = set()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def negate_backward(op_name: str):
    """Flip the sign of the input gradient of one op type (harness self-test)."""
    _negated_backward.add(op_name)
    try:
        yield
    finally:
        _negated_backward.discard(op_name)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    size = property(lambda self: self.data.size)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.size != 1:
                raise DimensionError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            if node._op in _negated_backward:
                parent_grads = tuple(None if pg is None else -pg for pg in parent_grads)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return total(self)

    def mean(self):
        return mul(total(self), 1.0 / self.size)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = np.add(a.data, b.data, dtype=np.result_type(a.dtype, b.dtype))
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    out = kernels.gelu_forward(x.data)
    return _make(out, (x,), lambda g: (kernels.gelu_backward(x.data, g),), "gelu")


def total(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        return (gx,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[a.shape for a in arrays]}") from exc
    bounds = np.cumsum([0] + [a.shape[axis] for a in arrays])

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, tuple(tensors), backward, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def pad_class_border(x: Tensor) -> Tensor:
    """Zero-pad the last two axes by one leading row and column."""
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)]
    return _make(np.pad(x.data, pad), (x,), lambda g: (g[..., 1:, 1:],), "pad")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` two-dimensional: leading axes of ``a`` are treated as a batch.
    Otherwise both operands must share identical leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        out = a.data @ b.data
        k, n = b.shape

        def backward(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
        out = a.data @ b.data

        def backward(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(out, (a, b), backward, "matmul")


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated indices inside one operand."""
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    out = np.einsum(subscripts, a.data, b.data)

    def grad_for(g, target: str, other: str, other_data, shape):
        if "..." in target or "..." not in out_sub:
            return np.einsum(f"{out_sub},{other}->{target}", g, other_data)
        # numpy will not sum a broadcast ellipsis away implicitly
        full = np.einsum(f"{out_sub},{other}->...{target}", g, other_data)
        return full.reshape(-1, *shape).sum(axis=0)

    def backward(g):
        return grad_for(g, sa, sb, b.data, a.shape), grad_for(g, sb, sa, a.data, b.shape)

    return _make(out, (a, b), backward, "einsum")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer array; gradient scatters back into rows."""
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]
    rows, width = table.shape[0], int(np.prod(table.shape[1:]))

    def backward(g):
        gt = kernels.scatter_rows_add(index.reshape(-1), g.reshape(-1, width), rows)
        return (gt.reshape(table.shape),)

    return _make(out, (table,), backward, "take_rows")


# ---------------------------------------------------------------------------
# normalization / activations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# convolution / pooling


def conv_output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    if size + 2 * pad < kernel:
        raise DimensionError(f"kernel {kernel} exceeds padded input {size + 2 * pad}")
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride_h: int = 1,
    stride_w: int = 1,
    pad_h: int = 0,
    pad_w: int = 0,
) -> Tensor:
    """Zero-padded 2D cross-correlation.

    ``x`` is ``c_in x H x W`` or batched ``B x c_in x H x W``; ``w`` is
    ``c_out x c_in x kh x kw``.
    """
    single = x.ndim == 3
    xs = x.data[None] if single else x.data
    if xs.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects (B,)C,H,W input and 4-d kernel, got {x.shape}, {w.shape}")
    B, C, H, W = xs.shape
    c_out, c_in, kh, kw = w.shape
    if C != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {c_in}")
    Ho = conv_output_extent(H, kh, stride_h, pad_h)
    Wo = conv_output_extent(W, kw, stride_w, pad_w)
    cols = kernels.im2col(xs, kh, kw, stride_h, stride_w, pad_h, pad_w)
    wmat = w.data.reshape(c_out, -1)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    out = np.ascontiguousarray(y.reshape(B, Ho, Wo, c_out).transpose(0, 3, 1, 2))
    if single:
        out = out[0]
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g4 = g[None] if single else g
        gy = g4.transpose(0, 2, 3, 1).reshape(B, Ho * Wo, c_out)
        gw = np.einsum("bpo,bpk->ok", gy, cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(gy @ wmat, (B, C, H, W), kh, kw, stride_h, stride_w, pad_h, pad_w)
            if single:
                gx = gx[0]
        grads = (gx, gw)
        if bias is not None:
            grads += (gy.sum(axis=(0, 1)),)
        return grads

    return _make(out, parents, backward, "conv2d")


def avg_pool_grid(x: Tensor, stride_f: int, stride_t: int) -> Tensor:
    """Mean-pool a ``B x F x T x C`` grid.

    Axes with stride > 1 use a 3-wide window with padding 1; the mean is over
    in-bounds elements only. Axes with stride 1 are left untouched.
    """
    if stride_f < 1 or stride_t < 1:
        raise DimensionError("pooling strides must be >= 1")
    B, F, T, C = x.shape
    if kernels.pooled_extent(F, stride_f) < 1 or kernels.pooled_extent(T, stride_t) < 1:
        raise DimensionError(f"pooling grid {F}x{T} by ({stride_f},{stride_t}) leaves no tokens")
    out = kernels.pool_forward(x.data, stride_f, stride_t)
    return _make(
        out,
        (x,),
        lambda g: (kernels.pool_backward(g, F, T, stride_f, stride_t),),
        "avg_pool",
    )


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``B x C`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy needs B x C logits and B labels, got {logits.shape} and {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"label index out of range for {logits.shape[1]} classes")
    z = logits.data.astype(np.float64) - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return ((g * d / labels.size).astype(logits.dtype),)

    return _make(out, (logits,), backward, "cross_entropy")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over every logit, computed without overflow."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"targets {t.shape} do not match logits {logits.shape}")
    x = logits.data.astype(np.float64)
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(loss.mean(), dtype=logits.dtype)

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return ((g * (sig - t) / x.size).astype(logits.dtype),)

    return _make(out, (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x,
    eps: float = 1e-6,
    coords: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` in float64.

    With ``coords`` only those entries are evaluated; the rest stay zero.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    work = base.copy()
    if coords is None:
        coords = np.ndindex(*base.shape)
    for idx in coords:
        orig = work[idx]
        work[idx] = orig + eps
        fp = float(f(work))
        work[idx] = orig - eps
        fm = float(f(work))
        work[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
