"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation returns a
new tensor that remembers its parents and a closure mapping the output
gradient to parent gradients. :meth:`Tensor.backward` replays those closures in
exact reverse creation order, summing gradients over fan-out.

Broadcasting is limited to the bias-add pattern: the smaller operand's shape
must be a suffix of the larger one's.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

_counter = itertools.count()


class Tensor:
    """n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_counter)
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._seq = next(_counter)
        out.name = None
        return out

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- basic properties -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, self._wrap(other))

    def __radd__(self, other):
        return add(self._wrap(other), self)

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, self._wrap(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self._wrap(other), self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- differentiation ------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


# -- broadcasting helpers -------------------------------------------------------


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {a} and {b} are not bias-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


# -- elementwise ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._op(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Tensor._op(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._op(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._op(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._op(y, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return Tensor._op(y, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._op(x.data * mask, (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    return Tensor._op(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def astype(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    return Tensor._op(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


# -- shape ----------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return Tensor._op(y, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {x.shape}")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    y = x.data[idx]

    def bw(g):
        out = np.zeros_like(x.data)
        out[idx] += g
        return (out,)

    return Tensor._op(y, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._op(data, tensors, bw)


def expand(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of length ``n``."""
    y = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return Tensor._op(y, (x,), lambda g: (g.sum(axis=0),))


# -- reductions -----------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._op(np.asarray(y), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    y = np.sum(np.ascontiguousarray(x.data), axis=axis, keepdims=keepdims) / n

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return Tensor._op(np.asarray(y), (x,), bw)


def max_(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient goes to the first maximal entry."""
    arg = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return Tensor._op(y, (x,), bw)


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has the same
    leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2

    def bw(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            k, n = b.shape
            db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return Tensor._op(a.data @ b.data, (a, b), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._op(y, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return Tensor._op(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs a last axis >= 2, got shape {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._op(y, (x, gain, bias), bw)


def _pad_cols(x: np.ndarray, k: int) -> np.ndarray:
    """im2col for stride 1, zero padding ``k // 2``: (B, Cin, H, W) -> (B, Cin*k*k, H*W)."""
    b, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((b, c, k, k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(b, c * k * k, h * w)


def _fold_cols(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    b, c, h, w = shape
    p = k // 2
    cols = cols.reshape(b, c, k, k, h, w)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + h, j : j + w] += cols[:, :, i, j]
    return out[:, :, p : p + h, p : p + w]


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 convolution with 'same' zero padding and an odd square kernel.

    ``x`` is (Cin, H, W) or (B, Cin, H, W); ``w`` is (Cout, Cin, k, k).
    """
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d kernel must be (Cout, Cin, k, k) with odd k, got {w.shape}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} does not match kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias {b.shape} does not match kernel {w.shape}")
    k = w.shape[2]
    bsz, _, h, wd = xd.shape
    cols = _pad_cols(xd, k)
    wm = w.data.reshape(w.shape[0], -1)
    y = (wm @ cols).reshape(bsz, w.shape[0], h, wd) + b.data[:, None, None]
    if single:
        y = y[0]

    def bw(g):
        g4 = g[None] if single else g
        gm = g4.reshape(bsz, w.shape[0], h * wd)
        dw = np.einsum("bop,bkp->ok", gm, cols).reshape(w.shape)
        dx = _fold_cols(wm.T @ gm, xd.shape, k)
        db = gm.sum(axis=(0, 2))
        return (dx[0] if single else dx), dw, db

    return Tensor._op(y, (x, w, b), bw)


# -- gradient checking ----------------------------------------------------------


def check_gradients(
    f: Callable,
    params: Sequence[Tensor] | Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    oracle_dtype=None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps parameters (same container type as ``params``) to a scalar
    tensor. The relative error per coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. With ``max_coords`` only that many
    randomly chosen coordinates per parameter are probed. ``oracle_dtype``
    (e.g. ``np.longdouble``) evaluates the finite differences in a wider
    type than the analytic pass.
    """
    return max(gradient_report(f, params, h, max_coords, seed, oracle_dtype).values(), default=0.0)


def gradient_report(
    f: Callable,
    params: Sequence[Tensor] | Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    oracle_dtype=None,
) -> dict[str, float]:
    """Per-parameter max relative gradient error (see :func:`check_gradients`)."""
    is_map = isinstance(params, Mapping)
    names = list(params) if is_map else [str(i) for i in range(len(params))]
    values = list(params.values()) if is_map else list(params)

    def pack(tensors):
        return dict(zip(names, tensors)) if is_map else tensors

    leaves = [Tensor(v.data, requires_grad=True) for v in values]
    loss = f(pack(leaves))
    _require_finite(loss.data, "loss at base point")
    loss.backward()

    probe = [Tensor(np.array(v.data, dtype=oracle_dtype or v.dtype, copy=True)) for v in values]
    packed = pack(probe)
    rng = np.random.default_rng(seed)
    report = {}
    for name, leaf, p in zip(names, leaves, probe):
        analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)).reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = f(packed).data
            flat[i] = orig - h
            down = f(packed).data
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = float((up - down) / (2 * h))
            a = float(analytic[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        report[name] = worst
    return report


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")
