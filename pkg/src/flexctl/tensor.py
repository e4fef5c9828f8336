"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (denoisers, routers, losses) is composed from the
primitives in this module. Arrays are numpy, float32 by default; building a
model in float64 makes finite-difference gradient checks meaningful.

Every primitive checks its result for NaN/Inf and raises instead of letting
bad values propagate. When a FlopCounter is active (see ``count_flops``),
each forward primitive adds its cost: multiply-accumulate counts as 2 FLOPs
for matmul/conv, pointwise ops and normalizations count the tensor size.
Backward passes are never counted.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class UsageError(RuntimeError):
    """A primitive was called outside its contract (e.g. non-scalar backward)."""


_grad_enabled: bool = True
_flop_counter: Optional["FlopCounter"] = None


class FlopCounter:
    """Accumulates forward-pass FLOPs while installed via count_flops()."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += n


@contextlib.contextmanager
def count_flops():
    """Install a fresh FlopCounter for the duration of the block."""
    global _flop_counter
    prev = _flop_counter
    counter = FlopCounter()
    _flop_counter = counter
    try:
        yield counter
    finally:
        _flop_counter = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forwards inside produce constant Tensors."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _flops(n: int) -> None:
    if _flop_counter is not None:
        _flop_counter.add(int(n))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over dimensions that were broadcast (trailing alignment)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients.

    Tensors are immutable values: no primitive writes to an input array.
    The implicit tape is the DAG of ``_parents`` links; ``backward`` replays
    it once in reverse topological order, accumulating ``grad`` additively
    wherever a value feeds several consumers.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            raise UsageError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward = None

    # ------------------------------------------------------------------
    # basic protocol
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # autodiff machinery
    # ------------------------------------------------------------------

    def _toposort(self) -> list:
        order: list = []
        seen: set = set()
        stack = [(self, False)]
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

    def backward(self) -> None:
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar loss")
        order = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and node._backward is not None:
                # intermediate grads are not retained
                node.grad = None

    def _accum(self, delta: np.ndarray) -> None:
        if self.grad is None:
            self.grad = delta.copy() if delta.base is not None or delta is self.data else delta
        else:
            self.grad = self.grad + delta

    # ------------------------------------------------------------------
    # primitive construction helper
    # ------------------------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        needs = _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = False
        out.grad = None
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        try:
            data = self.data + other.data
        except ValueError as e:
            raise DimensionError(f"add: {self.shape} vs {other.shape}") from e
        _flops(data.size)

        def backward(g: np.ndarray, a=self, b=other) -> None:
            if a.requires_grad or a._backward is not None:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad or b._backward is not None:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._result(data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        data = -self.data
        _flops(data.size)

        def backward(g: np.ndarray, a=self) -> None:
            a._accum(-g)

        return Tensor._result(data, (self,), backward, "neg")

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        try:
            data = self.data - other.data
        except ValueError as e:
            raise DimensionError(f"sub: {self.shape} vs {other.shape}") from e
        _flops(data.size)

        def backward(g: np.ndarray, a=self, b=other) -> None:
            if a.requires_grad or a._backward is not None:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad or b._backward is not None:
                b._accum(-_unbroadcast(g, b.data.shape))

        return Tensor._result(data, (self, other), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        try:
            data = self.data * other.data
        except ValueError as e:
            raise DimensionError(f"mul: {self.shape} vs {other.shape}") from e
        _flops(data.size)

        def backward(g: np.ndarray, a=self, b=other) -> None:
            if a.requires_grad or a._backward is not None:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad or b._backward is not None:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def scale(self, c: float) -> "Tensor":
        """Multiply by a python scalar constant."""
        data = self.data * self.data.dtype.type(c)
        _flops(data.size)

        def backward(g: np.ndarray, a=self, c=c) -> None:
            a._accum(g * a.data.dtype.type(c))

        return Tensor._result(data, (self,), backward, "scale")

    def __truediv__(self, c) -> "Tensor":
        if isinstance(c, Tensor):
            raise UsageError("division by Tensor is not a primitive; use mul by reciprocal")
        return self.scale(1.0 / c)

    # ------------------------------------------------------------------
    # matmul / conv
    # ------------------------------------------------------------------

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError("matmul requires rank >= 2 operands")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: inner dims {a.shape} vs {b.shape}")
        try:
            data = np.matmul(a, b)
        except ValueError as e:
            raise DimensionError(f"matmul: {a.shape} vs {b.shape}") from e
        m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
        _flops(2 * (data.size // (m * n)) * m * k * n)

        def backward(g: np.ndarray, x=self, y=other) -> None:
            if x.requires_grad or x._backward is not None:
                ga = np.matmul(g, np.swapaxes(y.data, -1, -2))
                x._accum(_unbroadcast(ga, x.data.shape))
            if y.requires_grad or y._backward is not None:
                gb = np.matmul(np.swapaxes(x.data, -1, -2), g)
                y._accum(_unbroadcast(gb, y.data.shape))

        return Tensor._result(data, (self, other), backward, "matmul")

    def conv2d(self, weight: "Tensor", stride: int = 1, pad: int = 0) -> "Tensor":
        """Batched NCHW cross-correlation with zero padding; odd square kernels."""
        x, w = self.data, weight.data
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError("conv2d expects x (B,C,H,W) and w (Cout,Cin,k,k)")
        bsz, cin, h, wd = x.shape
        cout, cin_w, kh, kw = w.shape
        if kh != kw or kh % 2 != 1:
            raise DimensionError("conv2d kernel must be square with odd size")
        if cin != cin_w:
            raise DimensionError(f"conv2d channels: input {cin} vs kernel {cin_w}")
        k = kh
        ho, rh = divmod(h + 2 * pad - k, stride)
        wo, rw = divmod(wd + 2 * pad - k, stride)
        ho, wo = ho + 1, wo + 1
        if rh or rw or ho < 1 or wo < 1:
            raise DimensionError(f"conv2d output size not integral for {x.shape} k={k} s={stride} p={pad}")

        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = np.empty((bsz, cin, k, k, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols2 = cols.reshape(bsz, cin * k * k, ho * wo)
        w2 = w.reshape(cout, cin * k * k)
        data = np.matmul(w2, cols2).reshape(bsz, cout, ho, wo)
        _flops(2 * bsz * cout * cin * k * k * ho * wo)

        def backward(g: np.ndarray, xt=self, wt=weight) -> None:
            g2 = g.reshape(bsz, cout, ho * wo)
            if wt.requires_grad or wt._backward is not None:
                gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
                wt._accum(gw.reshape(w.shape))
            if xt.requires_grad or xt._backward is not None:
                dcols = np.matmul(w2.T, g2).reshape(bsz, cin, k, k, ho, wo)
                dxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
                xt._accum(dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp)

        return Tensor._result(data, (self, weight), backward, "conv2d")

    # ------------------------------------------------------------------
    # reductions
    # ------------------------------------------------------------------

    def _norm_dims(self, dims) -> tuple:
        if dims is None:
            return tuple(range(self.data.ndim))
        if isinstance(dims, int):
            dims = (dims,)
        dims = tuple(sorted(d % self.data.ndim for d in dims))
        if len(set(dims)) != len(dims):
            raise DimensionError(f"duplicate reduction dims {dims}")
        return dims

    def mean(self, dims=None, keepdims: bool = False) -> "Tensor":
        dims = self._norm_dims(dims)
        extent = 1
        for d in dims:
            extent *= self.data.shape[d]
        if extent == 0:
            raise DimensionError("mean over empty extent")
        data = self.data.mean(axis=dims, keepdims=keepdims)
        _flops(self.data.size)

        def backward(g: np.ndarray, a=self, dims=dims, extent=extent, keepdims=keepdims) -> None:
            if not keepdims:
                g = np.expand_dims(g, dims)
            a._accum(np.broadcast_to(g / extent, a.data.shape))

        return Tensor._result(data, (self,), backward, "mean")

    def sum(self, dims=None, keepdims: bool = False) -> "Tensor":
        dims = self._norm_dims(dims)
        data = self.data.sum(axis=dims, keepdims=keepdims)
        _flops(self.data.size)

        def backward(g: np.ndarray, a=self, dims=dims, keepdims=keepdims) -> None:
            if not keepdims:
                g = np.expand_dims(g, dims)
            a._accum(np.broadcast_to(g, a.data.shape))

        return Tensor._result(data, (self,), backward, "sum")

    # ------------------------------------------------------------------
    # pointwise nonlinearities
    # ------------------------------------------------------------------

    def sigmoid(self) -> "Tensor":
        data = _sigmoid(self.data)
        _flops(data.size)

        def backward(g: np.ndarray, a=self, y=data) -> None:
            a._accum(g * y * (1.0 - y))

        return Tensor._result(data, (self,), backward, "sigmoid")

    def silu(self) -> "Tensor":
        s = _sigmoid(self.data)
        data = self.data * s
        _flops(data.size)

        def backward(g: np.ndarray, a=self, s=s) -> None:
            a._accum(g * s * (1.0 + a.data * (1.0 - s)))

        return Tensor._result(data, (self,), backward, "silu")

    def softmax(self) -> "Tensor":
        """Numerically stabilized softmax over the last axis, fused gradient."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        data = e / e.sum(axis=-1, keepdims=True)
        _flops(self.data.size)

        def backward(g: np.ndarray, a=self, y=data) -> None:
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accum(y * (g - dot))

        return Tensor._result(data, (self,), backward, "softmax")

    # ------------------------------------------------------------------
    # normalization
    # ------------------------------------------------------------------

    def layer_norm(self, eps: float = 1e-5) -> "Tensor":
        """Normalize over the last axis (no affine; scale/shift live outside)."""
        mu = self.data.mean(axis=-1, keepdims=True)
        xc = self.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        data = xc * inv
        _flops(self.data.size)
        n = self.data.shape[-1]

        def backward(g: np.ndarray, a=self, y=data, inv=inv, n=n) -> None:
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            a._accum(inv * (g - gm - y * gym))

        return Tensor._result(data, (self,), backward, "layer_norm")

    def group_norm(self, groups: int, eps: float = 1e-5) -> "Tensor":
        """Normalize (B,C,H,W) within channel groups (no affine)."""
        b, c, h, w = self.data.shape
        if c % groups:
            raise DimensionError(f"group_norm: {c} channels not divisible by {groups}")
        xg = self.data.reshape(b, groups, -1)
        mu = xg.mean(axis=2, keepdims=True)
        xc = xg - mu
        var = (xc * xc).mean(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        yg = xc * inv
        data = yg.reshape(b, c, h, w)
        _flops(self.data.size)

        def backward(g: np.ndarray, a=self, yg=yg, inv=inv, shape=(b, groups)) -> None:
            gg = g.reshape(yg.shape)
            gm = gg.mean(axis=2, keepdims=True)
            gym = (gg * yg).mean(axis=2, keepdims=True)
            a._accum((inv * (gg - gm - yg * gym)).reshape(a.data.shape))

        return Tensor._result(data, (self,), backward, "group_norm")

    # ------------------------------------------------------------------
    # shape manipulation
    # ------------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def backward(g: np.ndarray, a=self) -> None:
            a._accum(g.reshape(a.data.shape))

        return Tensor._result(data, (self,), backward, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        data = np.ascontiguousarray(self.data.transpose(axes))
        inverse = np.argsort(axes)

        def backward(g: np.ndarray, a=self, inverse=tuple(inverse)) -> None:
            a._accum(g.transpose(inverse))

        return Tensor._result(data, (self,), backward, "transpose")

    def upsample2x(self) -> "Tensor":
        """Nearest-neighbor 2x upsampling of (B,C,H,W); pure data movement."""
        data = self.data.repeat(2, axis=2).repeat(2, axis=3)

        def backward(g: np.ndarray, a=self) -> None:
            b, c, h2, w2 = g.shape
            a._accum(g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

        return Tensor._result(data, (self,), backward, "upsample2x")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def grad(loss: Tensor, params: Iterable[Tensor]) -> list:
    """Gradient of a scalar loss with respect to each param.

    Disconnected params get a zero gradient. Existing .grad buffers are
    cleared first so repeated calls do not accumulate across losses.
    """
    params = list(params)
    if loss.data.size != 1:
        raise UsageError("grad() requires a scalar loss")
    for p in params:
        p.grad = None
    loss.backward()
    out = []
    for p in params:
        out.append(p.grad if p.grad is not None else np.zeros_like(p.data))
    return out
