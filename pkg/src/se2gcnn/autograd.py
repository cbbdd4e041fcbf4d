"""Dense tensor engine with reverse-mode differentiation.

The op set is deliberately closed: correlation, pooling, ReLU, batch norm,
elementwise add/multiply, reshape, reductions and the handful of structured
ops the group layers need. Every op is a :class:`Function` subclass with an
explicit ``forward``/``backward`` on numpy arrays.

Layout is channel-last and row-major. Images are ``[B, H, W, C]``, SE(2)
images are ``[B, H, W, N, C]``.
"""

from __future__ import annotations

import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """An ndarray plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _ctx=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx: Function | None = _ctx
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tsum(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


class Function:
    """One node of the computation record.

    ``forward`` receives raw arrays and may stash whatever ``backward`` needs
    on ``self``. ``backward`` returns one gradient (or ``None``) per input.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{cls.__name__} produced non-finite values")
        needs_grad = any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=needs_grad, _ctx=fn if needs_grad else None)


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite input")


# ---------------------------------------------------------------------------
# Elementwise and structural ops


class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, a, factor: float):
        self.factor = factor
        return a * a.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class AddChannelBias(Function):
    """``x + b`` with ``b`` indexed by the last (channel) axis."""

    def forward(self, x, b):
        if b.shape != (x.shape[-1],):
            raise ValueError(f"bias shape {b.shape} does not match channels {x.shape[-1]}")
        return x + b

    def backward(self, grad):
        return grad, grad.reshape(-1, grad.shape[-1]).sum(axis=0)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Sum(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.full(self.in_shape, grad, dtype=grad.dtype),)


class Mean(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad):
        n = int(np.prod(self.in_shape))
        return (np.full(self.in_shape, grad / n, dtype=grad.dtype),)


class Dot(Function):
    """Full contraction ``sum(a * w)`` for a fixed weight array ``w``."""

    def forward(self, a, w):
        self.w = w
        return np.asarray((a * w).sum(), dtype=a.dtype)

    def backward(self, grad):
        return grad * self.w, None


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, a.dtype.type(0))

    def backward(self, grad):
        return (grad * self.mask,)


class MaxOverAxis(Function):
    """Max over one axis; gradient goes to the lowest index among ties."""

    def forward(self, a, axis: int):
        axis = axis % a.ndim
        self.axis = axis
        self.in_shape = a.shape
        self.idx = np.argmax(a, axis=axis)
        return np.take_along_axis(a, np.expand_dims(self.idx, axis), axis=axis).squeeze(axis)

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        np.put_along_axis(out, np.expand_dims(self.idx, self.axis), np.expand_dims(grad, self.axis), axis=self.axis)
        return (out,)


class MeanOverAxis(Function):
    def forward(self, a, axis: int):
        axis = axis % a.ndim
        self.axis = axis
        self.in_shape = a.shape
        return a.mean(axis=axis)

    def backward(self, grad):
        n = self.in_shape[self.axis]
        g = np.expand_dims(grad / grad.dtype.type(n), self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class GlobalSpatialMax(Function):
    """Max over axes 1 and 2 of ``[B, H, W, C]``; row-major first index on ties."""

    def forward(self, a):
        b, h, w, c = a.shape
        self.in_shape = a.shape
        flat = a.reshape(b, h * w, c)
        self.idx = np.argmax(flat, axis=1)
        return np.take_along_axis(flat, self.idx[:, None, :], axis=1)[:, 0, :]

    def backward(self, grad):
        b, h, w, c = self.in_shape
        out = np.zeros((b, h * w, c), dtype=grad.dtype)
        np.put_along_axis(out, self.idx[:, None, :], grad[:, None, :], axis=1)
        return (out.reshape(self.in_shape),)


class TakeIndices(Function):
    """``out = a.reshape(-1)[index]`` for a fixed integer index array.

    The backward scatter-adds, so repeated indices are allowed.
    """

    def forward(self, a, index: np.ndarray):
        self.in_shape = a.shape
        self.index = index
        return a.reshape(-1)[index]

    def backward(self, grad):
        out = np.zeros(int(np.prod(self.in_shape)), dtype=grad.dtype)
        np.add.at(out, self.index.reshape(-1), grad.reshape(-1))
        return (out.reshape(self.in_shape),)


# ---------------------------------------------------------------------------
# Correlation and pooling


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _im2col(xp: np.ndarray, n: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Patches of a padded ``[B, Hp, Wp, C]`` array as ``[B*ho*wo, n*n*C]``.

    Column order is (kernel row, kernel col, channel), matching a kernel of
    shape ``[n, n, C, C_out]`` reshaped to ``[n*n*C, C_out]``.
    """
    b, _, _, c = xp.shape
    cols = np.empty((b, ho, wo, n, n, c), dtype=xp.dtype)
    for a in range(n):
        for d in range(n):
            cols[:, :, :, a, d, :] = xp[:, a:a + stride * (ho - 1) + 1:stride, d:d + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(b * ho * wo, n * n * c)


class Correlate2d(Function):
    """``out[x, o] = sum_{c, z} k[z, c, o] f[x*stride + z - pad, c]``."""

    def forward(self, x, k, padding: str = "same", stride: int = 1):
        if x.ndim != 4 or k.ndim != 4:
            raise ValueError("correlate2d expects input [B,H,W,C] and kernels [n,n,C_in,C_out]")
        b, h, w, c = x.shape
        n, n2, kc, co = k.shape
        if n != n2:
            raise ValueError("kernels must be square")
        if kc != c:
            raise ValueError(f"channel mismatch: input has {c}, kernels expect {kc}")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        if padding == "same":
            if n % 2 != 1:
                raise ValueError("same padding requires an odd kernel size")
            pad = (n - 1) // 2
        elif padding == "valid":
            if n > h or n > w:
                raise ValueError("kernel larger than input")
            pad = 0
        else:
            raise ValueError(f"unknown padding {padding!r}")
        _check_finite(x, k)
        ho = (h + 2 * pad - n) // stride + 1
        wo = (w + 2 * pad - n) // stride + 1
        self.geom = (b, h, w, c, n, co, pad, stride, ho, wo)
        self.cols = _im2col(_pad_spatial(x, pad), n, ho, wo, stride)
        self.k = k
        out = self.cols @ k.reshape(n * n * c, co)
        return out.reshape(b, ho, wo, co)

    def backward(self, grad):
        b, h, w, c, n, co, pad, stride, ho, wo = self.geom
        g2 = grad.reshape(b * ho * wo, co)
        gk = (self.cols.T @ g2).reshape(n, n, c, co)
        if not self.inputs[0].requires_grad:
            return None, gk
        gcols = (g2 @ self.k.reshape(n * n * c, co).T).reshape(b, ho, wo, n, n, c)
        gxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=grad.dtype)
        for a in range(n):
            for d in range(n):
                gxp[:, a:a + stride * (ho - 1) + 1:stride, d:d + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, a, d, :]
        gx = gxp[:, pad:pad + h, pad:pad + w, :]
        return gx, gk


class MaxPool2d(Function):
    """Non-overlapping spatial max pool on axes 1, 2 of ``[B, H, W, ...]``."""

    def forward(self, x, window: int):
        if window < 1:
            raise ValueError("window must be positive")
        b, h, w = x.shape[:3]
        rest = x.shape[3:]
        if h % window or w % window:
            raise ValueError(f"spatial dims {(h, w)} not divisible by window {window}")
        r = int(np.prod(rest))
        ho, wo = h // window, w // window
        self.geom = (x.shape, window, ho, wo, r)
        blocks = x.reshape(b, ho, window, wo, window, r).transpose(0, 1, 3, 5, 2, 4)
        blocks = blocks.reshape(b, ho, wo, r, window * window)
        self.idx = np.argmax(blocks, axis=-1)
        out = np.take_along_axis(blocks, self.idx[..., None], axis=-1)[..., 0]
        return out.reshape((b, ho, wo) + rest)

    def backward(self, grad):
        shape, window, ho, wo, r = self.geom
        b = shape[0]
        g = np.zeros((b, ho, wo, r, window * window), dtype=grad.dtype)
        np.put_along_axis(g, self.idx[..., None], grad.reshape(b, ho, wo, r, 1), axis=-1)
        g = g.reshape(b, ho, wo, r, window, window).transpose(0, 1, 4, 2, 5, 3)
        return (g.reshape(shape),)


class BatchNormTrain(Function):
    """Standardize with batch statistics pooled over every axis but the last."""

    def forward(self, x, scale, shift, eps: float):
        c = x.shape[-1]
        x2 = x.reshape(-1, c)
        m = x2.shape[0]
        mu = x2.sum(axis=0, dtype=np.float64) / m
        xc = x2 - mu.astype(x.dtype)
        var = np.einsum("ij,ij->j", xc, xc, dtype=np.float64) / m
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.xhat = xc * self.inv_std
        self.scale = scale
        self.batch_mean, self.batch_var = mu, var
        return (self.xhat * scale + shift).reshape(x.shape)

    def backward(self, grad):
        c = grad.shape[-1]
        g2 = grad.reshape(-1, c)
        m = g2.shape[0]
        gshift = g2.sum(axis=0)
        gscale = np.einsum("ij,ij->j", g2, self.xhat)
        gxhat = g2 * self.scale
        gx = (self.inv_std / m) * (m * gxhat - (gshift * self.scale) - self.xhat * (gscale * self.scale))
        return gx.reshape(grad.shape), gscale, gshift


class BatchNormInference(Function):
    def forward(self, x, scale, shift, mean: np.ndarray, var: np.ndarray, eps: float):
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.xhat = (x - mean.astype(x.dtype)) * self.inv_std
        self.scale = scale
        return self.xhat * scale + shift

    def backward(self, grad):
        axes = tuple(range(grad.ndim - 1))
        return grad * (self.scale * self.inv_std), (grad * self.xhat).sum(axis=axes), grad.sum(axis=axes)


class LogisticLoss(Function):
    def forward(self, z, y):
        if z.shape != y.shape:
            raise ValueError(f"logit shape {z.shape} does not match label shape {y.shape}")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        self.z, self.y = z, y
        # softplus(z) - y*z, stable for large |z|
        per = np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))
        return np.asarray(per.mean(), dtype=z.dtype)

    def backward(self, grad):
        sig = 0.5 * (1.0 + np.tanh(0.5 * self.z))
        return grad * (sig - self.y) / self.z.size, None


# ---------------------------------------------------------------------------
# Public functional API


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    return AddChannelBias.apply(x, bias)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def tsum(a: Tensor) -> Tensor:
    return Sum.apply(a)


def mean(a: Tensor) -> Tensor:
    return Mean.apply(a)


def dot(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(a * weights)`` with ``weights`` held constant."""
    return Dot.apply(a, Tensor(np.asarray(weights, dtype=as_tensor(a).dtype)))


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def max_over_axis(a: Tensor, axis: int) -> Tensor:
    return MaxOverAxis.apply(a, axis=axis)


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    return MeanOverAxis.apply(a, axis=axis)


def global_spatial_max(a: Tensor) -> Tensor:
    return GlobalSpatialMax.apply(a)


def take_indices(a: Tensor, index: np.ndarray) -> Tensor:
    return TakeIndices.apply(a, index=np.asarray(index, dtype=np.intp))


def correlate2d(x: Tensor, kernels: Tensor, padding: str = "same", stride: int = 1) -> Tensor:
    """2D cross-correlation, channel-summed, one output map per kernel.

    ``x`` is ``[B, H, W, C_in]`` or unbatched ``[H, W, C_in]``; ``kernels`` is
    ``[n, n, C_in, C_out]``. With ``padding="same"`` the input is zero padded
    by ``(n-1)//2`` on every side.
    """
    x = as_tensor(x)
    if x.ndim == 3:
        out = Correlate2d.apply(reshape(x, (1,) + x.shape), kernels, padding=padding, stride=stride)
        return reshape(out, out.shape[1:])
    return Correlate2d.apply(x, kernels, padding=padding, stride=stride)


def max_pool2d(x: Tensor, window: int) -> Tensor:
    return MaxPool2d.apply(x, window=window)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    eps: float = 1e-5,
    mode: str = "train",
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    momentum: float = 0.9,
) -> Tensor:
    """Per-channel batch normalization; the channel axis is last.

    Statistics pool over all other axes, which for SE(2) images includes the
    orientation axis. In train mode the running arrays (if given) are updated
    in place.
    """
    if mode == "train":
        out = BatchNormTrain.apply(x, scale, shift, eps=eps)
        if running_mean is not None and running_var is not None and out._ctx is not None:
            ctx = out._ctx
            running_mean *= momentum
            running_mean += (1 - momentum) * ctx.batch_mean
            running_var *= momentum
            running_var += (1 - momentum) * ctx.batch_var
        elif running_mean is not None and running_var is not None:
            axes = tuple(range(x.ndim - 1))
            running_mean *= momentum
            running_mean += (1 - momentum) * x.data.mean(axis=axes)
            running_var *= momentum
            running_var += (1 - momentum) * x.data.var(axis=axes)
        return out
    if mode == "inference":
        if running_mean is None or running_var is None:
            raise ValueError("inference mode needs running statistics")
        return BatchNormInference.apply(x, scale, shift, mean=running_mean, var=running_var, eps=eps)
    raise ValueError(f"unknown batch-norm mode {mode!r}")


def logistic_loss(logit: Tensor, label) -> Tensor:
    """Mean binary cross-entropy on logits."""
    logit = as_tensor(logit)
    y = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=logit.dtype)
    return LogisticLoss.apply(logit, Tensor(y))


# ---------------------------------------------------------------------------
# Backward pass


def computation_record(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` in topological order (inputs first)."""
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
        if node._ctx is not None:
            for parent in reversed(node._ctx.inputs):
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
    return order


def branch_signature(root: Tensor) -> bytes:
    """Concatenated ReLU masks and argmax choices in the record of ``root``.

    Two evaluations with equal signatures lie on the same smooth piece of a
    piecewise-smooth graph, which is what a finite-difference stencil needs.
    """
    parts = []
    for node in computation_record(root):
        ctx = node._ctx
        for attr in ("mask", "idx"):
            value = getattr(ctx, attr, None)
            if isinstance(value, np.ndarray):
                parts.append(np.ascontiguousarray(value).tobytes())
    return b"".join(parts)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every leaf that needs it.

    If ``params`` is given, their gradients are returned in order. A parameter
    the loss does not depend on gets a zero gradient and a warning.
    """
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    order = computation_record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        in_grads = node._ctx.backward(g)
        for parent, pg in zip(node._ctx.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    out = []
    for p in params:
        if p.grad is None:
            warnings.warn(f"parameter {p.name or p.shape} is not connected to the loss", RuntimeWarning, stacklevel=2)
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out


def finite_difference_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5,
                               coords: Iterable[int] | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function of ``x``.

    ``coords`` restricts the evaluation to a subset of flat indices; the
    other entries of the result are left at zero.
    """
    x = np.array(x, dtype=np.float64 if np.asarray(x).dtype == np.float64 else np.asarray(x).dtype)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(x))
        flat[i] = orig - eps
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad
