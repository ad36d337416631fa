"""Dense N-D tensor with reverse-mode autodiff on a dynamically recorded tape.

Every feature map and learnable parameter in the detector is carried by
:class:`Tensor`. Operations record closures onto a tape; ``backward()`` on a
scalar loss walks the tape in reverse topological order and accumulates
gradients into every tensor created with ``requires_grad=True``. The graph is
freed once walked, so a tensor can be reused across training steps.

Layout is row-major (C order). Broadcasting is supported only where the
architecture needs it: bias adds and scalar operations. Default precision is
float32; switch to float64 (``using_dtype``) for tight finite-difference
tolerances.

Thread-safety: tensors are immutable after construction except for gradient
accumulation, and a single forward/backward pass is single-threaded and
deterministic. Independent passes on separate tapes may run concurrently.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

_DEFAULT_DTYPE = np.dtype(np.float32)

LAYER_NORM_EPS = 1e-5


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported tensor dtype {dt}")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default tensor dtype (used by 64-bit test mode)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; frees the recorded graph afterwards."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in order:
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
            if node is not self:
                # Intermediate gradients are not retained; only leaves keep grads.
                if node._backward_fn is not None:
                    node.grad = None
            node._backward_fn = None
            node._parents = ()

    # ---- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use mul + power")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


@dataclass
class ComplexTensor:
    """Complex-valued grid stored as separate real and imaginary parts.

    Carries Fourier coefficients; no gradient tracking (spectral preprocessing
    happens before the differentiable graph starts).
    """

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.shape != self.im.shape:
            raise DimensionError(
                f"re/im shape mismatch: {self.re.shape} vs {self.im.shape}"
            )

    @property
    def shape(self) -> tuple:
        return self.re.shape

    @classmethod
    def from_complex(cls, values: np.ndarray) -> "ComplexTensor":
        values = np.asarray(values, dtype=np.complex128)
        return cls(values.real.copy(), values.imag.copy())

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im


# ---- graph plumbing ------------------------------------------------------


def _toposort(root: Tensor) -> list:
    """Reverse topological order of the graph reachable from root (iterative)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Wrap an op result; records the tape only if some parent is tracked."""
    tracked = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked, dtype=data.dtype)
    if tracked:
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of the broadcast in bias/scalar adds)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---- elementwise and shape ops -------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out_data = a.data + b

        def bwd(grad):
            if a.requires_grad:
                a._accumulate(grad)

        return _result(out_data, (a,), bwd)

    out_data = a.data + b.data

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.shape))

    return _result(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out_data = a.data * b

        def bwd(grad):
            if a.requires_grad:
                a._accumulate(grad * b)

        return _result(out_data, (a,), bwd)

    out_data = a.data * b.data

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.data, b.shape))

    return _result(out_data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ grad)

    return _result(out_data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad.T)

    return _result(a.data.T.copy(), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad.reshape(a.shape))

    return _result(out_data, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]

    def bwd(grad):
        offset = 0
        for t, extent in zip(tensors, extents):
            if t.requires_grad:
                index = [slice(None)] * grad.ndim
                index[axis] = slice(offset, offset + extent)
                t._accumulate(grad[tuple(index)])
            offset += extent

    return _result(out_data, tuple(tensors), bwd)


def _getitem(a: Tensor, key) -> Tensor:
    out_data = a.data[key]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data, dtype=a.data.dtype)

    def bwd(grad):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, grad)
            a._accumulate(full)

    return _result(out_data, (a,), bwd)


def tsum(a: Tensor, axis=None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def bwd(grad):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(grad, a.shape).astype(a.data.dtype))
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(grad, axis), a.shape))

    return _result(np.asarray(out_data, dtype=a.data.dtype), (a,), bwd)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / count)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad * out_data)

    return _result(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad / a.data)

    return _result(out_data, (a,), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data**exponent

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad * exponent * a.data ** (exponent - 1))

    return _result(out_data, (a,), bwd)


# ---- activations ----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    """max(0, x); gradient is zero on the non-positive side."""
    out_data = np.maximum(a.data, 0)

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad * (a.data > 0))

    return _result(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic; output strictly inside (0, 1)."""
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype)

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad * out_data * (1.0 - out_data))

    return _result(out_data, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis` with max-subtraction for overflow safety."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out_data = exps / exps.sum(axis=axis, keepdims=True)

    def bwd(grad):
        if a.requires_grad:
            inner = (grad * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (grad - inner))

    return _result(out_data, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Normalize along `axis` to mean 0 / variance 1 (eps inside the sqrt), then affine."""
    extent = a.shape[axis]
    if extent < 2:
        raise DimensionError(f"layer_norm axis extent must be >= 2, got {extent}")
    mean = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mean
    var = (centered**2).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    out_data = xhat * gain.data + bias.data

    def bwd(grad):
        if gain.requires_grad:
            axes = tuple(i for i in range(grad.ndim) if i != (axis % grad.ndim))
            gain._accumulate((grad * xhat).sum(axis=axes))
        if bias.requires_grad:
            axes = tuple(i for i in range(grad.ndim) if i != (axis % grad.ndim))
            bias._accumulate(grad.sum(axis=axes))
        if a.requires_grad:
            dxhat = grad * gain.data
            term = dxhat - dxhat.mean(axis=axis, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
            a._accumulate(inv_std * term)

    return _result(out_data, (a, gain, bias), bwd)


# ---- convolution and pooling ----------------------------------------------


def _conv_indices(height, width, k, stride):
    out_h = (height - k) // stride + 1
    out_w = (width - k) // stride + 1
    rows = (np.arange(out_h) * stride)[:, None, None, None] + np.arange(k)[None, None, :, None]
    cols = (np.arange(out_w) * stride)[None, :, None, None] + np.arange(k)[None, None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    return out_h, out_w, rows, cols


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation form) over an H x W x C_in map.

    kernels has shape (k, k, C_in, C_out); output spatial extent is
    floor((H + 2p - k)/stride) + 1 with zero padding.
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(
            f"conv2d expects HWC input and kkio kernels, got {x.shape} / {kernels.shape}"
        )
    height, width, c_in = x.shape
    k = kernels.shape[0]
    if kernels.shape[1] != k or kernels.shape[2] != c_in:
        raise DimensionError(
            f"kernel shape {kernels.shape} incompatible with input {x.shape}"
        )
    if k > height + 2 * padding or k > width + 2 * padding:
        raise DimensionError(
            f"kernel {k}x{k} larger than padded input "
            f"{height + 2 * padding}x{width + 2 * padding}"
        )
    c_out = kernels.shape[3]
    if padding:
        xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data
    out_h, out_w, rows, cols = _conv_indices(xp.shape[0], xp.shape[1], k, stride)
    patches = xp[rows, cols]  # (out_h, out_w, k, k, c_in)
    col = patches.reshape(out_h * out_w, k * k * c_in)
    kmat = kernels.data.reshape(k * k * c_in, c_out)
    out_data = (col @ kmat).reshape(out_h, out_w, c_out)

    def bwd(grad):
        gflat = grad.reshape(out_h * out_w, c_out)
        if kernels.requires_grad:
            kernels._accumulate((col.T @ gflat).reshape(kernels.shape))
        if x.requires_grad:
            dcol = (gflat @ kmat.T).reshape(out_h, out_w, k, k, c_in)
            dxp = np.zeros_like(xp)
            np.add.at(dxp, (rows, cols), dcol)
            if padding:
                dxp = dxp[padding:padding + height, padding:padding + width]
            x._accumulate(dxp)

    return _result(out_data, (x, kernels), bwd)


def max_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max pooling over non-padded windows of an H x W x C map."""
    if x.ndim != 3:
        raise DimensionError(f"max_pool2d expects an HWC map, got {x.shape}")
    height, width, channels = x.shape
    if window > height or window > width:
        raise DimensionError(
            f"pool window {window} exceeds input extent {height}x{width}"
        )
    out_h, out_w, rows, cols = _conv_indices(height, width, window, stride)
    patches = x.data[rows, cols].reshape(out_h, out_w, window * window, channels)
    arg = patches.argmax(axis=2)  # (out_h, out_w, channels)
    out_data = np.take_along_axis(patches, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def bwd(grad):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            oh, ow, ch = np.meshgrid(
                np.arange(out_h), np.arange(out_w), np.arange(channels), indexing="ij"
            )
            abs_r = oh * stride + arg // window
            abs_c = ow * stride + arg % window
            np.add.at(dx, (abs_r, abs_c, ch), grad)
            x._accumulate(dx)

    return _result(out_data, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an H x W x C map, one value per channel."""
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool expects an HWC map, got {x.shape}")
    height, width, _ = x.shape
    out_data = x.data.mean(axis=(0, 1))

    def bwd(grad):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(grad, x.shape) / (height * width))

    return _result(out_data, (x,), bwd)


# ---- patch/token reshuffles -----------------------------------------------


def extract_patches(x: Tensor, k: int) -> Tensor:
    """Cut an H x W x C map into non-overlapping k x k patches.

    Returns (N, k*k*C) with N = (H/k)*(W/k); patches are ordered row-major over
    the patch grid and each patch is flattened row-major, channel-minor.
    """
    height, width, channels = x.shape
    if height % k or width % k:
        raise DimensionError(f"map {height}x{width} not divisible by patch size {k}")
    gh, gw = height // k, width // k

    def fwd(arr):
        return (
            arr.reshape(gh, k, gw, k, channels)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, k * k * channels)
        )

    def bwd(grad):
        if x.requires_grad:
            x._accumulate(
                grad.reshape(gh, gw, k, k, channels)
                .transpose(0, 2, 1, 3, 4)
                .reshape(height, width, channels)
            )

    return _result(fwd(x.data), (x,), bwd)


def grid_pool(tokens: Tensor, factor: int) -> Tensor:
    """Average-pool a square token grid by `factor` per side.

    tokens is (T, D) with T a perfect square; groups of factor x factor
    neighboring grid cells are averaged, giving (T / factor^2, D).
    """
    count, dim = tokens.shape
    side = int(round(count**0.5))
    if side * side != count:
        raise DimensionError(f"token count {count} is not a square grid")
    if side % factor:
        raise DimensionError(f"grid side {side} not divisible by pool factor {factor}")
    out_side = side // factor
    out_data = (
        tokens.data.reshape(out_side, factor, out_side, factor, dim)
        .mean(axis=(1, 3))
        .reshape(out_side * out_side, dim)
    )

    def bwd(grad):
        if tokens.requires_grad:
            g = grad.reshape(out_side, 1, out_side, 1, dim) / (factor * factor)
            g = np.broadcast_to(g, (out_side, factor, out_side, factor, dim))
            tokens._accumulate(g.reshape(count, dim))

    return _result(out_data, (tokens,), bwd)


# ---- parameter initialization ---------------------------------------------


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Trainable tensor drawn from uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))."""
    bound = (1.0 / fan_in) ** 0.5
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


# ---- finite-difference verification ----------------------------------------


def numeric_gradient(fn, tensor: Tensor, index, h: float) -> float:
    """Central-difference derivative of scalar fn() w.r.t. one tensor element."""
    original = tensor.data[index]
    tensor.data[index] = original + h
    up = fn()
    tensor.data[index] = original - h
    down = fn()
    tensor.data[index] = original
    return (up - down) / (2.0 * h)


def check_gradients(fn, tensors: dict, h: float = 1e-5, samples: int = 8,
                    seed: int = 0, rel_floor: float = 1e-2) -> dict:
    """Compare analytic gradients of scalar fn() against central differences.

    fn must be a deterministic pure function of the tensors' data, returning a
    scalar Tensor. For each named tensor, up to `samples` elements are probed
    (seeded choice) and the worst relative error is reported:
    |analytic - numeric| / max(|analytic|, |numeric|, rel_floor).
    """
    for t in tensors.values():
        t.zero_grad()
    loss = fn()
    loss.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in tensors.items()}

    def value():
        return fn().item()

    rng = np.random.default_rng(seed)
    report = {}
    for name, t in tensors.items():
        flat_size = t.size
        picks = rng.choice(flat_size, size=min(samples, flat_size), replace=False)
        worst = 0.0
        for flat in picks:
            index = np.unravel_index(int(flat), t.shape)
            numeric = numeric_gradient(value, t, index, h)
            a = float(analytic[name][index])
            err = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            worst = max(worst, err)
        report[name] = worst
    return report
