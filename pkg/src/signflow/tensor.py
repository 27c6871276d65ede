"""Minimal dense-tensor autodiff engine.

Reverse-mode differentiation over numpy arrays, covering exactly the ops the
video backbone needs: elementwise arithmetic, matmul, 2D/3D convolution,
pooling, reductions, slicing/concatenation, and softmax cross-entropy.

Layout conventions:
  * all data is row-major; video batches use [N, T, C, H, W],
  * time is folded into batch ([N*T, C, H, W]) for 2D ops and restored with
    plain reshapes for temporal ops,
  * float64 is the test/oracle precision, float32 is allowed for training.

conv2d runs in one of two modes. The ``exact`` mode accumulates kernel taps
in (c, kh, kw) order with the innermost axis last, which makes its output
bit-identical to a naive six-loop evaluation. The ``fast`` mode lowers to an
im2col matmul (BLAS). Mode ``auto`` picks exact for float64 and fast for
float32.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError, ParseError, UsageError

Array = np.ndarray


def _as_array(data, dtype=None) -> Array:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A node in the computation graph.

    Leaf tensors wrap raw data; op outputs additionally carry the closures
    needed to push gradients to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple["Tensor", ...] = (),
                 backward: Callable[[Array], None] | None = None,
                 op: str = ""):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self._op = op
        self._done = False

    # -- basic introspection -------------------------------------------------

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
        return float(self.data)

    def numpy(self) -> Array:
        return self.data

    def __repr__(self) -> str:
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- graph construction helpers -------------------------------------------

    def _child(self, data: Array, parents: tuple["Tensor", ...],
               backward: Callable[[Array], None], op: str) -> "Tensor":
        requires = any(p.requires_grad for p in parents)
        if not requires:
            return Tensor(data, op=op)
        return Tensor(data, requires_grad=True, parents=parents, backward=backward, op=op)

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, like=self), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)

    # -- backward --------------------------------------------------------------

    def backward(self) -> None:
        """Populate .grad on every reachable tensor with d(self)/d(node).

        self must be a scalar produced by tracked ops. Grads are zeroed at
        the start of every pass; a second backward without a fresh forward
        is rejected.
        """
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad or not self._parents:
            raise UsageError("backward on a tensor that is not the output of tracked ops")
        if self._done:
            raise UsageError("backward already ran on this node; run forward again first")
        self._done = True

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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum grad down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ops ------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    out_data = a.data + b.data

    def backward(grad: Array) -> None:
        if a.requires_grad:
            a.grad += _unbroadcast(grad, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(grad, b.shape)

    return a._child(out_data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    out_data = a.data * b.data

    def backward(grad: Array) -> None:
        if a.requires_grad:
            a.grad += _unbroadcast(grad * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(grad * a.data, b.shape)

    return a._child(out_data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0).astype(x.data.dtype)

    def backward(grad: Array) -> None:
        if x.requires_grad:
            x.grad += grad * mask

    return x._child(out_data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # numerically stable two-sided form
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out_data = out_data.astype(d.dtype)

    def backward(grad: Array) -> None:
        if x.requires_grad:
            x.grad += grad * out_data * (1.0 - out_data)

    return x._child(out_data, (x,), backward, "sigmoid")


# -- shape ops --------------------------------------------------------------------


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    new = np.reshape(x.data, shape)
    if new.size != x.data.size:  # numpy would already have raised; keep explicit
        raise DimensionError(f"reshape {x.shape} -> {shape} changes element count")
    old_shape = x.shape

    def backward(grad: Array) -> None:
        if x.requires_grad:
            x.grad += grad.reshape(old_shape)

    return x._child(new, (x,), backward, "reshape")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = x.data[idx]

    def backward(grad: Array) -> None:
        if x.requires_grad:
            x.grad[idx] += grad

    return x._child(out_data, (x,), backward, "narrow")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(grad: Array) -> None:
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * grad.ndim
                idx[axis] = slice(offset, offset + size)
                p.grad += grad[tuple(idx)]
            offset += size

    return parts[0]._child(out_data, tuple(parts), backward, "concat")


def zeros_like_slice(x: Tensor, axis: int, length: int) -> Tensor:
    """Constant zero tensor shaped like x with ``axis`` resized to ``length``."""
    shape = list(x.shape)
    shape[axis] = length
    return Tensor(np.zeros(shape, dtype=x.data.dtype))


# -- reductions --------------------------------------------------------------------


def tsum(x: Tensor, axis=None) -> Tensor:
    out_data = x.data.sum(axis=axis)

    def backward(grad: Array) -> None:
        if not x.requires_grad:
            return
        if axis is None:
            x.grad += grad  # broadcasts scalar
        else:
            x.grad += np.expand_dims(grad, axis)

    return x._child(out_data, (x,), backward, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        count = x.data.shape[axis]
    out_data = x.data.mean(axis=axis)

    def backward(grad: Array) -> None:
        if not x.requires_grad:
            return
        if axis is None:
            x.grad += grad / count
        else:
            x.grad += np.expand_dims(grad, axis) / count

    return x._child(out_data, (x,), backward, "mean")


# -- matmul -------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _wrap(a)
    b = _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(grad: Array) -> None:
        if a.requires_grad:
            a.grad += grad @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ grad

    return a._child(out_data, (a, b), backward, "matmul")


# -- convolution ----------------------------------------------------------------------


def _conv2d_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise DimensionError(
            f"conv2d output empty: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}")
    return oh, ow


def _im2col(xp: Array, kh: int, kw: int, stride: int, oh: int, ow: int) -> Array:
    """[N,C,Hp,Wp] -> [N*oh*ow, C*kh*kw] with columns in (c, kh, kw) order."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return windows.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, mode: str = "auto") -> Tensor:
    """Cross-correlation of [N,C,H,W] with [Co,C,kh,kw], zero padding.

    mode: 'exact' accumulates taps in (c,kh,kw) order and is bit-identical to
    the naive loop; 'fast' uses im2col+matmul; 'auto' picks exact for float64.
    """
    x = _wrap(x)
    w = _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4D x and w, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: x {x.shape} vs w {w.shape}")
    oh, ow = _conv2d_out_hw(h, wd, kh, kw, stride, pad)
    if mode == "auto":
        mode = "exact" if x.data.dtype == np.float64 else "fast"

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data

    if mode == "exact":
        out_data = np.zeros((n, co, oh, ow), dtype=x.data.dtype)
        tmp = np.empty_like(out_data)
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, ci, i:i + stride * oh:stride, j:j + stride * ow:stride]
                    np.multiply(patch[:, None, :, :], w.data[None, :, ci, i, j, None, None], out=tmp)
                    out_data += tmp
    else:
        cols = _im2col(xp, kh, kw, stride, oh, ow)
        out_data = (cols @ w.data.reshape(co, -1).T).reshape(n, oh, ow, co)
        out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))

    if bias is not None:
        out_data = out_data + bias.data.reshape(1, co, 1, 1)

    def backward(grad: Array) -> None:
        grad_flat = grad.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
        if w.requires_grad:
            cols_b = _im2col(xp, kh, kw, stride, oh, ow)
            w.grad += (grad_flat.T @ cols_b).reshape(w.shape)
        if x.requires_grad:
            dcols = (grad_flat @ w.data.reshape(co, -1)).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x.grad += dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        if bias is not None and bias.requires_grad:
            bias.grad += grad.sum(axis=(0, 2, 3))

    parents = (x, w) if bias is None else (x, w, bias)
    return x._child(out_data, parents, backward, "conv2d")


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, pad: int = 1) -> Tensor:
    """Cross-correlation of [N,C,D,H,W] with [Co,C,kd,kh,kw], stride 1.

    Tap-accumulation implementation; desk-scale kernels only (the gating
    branches use it at one or two channels).
    """
    x = _wrap(x)
    w = _wrap(w)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise DimensionError(f"conv3d expects 5D x and w, got {x.shape} and {w.shape}")
    n, c, d, h, wd = x.shape
    co, cw, kd, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv3d channel mismatch: x {x.shape} vs w {w.shape}")
    od, oh, ow = d + 2 * pad - kd + 1, h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    if od <= 0 or oh <= 0 or ow <= 0:
        raise DimensionError(f"conv3d output empty for input {x.shape}, kernel {w.shape}, pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
    out_data = np.zeros((n, co, od, oh, ow), dtype=x.data.dtype)
    for ci in range(c):
        for a in range(kd):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, ci, a:a + od, i:i + oh, j:j + ow]
                    out_data += patch[:, None] * w.data[None, :, ci, a, i, j, None, None, None]
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, co, 1, 1, 1)

    def backward(grad: Array) -> None:
        if w.requires_grad:
            for ci in range(c):
                for a in range(kd):
                    for i in range(kh):
                        for j in range(kw):
                            patch = xp[:, ci, a:a + od, i:i + oh, j:j + ow]
                            w.grad[:, ci, a, i, j] += np.einsum("nodhw,ndhw->o", grad, patch,
                                                                optimize=False)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for ci in range(c):
                for a in range(kd):
                    for i in range(kh):
                        for j in range(kw):
                            contrib = np.einsum("nodhw,o->ndhw", grad, w.data[:, ci, a, i, j],
                                                optimize=False)
                            dxp[:, ci, a:a + od, i:i + oh, j:j + ow] += contrib
            x.grad += dxp[:, :, pad:pad + d, pad:pad + h, pad:pad + wd] if pad else dxp
        if bias is not None and bias.requires_grad:
            bias.grad += grad.sum(axis=(0, 2, 3, 4))

    parents = (x, w) if bias is None else (x, w, bias)
    return x._child(out_data, parents, backward, "conv3d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C], mean over the spatial axes."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward(grad: Array) -> None:
        if x.requires_grad:
            x.grad += grad[:, :, None, None] / (h * w)

    return x._child(out_data, (x,), backward, "global_avg_pool")


# -- loss -----------------------------------------------------------------------------


def log_softmax(logits: Array) -> Array:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Array) -> Array:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]; labels are class indices."""
    logits = _wrap(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits rows {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise InputError(f"label {bad} out of range [0, {k})")

    logp = log_softmax(logits.data)
    out_data = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def backward(grad: Array) -> None:
        if logits.requires_grad:
            g = np.exp(logp)
            g[np.arange(n), labels] -= 1.0
            logits.grad += grad * g / n

    return logits._child(out_data, (logits,), backward, "softmax_cross_entropy")


# -- gradient checking ----------------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], x: Array, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn must be scalar-valued and smooth at x; relative error per element is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = fn(leaf)
    out.backward()
    analytic = leaf.grad.copy()

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(Tensor(x)).item()
        flat[i] = orig - eps
        lo = fn(Tensor(x)).item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


# -- weight store ("SGNF1") -------------------------------------------------------------

WEIGHT_MAGIC = b"SGNF1"


def save_weights(path, tensors: dict[str, Array] | Iterable[tuple[str, Array]]) -> None:
    """Write named tensors: magic, count, then {name, rank, dims, f32 values}.

    All integers are unsigned 32-bit little-endian; values are float32
    little-endian. Round-trips bit-exactly.
    """
    if isinstance(tensors, dict):
        items = list(tensors.items())
    else:
        items = list(tensors)
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_weights(path) -> dict[str, Array]:
    """Read a weight file written by save_weights; returns float32 arrays."""
    with open(path, "rb") as fh:
        magic = fh.read(len(WEIGHT_MAGIC))
        if magic != WEIGHT_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, Array] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n_values = int(np.prod(dims)) if dims else 1
            raw = fh.read(4 * n_values)
            if len(raw) != 4 * n_values:
                raise ParseError(f"{path}: truncated values for tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        return out
