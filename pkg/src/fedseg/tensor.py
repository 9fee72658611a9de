"""Small reverse-mode autodiff engine over numpy arrays.

Only the primitives the segmentation model needs are provided. Broadcasting is
limited to per-channel bias terms; everything else must have matching shapes.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "relu",
    "sigmoid",
    "log",
    "sqrt",
    "clip",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "softmax",
    "add_bias",
    "spatial_mean",
    "concat_channels",
    "conv2d",
    "maxpool2d",
    "upsample_nearest2x",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


class GraphError(RuntimeError):
    """Invalid use of the backprop graph (non-scalar loss, double backward)."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar; scalars are folded into the op without a graph node of their own
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        if len(a.shape) != len(b.shape):
            raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
        dim = next(i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y)
        raise ShapeError(f"{op}: dimension {dim} mismatch ({a.shape[dim]} vs {b.shape[dim]})")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss`` that requires grad."""
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward() called twice on the same graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._consumed = True
    loss._consumed = True


# ---- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._make(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _check_same(a, b, "mul")
    return Tensor._make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data).astype(x.dtype)
    return Tensor._make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    return Tensor._make(r, (x,), lambda g: (g * 0.5 / r,), "sqrt")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---- reductions and reshaping ----------------------------------------------

def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis)

    def _bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=x.dtype), (x,), _bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return Tensor._make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose: operand must be 2-D")
    return Tensor._make(x.data.T, (x,), lambda g: (g.T,), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul: both operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimension mismatch ({a.shape[1]} vs {b.shape[0]})")
    return Tensor._make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of an [N, M] tensor."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._make(s, (x,), _bw, "softmax")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-column bias ``b[C]`` to ``x[N, C]`` or per-channel to ``x[N, C, H, W]``."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: channel dimension mismatch ({x.shape} vs {b.shape})")
    view = b.data.reshape((1, -1) + (1,) * (x.data.ndim - 2))
    axes = (0,) + tuple(range(2, x.data.ndim))
    return Tensor._make(x.data + view, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def spatial_mean(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] average over the spatial grid."""
    n, c, h, w = x.shape
    return Tensor._make(x.data.mean(axis=(2, 3)), (x,),
                        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
                        "spatial_mean")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: non-channel dimensions differ ({ref} vs {t.shape})")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    return Tensor._make(np.concatenate([t.data for t in xs], axis=1), tuple(xs),
                        lambda g: tuple(np.split(g, splits, axis=1)), "concat")


# ---- spatial ops -----------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, ho: int, wo: int) -> np.ndarray:
    """[N, C, Hp, Wp] -> [N, C*k*k, ho*wo], row index c*k*k + i*k + j."""
    n, c = xp.shape[:2]
    patches = [xp[:, :, i:i + ho, j:j + wo] for i in range(k) for j in range(k)]
    return np.stack(patches, axis=2).reshape(n, c * k * k, ho * wo)


def _correlate(x: np.ndarray, w: np.ndarray, pad: int) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    cols = _im2col(xp, k, ho, wo)
    return np.matmul(w.reshape(cout, -1), cols).reshape(n, cout, ho, wo), cols


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int | None = None) -> Tensor:
    """Stride-1 convolution (cross-correlation) with zero padding.

    ``pad`` defaults to ``k // 2`` so that 3x3 kernels keep the spatial size.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D, got rank {x.data.ndim}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channel dimension mismatch (input {cin}, weight {wcin})")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias dimension mismatch (expected {cout}, got {b.shape})")
    if pad is None:
        pad = kh // 2
    out, cols = _correlate(x.data, w.data, pad)
    out += b.data.reshape(1, cout, 1, 1)
    ho, wo = out.shape[2:]

    def _bw(g):
        gr = g.reshape(n, cout, ho * wo)
        gw = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = gr.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            # full correlation with the spatially flipped, channel-swapped kernel
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            full, _ = _correlate(g, wf, kh - 1 - pad)
            gx = full
        return gx, gw, gb

    return Tensor._make(out, (x, w, b), _bw, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Gradient goes to the first maximum in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor._make(out, (x,), _bw, "maxpool2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return Tensor._make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample")


# ---- oracle ----------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray | Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``f`` receives a float64 array shaped like ``x`` and returns a float.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
