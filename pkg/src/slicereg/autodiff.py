"""A small reverse-mode autodiff engine on numpy arrays.

Define-by-run: every op appends a backward closure to the tensor it creates,
and ``backward()`` walks the graph in reverse topological order.  64-bit
scalars by default; the graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse as _sparse

from .errors import NotScalarLoss, ShapeMismatch, StaleTape


def _as_array(x, dtype=np.float64):
    if isinstance(x, np.ndarray):
        return x.astype(dtype, copy=False)
    return np.asarray(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_used")

    def __init__(self, data, requires_grad=False, _prev=()):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _prev)
        self._backward = None
        self._prev = _prev
        self._used = False

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise NotScalarLoss(f"backward() needs a scalar, got shape {self.shape}")
        if self._used:
            raise StaleTape("backward() already ran on this graph; re-record the forward pass")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._used = True
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, _prev=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))
        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, _prev=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))
        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data / other.data, _prev=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / other.data**2, other.shape))
        out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        if self.data.shape[-1] != other.data.shape[0]:
            raise ShapeMismatch(f"matmul {self.shape} @ {other.shape}")
        out = Tensor(self.data @ other.data, _prev=(self, other))
        a, b = self.data, other.data

        def bwd(g):
            if self.requires_grad:
                if a.ndim == 2 and b.ndim == 2:
                    self._accum(g @ b.T)
                elif a.ndim == 2 and b.ndim == 1:
                    self._accum(np.outer(g, b))
                elif a.ndim == 1 and b.ndim == 2:
                    self._accum(b @ g)
                else:
                    self._accum(g * b)
            if other.requires_grad:
                if a.ndim == 2 and b.ndim == 2:
                    other._accum(a.T @ g)
                elif a.ndim == 2 and b.ndim == 1:
                    other._accum(a.T @ g)
                elif a.ndim == 1 and b.ndim == 2:
                    other._accum(np.outer(a, g))
                else:
                    other._accum(g * a)
        out._backward = bwd
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _prev=(self,))

        def bwd(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accum(full)
        out._backward = bwd
        return out

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _prev=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accum(g.reshape(self.shape))
        out._backward = bwd
        return out

    def transpose(self, *axes):
        axes = axes or None
        out = Tensor(self.data.transpose(axes), _prev=(self,))

        def bwd(g):
            if self.requires_grad:
                inv = np.argsort(axes) if axes else None
                self._accum(g.transpose(inv))
        out._backward = bwd
        return out

    @property
    def T(self):
        return self.transpose()

    # -- reductions and nonlinearities ------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _prev=(self,))

        def bwd(g):
            if self.requires_grad:
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.shape).copy())
        out._backward = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), _prev=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accum(g * (self.data > 0))
        out._backward = bwd
        return out

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(s, _prev=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accum(g * s * (1.0 - s))
        out._backward = bwd
        return out

    def abs(self):
        out = Tensor(np.abs(self.data), _prev=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accum(g * np.sign(self.data))
        out._backward = bwd
        return out

    def square(self):
        return self * self

    def softmax_rows(self):
        """Row-wise softmax of a 2D tensor (or last axis of any rank)."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=-1, keepdims=True)
        out = Tensor(s, _prev=(self,))

        def bwd(g):
            if self.requires_grad:
                dot = (g * s).sum(axis=-1, keepdims=True)
                self._accum(s * (g - dot))
        out._backward = bwd
        return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


def concat(tensors, axis=0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _prev=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accum(p)
    out._backward = bwd
    return out


def stack(tensors, axis=0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), _prev=tuple(tensors))

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))
    out._backward = bwd
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each row of a 2D tensor to zero mean / unit variance, then affine."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"layer_norm expects 2D input, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data, _prev=(x, gamma, beta))

    def bwd(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            n = x.data.shape[-1]
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _ = n
            x._accum(dx)
    out._backward = bwd
    return out


def l1_loss(a: Tensor, b) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"l1_loss {a.shape} vs {b.shape}")
    return (a - b).abs().sum()


def l2_loss(a: Tensor, b) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"l2_loss {a.shape} vs {b.shape}")
    return (a - b).square().sum()


def sparse_matmul(mat, x: Tensor) -> Tensor:
    """Multiply a constant scipy sparse matrix with a 1D tensor.

    The matrix is data, not a differentiable input; backward applies its
    transpose, which makes the pair an exact adjoint by construction.
    """
    if mat.shape[1] != x.data.shape[0]:
        raise ShapeMismatch(f"sparse_matmul {mat.shape} @ {x.shape}")
    out = Tensor(mat @ x.data, _prev=(x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(mat.T @ g)
    out._backward = bwd
    return out


# -- convolution / pooling ------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, oh, ow),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, xshape, kh, kw, stride, pad):
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xpad = np.zeros((n, c, hp, wp))
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xpad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        return xpad[:, :, pad:-pad, pad:-pad]
    return xpad


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NCHW input, OIHW weight."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4D x and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.data.shape
    o, ci, kh, kw = weight.data.shape
    if ci != c:
        raise ShapeMismatch(f"conv2d channels: input {c}, weight expects {ci}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wf = weight.data.reshape(o, -1)
    y = np.einsum("ok,nkp->nop", wf, cols).reshape(n, o, oh, ow)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)
    prev = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor(y, _prev=prev)
    cols_saved = cols

    def bwd(g):
        gf = g.reshape(n, o, oh * ow)
        if weight.requires_grad:
            gw = np.einsum("nop,nkp->ok", gf, cols_saved).reshape(weight.data.shape)
            weight._accum(gw)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.einsum("ok,nop->nkp", wf, gf)
            x._accum(_col2im(gcols, x.data.shape, kh, kw, stride, padding))
    out._backward = bwd
    return out


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeMismatch(f"avg_pool2d: {h}x{w} not divisible by {k}")
    y = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    out = Tensor(y, _prev=(x,))

    def bwd(g):
        if x.requires_grad:
            gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            x._accum(gx)
    out._backward = bwd
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c)."""
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)), _prev=(x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())
    out._backward = bwd
    return out


# -- optimizer ------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction over a dict of named parameters."""

    def __init__(self, params: dict, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
            p._used = False


_ = _sparse  # scipy.sparse matrices arrive pre-built through sparse_matmul
