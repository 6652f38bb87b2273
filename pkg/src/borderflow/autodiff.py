"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and records the operation that produced it;
`Tensor.backward()` walks the graph in reverse topological order and
accumulates partial derivatives into `.grad`. Accumulation is additive, so
several losses may contribute gradients to one parameter before an
optimizer step consumes them.

The primitive set is fixed: affine (matmul / conv2d / bilinear upsampling),
elementwise add / multiply / divide, exp, log, tanh, sigmoid, ELU, ReLU,
softmax via log-sum-exp, sum / mean reductions, slicing, masking, gather,
patch overlay and concatenation. Everything else must be composed from
these.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An array node in the reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar output into every reachable `.grad`."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar output, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                # free intermediate gradients/graph as we go is not done here;
                # graphs are per-iteration and small enough to release wholesale

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Create an op result, recording the graph only when it can matter."""
    record = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=record)
    if record:
        out._parents = parents
        out._backward = backward
    return out


# -- elementwise ops -------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out_data = a.data + b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    if np.any(b.data == 0):
        raise ValueError("division by zero operand")
    out_data = a.data / b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def neg(a: Tensor) -> Tensor:
    def backward():
        if a.requires_grad:
            a._accumulate(-out.grad)

    out = _make(-a.data, (a,), backward)
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    if not isinstance(exponent, (int, float)):
        raise TypeError("exponent must be a plain number")
    out_data = a.data ** exponent

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * exponent * a.data ** (exponent - 1))

    out = _make(out_data, (a,), backward)
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out.data)

    out = _make(out_data, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive operand")
    out_data = np.log(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    out = _make(out_data, (a,), backward)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - out.data * out.data))

    out = _make(out_data, (a,), backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    # stable two-sided form
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out.data * (1.0 - out.data))

    out = _make(out_data, (a,), backward)
    return out


def elu(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x > 0, x, np.exp(np.minimum(x, 0.0)) - 1.0).astype(x.dtype, copy=False)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * np.where(x > 0, 1.0, out.data + 1.0).astype(x.dtype, copy=False))

    out = _make(out_data, (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0).astype(a.dtype))

    out = _make(out_data, (a,), backward)
    return out


# -- reductions ------------------------------------------------------------

def _expand_reduced(grad, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(grad.reshape((1,) * len(in_shape)), in_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(in_shape) for a in axes)
    if not keepdims:
        shape = list(grad.shape)
        for a in sorted(axes):
            shape.insert(a, 1)
        grad = grad.reshape(shape)
    return np.broadcast_to(grad, in_shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        if a.requires_grad:
            a._accumulate(_expand_reduced(out.grad, a.data.shape, axis, keepdims).copy())

    out = _make(np.asarray(out_data), (a,), backward)
    return out


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // np.asarray(out_data).size

    def backward():
        if a.requires_grad:
            a._accumulate(_expand_reduced(out.grad, a.data.shape, axis, keepdims) / count)

    out = _make(np.asarray(out_data), (a,), backward)
    return out


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Numerically stable log(sum(exp(x))) along one axis.

    The backward pass is the softmax of the inputs, which makes
    softmax-through-log-sum-exp exact and shift-invariant.
    """
    m = np.max(a.data, axis=axis, keepdims=True)
    out_keep = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)

    def backward():
        if a.requires_grad:
            soft = np.exp(a.data - out_keep)
            g = out.grad if keepdims else np.expand_dims(out.grad, axis)
            a._accumulate(g * soft)

    out = _make(out_data, (a,), backward)
    return out


# -- structural ops --------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.data.shape))

    out = _make(a.data.reshape(shape), (a,), backward)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.transpose(inverse))

    out = _make(a.data.transpose(axes), (a,), backward)
    return out


def slice_(a: Tensor, key) -> Tensor:
    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[key] += out.grad
            a._accumulate(g)

    out = _make(a.data[key].copy(), (a,), backward)
    return out


def concat(tensors: list, axis: int = 0) -> Tensor:
    parts = [t if isinstance(t, Tensor) else Tensor(np.asarray(t)) for t in tensors]
    out_data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.data.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out_data.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(idx)])

    out = _make(out_data, tuple(parts), backward)
    return out


def gather_class(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick one entry along axis 1 per position: [N,C,...] with index [N,...]."""
    idx = np.expand_dims(index, 1)
    out_data = np.take_along_axis(a.data, idx, axis=1).squeeze(1)

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            # one target entry per position, so a plain scatter is exact
            np.put_along_axis(g, idx, np.expand_dims(out.grad, 1), axis=1)
            a._accumulate(g)

    out = _make(out_data, (a,), backward)
    return out


def overlay(base: np.ndarray, patch: Tensor, tops, lefts) -> Tensor:
    """Copy `base` and write each patch at its per-sample offset; gradients
    flow into the patches only.

    `base` is treated as a constant, which matches pasting generated content
    into training data.
    """
    n, c, h, w = patch.data.shape
    tops = np.broadcast_to(np.asarray(tops, dtype=np.int64), (n,))
    lefts = np.broadcast_to(np.asarray(lefts, dtype=np.int64), (n,))
    if base.shape[0] != n or base.shape[1] != c:
        raise ValueError("batch/channel mismatch between base and patch")
    if np.any(tops < 0) or np.any(lefts < 0) or np.any(tops + h > base.shape[2]) or np.any(lefts + w > base.shape[3]):
        raise ValueError("patch does not fit inside the base array")
    out_data = base.copy()
    for i in range(n):
        out_data[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w] = patch.data[i]

    def backward():
        if patch.requires_grad:
            g = np.empty_like(patch.data)
            for i in range(n):
                g[i] = out.grad[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
            patch._accumulate(g)

    out = _make(out_data, (patch,), backward)
    return out


# -- affine ops ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out = _make(out_data, (a, b), backward)
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(dcols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp_shape[:2]
    d = dcols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros(xp_shape, dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, zero padding."""
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d geometry mismatch: input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out_data = np.matmul(w2[None], cols).reshape(n, cout, oh, ow)
    if b is not None:
        out_data += b.data.reshape(1, cout, 1, 1)

    def backward():
        g2 = out.grad.reshape(n, cout, oh * ow)
        if b is not None and b.requires_grad:
            b._accumulate(out.grad.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            dw2 = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            w._accumulate(dw2.reshape(w.data.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T[None], g2)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, oh, ow)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    parents = (x, w) if b is None else (x, w, b)
    out = _make(out_data, parents, backward)
    return out


_interp_cache: dict[tuple, np.ndarray] = {}


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    key = (n_in, factor, np.dtype(dtype).str)
    cached = _interp_cache.get(key)
    if cached is not None:
        return cached
    n_out = n_in * factor
    r = np.zeros((n_out, n_in), dtype)
    for o in range(n_out):
        src = min(max((o + 0.5) / factor - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        r[o, i0] += 1.0 - frac
        r[o, i1] += frac
    _interp_cache[key] = r
    return r


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor, expressed as two linear maps."""
    n, c, h, w = x.data.shape
    rh = _interp_matrix(h, factor, x.data.dtype)
    rw = _interp_matrix(w, factor, x.data.dtype)
    flat = x.data.reshape(n * c, h, w)
    out_data = np.matmul(np.matmul(rh[None], flat), rw.T[None]).reshape(n, c, h * factor, w * factor)

    def backward():
        if x.requires_grad:
            g = out.grad.reshape(n * c, h * factor, w * factor)
            dx = np.matmul(np.matmul(rh.T[None], g), rw[None]).reshape(n, c, h, w)
            x._accumulate(dx)

    out = _make(out_data, (x,), backward)
    return out


# -- parameters ------------------------------------------------------------

class ParameterSet:
    """Named trainable arrays with always-present gradient accumulators.

    Identifiers are unique and keep their insertion order, which fixes the
    layout of checkpoints and optimizer state.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter identifier {name!r}")
        t = Tensor(np.array(value), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad[...] = 0

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r} in state")
            value = arrays[name]
            if tuple(value.shape) != tuple(t.data.shape):
                raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs {t.data.shape}")
            t.data = np.array(value, dtype=t.data.dtype)
            t.grad = np.zeros_like(t.data)


def evaluate_with_gradients(program, params: ParameterSet, *inputs, zero_grad: bool = True) -> float:
    """Run `program(params, *inputs)` to a scalar and backpropagate.

    Gradients are written into the parameter accumulators. With
    `zero_grad=False` they add onto whatever is already accumulated, which
    is how several losses can feed one optimizer step.
    """
    if zero_grad:
        params.zero_grad()
    args = [x if isinstance(x, Tensor) else Tensor(np.asarray(x)) for x in inputs]
    out = program(params, *args)
    if not isinstance(out, Tensor):
        raise TypeError("program must return a Tensor")
    if out.data.size != 1:
        raise ValueError(f"program output must be scalar, got shape {out.data.shape}")
    out.backward()
    return float(out.data)
