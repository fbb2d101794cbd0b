"""NumPy-backed tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a small graph node holding a
vector-Jacobian-product closure; ``Tensor.backward()`` walks the graph in
reverse topological order and accumulates gradients into leaf tensors.
"""
from __future__ import annotations

import struct

import numpy as np
from scipy.special import erf, expit

DEFAULT_DTYPE = np.float32

# plain floats: a numpy scalar would promote float32 arrays to float64
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


def make_rng(seed=None) -> np.random.Generator:
    """Normalize an int seed / Generator / None into a numpy Generator.

    A fixed seed always yields the same draw sequence (PCG64 stream).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (pure inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """Dense n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    # -- autograd ---------------------------------------------------------

    def backward(self):
        """Reverse-mode pass from a scalar; accumulates into leaf ``grad``.

        Repeated calls without clearing grads keep accumulating.
        """
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        topo = _toposort(self)
        flows = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in node._vjp(g):
                prev = flows.get(id(parent))
                flows[id(parent)] = pg if prev is None else prev + pg

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        def vjp(g):
            gz = np.zeros_like(self.data)
            gz[key] += g
            return [(self, gz)]

        return _node(self.data[key], (self,), vjp)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def vjp(g):
            return [(self, g.reshape(old))]

        return _node(self.data.reshape(shape), (self,), vjp)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(range(self.ndim))[::-1]
        inv = np.argsort(axes)

        def vjp(g):
            return [(self, g.transpose(inv))]

        return _node(self.data.transpose(axes), (self,), vjp)

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return [(self, np.broadcast_to(g, shape).copy())]

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def max(self, axis, keepdims=False):
        """Reduction max along one axis; ties route gradient to the first hit."""
        idx = np.argmax(self.data, axis=axis)
        out = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis)
        if not keepdims:
            out = out.squeeze(axis)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            gz = np.zeros_like(self.data)
            np.put_along_axis(gz, np.expand_dims(idx, axis), g, axis)
            return [(self, gz)]

        return _node(out, (self,), vjp)


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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


def _node(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._vjp = vjp
    return out


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to ``shape`` after forward broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic (broadcasting) --------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g, b.shape)))
        return out

    return _node(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(-g, b.shape)))
        return out

    return _node(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.data, b.shape)))
        return out

    return _node(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g / b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))
        return out

    return _node(a.data / b.data, (a, b), vjp)


def power(a: Tensor, p) -> Tensor:
    p = float(p)

    def vjp(g):
        return [(a, g * p * a.data ** (p - 1.0))]

    return _node(a.data ** p, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b`` with ``a`` of shape [..., m, k] and ``b`` [k, n]."""
    if b.ndim != 2:
        raise ShapeError(f"matmul expects a 2-d right operand, got {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, g @ b.data.T))
        if b.requires_grad:
            k = a.shape[-1]
            out.append((b, a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1])))
        return out

    return _node(a.data @ b.data, (a, b), vjp)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return [(t, piece) for t, piece in zip(tensors, pieces) if t.requires_grad]

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def take(t: Tensor, indices) -> Tensor:
    """Gather rows of ``t`` along axis 0; duplicate indices sum in the backward."""
    idx = np.asarray(indices)

    def vjp(g):
        gz = np.zeros_like(t.data)
        np.add.at(gz, idx, g)
        return [(t, gz)]

    return _node(t.data[idx], (t,), vjp)


# -- nonlinearities --------------------------------------------------------


def gelu(t: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return [(t, g * (cdf + x * pdf))]

    return _node(x * cdf, (t,), vjp)


def sigmoid(t: Tensor) -> Tensor:
    s = expit(t.data)

    def vjp(g):
        return [(t, g * s * (1.0 - s))]

    return _node(s, (t,), vjp)


def softplus(t: Tensor) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    x = t.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return [(t, g * expit(x))]

    return _node(out, (t,), vjp)


# -- spatial ops ------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias=None, stride=1, padding=0) -> Tensor:
    """2-d cross-correlation of [B,C,H,W] input with [O,C,kh,kw] weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape}/{weight.shape}")
    bsz, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {kh}x{kw}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    rtype = np.result_type(x.dtype, weight.dtype)

    def window(i, j):
        return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]

    acc = np.zeros((bsz, ho, wo, cout), dtype=rtype)
    for i in range(kh):
        for j in range(kw):
            # [B,C,ho,wo] x [O,C] summed over C -> [B,ho,wo,O]
            acc += np.tensordot(window(i, j), weight.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        out_grads = []
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    sl = (
                        slice(None),
                        slice(None),
                        slice(i, i + stride * (ho - 1) + 1, stride),
                        slice(j, j + stride * (wo - 1) + 1, stride),
                    )
                    gxp[sl] += np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            out_grads.append((x, gxp))
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.tensordot(g, window(i, j), axes=([0, 2, 3], [0, 2, 3]))
            out_grads.append((weight, gw))
        if bias is not None and bias.requires_grad:
            out_grads.append((bias, g.sum(axis=(0, 2, 3))))
        return out_grads

    return _node(out, parents, vjp)


def bilinear_upsample(x: Tensor, scale: int) -> Tensor:
    """Bilinear x``scale`` upsampling with half-pixel source centers."""
    scale = int(scale)
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    if scale == 1:
        return x
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects [B,C,H,W], got {x.shape}")
    bsz, ch, h, w = x.shape

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) / scale - 0.5
        lo = np.floor(src)
        frac = src - lo
        lo_c = np.clip(lo, 0, n_in - 1).astype(np.intp)
        hi_c = np.clip(lo + 1, 0, n_in - 1).astype(np.intp)
        return lo_c, hi_c, frac

    y0, y1, fy = axis_coords(h, h * scale)
    x0, x1, fx = axis_coords(w, w * scale)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]
    corners = [
        (y0, x0, (wy0 * wx0).astype(x.dtype)),
        (y0, x1, (wy0 * wx1).astype(x.dtype)),
        (y1, x0, (wy1 * wx0).astype(x.dtype)),
        (y1, x1, (wy1 * wx1).astype(x.dtype)),
    ]

    out = np.zeros((bsz, ch, h * scale, w * scale), dtype=x.dtype)
    for yy, xx, wgt in corners:
        out += x.data[:, :, yy[:, None], xx[None, :]] * wgt

    def vjp(g):
        gx = np.zeros_like(x.data)
        for yy, xx, wgt in corners:
            np.add.at(gx, (slice(None), slice(None), yy[:, None], xx[None, :]), g * wgt)
        return [(x, gx)]

    return _node(out, (x,), vjp)


def droppath(x: Tensor, rate: float, mode: str, rng=None) -> Tensor:
    """Stochastic depth: zero whole batch samples, rescaling the survivors."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"droppath rate must be in [0, 1], got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rate == 1.0:
        return mul(x, 0.0)
    if rng is None:
        raise ValueError("droppath in train mode with rate > 0 needs an rng")
    keep = (rng.random(x.shape[0]) >= rate).astype(x.data.dtype)
    mask = (keep / (1.0 - rate)).reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    return mul(x, Tensor(mask))


# -- binary dump format ------------------------------------------------------
# rank:u32le, dims:u32le each, then float32le values in row-major order.


def write_array(fp, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fp.write(struct.pack("<I", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(arr.tobytes(order="C"))


def read_array(fp) -> np.ndarray:
    head = fp.read(4)
    if len(head) != 4:
        raise EOFError("missing rank field")
    rank = struct.unpack("<I", head)[0]
    dims_raw = fp.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise EOFError("missing dims")
    dims = struct.unpack(f"<{rank}I", dims_raw)
    count = int(np.prod(dims)) if dims else 1
    payload = fp.read(4 * count)
    if len(payload) != 4 * count:
        raise EOFError("missing values")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
