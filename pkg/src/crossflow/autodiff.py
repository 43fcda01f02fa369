"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: only the primitives the forecasting model needs. Values
are contiguous numpy float64 arrays; every differentiable op records a
backward closure, and gradients accumulate additively into ``Tensor.grad``
during a reverse topological sweep. There is no broadcasting in ``matmul``
(shape errors stay loud); elementwise ops follow numpy broadcasting with the
gradient reduced back onto each operand's shape.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

Array = np.ndarray


class Tensor:
    """One node of the computation graph: a value plus gradient plumbing.

    ``grad`` stays ``None`` until the first accumulation; repeated
    ``backward`` calls without a reset keep adding into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op!r}{flag})"

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back onto the original operand shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def neg(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        a._accum(-g)

    return _make(-a.data, (a,), bw, "neg")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def relu(a) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""
    a = _wrap(a)
    pos = a.data > 0

    def bw(g):
        a._accum(g * pos)

    return _make(np.where(pos, a.data, 0.0), (a,), bw, "relu")


def absval(a) -> Tensor:
    """Elementwise |x| with subgradient 0 at x == 0."""
    a = _wrap(a)
    s = np.sign(a.data)

    def bw(g):
        a._accum(g * s)

    return _make(np.abs(a.data), (a,), bw, "abs")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        a._accum(g * y * (1.0 - y))

    return _make(y, (a,), bw, "sigmoid")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape

    def bw(g):
        a._accum(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a._accum(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, offsets, axis=axis)):
            p._accum(piece)

    return _make(np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), bw, "concat")


def index(a, idx) -> Tensor:
    """Basic indexing (ints/slices); gradient scatters back with add.at."""
    a = _wrap(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(a.data[idx], (a,), bw, "index")


def gather_rows(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradient scatter-adds into the table.

    Rows never referenced receive no gradient, so unused embedding rows
    stay untouched by an optimizer step.
    """
    table = _wrap(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows expects 1-D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(
            f"gather_rows index out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accum(full)

    return _make(table.data[idx], (table,), bw, "gather_rows")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Strict 2-D matrix product; no implicit broadcasting or promotion."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}")

    def bw(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def bmm(a, b) -> Tensor:
    """Batched matrix product over matching leading batch axes (3-D)."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError(f"bmm needs 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        a._accum(g @ b.data.transpose(0, 2, 1))
        b._accum(a.data.transpose(0, 2, 1) @ g)

    return _make(a.data @ b.data, (a, b), bw, "bmm")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, shape).copy() if np.ndim(g) else np.full(shape, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def softmax_rows(a) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    a = _wrap(a)
    x = a.data
    y = np.exp(x - x.max(axis=-1, keepdims=True))
    y /= y.sum(axis=-1, keepdims=True)

    def bw(g):
        a._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (a,), bw, "softmax_rows")


def masked_softmax_rows(a, mask: Array) -> Tensor:
    """Softmax over the last axis where ``mask`` is 1; masked cells get weight
    exactly 0 and fully-masked rows come back as all-zero rows."""
    a = _wrap(a)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64) > 0, a.shape)
    x = np.where(m, a.data, -np.inf)
    rowmax = x.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    y = np.where(m, np.exp(x - rowmax), 0.0)
    denom = y.sum(axis=-1, keepdims=True)
    y = y / np.where(denom > 0, denom, 1.0)

    def bw(g):
        a._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (a,), bw, "masked_softmax_rows")


def rms_norm(a, gain, eps: float = 1e-8) -> Tensor:
    """Divide each last-axis row by its root mean square, then scale by gain.

    ``out = x / sqrt(mean(x^2) + eps) * gain``; eps keeps all-zero rows at
    exactly zero instead of dividing by zero.
    """
    if eps <= 0:
        raise ContractError(f"rms_norm eps must be positive, got {eps}")
    a, gain = _wrap(a), _wrap(gain)
    if gain.data.ndim != 1 or gain.shape[0] != a.shape[-1]:
        raise DimensionError(
            f"rms_norm gain shape {gain.shape} does not match last axis of {a.shape}")
    x = a.data
    n = x.shape[-1]
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    u = x / r

    def bw(g):
        gg = g * gain.data
        a._accum(gg / r - x * ((gg * x).sum(axis=-1, keepdims=True) / (n * r ** 3)))
        gain._accum((g * u).reshape(-1, n).sum(axis=0))

    return _make(u * gain.data, (a, gain), bw, "rms_norm")


def layer_norm(a, gain, bias, eps: float = 1e-8) -> Tensor:
    """Standard mean/variance layer normalization over the last axis."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    s = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / s

    def bw(g):
        gain._accum((g * xhat).reshape(-1, n).sum(axis=0))
        bias._accum(g.reshape(-1, n).sum(axis=0))
        gh = g * gain.data
        a._accum((gh - gh.mean(axis=-1, keepdims=True)
                  - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) / s)

    return _make(xhat * gain.data + bias.data, (a, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(a, kernels, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    ``a`` is (C_in, H, W) or batched (B, C_in, H, W); ``kernels`` is
    (C_out, C_in, kh, kw) with odd kh, kw. With a 3x3 kernel and padding 1
    the spatial size is preserved.
    """
    a, kernels = _wrap(a), _wrap(kernels)
    if padding < 0:
        raise ContractError(f"conv2d padding must be >= 0, got {padding}")
    squeeze = a.data.ndim == 3
    x = a.data[None] if squeeze else a.data
    k = kernels.data
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(
            f"conv2d expects (B,C,H,W) input and (O,C,kh,kw) kernels, "
            f"got {a.shape} and {kernels.shape}")
    B, cin, H, W = x.shape
    cout, cink, kh, kw = k.shape
    if cink != cin:
        raise DimensionError(
            f"conv2d channel mismatch: input {cin} vs kernels {cink}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input "
            f"{H + 2 * padding}x{W + 2 * padding}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("bcijuv,ocuv->boij", win, k, optimize=True)
    Ho, Wo = out.shape[2], out.shape[3]

    def bw(g):
        g4 = g[None] if squeeze else g
        kernels._accum(np.einsum("bcijuv,boij->ocuv", win, g4, optimize=True))
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + Ho, v:v + Wo] += np.einsum(
                    "boij,oc->bcij", g4, k[:, :, u, v], optimize=True)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        a._accum(gxp[0] if squeeze else gxp)

    return _make(out[0] if squeeze else out, (a, kernels), bw, "conv2d")


# ---------------------------------------------------------------------------
# temporal helpers
# ---------------------------------------------------------------------------

def lagged_mean(a, tau: int, axis: int = 0) -> Tensor:
    """Mean of the previous ``tau`` steps along ``axis`` at each position.

    Position t averages steps max(0, t-tau)..t-1; an empty window (t == 0,
    or tau == 0 everywhere) yields zeros. Linear, so the backward pass is
    the transposed averaging.
    """
    if tau < 0:
        raise ContractError(f"lagged_mean tau must be >= 0, got {tau}")
    a = _wrap(a)
    x = np.moveaxis(a.data, axis, 0)
    T = x.shape[0]
    out = np.zeros_like(x)
    for t in range(T):
        lo = max(0, t - tau)
        if lo < t:
            out[t] = x[lo:t].mean(axis=0)

    def bw(g):
        gm = np.moveaxis(g, axis, 0)
        gx = np.zeros_like(x)
        for t in range(T):
            lo = max(0, t - tau)
            if lo < t:
                gx[lo:t] += gm[t] / (t - lo)
        a._accum(np.moveaxis(gx, 0, axis))

    return _make(np.moveaxis(out, 0, axis), (a,), bw, "lagged_mean")


# ---------------------------------------------------------------------------
# reverse sweep and the finite-difference oracle
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root; grads accumulate into leaves.

    Calling again without zeroing grads adds on top of what is there.
    """
    if root.size != 1:
        raise ContractError(
            f"backward needs a scalar root, got shape {root.shape}")
    order = _toposort(root)
    root._accum(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def find_first_nonfinite(root: Tensor) -> str | None:
    """Scan the graph in forward order; describe the first non-finite tensor."""
    for node in _toposort(root):
        if not np.isfinite(node.data).all():
            return f"op={node.op!r} shape={node.shape}"
    return None


def finite_diff_grad(f, x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function of one array.

    The oracle against which every analytic gradient in this package is
    checked; it never calls ``backward``.
    """
    if h <= 0:
        raise ContractError(f"finite_diff_grad step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
