"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every value is a plain C-contiguous ``numpy.ndarray`` of float64; ``Var``
wraps one array together with the tape bookkeeping needed to pull gradients
back from a scalar loss.  Tapes are rebuilt per optimization step, are
confined to a single thread, and support exactly the primitives needed by
the degradation operators, the MMD loss and the small detector networks:
broadcasting arithmetic, exp/log, reductions, slicing, (batched) matmul,
reflective padding, 2-D cross-correlation.

Ops are polymorphic: they accept ``Var``, ndarray or python scalars, lift
non-``Var`` operands as constants, and return a ``Var`` when any operand is
a ``Var`` (otherwise a plain ndarray).  Gradient closures are attached only
along paths that lead back to a ``param(...)`` leaf, so constant-only
computations carry no tape overhead.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Var", "var", "param", "val", "backward", "elementwise",
    "add", "sub", "mul", "div", "pow_", "neg", "exp", "log", "log1p",
    "sqrt", "abs_", "relu", "clip", "sum_", "mean_", "reshape", "getitem",
    "stack", "matmul", "pad_reflect", "fftshift2", "conv2d",
    "softmax_cross_entropy", "check_finite",
    "write_tensor", "read_tensor",
]


def as_array(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 ndarray (0-d stays 0-d)."""
    a = np.asarray(x, dtype=np.float64, order="C")
    return a if a.flags["C_CONTIGUOUS"] else np.ascontiguousarray(a)


class Var:
    """A node of the differentiation tape.

    Attributes:
        value: the forward value (float64 ndarray).
        grad: accumulated gradient, same shape as ``value``; ``None`` until
            ``backward`` reaches this node.
        parents: tuple of ``(Var, pull)`` pairs where ``pull(g)`` maps the
            output gradient to this parent's gradient contribution.
        requires: whether any optimizable leaf is reachable from this node.
    """

    __slots__ = ("value", "grad", "parents", "requires")

    def __init__(self, value, parents=(), requires=False):
        self.value = as_array(value)
        self.grad = None
        self.parents = parents
        self.requires = requires

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires={self.requires})"

    # arithmetic sugar; mixed operands are lifted as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return pow_(self, c)

    def __getitem__(self, idx):
        return getitem(self, idx)


def var(x) -> Var:
    """Constant leaf (no gradient is requested for it)."""
    return x if isinstance(x, Var) else Var(x)


def param(x) -> Var:
    """Optimizable leaf: gradients accumulate here during backward."""
    return Var(x, requires=True)


def val(x) -> np.ndarray:
    """Underlying ndarray of a Var, or the coerced array itself."""
    return x.value if isinstance(x, Var) else as_array(x)


def check_finite(x, what: str = "tensor"):
    """Raise if any element is NaN/Inf; returns the input unchanged."""
    v = val(x)
    if not np.isfinite(v).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(value, pulls) -> Var:
    """Build an op output; ``pulls`` is [(operand, pull_fn), ...]."""
    parents = tuple((p, fn) for p, fn in pulls
                    if isinstance(p, Var) and p.requires)
    if parents:
        return Var(value, parents=parents, requires=True)
    return value  # constant path: stay out of the tape entirely


def _binary(a, b, forward, pull_a, pull_b):
    av, bv = val(a), val(b)
    out = forward(av, bv)
    if not (isinstance(a, Var) and a.requires) and \
       not (isinstance(b, Var) and b.requires):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _make(out, [
        (a, lambda g: _unbroadcast(pull_a(g, av, bv, out), sa)),
        (b, lambda g: _unbroadcast(pull_b(g, av, bv, out), sb)),
    ])


def add(a, b):
    return _binary(a, b, np.add,
                   lambda g, av, bv, o: g,
                   lambda g, av, bv, o: g)


def sub(a, b):
    return _binary(a, b, np.subtract,
                   lambda g, av, bv, o: g,
                   lambda g, av, bv, o: -g)


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda g, av, bv, o: g * bv,
                   lambda g, av, bv, o: g * av)


def div(a, b):
    if np.any(val(b) == 0.0):
        raise ZeroDivisionError("division by zero tensor element")
    return _binary(a, b, np.divide,
                   lambda g, av, bv, o: g / bv,
                   lambda g, av, bv, o: -g * av / (bv * bv))


def pow_(a, b):
    """Elementwise power.  Gradient w.r.t. the exponent needs base > 0."""
    av, bv = val(a), val(b)
    exponent_needs_grad = isinstance(b, Var) and b.requires
    if exponent_needs_grad and np.any(av <= 0):
        raise ValueError("pow: exponent gradient requires positive base")
    return _binary(a, b, np.power,
                   lambda g, x, y, o: g * y * np.power(x, y - 1.0),
                   lambda g, x, y, o: g * o * np.log(x))


def neg(a):
    av = val(a)
    return _make(-av, [(a, lambda g: -g)])


def exp(a):
    out = np.exp(val(a))
    return _make(out, [(a, lambda g, o=out: g * o)])


def log(a):
    av = val(a)
    if np.any(av <= 0.0):
        raise ValueError("log of non-positive tensor element")
    return _make(np.log(av), [(a, lambda g, x=av: g / x)])


def log1p(a):
    av = val(a)
    if np.any(av <= -1.0):
        raise ValueError("log1p of element <= -1")
    return _make(np.log1p(av), [(a, lambda g, x=av: g / (1.0 + x))])


def sqrt(a):
    av = val(a)
    if np.any(av < 0.0):
        raise ValueError("sqrt of negative tensor element")
    out = np.sqrt(av)
    return _make(out, [(a, lambda g, o=out: g / (2.0 * o))])


def abs_(a):
    av = val(a)
    return _make(np.abs(av), [(a, lambda g, x=av: g * np.sign(x))])


def relu(a):
    av = val(a)
    mask = av > 0.0
    return _make(av * mask, [(a, lambda g, m=mask: g * m)])


def clip(a, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient passes where unclamped, zero elsewhere."""
    av = val(a)
    mask = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), [(a, lambda g, m=mask: g * m)])


def sum_(a, axis=None, keepdims=False):
    av = val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def pull(g, shape=av.shape, ax=axis, kd=keepdims):
        g = np.asarray(g)
        if ax is not None and not kd:
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g, shape)

    return _make(out, [(a, pull)])


def mean_(a, axis=None, keepdims=False):
    av = val(a)
    n = av.size if axis is None else np.prod(
        [av.shape[i] for i in np.atleast_1d(axis)])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    av = val(a)
    return _make(av.reshape(shape),
                 [(a, lambda g, s=av.shape: np.asarray(g).reshape(s))])


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(e, (int, np.integer, slice))
               or e is None or e is Ellipsis for e in parts)


def getitem(a, idx):
    """Basic/advanced indexing; backward scatter-adds into the source."""
    av = val(a)
    out = av[idx]
    basic = _is_basic_index(idx)

    def pull(g, s=av.shape, i=idx):
        gx = np.zeros(s, dtype=np.float64)
        if basic:
            gx[i] += g          # basic indexing never repeats an element
        else:
            np.add.at(gx, i, g)
        return gx

    return _make(np.ascontiguousarray(out), [(a, pull)])


def stack(parts, axis=0):
    vals = [val(p) for p in parts]
    out = np.stack(vals, axis=axis)
    pulls = []
    for k, p in enumerate(parts):
        pulls.append((p, lambda g, kk=k, ax=axis: np.take(g, kk, axis=ax)))
    return _make(out, pulls)


def matmul(a, b):
    """Matrix product with numpy's leading-dimension broadcasting."""
    av, bv = val(a), val(b)
    out = np.matmul(av, bv)

    def pull_a(g, x=av, y=bv):
        return _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)

    def pull_b(g, x=av, y=bv):
        return _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)

    return _make(out, [(a, pull_a), (b, pull_b)])


_REFLECT_INDEX_CACHE: dict = {}


def _reflect_index(shape, width, axes):
    key = (shape, width, axes)
    hit = _REFLECT_INDEX_CACHE.get(key)
    if hit is None:
        flat = np.arange(int(np.prod(shape)), dtype=np.intp).reshape(shape)
        pad = [(width, width) if i in axes else (0, 0)
               for i in range(len(shape))]
        hit = np.pad(flat, pad, mode="reflect")
        _REFLECT_INDEX_CACHE[key] = hit
    return hit


def pad_reflect(a, width: int, axes=(0, 1)):
    """Reflective (mirror, no edge repeat) padding along the given axes."""
    av = val(a)
    for ax in axes:
        if av.shape[ax] < width + 1:
            raise ValueError("pad_reflect: axis too short for reflect width")
    idx = _reflect_index(av.shape, width, tuple(axes))
    out = av.reshape(-1)[idx]

    def pull(g, i=idx, s=av.shape):
        gx = np.bincount(i.reshape(-1),
                         weights=np.asarray(g, dtype=np.float64).reshape(-1),
                         minlength=int(np.prod(s)))
        return gx.reshape(s)

    return _make(out, [(a, pull)])


def fftshift2(a):
    """fftshift over the last two axes (a fixed permutation)."""
    av = val(a)
    out = np.fft.fftshift(av, axes=(-2, -1))
    return _make(out, [(a, lambda g: np.fft.ifftshift(g, axes=(-2, -1)))])


def conv2d(a, kernels, stride: int = 1, pad: int = 0):
    """2-D cross-correlation of an [H,W,C] or [B,H,W,C] input.

    ``kernels`` has shape [kh, kw, C, F] with odd kh, kw; ``pad`` zero-pads
    both spatial borders.  Gradients flow to both the input and the kernels.
    """
    av, kv = val(a), val(kernels)
    squeeze = av.ndim == 3
    x = av[None] if squeeze else av
    if x.ndim != 4 or kv.ndim != 4:
        raise ValueError("conv2d expects [.,H,W,C] input and [kh,kw,C,F] kernels")
    kh, kw, cin, cout = kv.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel spatial dims must be odd")
    if x.shape[3] != cin:
        raise ValueError("conv2d channel mismatch")
    if pad < 0 or stride < 1:
        raise ValueError("conv2d needs pad >= 0 and stride >= 1")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    hp, wp = xp.shape[1], xp.shape[2]
    if kh > hp or kw > wp:
        raise ValueError("conv2d kernel larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                 # [B,OH,OW,C,kh,kw]
    b, oh, ow = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    cols = cols.reshape(b, oh, ow, kh * kw * cin)
    w2 = kv.reshape(kh * kw * cin, cout)
    out = np.matmul(cols, w2)
    if squeeze:
        out = out[0]

    def pull_x(g, shape_p=xp.shape, in_shape=av.shape):
        g4 = np.asarray(g)
        if squeeze:
            g4 = g4[None]
        gcols = np.matmul(g4, w2.T).reshape(b, oh, ow, kh, kw, cin)
        gxp = np.zeros(shape_p, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + oh * stride:stride,
                    j:j + ow * stride:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pad:hp - pad, pad:wp - pad, :] if pad else gxp
        return gx[0] if squeeze else gx

    def pull_k(g):
        g4 = np.asarray(g)
        if squeeze:
            g4 = g4[None]
        gw = cols.reshape(-1, kh * kw * cin).T @ g4.reshape(-1, cout)
        return gw.reshape(kh, kw, cin, cout)

    return _make(out, [(a, pull_x), (kernels, pull_k)])


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of [B,K] logits against int labels."""
    lv = val(logits)
    labels = np.asarray(labels, dtype=np.intp)
    b = lv.shape[0]
    shift = lv.max(axis=1, keepdims=True)           # constant for stability
    z = sub(logits, shift)
    lse = log(sum_(exp(z), axis=1))
    picked = getitem(z, (np.arange(b), labels))
    return mean_(sub(lse, picked))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div,
                "exp": exp, "log": log, "pow": pow_}


def elementwise(op_id: str, a, b=None):
    """Dispatch a broadcasting elementwise op by name.

    ``op_id`` is one of add/sub/mul/div/exp/log/pow; exp and log are unary.
    """
    try:
        fn = _ELEMENTWISE[op_id]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_id!r}") from None
    if op_id in ("exp", "log"):
        if b is not None:
            raise ValueError(f"{op_id} is unary")
        return fn(a)
    if b is None:
        raise ValueError(f"{op_id} needs two operands")
    np.broadcast_shapes(np.shape(val(a)), np.shape(val(b)))  # early error
    return fn(a, b)


def backward(root: Var) -> dict:
    """Reverse sweep from a scalar root.

    Returns a map from each reachable optimizable leaf to its gradient and
    also stores gradients on every visited node's ``grad`` attribute.
    """
    if not isinstance(root, Var):
        raise TypeError("backward expects a Var root")
    if root.value.shape != ():
        raise ValueError("backward root must be a scalar (shape ())")
    order = []
    seen = {id(root)}
    stage = [(root, iter(root.parents))]
    while stage:                                   # iterative DFS topo sort
        node, it = stage[-1]
        nxt = next((p for p, _ in it if id(p) not in seen), None)
        if nxt is None:
            order.append(node)
            stage.pop()
        else:
            seen.add(id(nxt))
            stage.append((nxt, iter(nxt.parents)))
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node is not root and node.grad is None:
            continue
        g = node.grad
        for parent, pull in node.parents:
            contrib = np.asarray(pull(g), dtype=np.float64)
            if parent.grad is None:
                parent.grad = contrib.copy() if contrib.base is not None \
                    else contrib
            else:
                parent.grad = parent.grad + contrib
    return {n: n.grad for n in order if n.requires and not n.parents}


# ---------------------------------------------------------------------------
# Binary tensor file: magic "STNS", u32 version, u32 rank, u64 dims,
# little-endian float64 payload.  Used for detector checkpoints and
# feature dumps.

_STNS_MAGIC = b"STNS"
_STNS_VERSION = 1


def write_tensor(path, arr) -> None:
    a = as_array(arr)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", _STNS_MAGIC, _STNS_VERSION, a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(a.astype("<f8").tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) != 12:
            raise ValueError(f"{path}: truncated tensor header")
        magic, version, rank = struct.unpack("<4sII", head)
        if magic != _STNS_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != _STNS_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = f.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError(f"{path}: truncated tensor payload")
        return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
