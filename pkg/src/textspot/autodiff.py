"""Reverse-mode automatic differentiation over numpy arrays.

Every operation records its inputs and a vector-Jacobian closure on a tape;
``backward`` replays the tape in reverse topological order and accumulates
gradients into ``.grad``. Arrays are float32 or float64 throughout: float64
for gradient verification, float32 for training. Integer payloads (index
arrays, boolean masks) ride along as plain numpy arrays inside op attributes
and never become tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Fill value for masked attention logits. Large enough that softmax weight
# underflows to exactly zero against any in-range logit.
MASK_FILL = -1e9

# Divisors smaller than this are rejected rather than silently amplified.
DIV_FLOOR = 1e-12

_FLOAT_DTYPES = (np.float32, np.float64)


class GraphError(RuntimeError):
    """Raised when backward is asked for something the tape never recorded."""


class Tensor:
    """A numpy array plus the graph edges needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """A graph-free view of the same values."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        backward(self, seed)

    def __repr__(self):
        tag = self._op or ("param" if isinstance(self, Parameter) else "leaf")
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={tag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Parameter(Tensor):
    """A named leaf tensor that optimizers and checkpoints can enumerate."""

    __slots__ = ("name",)

    def __init__(self, name, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def _wrap(value, like):
    """Lift python scalars and ndarrays into constant tensors of a matching dtype."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype if isinstance(like, Tensor) else None))


def _record(out_data, parents, vjp, op):
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops --------------------------------------------------------


def add(a, b):
    a = _wrap(a, b)
    b = _wrap(b, a)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a = _wrap(a, b)
    b = _wrap(b, a)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a = _wrap(a, b)
    b = _wrap(b, a)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a = _wrap(a, b)
    b = _wrap(b, a)
    smallest = float(np.min(np.abs(b.data))) if b.data.size else np.inf
    if smallest < DIV_FLOOR:
        raise ValueError(
            f"div: denominator magnitude {smallest:.3e} is below the {DIV_FLOOR:.0e} floor"
        )
    out_data = a.data / b.data
    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out_data / b.data, b.shape)
        return ga, gb
    return _record(out_data, (a, b), vjp, "div")


def pow_scalar(a, exponent):
    """Elementwise a**p for a constant real exponent."""
    a = _wrap(a, None)
    p = float(exponent)
    out_data = a.data ** p
    def vjp(g):
        if p == 0.0:
            return (np.zeros_like(a.data),)
        return (g * p * a.data ** (p - 1.0),)
    return _record(out_data, (a,), vjp, "pow")


def exp(a):
    a = _wrap(a, None)
    out_data = np.exp(a.data)
    return _record(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a):
    a = _wrap(a, None)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    a = _wrap(a, None)
    out_data = _sigmoid_stable(a.data)
    return _record(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),), "sigmoid")


def _sigmoid_stable(x):
    # exp only ever sees non-positive arguments, so it cannot overflow
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def relu(a):
    a = _wrap(a, None)
    keep = a.data > 0
    return _record(np.where(keep, a.data, 0.0), (a,), lambda g: (np.where(keep, g, 0.0),), "relu")


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient is zero outside the open interval."""
    a = _wrap(a, None)
    inside = (a.data > lo) & (a.data < hi)
    return _record(
        np.clip(a.data, lo, hi),
        (a,),
        lambda g: (np.where(inside, g, 0.0),),
        "clip",
    )


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape):
    a = _wrap(a, None)
    old_shape = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old_shape),), "reshape")


def transpose(a, axes):
    a = _wrap(a, None)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def concat(tensors, axis):
    tensors = [_wrap(t, None) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(
        out_data,
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def getitem(a, key):
    """Basic or advanced indexing; scatter-adds the gradient back."""
    a = _wrap(a, None)
    out_data = a.data[key]
    advanced = _has_advanced_index(key)
    def vjp(g):
        ga = np.zeros_like(a.data)
        if advanced:
            np.add.at(ga, key, g)
        else:
            ga[key] += g
        return (ga,)
    return _record(np.array(out_data, copy=True), (a,), vjp, "getitem")


def _has_advanced_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def embedding(table, indices):
    """Row lookup ``table[indices]`` with scatter-add backward."""
    table = _wrap(table, None)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"embedding: indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding: index range [{idx.min()}, {idx.max()}] outside table of {table.shape[0]} rows"
        )
    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)
    return _record(table.data[idx], (table,), vjp, "embedding")


def masked_fill(a, mask, value=MASK_FILL):
    """Replace entries where ``mask`` is True by ``value`` (a constant)."""
    a = _wrap(a, None)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _record(
        np.where(mask, np.asarray(value, dtype=a.dtype), a.data),
        (a,),
        lambda g: (np.where(mask, 0.0, g),),
        "masked_fill",
    )


# -- reductions --------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a, None)
    shape = a.shape
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    return _record(
        np.asarray(out_data, dtype=a.dtype),
        (a,),
        lambda g: (_expand_reduced(np.asarray(g), shape, axis, keepdims).astype(a.dtype, copy=False),),
        "sum",
    )


def mean_(a, axis=None, keepdims=False):
    a = _wrap(a, None)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    return _record(
        np.asarray(out_data, dtype=a.dtype),
        (a,),
        lambda g: (
            _expand_reduced(np.asarray(g), shape, axis, keepdims).astype(a.dtype, copy=False) / count,
        ),
        "mean",
    )


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with broadcasting over leading dims."""
    a = _wrap(a, b)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)
    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _record(out_data, (a, b), vjp, "matmul")


def softmax(a, axis):
    """Numerically stable softmax along one axis; the max shift is constant."""
    a = _wrap(a, None)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - dot) * out_data,)
    return _record(out_data, (a,), vjp, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    Composed from primitive ops so the backward pass comes for free.
    """
    mu = mean_(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean_(mul(centered, centered), axis=-1, keepdims=True)
    inv_std = pow_scalar(add(var, eps), -0.5)
    return add(mul(mul(centered, inv_std), gain), bias)


# -- spatial ops --------------------------------------------------------------

_CONV_INDEX_CACHE = {}


def _conv_indices(hp, wp, kh, kw, stride):
    """Gather indices mapping padded-image pixels to im2col rows, cached by shape."""
    key = (hp, wp, kh, kw, stride)
    hit = _CONV_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    base_y = (np.arange(oh) * stride)[:, None, None, None]
    base_x = (np.arange(ow) * stride)[None, :, None, None]
    off_y = np.arange(kh)[None, None, :, None]
    off_x = np.arange(kw)[None, None, None, :]
    flat = ((base_y + off_y) * wp + (base_x + off_x)).reshape(oh * ow, kh * kw)
    _CONV_INDEX_CACHE[key] = (flat, oh, ow)
    return flat, oh, ow


def conv2d(x, w, stride=1, pad=0):
    """Direct 2-D convolution, channels last.

    ``x`` is (H, W, Cin) or (B, H, W, Cin); ``w`` is (kh, kw, Cin, Cout).
    Zero padding, integer stride 1 or 2. Implemented as an index gather plus
    one matmul so the whole query batch hits BLAS at once.
    """
    x = _wrap(x, None)
    w = _wrap(w, None)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if w.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-D (kh, kw, Cin, Cout), got {w.shape}")
    squeeze = x.ndim == 3
    if squeeze:
        x3 = reshape(x, (1,) + x.shape)
    elif x.ndim == 4:
        x3 = x
    else:
        raise ValueError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    b, h, wd, cin = x3.shape
    kh, kw, wcin, cout = w.shape
    if cin != wcin:
        raise ValueError(f"conv2d: input has {cin} channels but kernel expects {wcin}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    flat_idx, oh, ow = _conv_indices(hp, wp, kh, kw, stride)

    if pad:
        xp = np.zeros((b, hp, wp, cin), dtype=x3.dtype)
        xp[:, pad:-pad, pad:-pad, :] = x3.data
    else:
        xp = x3.data
    cols = xp.reshape(b, hp * wp, cin)[:, flat_idx, :]          # (B, P, KK, Cin)
    cols2 = cols.reshape(b, oh * ow, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out_data = np.matmul(cols2, wmat).reshape(b, oh, ow, cout)

    def vjp(g):
        gmat = g.reshape(b, oh * ow, cout)
        gw = (cols2.reshape(-1, kh * kw * cin).T @ gmat.reshape(-1, cout)).reshape(w.shape)
        gcols = np.matmul(gmat, wmat.T)                          # (B, P, KK*Cin)
        gxp_flat = np.empty((b, hp * wp * cin), dtype=g.dtype)
        scatter = (flat_idx[:, :, None] * cin + np.arange(cin)).ravel()
        for i in range(b):
            gxp_flat[i] = np.bincount(scatter, weights=gcols[i].ravel(), minlength=hp * wp * cin)
        gxp = gxp_flat.reshape(b, hp, wp, cin).astype(g.dtype, copy=False)
        gx = gxp[:, pad : hp - pad, pad : wp - pad, :] if pad else gxp
        return gx, gw

    out = _record(out_data, (x3, w), vjp, "conv2d")
    return reshape(out, out.shape[1:]) if squeeze else out


def upsample2x(x):
    """Nearest-neighbor doubling of the two spatial axes of (..., H, W, C)."""
    x = _wrap(x, None)
    if x.ndim < 3:
        raise ValueError(f"upsample2x: need (..., H, W, C), got {x.shape}")
    out_data = np.repeat(np.repeat(x.data, 2, axis=-3), 2, axis=-2)
    shape = x.shape
    def vjp(g):
        h, w = shape[-3], shape[-2]
        gr = g.reshape(shape[:-3] + (h, 2, w, 2, shape[-1]))
        return (gr.sum(axis=(-4, -2)),)
    return _record(out_data, (x,), vjp, "upsample2x")


# -- dispatch -----------------------------------------------------------------

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "pow": pow_scalar,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "relu": relu,
    "clip": clip,
    "matmul": matmul,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "conv2d": conv2d,
    "upsample2x": upsample2x,
    "sum": sum_,
    "mean": mean_,
    "concat": concat,
    "transpose": transpose,
    "reshape": reshape,
    "getitem": getitem,
    "embedding": embedding,
    "masked_fill": masked_fill,
}


def evaluate(op, inputs, attrs=None):
    """Run one catalog op by name on already-lifted inputs."""
    fn = _OPS.get(op)
    if fn is None:
        raise ValueError(f"unknown op {op!r}; catalog: {sorted(_OPS)}")
    if op == "concat":
        return fn(inputs, **(attrs or {}))
    return fn(*inputs, **(attrs or {}))


# -- backward -----------------------------------------------------------------


def _toposort(root):
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
    return order


def backward(root, seed=None):
    """Accumulate d(root)/d(node) into ``.grad`` for every node reaching root.

    Repeated calls keep accumulating until grads are cleared. ``seed`` must
    match the root's shape; it defaults to all ones.
    """
    if root._op is None:
        raise GraphError("backward: tensor is not the result of a recorded operation")
    if seed is None:
        seed_arr = np.ones_like(root.data)
    else:
        seed_arr = np.asarray(seed, dtype=root.dtype)
        if seed_arr.shape != root.shape:
            raise ValueError(f"backward: seed shape {seed_arr.shape} != root shape {root.shape}")

    flowing = {id(root): seed_arr}
    for node in reversed(_toposort(root)):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


# -- gradient verification ----------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_error: float
    checks: int
    failures: list = field(default_factory=list)
    worst: tuple | None = None

    @property
    def ok(self):
        return not self.failures and np.isfinite(self.max_rel_error)


def finite_difference_check(loss_fn, params, eps=1e-5, samples=64, seed=0):
    """Compare analytic grads of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild its graph on every call and return a scalar
    tensor. ``params`` are perturbed in place one coordinate at a time.
    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"finite_difference_check: eps {eps:g} outside [1e-7, 1e-4]")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(
                f"finite_difference_check: parameter {getattr(p, 'name', '?')} is {p.dtype}, need float64"
            )
    for p in params:
        p.grad = None
    loss = loss_fn()
    if loss.size != 1:
        raise ValueError(f"finite_difference_check: loss must be scalar, got shape {loss.shape}")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = [p.size for p in params]
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    coords = np.arange(total) if samples >= total else rng.choice(total, size=samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    failures = []
    max_rel = 0.0
    worst = None
    for c in coords:
        pi = int(np.searchsorted(offsets, c, side="right") - 1)
        j = int(c - offsets[pi])
        p = params[pi]
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = float(loss_fn().data)
        flat[j] = orig - eps
        f_minus = float(loss_fn().data)
        flat[j] = orig
        name = getattr(p, "name", f"param{pi}")
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            failures.append(f"{name}[{j}]: non-finite loss under perturbation")
            continue
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[pi].reshape(-1)[j])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if rel > max_rel:
            max_rel = rel
            worst = (name, j, a, numeric)
    return GradCheckReport(max_rel_error=max_rel, checks=len(coords), failures=failures, worst=worst)
