"""Parameter registry and the transformer building blocks shared by the model.

Layers are thin: each one creates its parameters in a shared ``ParamStore``
under a dotted prefix at construction time and is a plain callable afterwards.
The store is what optimizers and checkpoints enumerate.
"""

from __future__ import annotations

import math

import numpy as np

from textspot import autodiff as ad


class ParamStore:
    """Flat name -> Parameter registry with seeded initialization."""

    def __init__(self, seed=0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self._params = {}

    def create(self, name, shape, init="xavier", std=1.0):
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        shape = tuple(shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            data = self.rng.normal(0.0, std, size=shape)
        elif init == "xavier":
            fan_in, fan_out = _fans(shape)
            data = self.rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
        elif init == "he":
            fan_in, _ = _fans(shape)
            data = self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        param = ad.Parameter(name, data.astype(self.dtype))
        self._params[name] = param
        return param

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def parameters(self):
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def load_values(self, values):
        """Overwrite parameter payloads from a name -> array mapping, strictly."""
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing {sorted(missing)[:4]}, unexpected {sorted(extra)[:4]}"
            )
        for name, arr in values.items():
            p = self._params[name]
            arr = np.asarray(arr, dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name!r}: stored shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.copy()


def _fans(shape):
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        return receptive * shape[2], receptive * shape[3]
    n = int(np.prod(shape))
    return n, n


class Linear:
    """Affine map on the last axis."""

    def __init__(self, store, name, d_in, d_out, init="xavier", bias=True):
        self.w = store.create(f"{name}.w", (d_in, d_out), init=init)
        self.b = store.create(f"{name}.b", (d_out,), init="zeros") if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.w)
        return y if self.b is None else y + self.b


class LayerNorm:
    def __init__(self, store, name, d):
        self.g = store.create(f"{name}.g", (d,), init="ones")
        self.b = store.create(f"{name}.b", (d,), init="zeros")

    def __call__(self, x):
        return ad.layer_norm(x, self.g, self.b)


class MultiHeadAttention:
    """Dense scaled dot-product attention with an optional boolean block mask.

    ``blocked`` marks (query, key) pairs that must receive zero weight; it is
    broadcast against the (..., heads, Lq, Lk) score tensor.
    """

    def __init__(self, store, name, d, heads):
        if d % heads:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(d // heads)
        self.wq = Linear(store, f"{name}.q", d, d)
        # No key bias: it shifts every score for a query by the same amount,
        # which softmax cancels, leaving a parameter with identically zero
        # gradient.
        self.wk = Linear(store, f"{name}.k", d, d, bias=False)
        self.wv = Linear(store, f"{name}.v", d, d)
        self.wo = Linear(store, f"{name}.o", d, d)

    def __call__(self, query, memory, blocked=None):
        q = _split_heads(self.wq(query), self.heads)
        k = _split_heads(self.wk(memory), self.heads)
        v = _split_heads(self.wv(memory), self.heads)
        kt = ad.transpose(k, _swap_last_two(k.ndim))
        scores = ad.matmul(q, kt) * self.scale
        if blocked is not None:
            scores = ad.masked_fill(scores, blocked, ad.MASK_FILL)
        attn = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(attn, v)
        return self.wo(_merge_heads(mixed))


def _swap_last_two(ndim):
    perm = list(range(ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return perm


def _split_heads(x, heads):
    *lead, length, d = x.shape
    y = ad.reshape(x, (*lead, length, heads, d // heads))
    perm = list(range(y.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return ad.transpose(y, perm)


def _merge_heads(x):
    perm = list(range(x.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    y = ad.transpose(x, perm)
    *lead, length, heads, dh = y.shape
    return ad.reshape(y, (*lead, length, heads * dh))


class FeedForward:
    """Two-layer MLP with relu, hidden width 4x."""

    def __init__(self, store, name, d):
        self.fc1 = Linear(store, f"{name}.fc1", d, 4 * d)
        self.fc2 = Linear(store, f"{name}.fc2", 4 * d, d)

    def __call__(self, x):
        return self.fc2(ad.relu(self.fc1(x)))


class EncoderLayer:
    """Pre-norm self-attention block."""

    def __init__(self, store, name, d, heads):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d)

    def __call__(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.ln2(x))


class CrossFirstDecoderLayer:
    """Pre-norm block running cross-attention, then self-attention, then FFN.

    Cross-attention first lets each query gather image evidence before the
    queries exchange information, and it is where the block mask applies.
    """

    def __init__(self, store, name, d, heads):
        self.ln_ca = LayerNorm(store, f"{name}.ln_ca", d)
        self.cross = MultiHeadAttention(store, f"{name}.cross", d, heads)
        self.ln_sa = LayerNorm(store, f"{name}.ln_sa", d)
        self.self_attn = MultiHeadAttention(store, f"{name}.self", d, heads)
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d)

    def __call__(self, x, memory, blocked=None):
        x = x + self.cross(self.ln_ca(x), memory, blocked)
        h = self.ln_sa(x)
        x = x + self.self_attn(h, h)
        return x + self.ffn(self.ln_ffn(x))


class SelfFirstDecoderLayer:
    """Conventional pre-norm decoder block: self-attention, cross-attention, FFN."""

    def __init__(self, store, name, d, heads):
        self.ln_sa = LayerNorm(store, f"{name}.ln_sa", d)
        self.self_attn = MultiHeadAttention(store, f"{name}.self", d, heads)
        self.ln_ca = LayerNorm(store, f"{name}.ln_ca", d)
        self.cross = MultiHeadAttention(store, f"{name}.cross", d, heads)
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d)

    def __call__(self, x, memory):
        h = self.ln_sa(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross(self.ln_ca(x), memory)
        return x + self.ffn(self.ln_ffn(x))
