"""Minimal differentiable substrate for a causal transformer decoder.

Parameters live in a ParameterStore (named arrays with matching gradient
accumulators, deterministic iteration order).  Layers are plain classes
that cache whatever the exact reverse-mode pass needs; calling backward
without a forward is rejected.  Checkpoints are a flat little-endian
binary format with a bit-exact round trip.

The decoder block order is: causal self-attention -> residual add ->
layer norm -> two-layer GELU feed-forward -> residual add -> layer norm,
with learned absolute position embeddings added to the input tokens.
Dropout runs only in train mode and only from an explicitly passed
random generator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"QFAT"
CHECKPOINT_VERSION = 1

_GELU_C = float(np.sqrt(2.0 / np.pi))  # plain float: np scalars would upcast f32 arrays
_GELU_A = 0.044715


class ParameterStore:
    """Named parameter arrays with per-parameter gradient accumulators."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def add_grad(self, name: str, grad: np.ndarray) -> None:
        g = self.grads[name]
        if g.shape != grad.shape:
            raise ValueError(f"gradient shape {grad.shape} != param shape {g.shape} for {name!r}")
        g += grad

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def names(self) -> list[str]:
        return list(self.params.keys())

    @property
    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in self.params.items():
            src = values[name]
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: {src.shape} vs {arr.shape}")
            arr[...] = src


def save_checkpoint(store: ParameterStore, path: str) -> None:
    """Write the store to the flat binary checkpoint format (float32 only)."""
    if store.dtype != np.dtype(np.float32):
        raise ValueError("checkpoint format stores float32 parameters")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(store.params)))
        for name, arr in store.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> ParameterStore:
    """Read a checkpoint back into a fresh float32 ParameterStore."""
    store = ParameterStore(np.float32)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            payload = fh.read(4 * n)
            if len(payload) != 4 * n:
                raise ValueError("truncated checkpoint payload")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            store.add(name, arr)
    return store


@dataclass
class SequenceBatch:
    """A batch of token embeddings plus its (always causal) attention mask."""

    embeddings: np.ndarray                  # (B, L, E)
    loss_mask: np.ndarray | None = None     # (B, L) bool, True = include

    @property
    def causal_mask(self) -> np.ndarray:
        """Lower-triangular boolean mask: position t attends to positions <= t."""
        length = self.embeddings.shape[1]
        return np.tril(np.ones((length, length), dtype=bool))


class Linear:
    def __init__(self, store: ParameterStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, init_std: float = 0.02, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = init_std * rng.standard_normal((n_in, n_out))
        self.name = name
        self.w = store.add(f"{name}.w", w)
        self.b = store.add(f"{name}.b", np.zeros(n_out))
        self.store = store
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w + self.b

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError(f"backward before forward in {self.name}")
        x2 = self._x.reshape(-1, self._x.shape[-1])
        g2 = grad_out.reshape(-1, grad_out.shape[-1])
        self.store.add_grad(f"{self.name}.w", (x2.T @ g2).astype(self.w.dtype))
        self.store.add_grad(f"{self.name}.b", g2.sum(axis=0).astype(self.b.dtype))
        return grad_out @ self.w.T


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int, eps: float = 1e-5):
        self.name = name
        self.gamma = store.add(f"{name}.g", np.ones(dim))
        self.beta = store.add(f"{name}.b", np.zeros(dim))
        self.eps = eps
        self.store = store
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xn = xc * inv_std
        self._cache = (xc, inv_std, xn)
        return self.gamma * xn + self.beta

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError(f"backward before forward in {self.name}")
        xc, inv_std, xn = self._cache
        n = grad_out.shape[-1]
        lead = tuple(range(grad_out.ndim - 1))
        self.store.add_grad(f"{self.name}.g", (grad_out * xn).sum(axis=lead).astype(self.gamma.dtype))
        self.store.add_grad(f"{self.name}.b", grad_out.sum(axis=lead).astype(self.beta.dtype))
        dxn = grad_out * self.gamma
        # d/dx of (x - mu) / sqrt(var + eps), var and mu both functions of x
        dvar = np.sum(dxn * xc, axis=-1, keepdims=True) * (-0.5) * inv_std**3
        dmu = -np.sum(dxn, axis=-1, keepdims=True) * inv_std + dvar * np.mean(-2.0 * xc, axis=-1, keepdims=True)
        return dxn * inv_std + dvar * (2.0 / n) * xc + dmu / n


class Gelu:
    """tanh-approximation GELU; the tanh term is cached for the backward pass."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
        self._cache = (x, t)
        return 0.5 * x * (1.0 + t)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x, t = self._cache
        inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner)


class _Dropout:
    """Inverted dropout; identity unless train_mode with p > 0."""

    def __init__(self, p: float):
        self.p = p
        self._mask = None

    def forward(self, x: np.ndarray, train_mode: bool, rng: np.random.Generator | None) -> np.ndarray:
        if not train_mode or self.p <= 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in train mode requires an explicit rng")
        keep = 1.0 - self.p
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return grad_out
        return grad_out * self._mask


class CausalSelfAttention:
    def __init__(self, store: ParameterStore, name: str, embed_dim: int, heads: int,
                 dropout: float, rng: np.random.Generator):
        if embed_dim % heads != 0:
            raise ValueError(f"embed_dim {embed_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.qkv = Linear(store, f"{name}.qkv", embed_dim, 3 * embed_dim, rng)
        self.proj = Linear(store, f"{name}.proj", embed_dim, embed_dim, rng)
        self.attn_drop = _Dropout(dropout)
        self.resid_drop = _Dropout(dropout)
        self._cache = None
        self.last_attn = None  # (B, H, L, L), kept for inspection

    def forward(self, x: np.ndarray, train_mode: bool, rng: np.random.Generator | None) -> np.ndarray:
        b, length, embed = x.shape
        qkv = self.qkv.forward(x)
        q, k, v = np.split(qkv, 3, axis=-1)
        shape = (b, length, self.heads, self.head_dim)
        q = q.reshape(shape).transpose(0, 2, 1, 3)
        k = k.reshape(shape).transpose(0, 2, 1, 3)
        v = v.reshape(shape).transpose(0, 2, 1, 3)

        scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(self.head_dim).astype(x.dtype)
        neg_inf = np.array(-np.inf, dtype=x.dtype)
        scores = np.where(np.tril(np.ones((length, length), dtype=bool)), scores, neg_inf)
        scores -= scores.max(axis=-1, keepdims=True)
        exps = np.exp(scores)
        attn = exps / exps.sum(axis=-1, keepdims=True)
        self.last_attn = attn

        attn_d = self.attn_drop.forward(attn, train_mode, rng)
        ctx = attn_d @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, length, embed)
        out = self.resid_drop.forward(self.proj.forward(ctx), train_mode, rng)
        self._cache = (q, k, v, attn, attn_d)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward before forward in attention")
        q, k, v, attn, attn_d = self._cache
        b, length, embed = grad_out.shape

        g = self.resid_drop.backward(grad_out)
        g_ctx = self.proj.backward(g)
        g_ctx = g_ctx.reshape(b, length, self.heads, self.head_dim).transpose(0, 2, 1, 3)

        g_attn_d = g_ctx @ v.transpose(0, 1, 3, 2)
        g_v = attn_d.transpose(0, 1, 3, 2) @ g_ctx
        g_attn = self.attn_drop.backward(g_attn_d)
        # softmax backward; masked positions have attn == 0 so they drop out
        g_scores = attn * (g_attn - np.sum(g_attn * attn, axis=-1, keepdims=True))
        g_scores /= np.sqrt(self.head_dim).astype(grad_out.dtype)

        g_q = g_scores @ k
        g_k = g_scores.transpose(0, 1, 3, 2) @ q

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(b, length, embed)

        g_qkv = np.concatenate([merge(g_q), merge(g_k), merge(g_v)], axis=-1)
        return self.qkv.backward(g_qkv)


class Block:
    """attention -> residual -> layer norm -> feed-forward -> residual -> layer norm."""

    def __init__(self, store: ParameterStore, name: str, embed_dim: int, heads: int,
                 dropout: float, rng: np.random.Generator):
        self.attn = CausalSelfAttention(store, f"{name}.attn", embed_dim, heads, dropout, rng)
        self.ln1 = LayerNorm(store, f"{name}.ln1", embed_dim)
        self.fc = Linear(store, f"{name}.mlp.fc", embed_dim, 4 * embed_dim, rng)
        self.act = Gelu()
        self.proj = Linear(store, f"{name}.mlp.proj", 4 * embed_dim, embed_dim, rng)
        self.mlp_drop = _Dropout(dropout)
        self.ln2 = LayerNorm(store, f"{name}.ln2", embed_dim)

    def forward(self, x: np.ndarray, train_mode: bool, rng: np.random.Generator | None) -> np.ndarray:
        h = self.ln1.forward(x + self.attn.forward(x, train_mode, rng))
        ff = self.mlp_drop.forward(self.proj.forward(self.act.forward(self.fc.forward(h))), train_mode, rng)
        return self.ln2.forward(h + ff)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = self.ln2.backward(grad_out)
        g_ff = self.mlp_drop.backward(g)
        g_h = self.fc.backward(self.act.backward(self.proj.backward(g_ff)))
        g_h = g_h + g
        g_x = self.ln1.backward(g_h)
        return g_x + self.attn.backward(g_x)


class Decoder:
    """Stack of causal blocks over continuous token embeddings.

    Learned absolute position embeddings (zero-initialized) are added to
    the inputs before the first block.
    """

    def __init__(self, store: ParameterStore, name: str, layers: int, heads: int,
                 embed_dim: int, max_len: int, dropout: float, rng: np.random.Generator):
        self.name = name
        self.max_len = max_len
        self.embed_dim = embed_dim
        self.store = store
        self.pos_emb = store.add(f"{name}.pos_emb", np.zeros((max_len, embed_dim)))
        self.emb_drop = _Dropout(dropout)
        self.blocks = [
            Block(store, f"{name}.block{i}", embed_dim, heads, dropout, rng)
            for i in range(layers)
        ]
        self._length = None

    def forward(self, x: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.embed_dim:
            raise ValueError(f"expected (B, L, {self.embed_dim}) input, got {x.shape}")
        length = x.shape[1]
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.max_len}")
        self._length = length
        h = self.emb_drop.forward(x + self.pos_emb[:length], train_mode, rng)
        for block in self.blocks:
            h = block.forward(h, train_mode, rng)
        return h

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._length is None:
            raise RuntimeError("decoder backward called before forward")
        if grad_out.shape[1] != self._length:
            raise ValueError("upstream gradient length does not match last forward")
        g = grad_out
        for block in reversed(self.blocks):
            g = block.backward(g)
        g = self.emb_drop.backward(g)
        self.store.add_grad(f"{self.name}.pos_emb",
                            _pad_rows(g.sum(axis=0), self.max_len).astype(self.pos_emb.dtype))
        return g


def _pad_rows(arr: np.ndarray, rows: int) -> np.ndarray:
    if arr.shape[0] == rows:
        return arr
    out = np.zeros((rows,) + arr.shape[1:], dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out
