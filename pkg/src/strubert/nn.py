"""Parameter storage, initializers, transformer blocks and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


def key_padding_mask(pad: np.ndarray) -> np.ndarray:
    """``[B, n]`` boolean pad flags to an additive ``[B, 1, 1, n]`` score mask."""
    return np.where(pad, -1e9, 0.0)[:, None, None, :]


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled outside +-2 std, BERT style."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class ParamStore:
    """Named trainable tensors plus their Adam moment buffers."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; parameters the loss never reached get zeros."""
        return {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in self.params.items()
        }

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k, p in self.params.items():
            out.add(k, p.data.astype(dtype))
            out.m[k] = self.m[k].astype(dtype)
            out.v[k] = self.v[k].astype(dtype)
        out.step = self.step
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def adam_step(store: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter; clears gradients."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            # zero gradient still decays the moments
            g = np.zeros_like(p.data)
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class BlockConfig:
    d: int
    heads: int
    ffn_dim: int
    ln_eps: float = 1e-12
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"hidden size {self.d} not divisible by {self.heads} heads")


def init_block(store: ParamStore, prefix: str, cfg: BlockConfig, rng: np.random.Generator) -> None:
    d, f = cfg.d, cfg.ffn_dim
    for w in ("q", "k", "v", "o"):
        store.add(f"{prefix}.attn.W{w}", truncated_normal(rng, (d, d)))
        store.add(f"{prefix}.attn.b{w}", np.zeros(d))
    store.add(f"{prefix}.ln1.gamma", np.ones(d))
    store.add(f"{prefix}.ln1.beta", np.zeros(d))
    store.add(f"{prefix}.ffn.W1", truncated_normal(rng, (d, f)))
    store.add(f"{prefix}.ffn.b1", np.zeros(f))
    store.add(f"{prefix}.ffn.W2", truncated_normal(rng, (f, d)))
    store.add(f"{prefix}.ffn.b2", np.zeros(d))
    store.add(f"{prefix}.ln2.gamma", np.ones(d))
    store.add(f"{prefix}.ln2.beta", np.zeros(d))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, W)
    return y if b is None else y + b


def multi_head_attention(x: Tensor, store: ParamStore, prefix: str, heads: int,
                         weights_out: list | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product self-attention over the second-to-last axis.

    ``x`` is ``[..., n, d]``; leading axes are independent sequences. When
    ``weights_out`` is a list, the ``[..., heads, n, n]`` attention weights are
    appended to it. ``mask`` is an additive score bias broadcastable to
    ``[..., heads, n, n]`` (large negative values hide padded keys).
    """
    *lead, n, d = x.shape
    if d % heads:
        raise ConfigError(f"hidden size {d} not divisible by {heads} heads")
    dh = d // heads
    p = f"{prefix}.attn"

    def split(t: Tensor) -> Tensor:
        t = T.reshape(t, (*lead, n, heads, dh))
        return T.swapaxes(t, -2, -3)  # [..., h, n, dh]

    q = split(linear(x, store[f"{p}.Wq"], store[f"{p}.bq"]))
    k = split(linear(x, store[f"{p}.Wk"], store[f"{p}.bk"]))
    v = split(linear(x, store[f"{p}.Wv"], store[f"{p}.bv"]))
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask.astype(scores.dtype, copy=False)
    attn = T.softmax_last(scores)
    if weights_out is not None:
        weights_out.append(attn.data.copy())
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.swapaxes(ctx, -2, -3), (*lead, n, d))
    return linear(ctx, store[f"{p}.Wo"], store[f"{p}.bo"])


def feed_forward(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    h = T.gelu(linear(x, store[f"{prefix}.ffn.W1"], store[f"{prefix}.ffn.b1"]))
    return linear(h, store[f"{prefix}.ffn.W2"], store[f"{prefix}.ffn.b2"])


def transformer_layer(x: Tensor, store: ParamStore, prefix: str, cfg: BlockConfig,
                      rng: np.random.Generator | None = None,
                      weights_out: list | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Post-norm block: LN(x + MHA(x)) then LN(h + FFN(h))."""
    a = multi_head_attention(x, store, prefix, cfg.heads, weights_out, mask)
    a = T.dropout(a, cfg.dropout, rng)
    h = T.layer_norm(x + a, store[f"{prefix}.ln1.gamma"], store[f"{prefix}.ln1.beta"], cfg.ln_eps)
    f = T.dropout(feed_forward(h, store, prefix), cfg.dropout, rng)
    return T.layer_norm(h + f, store[f"{prefix}.ln2.gamma"], store[f"{prefix}.ln2.beta"], cfg.ln_eps)
