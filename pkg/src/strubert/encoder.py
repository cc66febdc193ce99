"""Sequence encoder and cell-wise average pooling of column/row views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BlockConfig, ConfigError, ParamStore, init_block, key_padding_mask, transformer_layer, truncated_normal
from .tables import Limits, LinearizedSequence, Table, Vocabulary, build_view_sequences, context_fields, fit_table
from .tensor import Tensor


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn_dim: int = 128
    max_len: int = 256
    vocab_size: int = 0
    positions_enabled: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"hidden size {self.d} not divisible by {self.heads} heads")

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.d, self.heads, self.ffn_dim, dropout=self.dropout)

    @classmethod
    def bert_base(cls, vocab_size: int) -> "EncoderConfig":
        return cls(layers=12, d=768, heads=12, ffn_dim=3072, max_len=256, vocab_size=vocab_size)


def init_encoder(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc") -> None:
    store.add(f"{prefix}.tok", truncated_normal(rng, (cfg.vocab_size, cfg.d)))
    store.add(f"{prefix}.pos", truncated_normal(rng, (cfg.max_len, cfg.d)))
    for i in range(cfg.layers):
        init_block(store, f"{prefix}.layer{i}", cfg.block, rng)


def embed(token_ids: np.ndarray, cfg: EncoderConfig, store: ParamStore, prefix: str = "enc") -> Tensor:
    """Token (plus position) embeddings for a ``[B, n]`` id array."""
    n = token_ids.shape[-1]
    if n > cfg.max_len:
        raise SequenceLengthError(f"sequence of {n} tokens exceeds max_len {cfg.max_len}")
    x = T.take(store[f"{prefix}.tok"], token_ids, axis=0)
    if cfg.positions_enabled:
        x = x + T.take(store[f"{prefix}.pos"], np.arange(n), axis=0)
    return x


def encode_batch(token_ids: np.ndarray, pad: np.ndarray | None, cfg: EncoderConfig, store: ParamStore,
                 prefix: str = "enc", rng: np.random.Generator | None = None) -> Tensor:
    """Last-layer states ``[B, n, d]`` for equal-length (padded) id rows."""
    token_ids = np.atleast_2d(token_ids)
    mask = key_padding_mask(pad) if pad is not None and pad.any() else None
    x = embed(token_ids, cfg, store, prefix)
    for i in range(cfg.layers):
        x = transformer_layer(x, store, f"{prefix}.layer{i}", cfg.block, rng, mask=mask)
    return x


def encode_sequence(seq: LinearizedSequence, cfg: EncoderConfig, store: ParamStore,
                    prefix: str = "enc") -> Tensor:
    ids = np.asarray(seq.token_ids)[None, :]
    pad = np.array([[s.kind == "pad" for s in seq.spans for _ in range(len(s))]])
    out = encode_batch(ids, pad, cfg, store, prefix)
    return T.reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# pooling


@dataclass(frozen=True)
class PooledLayout:
    """Kind of each pooled position and, for cells, the index along the view
    (row index inside a column view, column index inside a row view)."""

    kinds: tuple[str, ...]
    cell_index: tuple[int | None, ...]

    def __len__(self) -> int:
        return len(self.kinds)

    def cell_positions(self) -> list[int]:
        return [p for p, k in enumerate(self.kinds) if k == "cell"]


def pooling_matrix(seq: LinearizedSequence) -> tuple[np.ndarray, PooledLayout, list]:
    """Row-stochastic ``[P, n]`` matrix averaging each cell span's tokens.

    Non-cell tokens map to themselves; padding is dropped.
    """
    rows: list[tuple[int, int]] = []
    kinds: list[str] = []
    index: list[int | None] = []
    coords: list = []
    for span in seq.spans:
        if span.kind == "pad":
            continue
        if len(span) == 0:
            raise ValueError(f"empty {span.kind} span at {span.start}")
        if span.kind == "cell":
            rows.append((span.start, span.end))
            kinds.append("cell")
            row, col = span.coord
            index.append(row if seq.view == "column" else col)
            coords.append(span.coord)
        else:
            kind = "text" if span.kind == "text_field" else span.kind
            for t in range(span.start, span.end):
                rows.append((t, t + 1))
                kinds.append(kind)
                index.append(None)
                coords.append(None)
    M = np.zeros((len(rows), len(seq)))
    for p, (a, b) in enumerate(rows):
        M[p, a:b] = 1.0 / (b - a)
    return M, PooledLayout(tuple(kinds), tuple(index)), coords


def cell_wise_pool(states: Tensor, seqs: list[LinearizedSequence] | LinearizedSequence) -> "EncodedViews":
    """Average each cell's token states; other tokens pass through.

    ``states`` is ``[B, n, d]`` for a list of B sequences or ``[n, d]`` for one.
    """
    single = isinstance(seqs, LinearizedSequence)
    if single:
        seqs = [seqs]
        states = T.reshape(states, (1, *states.shape))
    mats, layouts, coords = zip(*(pooling_matrix(s) for s in seqs))
    if any(lay != layouts[0] for lay in layouts[1:]):
        raise ValueError("sequences of one view have different pooled layouts")
    M = np.stack(mats).astype(states.dtype)
    pooled = T.matmul(Tensor(M), states)
    return EncodedViews(pooled, layouts[0], seqs[0].view, tuple(coords))


@dataclass
class EncodedViews:
    """Pooled vectors ``[B, P, d]`` for all sequences of one view."""

    vectors: Tensor
    layout: PooledLayout
    view: str
    coords: tuple

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def pooled_length(self) -> int:
        return self.vectors.shape[1]

    def view_vectors(self, b: int) -> np.ndarray:
        return self.vectors.data[b]


@dataclass
class EncodedTable:
    table: Table
    columns: EncodedViews
    rows: EncodedViews


def _padded_batch(seqs: list[LinearizedSequence]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([s.token_ids for s in seqs], dtype=np.intp)
    pad = np.array([[t == "[PAD]" for t in s.tokens] for s in seqs])
    return ids, pad


def encode_table(table: Table, query: str | None, cfg: EncoderConfig, store: ParamStore, vocab: Vocabulary,
                 limits: Limits = Limits(), prefix: str = "enc",
                 rng: np.random.Generator | None = None) -> EncodedTable:
    """Encode every column and row context sequence and pool cells.

    The table is first fitted to the length caps; the returned
    :class:`EncodedTable` carries the fitted table.
    """
    fields = context_fields(table, query, limits)
    fitted = fit_table(table, fields, limits)
    out = {}
    for view in ("column", "row"):
        seqs = build_view_sequences(fitted, view, vocab, query, limits, fitted=True)
        ids, pad = _padded_batch(seqs)
        states = encode_batch(ids, pad, cfg, store, prefix, rng)
        out[view] = cell_wise_pool(states, seqs)
    return EncodedTable(fitted, out["column"], out["row"])
