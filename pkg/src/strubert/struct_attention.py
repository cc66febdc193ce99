"""Horizontal/vertical self-attention over aligned view positions and the four
table features built on top of them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncodedTable, EncodedViews, EncoderConfig, encode_table
from .nn import BlockConfig, ParamStore, init_block, transformer_layer
from .tables import Limits, Table, Vocabulary
from .tensor import Tensor


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class StructConfig:
    horizontal_layers: int = 3
    vertical_layers: int = 3
    heads: int = 4
    ffn_dim: int = 128


@dataclass
class AlignmentGroups:
    """``vectors[p]`` holds the p-th pooled vector of every sequence in a view."""

    vectors: Tensor  # [P, members, d]
    kinds: tuple[str, ...]
    cell_index: tuple[int | None, ...]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def group_size(self) -> int:
        return self.vectors.shape[1]


@dataclass
class StructFeatures:
    E_r: Tensor  # [(s-1), d]
    E_c: Tensor  # [l, d]
    cls_r: Tensor  # [d]
    cls_c: Tensor  # [d]
    table: Table | None = None

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.E_r, self.E_c, self.cls_r, self.cls_c


def init_struct_attention(store: ParamStore, d: int, cfg: StructConfig, rng: np.random.Generator) -> None:
    block = BlockConfig(d, cfg.heads, cfg.ffn_dim)
    for i in range(cfg.horizontal_layers):
        init_block(store, f"horiz.layer{i}", block, rng)
    for i in range(cfg.vertical_layers):
        init_block(store, f"vert.layer{i}", block, rng)


def align(views: EncodedViews) -> AlignmentGroups:
    v = views.vectors
    if v.ndim != 3:
        raise LayoutError(f"expected [sequences, positions, d] views, got {v.shape}")
    return AlignmentGroups(T.swapaxes(v, 0, 1), views.layout.kinds, views.layout.cell_index)


def align_list(vectors: list[np.ndarray]) -> np.ndarray:
    """Transpose a list of per-sequence ``[P, d]`` arrays into ``[P, members, d]``."""
    lengths = {v.shape[0] for v in vectors}
    if len(lengths) != 1:
        raise LayoutError(f"ragged views: pooled lengths {sorted(lengths)}")
    return np.stack(vectors, axis=1)


def unalign(groups: AlignmentGroups) -> Tensor:
    return T.swapaxes(groups.vectors, 0, 1)


def _attend(groups: AlignmentGroups, layers: int, prefix: str, store: ParamStore, d: int,
            cfg: StructConfig) -> AlignmentGroups:
    block = BlockConfig(d, cfg.heads, cfg.ffn_dim)
    x = groups.vectors
    for i in range(layers):
        x = transformer_layer(x, store, f"{prefix}.layer{i}", block)
    return AlignmentGroups(x, groups.kinds, groups.cell_index)


def horizontal_attention(groups: AlignmentGroups, store: ParamStore, cfg: StructConfig = StructConfig()) -> AlignmentGroups:
    """Each column-view position group attends across columns, no positions added."""
    return _attend(groups, cfg.horizontal_layers, "horiz", store, groups.vectors.shape[-1], cfg)


def vertical_attention(groups: AlignmentGroups, store: ParamStore, cfg: StructConfig = StructConfig()) -> AlignmentGroups:
    """Each row-view position group attends across rows."""
    return _attend(groups, cfg.vertical_layers, "vert", store, groups.vectors.shape[-1], cfg)


def _cell_means(groups: AlignmentGroups, count: int) -> Tensor:
    pos = [None] * count
    for p, (kind, idx) in enumerate(zip(groups.kinds, groups.cell_index)):
        if kind == "cell":
            if not 0 <= idx < count or pos[idx] is not None:
                raise LayoutError(f"bad cell group index {idx} at position {p}")
            pos[idx] = p
    if any(p is None for p in pos):
        raise LayoutError("missing cell group")
    return T.mean(T.take(groups.vectors, pos, axis=0), axis=1)


def pool_features(horizontal: AlignmentGroups, vertical: AlignmentGroups) -> StructFeatures:
    """Row embeddings and row-guided [CLS] from the horizontal side, column
    embeddings and column-guided [CLS] from the vertical side."""
    n_rows = sum(k == "cell" for k in horizontal.kinds)
    n_cols = sum(k == "cell" for k in vertical.kinds)
    if horizontal.kinds[0] != "cls" or vertical.kinds[0] != "cls":
        raise LayoutError("first pooled position must be [CLS]")
    E_r = _cell_means(horizontal, n_rows)
    E_c = _cell_means(vertical, n_cols)
    cls_r = T.mean(horizontal.vectors[0], axis=0)
    cls_c = T.mean(vertical.vectors[0], axis=0)
    return StructFeatures(E_r, E_c, cls_r, cls_c)


def features_from_encoded(enc: EncodedTable, store: ParamStore, cfg: StructConfig = StructConfig()) -> StructFeatures:
    h = horizontal_attention(align(enc.columns), store, cfg)
    v = vertical_attention(align(enc.rows), store, cfg)
    f = pool_features(h, v)
    f.table = enc.table
    return f


def struct_features(table: Table, query: str | None, enc_cfg: EncoderConfig, store: ParamStore,
                    vocab: Vocabulary, cfg: StructConfig = StructConfig(),
                    limits: Limits = Limits()) -> StructFeatures:
    enc = encode_table(table, query, enc_cfg, store, vocab, limits)
    return features_from_encoded(enc, store, cfg)
