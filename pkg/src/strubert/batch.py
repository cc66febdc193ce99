"""Padded, masked forward pass over many tables and pairs at once.

Numerically this matches the per-table path in :mod:`strubert.struct_attention`
and :mod:`strubert.matcher` (padding is masked out of every attention), but
runs each transformer stack once per mini-batch instead of once per table.
Horizontal/vertical groups whose outputs are never pooled (text and [SEP]
positions) are skipped; groups are independent, so this changes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .encoder import encode_batch
from .matcher import SEGMENT_A, SEGMENT_B, SequenceLengthError, StruBERT
from .nn import BlockConfig, key_padding_mask, transformer_layer
from .struct_attention import StructFeatures
from .tables import PAD, Table, build_view_sequences, context_fields, fit_table
from .tensor import Tensor


@dataclass
class BatchFeatures:
    E_r: Tensor  # [sum of data rows, d]
    E_c: Tensor  # [sum of columns, d]
    cls_r: Tensor  # [n_tables, d]
    cls_c: Tensor  # [n_tables, d]
    row_offsets: list[int]
    col_offsets: list[int]
    tables: list[Table]

    def rows_of(self, t: int) -> range:
        return range(self.row_offsets[t], self.row_offsets[t + 1])

    def cols_of(self, t: int) -> range:
        return range(self.col_offsets[t], self.col_offsets[t + 1])

    def table_features(self, t: int) -> StructFeatures:
        return StructFeatures(
            T.take(self.E_r, list(self.rows_of(t)), axis=0),
            T.take(self.E_c, list(self.cols_of(t)), axis=0),
            self.cls_r[t],
            self.cls_c[t],
            self.tables[t],
        )


def _group_matrix(groups: list[tuple[list[tuple[int, int, int]], int]], width: int, n_tok: int,
                  max_members: int) -> tuple[np.ndarray, np.ndarray]:
    """Averaging matrix from flattened token states to padded group members.

    ``groups`` holds, per group, a list of member token spans ``(seq, start,
    end)``. Returns ``[G * max_members, n_seq * n_tok]`` and a ``[G, max_members]``
    pad mask.
    """
    G = len(groups)
    M = np.zeros((G * max_members, width))
    pad = np.ones((G, max_members), dtype=bool)
    for g, (members, _) in enumerate(groups):
        for m, (s, a, b) in enumerate(members):
            M[g * max_members + m, s * n_tok + a: s * n_tok + b] = 1.0 / (b - a)
            pad[g, m] = False
    return M, pad


def batch_features(model: StruBERT, items: list[tuple[Table, str | None]], dropout: float = 0.0,
                   rng: np.random.Generator | None = None) -> BatchFeatures:
    """Features of every table; ``dropout`` applies to every block when ``rng`` is given."""
    cfg = model.config
    store = model.store
    vocab = model.vocab
    seqs = []
    fitted_tables = []
    table_seqs = []  # per table: (column seq indices, row seq indices)
    for table, query in items:
        fields = context_fields(table, query, cfg.limits)
        fitted = fit_table(table, fields, cfg.limits)
        fitted_tables.append(fitted)
        cols = build_view_sequences(fitted, "column", vocab, query, cfg.limits, fitted=True)
        rows = build_view_sequences(fitted, "row", vocab, query, cfg.limits, fitted=True)
        c0 = len(seqs)
        seqs.extend(cols)
        r0 = len(seqs)
        seqs.extend(rows)
        table_seqs.append((list(range(c0, r0)), list(range(r0, len(seqs)))))

    n_tok = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n_tok), vocab.pad_id, dtype=np.intp)
    pad = np.ones((len(seqs), n_tok), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.token_ids
        pad[i, : len(s)] = [t == PAD for t in s.tokens]
    states = encode_batch(ids, pad, replace(cfg.encoder, dropout=dropout), store, rng=rng)
    d = states.shape[-1]
    flat = T.reshape(states, (len(seqs) * n_tok, d))

    def slots(si: int) -> list[tuple[int, int]]:
        """Token spans of [CLS] then each cell, in view order."""
        s = seqs[si]
        return [(0, 1)] + [(sp.start, sp.end) for sp in s.cell_spans()]

    def attend(view: int, prefix: str, layers: int) -> tuple[Tensor, list[list[int]]]:
        groups = []
        owners = []  # per table, its group indices (slot order)
        for members in (ts[view] for ts in table_seqs):
            member_slots = [slots(si) for si in members]
            n_slots = len(member_slots[0])
            ids_here = []
            for q in range(n_slots):
                ids_here.append(len(groups))
                groups.append(([(si, *member_slots[m][q]) for m, si in enumerate(members)], q))
            owners.append(ids_here)
        width = max(len(g[0]) for g in groups)
        M, gpad = _group_matrix(groups, len(seqs) * n_tok, n_tok, width)
        x = T.reshape(T.matmul(Tensor(M.astype(flat.dtype)), flat), (len(groups), width, d))
        mask = key_padding_mask(gpad) if gpad.any() else None
        block = _struct_block(model, dropout)
        for i in range(layers):
            x = transformer_layer(x, store, f"{prefix}.layer{i}", block, rng, mask=mask)
        return T.reshape(x, (len(groups) * width, d)), owners, gpad, width

    def pool(out: Tensor, owners: list[list[int]], gpad: np.ndarray, width: int) -> tuple[Tensor, Tensor, list[int]]:
        n_cells = sum(len(o) - 1 for o in owners)
        C = np.zeros((n_cells, out.shape[0]))
        K = np.zeros((len(owners), out.shape[0]))
        offsets = [0]
        r = 0
        for t, own in enumerate(owners):
            for q, g in enumerate(own):
                valid = np.flatnonzero(~gpad[g])
                cols = g * width + valid
                if q == 0:
                    K[t, cols] = 1.0 / len(valid)
                else:
                    C[r, cols] = 1.0 / len(valid)
                    r += 1
            offsets.append(r)
        C = Tensor(C.astype(out.dtype))
        K = Tensor(K.astype(out.dtype))
        return T.matmul(C, out), T.matmul(K, out), offsets

    s_cfg = cfg.struct
    h_out, h_own, h_pad, h_w = attend(0, "horiz", s_cfg.horizontal_layers)
    E_r, cls_r, row_off = pool(h_out, h_own, h_pad, h_w)
    v_out, v_own, v_pad, v_w = attend(1, "vert", s_cfg.vertical_layers)
    E_c, cls_c, col_off = pool(v_out, v_own, v_pad, v_w)
    return BatchFeatures(E_r, E_c, cls_r, cls_c, row_off, col_off, fitted_tables)


def _struct_block(model: StruBERT, dropout: float = 0.0) -> BlockConfig:
    s = model.config.struct
    return BlockConfig(model.d, s.heads, s.ffn_dim, dropout=dropout)


def batch_minibert(model: StruBERT, feats: BatchFeatures,
                   specs: list[tuple[str, int, int | None]], dropout: float = 0.0,
                   rng: np.random.Generator | None = None) -> Tensor:
    """[REP] outputs ``[Q, d]`` for sequences ``(rep, table_i, table_j or None)``.

    ``rep`` selects row (``"r"``) or column (``"c"``) features of the tables.
    """
    mcfg = model.config.minibert
    store = model.store
    d = model.d
    n_r = feats.E_r.shape[0]
    bank = T.concat([
        T.reshape(store["mb.rep_r"], (1, d)),
        T.reshape(store["mb.rep_c"], (1, d)),
        T.reshape(store["mb.sep"], (1, d)),
        feats.E_r,
        feats.E_c,
    ], axis=0)
    REP_R, REP_C, SEP, BASE_R, BASE_C = 0, 1, 2, 3, 3 + n_r

    seq_idx, seq_seg = [], []
    for rep, i, j in specs:
        span = feats.rows_of if rep == "r" else feats.cols_of
        base = BASE_R if rep == "r" else BASE_C
        a = [base + x for x in span(i)]
        b = [] if j is None else [base + x for x in span(j)]
        idx = [REP_R if rep == "r" else REP_C, *a, SEP, *b]
        if len(idx) > mcfg.max_pos:
            raise SequenceLengthError(f"pair sequence of {len(idx)} exceeds max_pos {mcfg.max_pos}")
        seq_idx.append(idx)
        seq_seg.append([SEGMENT_A] * (2 + len(a)) + [SEGMENT_B] * len(b))
    L = max(len(s) for s in seq_idx)
    idx = np.zeros((len(specs), L), dtype=np.intp)
    seg = np.zeros((len(specs), L), dtype=np.intp)
    pad = np.ones((len(specs), L), dtype=bool)
    for q, (ix, sg) in enumerate(zip(seq_idx, seq_seg)):
        idx[q, : len(ix)] = ix
        seg[q, : len(sg)] = sg
        pad[q, : len(ix)] = False
    x = T.take(bank, idx, axis=0)
    if mcfg.use_segments:
        x = x + T.take(store["mb.seg"], seg, axis=0)
    if mcfg.use_positions:
        x = x + T.take(store["mb.pos"], np.arange(L), axis=0)
    mask = key_padding_mask(pad) if pad.any() else None
    block = replace(mcfg.block, dropout=dropout)
    for i in range(mcfg.layers):
        x = transformer_layer(x, store, f"mb.layer{i}", block, rng, mask=mask)
    return x[:, 0, :]


def batch_pair_phi(model: StruBERT, feats: BatchFeatures, pairs: list[tuple[int, int]], dropout: float = 0.0,
                   rng: np.random.Generator | None = None) -> Tensor:
    """``[B, 4d]`` pair features in the fixed (F_rr, F_cc, rows, cols) order."""
    specs = [("r", i, j) for i, j in pairs] + [("c", i, j) for i, j in pairs]
    mb = batch_minibert(model, feats, specs, dropout, rng)
    n = len(pairs)
    left = [i for i, _ in pairs]
    right = [j for _, j in pairs]
    f_rr = T.take(feats.cls_r, left, axis=0) * T.take(feats.cls_r, right, axis=0)
    f_cc = T.take(feats.cls_c, left, axis=0) * T.take(feats.cls_c, right, axis=0)
    return T.concat([f_rr, f_cc, mb[:n], mb[n:]], axis=1)


def batch_query_phi(model: StruBERT, feats: BatchFeatures, tables: list[int], dropout: float = 0.0,
                    rng: np.random.Generator | None = None) -> Tensor:
    """``[B, 4d]`` keyword features in the fixed (rows, cols, cls_r, cls_c) order."""
    specs = [("r", t, None) for t in tables] + [("c", t, None) for t in tables]
    mb = batch_minibert(model, feats, specs, dropout, rng)
    n = len(tables)
    return T.concat([mb[:n], mb[n:], T.take(feats.cls_r, tables, axis=0),
                     T.take(feats.cls_c, tables, axis=0)], axis=1)


def pair_outputs(model: StruBERT, pairs: list[tuple[Table, Table]], head: str, dropout: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Scores ``[B]`` (``head='rank'``) or logits ``[B, 2]`` (``head='sim'``)."""
    index: dict[str, int] = {}
    items = []
    for ta, tb in pairs:
        for t in (ta, tb):
            if t.id not in index:
                index[t.id] = len(items)
                items.append((t, None))
    feats = batch_features(model, items, dropout, rng)
    phi = batch_pair_phi(model, feats, [(index[a.id], index[b.id]) for a, b in pairs], dropout, rng)
    return _head(model, phi, head)


def query_outputs(model: StruBERT, pairs: list[tuple[str, Table]], dropout: float = 0.0,
                  rng: np.random.Generator | None = None) -> Tensor:
    feats = batch_features(model, [(t, q) for q, t in pairs], dropout, rng)
    phi = batch_query_phi(model, feats, list(range(len(pairs))), dropout, rng)
    return _head(model, phi, "rank")


def _head(model: StruBERT, phi: Tensor, head: str) -> Tensor:
    out = T.matmul(phi, model.store[f"head.{head}.W"]) + model.store[f"head.{head}.b"]
    return T.reshape(out, (out.shape[0],)) if head == "rank" else out


def score_query_tables(model: StruBERT, query: str, tables: list[Table], chunk: int = 64) -> np.ndarray:
    """Keyword scores of ``query`` against each table, in input order."""
    out = [query_outputs(model, [(query, t) for t in tables[s:s + chunk]]).data
           for s in range(0, len(tables), chunk)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def score_table_pairs(model: StruBERT, query: Table, tables: list[Table], chunk: int = 64) -> np.ndarray:
    """Table-matching scores of ``query`` against each table, in input order."""
    out = [pair_outputs(model, [(query, t) for t in tables[s:s + chunk]], "rank").data
           for s in range(0, len(tables), chunk)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)
