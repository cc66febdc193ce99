"""miniBERT cross-matching, coarse interactions and the task heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, encode_table, init_encoder
from .nn import BlockConfig, ConfigError, ParamStore, init_block, transformer_layer, truncated_normal
from .struct_attention import StructConfig, StructFeatures, features_from_encoded, init_struct_attention
from .tables import Limits, Table, Vocabulary
from .tensor import DimensionError, Tensor

SEGMENT_A, SEGMENT_B = 0, 1
# order of the four blocks of the pair feature vector; bump on change
PHI_LAYOUT_VERSION = 1


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class MiniBertConfig:
    d: int = 64
    heads: int = 4
    layers: int = 1
    ffn_dim: int = 128
    max_pos: int = 64
    use_positions: bool = True
    use_segments: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"hidden size {self.d} not divisible by {self.heads} heads")

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.d, self.heads, self.ffn_dim)


def init_minibert(store: ParamStore, cfg: MiniBertConfig, rng: np.random.Generator) -> None:
    d = cfg.d
    store.add("mb.rep_r", truncated_normal(rng, (d,)))
    store.add("mb.rep_c", truncated_normal(rng, (d,)))
    store.add("mb.sep", truncated_normal(rng, (d,)))
    store.add("mb.seg", truncated_normal(rng, (2, d)))
    store.add("mb.pos", truncated_normal(rng, (cfg.max_pos, d)))
    for i in range(cfg.layers):
        init_block(store, f"mb.layer{i}", cfg.block, rng)
    store.add("head.rank.W", truncated_normal(rng, (4 * d, 1)))
    store.add("head.rank.b", np.zeros(1))
    store.add("head.sim.W", truncated_normal(rng, (4 * d, 2)))
    store.add("head.sim.b", np.zeros(2))


@dataclass
class PairSequence:
    vectors: Tensor  # [n, d]
    segment_ids: np.ndarray
    position_ids: np.ndarray
    labels: list[str]

    def __len__(self) -> int:
        return self.vectors.shape[0]


def build_pair_sequence(rep: str, A: Tensor, B: Tensor | None, store: ParamStore,
                        cfg: MiniBertConfig = MiniBertConfig()) -> PairSequence:
    """``[REP] + A + [SEP] (+ B)`` plus segment and position embeddings.

    ``rep`` is ``"r"`` or ``"c"``. With ``B=None`` this is the single-operand
    sequence used for keyword queries, all segment A.
    """
    if rep not in ("r", "c"):
        raise ValueError(f"rep must be 'r' or 'c', got {rep!r}")
    n_i = A.shape[0]
    n_j = 0 if B is None else B.shape[0]
    n = 2 + n_i + n_j
    if n > cfg.max_pos:
        raise SequenceLengthError(f"pair sequence of {n} exceeds max_pos {cfg.max_pos}")
    d = A.shape[-1]
    parts = [T.reshape(store[f"mb.rep_{rep}"], (1, d)), A, T.reshape(store["mb.sep"], (1, d))]
    if B is not None:
        parts.append(B)
    content = T.concat(parts, axis=0)
    seg = np.array([SEGMENT_A] * (2 + n_i) + [SEGMENT_B] * n_j, dtype=np.intp)
    pos = np.arange(n, dtype=np.intp)
    x = content
    if cfg.use_segments:
        x = x + T.take(store["mb.seg"], seg, axis=0)
    if cfg.use_positions:
        x = x + T.take(store["mb.pos"], pos, axis=0)
    labels = [f"[REP]_{rep}"] + [f"A{k}" for k in range(n_i)] + ["[SEP]"] + [f"B{k}" for k in range(n_j)]
    return PairSequence(x, seg, pos, labels)


def minibert_forward(seq: PairSequence, store: ParamStore, cfg: MiniBertConfig = MiniBertConfig(),
                     weights_out: list | None = None) -> Tensor:
    """Hidden state at the [REP] slot after the transformer stack."""
    x = seq.vectors
    for i in range(cfg.layers):
        x = transformer_layer(x, store, f"mb.layer{i}", cfg.block, weights_out=weights_out)
    return x[0]


def coarse_interactions(cls_x: Tensor, cls_y: Tensor) -> Tensor:
    if cls_x.shape != cls_y.shape:
        raise DimensionError(f"coarse features differ in shape: {cls_x.shape} vs {cls_y.shape}")
    return T.mul(cls_x, cls_y)


def pair_phi(fi: StructFeatures, fj: StructFeatures, store: ParamStore,
             cfg: MiniBertConfig = MiniBertConfig()) -> Tensor:
    """F_rr, F_cc, miniBERT row aggregate, miniBERT column aggregate."""
    rows = minibert_forward(build_pair_sequence("r", fi.E_r, fj.E_r, store, cfg), store, cfg)
    cols = minibert_forward(build_pair_sequence("c", fi.E_c, fj.E_c, store, cfg), store, cfg)
    return T.concat([coarse_interactions(fi.cls_r, fj.cls_r),
                     coarse_interactions(fi.cls_c, fj.cls_c), rows, cols], axis=0)


def query_phi(f: StructFeatures, store: ParamStore, cfg: MiniBertConfig = MiniBertConfig()) -> Tensor:
    """miniBERT row aggregate, miniBERT column aggregate, cls_r, cls_c."""
    rows = minibert_forward(build_pair_sequence("r", f.E_r, None, store, cfg), store, cfg)
    cols = minibert_forward(build_pair_sequence("c", f.E_c, None, store, cfg), store, cfg)
    return T.concat([rows, cols, f.cls_r, f.cls_c], axis=0)


def rank_head(phi: Tensor, store: ParamStore) -> Tensor:
    """Scalar relevance score, shape ``[1]``."""
    return T.matmul(T.reshape(phi, (1, phi.shape[0])), store["head.rank.W"])[0] + store["head.rank.b"]


def similarity_logits(phi: Tensor, store: ParamStore) -> Tensor:
    """``[2]`` logits ordered (dissimilar, similar)."""
    return T.matmul(T.reshape(phi, (1, phi.shape[0])), store["head.sim.W"])[0] + store["head.sim.b"]


def similarity_probability(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    struct: StructConfig = field(default_factory=StructConfig)
    minibert: MiniBertConfig = field(default_factory=MiniBertConfig)
    limits: Limits = field(default_factory=Limits)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "struct": asdict(self.struct),
                "minibert": asdict(self.minibert), "limits": asdict(self.limits), "seed": self.seed}

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig(**obj.get("encoder", {})),
            struct=StructConfig(**obj.get("struct", {})),
            minibert=MiniBertConfig(**obj.get("minibert", {})),
            limits=Limits(**obj.get("limits", {})),
            seed=int(obj.get("seed", 0)),
        )


class StruBERT:
    """Encoder, axis attention and miniBERT sharing one parameter store."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, store: ParamStore | None = None,
                 dtype=np.float32):
        if config.encoder.vocab_size != len(vocab):
            config.encoder = EncoderConfig(**{**asdict(config.encoder), "vocab_size": len(vocab)})
        if config.minibert.d != config.encoder.d:
            raise ConfigError("miniBERT and encoder hidden sizes differ")
        needed = 2 + 2 * max(config.limits.max_rows, config.limits.max_cols)
        if config.minibert.max_pos < needed:
            raise ConfigError(f"max_pos {config.minibert.max_pos} < {needed} needed for the row/column caps")
        self.config = config
        self.vocab = vocab
        if store is None:
            rng = np.random.default_rng(config.seed)
            store = ParamStore(np.float64)
            init_encoder(store, config.encoder, rng)
            init_struct_attention(store, config.encoder.d, config.struct, rng)
            init_minibert(store, config.minibert, rng)
            store = store.astype(dtype)
        self.store = store

    @property
    def d(self) -> int:
        return self.config.encoder.d

    def astype(self, dtype) -> "StruBERT":
        return StruBERT(self.config, self.vocab, self.store.astype(dtype))

    def features(self, table: Table, query: str | None = None) -> StructFeatures:
        enc = encode_table(table, query, self.config.encoder, self.store, self.vocab, self.config.limits)
        return features_from_encoded(enc, self.store, self.config.struct)

    def pair_phi(self, fi: StructFeatures, fj: StructFeatures) -> Tensor:
        return pair_phi(fi, fj, self.store, self.config.minibert)

    def query_phi(self, f: StructFeatures) -> Tensor:
        return query_phi(f, self.store, self.config.minibert)

    def pair_score_tensor(self, fi: StructFeatures, fj: StructFeatures) -> Tensor:
        return rank_head(self.pair_phi(fi, fj), self.store)

    def pair_logits_tensor(self, fi: StructFeatures, fj: StructFeatures) -> Tensor:
        return similarity_logits(self.pair_phi(fi, fj), self.store)

    def query_score_tensor(self, query: str, table: Table) -> Tensor:
        if not query or not query.strip():
            raise ValueError("query text is empty")
        return rank_head(self.query_phi(self.features(table, query)), self.store)

    def score_table_pair(self, ti: Table, tj: Table) -> float:
        return float(self.pair_score_tensor(self.features(ti), self.features(tj)).data[0])

    def score_query_table(self, query: str, table: Table) -> float:
        return float(self.query_score_tensor(query, table).data[0])

    def similarity_proba(self, ti: Table, tj: Table) -> float:
        logits = self.pair_logits_tensor(self.features(ti), self.features(tj)).data
        return float(similarity_probability(logits.astype(np.float64))[1])

    def classify_pair(self, ti: Table, tj: Table) -> tuple[bool, float]:
        """(similar?, p(similar)); a probability of exactly 0.5 counts as similar."""
        p = self.similarity_proba(ti, tj)
        return p >= 0.5, p

    def dump_attention(self, ti: Table, tj: Table | str, rep: str = "c") -> dict:
        """Per-head miniBERT attention over the column (``rep='c'``) or row
        sequence of a table pair, or of a query-table input when ``tj`` is text.
        Computed in float64 so each row sums to 1 to ~1e-15 whatever the stored dtype."""
        if self.store.dtype != np.float64:
            return self.astype(np.float64).dump_attention(ti, tj, rep)
        if isinstance(tj, str):
            f = self.features(ti, tj)
            A = f.E_c if rep == "c" else f.E_r
            seq = build_pair_sequence(rep, A, None, self.store, self.config.minibert)
        else:
            fi, fj = self.features(ti), self.features(tj)
            A, B = (fi.E_c, fj.E_c) if rep == "c" else (fi.E_r, fj.E_r)
            seq = build_pair_sequence(rep, A, B, self.store, self.config.minibert)
        weights: list = []
        minibert_forward(seq, self.store, self.config.minibert, weights_out=weights)
        heads = weights[-1]  # [heads, n, n]
        labels = list(seq.labels)
        names = [_axis_names(f.table, rep) for f in ((f,) if isinstance(tj, str) else (fi, fj))]
        n_i = len(names[0])
        labels[1:1 + n_i] = names[0]
        if len(names) > 1:
            labels[2 + n_i:] = names[1]
        return {"heads": heads.astype(float).tolist(), "labels": labels}


def _axis_names(table: Table | None, rep: str) -> list[str]:
    if table is None:
        return []
    if rep == "c":
        return list(table.headers)
    return [f"row {k}" for k in range(table.n_rows)]
