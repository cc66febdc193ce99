"""Losses, cross-validation splits, the training loop and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .batch import pair_outputs, query_outputs
from .checkpoint import save_checkpoint
from .matcher import ModelConfig, StruBERT, similarity_probability
from .metrics import classification_metrics, rank_by_score, retrieval_metrics
from .nn import ConfigError, adam_step
from .tables import Corpus, Vocabulary, build_vocab, corpus_texts, similarity_pairs_from_qrels
from .tensor import Tape, Tensor

LOG = logging.getLogger(__name__)

TASKS = ("keyword_retrieval", "content_retrieval", "similarity")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "similarity"
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    schedule: str = "constant"  # or "linear": warmup then linear decay to 0
    warmup: float = 0.0  # fraction of total steps
    dropout: float = 0.0  # applied to every transformer block while training
    clip_norm: float = 0.0  # global gradient-norm cap; 0 disables
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    folds: int = 5
    ndcg_k: int = 5
    eval_every: int = 1
    min_freq: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.folds < 2:
            raise ConfigError("fold count must be at least 2")
        if self.schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup must be a fraction in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        model = ModelConfig.from_dict(obj.pop("model", {}))
        return cls(model=model, **obj)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape or pred.data.size == 0:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    diff = pred - Tensor(target)
    return T.mean(diff * diff)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    if not np.isin(labels, np.arange(logits.shape[1])).all():
        raise ValueError(f"labels must be in 0..{logits.shape[1] - 1}")
    logp = T.log_softmax_last(logits)
    picked = logp[np.arange(labels.shape[0]), labels.astype(np.intp)]
    return -T.mean(picked)


# ---------------------------------------------------------------------------
# examples and folds


@dataclass(frozen=True)
class Example:
    group: str  # fold unit: query id for retrieval, pair key for similarity
    left: str  # query text (keyword) or table id
    table_id: str
    grade: int

    @property
    def target(self) -> float:
        return self.grade / 2.0


def build_examples(corpus: Corpus, task: str) -> list[Example]:
    if task == "keyword_retrieval":
        out = []
        for j in corpus.judgments:
            q = corpus.queries.get(j.query_id)
            if q is None or not q.text:
                continue
            out.append(Example(j.query_id, q.text, j.table_id, j.grade))
        return out
    if task == "content_retrieval":
        out = []
        for j in corpus.judgments:
            q = corpus.queries.get(j.query_id)
            left = q.table_id if q is not None and q.table_id else j.query_id
            if left not in corpus.tables:
                continue
            out.append(Example(j.query_id, left, j.table_id, j.grade))
        return out
    if task == "similarity":
        direct = corpus.judgments and all(
            j.query_id in corpus.tables and j.grade in (0, 1) for j in corpus.judgments)
        if direct:
            pairs = [(j.query_id, j.table_id, j.grade) for j in corpus.judgments]
        else:
            pairs = similarity_pairs_from_qrels(corpus.judgments)
        return [Example(f"{a}|{b}", a, b, y) for a, b, y in pairs]
    raise ConfigError(f"unknown task {task!r}")


def kfold_split(examples: list[Example], k: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """(train indices, test indices) per fold; all examples of a group share a fold."""
    groups = sorted({e.group for e in examples})
    if len(groups) < k:
        raise ConfigError(f"{len(groups)} groups cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(groups))
    fold_of = {}
    for f, chunk in enumerate(np.array_split(order, k)):
        for i in chunk:
            fold_of[groups[i]] = f
    folds = []
    for f in range(k):
        test = [i for i, e in enumerate(examples) if fold_of[e.group] == f]
        train = [i for i, e in enumerate(examples) if fold_of[e.group] != f]
        folds.append((train, test))
    return folds


# ---------------------------------------------------------------------------
# forward passes


def batch_outputs(model: StruBERT, corpus: Corpus, batch: list[Example], task: str, dropout: float = 0.0,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Scores ``[B]`` for retrieval tasks, logits ``[B, 2]`` for similarity."""
    if task == "keyword_retrieval":
        for ex in batch:
            if not ex.left or not ex.left.strip():
                raise ValueError(f"query text for {ex.group!r} is empty")
        return query_outputs(model, [(ex.left, corpus.tables[ex.table_id]) for ex in batch], dropout, rng)
    pairs = [(corpus.tables[ex.left], corpus.tables[ex.table_id]) for ex in batch]
    return pair_outputs(model, pairs, "sim" if task == "similarity" else "rank", dropout, rng)


def batch_loss(model: StruBERT, corpus: Corpus, batch: list[Example], task: str, dropout: float = 0.0,
               rng: np.random.Generator | None = None) -> Tensor:
    out = batch_outputs(model, corpus, batch, task, dropout, rng)
    if task == "similarity":
        return cross_entropy_loss(out, [e.grade for e in batch])
    return mse_loss(out, [e.target for e in batch])


def dataset_loss(model: StruBERT, corpus: Corpus, examples: list[Example], task: str,
                 batch_size: int = 32) -> float:
    total = 0.0
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        total += float(batch_loss(model, corpus, chunk, task).data) * len(chunk)
    return total / len(examples)


def predict(model: StruBERT, corpus: Corpus, examples: list[Example], task: str,
            batch_size: int = 64) -> np.ndarray:
    """Scores (retrieval) or p(similar) (similarity) per example."""
    out = []
    for s in range(0, len(examples), batch_size):
        res = batch_outputs(model, corpus, examples[s:s + batch_size], task).data
        if task == "similarity":
            out.extend(similarity_probability(row.astype(np.float64))[1] for row in res)
        else:
            out.extend(float(x) for x in res)
    return np.asarray(out, dtype=np.float64)


def evaluate_examples(model: StruBERT, corpus: Corpus, examples: list[Example], task: str,
                      k: int = 5) -> dict:
    preds = predict(model, corpus, examples, task)
    if task == "similarity":
        return classification_metrics((preds >= 0.5).astype(int), [e.grade for e in examples])
    scores: dict[str, dict[str, float]] = {}
    qrels: dict[str, dict[str, int]] = {}
    for ex, s in zip(examples, preds):
        scores.setdefault(ex.group, {})[ex.table_id] = float(s)
        qrels.setdefault(ex.group, {})[ex.table_id] = ex.grade
    rankings = {q: rank_by_score(s) for q, s in scores.items()}
    return retrieval_metrics(rankings, qrels, k)


# ---------------------------------------------------------------------------
# training


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1)


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    """Learning rate for 0-based ``step`` of ``total`` optimizer steps."""
    if cfg.schedule == "constant":
        return cfg.lr
    warm = int(round(cfg.warmup * total))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr * max(0.0, (total - step) / max(1, total - warm))


def clip_gradients(store, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    grads = [p.grad for _, p in store.items() if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def fit(model: StruBERT, corpus: Corpus, examples: list[Example], cfg: TrainConfig,
        eval_examples: list[Example] | None = None,
        on_epoch: Callable[[int, float, dict | None], None] | None = None) -> list[dict]:
    """Adam over shuffled mini-batches; returns per-epoch history."""
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1]) if cfg.dropout > 0 else None
    history = []
    per_epoch = -(-len(examples) // cfg.batch_size)
    total = per_epoch * cfg.epochs
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(examples))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[s:s + cfg.batch_size]]
            try:
                with Tape() as tape:
                    loss = batch_loss(model, corpus, batch, cfg.task, cfg.dropout, drop_rng)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise FloatingPointError("loss is not finite")
                    tape.backward(loss)
            except FloatingPointError as exc:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}, batch {s // cfg.batch_size}: {exc}") from exc
            if cfg.clip_norm:
                clip_gradients(model.store, cfg.clip_norm)
            adam_step(model.store, learning_rate(cfg, step, total), cfg.beta1, cfg.beta2, cfg.adam_eps)
            step += 1
            losses.append(value * len(batch))
        entry = {"epoch": epoch, "loss": float(np.sum(losses) / len(examples))}
        if eval_examples and cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            entry["metrics"] = evaluate_examples(model, corpus, eval_examples, cfg.task, cfg.ndcg_k)
        history.append(entry)
        LOG.info("epoch %d loss %.5f %s", epoch, entry["loss"], entry.get("metrics", ""))
        if on_epoch:
            on_epoch(epoch, entry["loss"], entry.get("metrics"))
    return history


def make_vocab(corpus: Corpus, cfg: TrainConfig) -> Vocabulary:
    return build_vocab(corpus_texts(corpus), cfg.min_freq)


def _mean_metrics(per_fold: list[dict]) -> dict:
    keys = [k for k, v in per_fold[0].items() if isinstance(v, float)]
    return {k: float(np.mean([m[k] for m in per_fold])) for k in keys}


def cross_validate(cfg: TrainConfig, corpus: Corpus, vocab: Vocabulary | None = None,
                   checkpoint_dir=None, fold_ids: list[int] | None = None) -> tuple[list[StruBERT], dict]:
    """k-fold training and evaluation. Returns the fold models and a JSON-able report."""
    start = time.perf_counter()
    vocab = vocab or make_vocab(corpus, cfg)
    examples = build_examples(corpus, cfg.task)
    if not examples:
        raise ConfigError(f"corpus has no examples for task {cfg.task}")
    folds = kfold_split(examples, cfg.folds, cfg.seed)
    models, fold_reports = [], []
    with _single_thread():
        for f, (train_idx, test_idx) in enumerate(folds):
            if fold_ids is not None and f not in fold_ids:
                continue
            model_cfg = ModelConfig.from_dict(cfg.model.to_dict())
            model_cfg.seed = cfg.seed + f
            model = StruBERT(model_cfg, vocab)
            train = [examples[i] for i in train_idx]
            test = [examples[i] for i in test_idx]
            history = fit(model, corpus, train, cfg, test)
            metrics = history[-1].get("metrics") if history else None
            if metrics is None:
                metrics = evaluate_examples(model, corpus, test, cfg.task, cfg.ndcg_k)
            fold_reports.append({"fold": f, "train_size": len(train), "test_size": len(test),
                                 "metrics": metrics, "history": history})
            models.append(model)
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(checkpoint_dir) / f"fold{f}.strb", model,
                                {"task": cfg.task, "fold": f, "train": cfg.to_dict(),
                                 "config_hash": cfg.config_hash()})
    report = {
        "task": cfg.task,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "folds": fold_reports,
        "mean": _mean_metrics([r["metrics"] for r in fold_reports]),
        "timing": {"seconds": time.perf_counter() - start},
    }
    return models, report


def train_full(cfg: TrainConfig, corpus: Corpus, vocab: Vocabulary | None = None) -> tuple[StruBERT, dict]:
    """Train one model on every example (no held-out fold)."""
    vocab = vocab or make_vocab(corpus, cfg)
    examples = build_examples(corpus, cfg.task)
    model_cfg = ModelConfig.from_dict(cfg.model.to_dict())
    model_cfg.seed = cfg.seed
    model = StruBERT(model_cfg, vocab)
    with _single_thread():
        history = fit(model, corpus, examples, cfg)
    return model, {"task": cfg.task, "seed": cfg.seed, "config_hash": cfg.config_hash(),
                   "config": cfg.to_dict(), "history": history}


def evaluate_fold(model: StruBERT, corpus: Corpus, cfg: TrainConfig, fold: int) -> dict:
    """Recompute a fold's test metrics for a model trained on that fold's split."""
    examples = build_examples(corpus, cfg.task)
    _, test_idx = kfold_split(examples, cfg.folds, cfg.seed)[fold]
    with _single_thread():
        return evaluate_examples(model, corpus, [examples[i] for i in test_idx], cfg.task, cfg.ndcg_k)
