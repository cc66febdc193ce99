import math
import struct

import numpy as np
import pytest

from conftest import tiny_config
from gradcheck import check_op
from strubert import tensor as T
from strubert.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from strubert.nn import ConfigError, ParamStore
from strubert.synthetic import keyword_corpus, similarity_corpus, wikitables_shaped_corpus
from strubert.tables import Corpus, Judgment
from strubert.tensor import Tensor
from strubert.train import (Example, TrainConfig, TrainingDivergedError, batch_loss, build_examples,
                            clip_gradients, cross_entropy_loss, cross_validate, dataset_loss, evaluate_examples,
                            evaluate_fold, fit, kfold_split, learning_rate, make_vocab, mse_loss, train_full)
from strubert.matcher import StruBERT


def _cfg(**kw):
    base = dict(task="similarity", epochs=2, batch_size=4, lr=1e-3, eval_every=0, model=tiny_config())
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def sim_corpus():
    return similarity_corpus(40, seed=3, n_topics=6, tables_per_topic=5)


class TestLosses:
    def test_mse_zero(self):
        assert float(mse_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).data) == 0.0

    def test_mse_example(self):
        assert float(mse_loss(Tensor([0.0]), [2.0]).data) == 4.0

    def test_mse_gradient(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=5)
        pred = rng.normal(size=5)
        p = Tensor(pred, requires_grad=True)
        with T.Tape() as tape:
            tape.backward(mse_loss(p, target))
        np.testing.assert_allclose(p.grad, 2 * (pred - target) / 5, atol=1e-15)
        assert check_op(lambda x: T.reshape(mse_loss(x, target), (1,)), [pred]) < 1e-6

    def test_mse_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(Tensor([1.0, 2.0]), [1.0])

    @pytest.mark.parametrize("label", [0, 1])
    def test_ce_uniform(self, label):
        assert float(cross_entropy_loss(Tensor([[0.0, 0.0]]), [label]).data) == pytest.approx(math.log(2), abs=1e-15)

    def test_ce_confident(self):
        assert float(cross_entropy_loss(Tensor([[-10.0, 10.0]]), [1]).data) < 1e-3

    def test_ce_lse_oracle(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(7, 2)) * 4
        y = rng.integers(0, 2, size=7)
        ref = np.mean([np.logaddexp(z[i, 0], z[i, 1]) - z[i, y[i]] for i in range(7)])
        assert float(cross_entropy_loss(Tensor(z), y).data) == pytest.approx(ref, abs=1e-10)

    @pytest.mark.parametrize("labels", [[2], [-1], [0, 1]])
    def test_ce_invalid(self, labels):
        with pytest.raises(ValueError):
            cross_entropy_loss(Tensor([[0.0, 1.0]]), labels)


class TestFolds:
    def test_sixty_queries(self):
        ex = build_examples(wikitables_shaped_corpus(), "keyword_retrieval")
        folds = kfold_split(ex, 5, seed=0)
        for train, test in folds:
            assert len({ex[i].group for i in test}) == 12
            assert not {ex[i].group for i in test} & {ex[i].group for i in train}

    def test_cover_exactly_once(self, sim_corpus):
        ex = build_examples(sim_corpus, "similarity")
        folds = kfold_split(ex, 5, seed=1)
        seen = sorted(i for _, test in folds for i in test)
        assert seen == list(range(len(ex)))
        for train, test in folds:
            assert sorted(train + test) == list(range(len(ex)))

    def test_deterministic(self, sim_corpus):
        ex = build_examples(sim_corpus, "similarity")
        assert kfold_split(ex, 5, 7) == kfold_split(ex, 5, 7)
        assert kfold_split(ex, 5, 7) != kfold_split(ex, 5, 8)

    def test_too_few_groups(self):
        ex = [Example("a", "x", "t", 1), Example("b", "x", "t", 0)]
        with pytest.raises(ConfigError):
            kfold_split(ex, 3, 0)

    def test_similarity_pairs_split_by_pair(self, sim_corpus):
        ex = build_examples(sim_corpus, "similarity")
        assert len({e.group for e in ex}) == len(ex) == 40


class TestConfig:
    @pytest.mark.parametrize("kw", [{"folds": 1}, {"task": "nope"}, {"schedule": "cosine"}, {"warmup": 1.0},
                                    {"dropout": -0.1}, {"clip_norm": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            _cfg(**kw)

    def test_round_trip_and_hash(self):
        cfg = _cfg(lr=3e-4)
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg and again.config_hash() == cfg.config_hash()
        assert _cfg(lr=1e-4).config_hash() != cfg.config_hash()

    def test_linear_schedule(self):
        cfg = _cfg(schedule="linear", warmup=0.2, lr=1.0)
        lrs = [learning_rate(cfg, s, 10) for s in range(10)]
        assert lrs[:2] == [0.5, 1.0]
        assert lrs[2] == 1.0 and lrs[-1] == pytest.approx(1 / 8)
        assert all(a >= b for a, b in zip(lrs[1:], lrs[2:]))
        assert learning_rate(_cfg(lr=0.3), 5, 10) == 0.3

    def test_clip_gradients(self):
        store = ParamStore(np.float64)
        a, b = store.add("a", np.zeros(2)), store.add("b", np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_gradients(store, 1.0) == 5.0
        np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
        assert clip_gradients(store, 10.0) == pytest.approx(1.0)


class TestTraining:
    def test_first_epoch_reduces_loss(self, sim_corpus):
        cfg = _cfg(epochs=1)
        vocab = make_vocab(sim_corpus, cfg)
        ex = build_examples(sim_corpus, cfg.task)
        model = StruBERT(tiny_config(), vocab)
        before = dataset_loss(model, sim_corpus, ex, cfg.task)
        fit(model, sim_corpus, ex, cfg)
        assert dataset_loss(model, sim_corpus, ex, cfg.task) < before

    def test_overfits_ten_pairs(self, sim_corpus):
        ten = Corpus(sim_corpus.tables, {}, sim_corpus.judgments[:10])
        cfg = _cfg(epochs=100, batch_size=4, lr=2e-3)  # 3 steps per epoch
        vocab = make_vocab(ten, cfg)
        ex = build_examples(ten, cfg.task)
        model = StruBERT(tiny_config(), vocab)
        history = fit(model, ten, ex, cfg)
        assert len(history) * 3 <= 300
        assert evaluate_examples(model, ten, ex, cfg.task)["accuracy"] == 1.0

    def test_divergence_is_reported(self, sim_corpus):
        cfg = _cfg(epochs=1)
        model = StruBERT(tiny_config(), make_vocab(sim_corpus, cfg))
        model.store["head.sim.W"].data[:] = np.inf
        with pytest.raises(TrainingDivergedError), np.errstate(invalid="ignore"):
            fit(model, sim_corpus, build_examples(sim_corpus, cfg.task), cfg)

    def test_empty_query_rejected(self):
        corpus = keyword_corpus(20, 2, 2, seed=0, tables_per_topic=5)
        ex = build_examples(corpus, "keyword_retrieval")
        model = StruBERT(tiny_config(), make_vocab(corpus, _cfg()))
        bad = [Example(ex[0].group, " ", ex[0].table_id, 1)]
        with pytest.raises(ValueError):
            batch_loss(model, corpus, bad, "keyword_retrieval")

    def test_graded_targets_scaled(self):
        assert [Example("q", "x", "t", g).target for g in (0, 1, 2)] == [0.0, 0.5, 1.0]

    def test_dropout_changes_training_but_not_eval(self, sim_corpus):
        ex = build_examples(sim_corpus, "similarity")[:8]
        model = StruBERT(tiny_config(), make_vocab(sim_corpus, _cfg()))
        plain = float(batch_loss(model, sim_corpus, ex, "similarity").data)
        dropped = float(batch_loss(model, sim_corpus, ex, "similarity", 0.3, np.random.default_rng(0)).data)
        assert plain != dropped
        assert float(batch_loss(model, sim_corpus, ex, "similarity", 0.3, None).data) == plain


@pytest.fixture(scope="module")
def runs(tmp_path_factory, sim_corpus):
    """Two identical 2-fold runs, each writing fold checkpoints."""
    cfg = _cfg(epochs=1, folds=2, eval_every=1)
    out = []
    for r in range(2):
        d = tmp_path_factory.mktemp(f"run{r}")
        models, report = cross_validate(cfg, sim_corpus, checkpoint_dir=d)
        out.append((d, models, report))
    return cfg, out


class TestDeterminismAndPersistence:
    def test_checkpoints_bitwise_identical(self, runs):
        _, ((d0, _, _), (d1, _, _)) = runs
        for f in (0, 1):
            assert (d0 / f"fold{f}.strb").read_bytes() == (d1 / f"fold{f}.strb").read_bytes()

    def test_reports_identical_except_timing(self, runs):
        _, ((_, _, r0), (_, _, r1)) = runs
        strip = lambda r: {k: v for k, v in r.items() if k != "timing"}  # noqa: E731
        assert strip(r0) == strip(r1)
        assert r0["seed"] == 0 and len(r0["config_hash"]) == 16

    def test_fold_mean_is_arithmetic_mean(self, runs):
        _, ((_, _, r0), _) = runs
        acc = [f["metrics"]["accuracy"] for f in r0["folds"]]
        assert r0["mean"]["accuracy"] == pytest.approx(np.mean(acc), abs=1e-15)
        assert all(0.0 <= v <= 1.0 for v in r0["mean"].values())

    def test_round_trip_scores_bitwise(self, runs, sim_corpus, appendix):
        _, ((d0, models, _), _) = runs
        loaded, meta = load_checkpoint(d0 / "fold0.strb")
        assert meta["fold"] == 0 and meta["task"] == "similarity"
        clubs, teams = appendix
        pairs = [(sim_corpus.tables[j.query_id], sim_corpus.tables[j.table_id]) for j in sim_corpus.judgments[:6]]
        for a, b in pairs + [(clubs, teams)]:
            assert loaded.similarity_proba(a, b) == models[0].similarity_proba(a, b)
            assert loaded.score_table_pair(a, b) == models[0].score_table_pair(a, b)

    def test_evaluate_reproduces_fold_metrics(self, runs, sim_corpus):
        cfg, ((d0, _, r0), _) = runs
        loaded, meta = load_checkpoint(d0 / "fold1.strb")
        again = evaluate_fold(loaded, sim_corpus, TrainConfig.from_dict(meta["train"]), 1)
        assert again == r0["folds"][1]["metrics"]

    def test_format_header(self, runs):
        _, ((d0, _, _), _) = runs
        buf = (d0 / "fold0.strb").read_bytes()
        assert buf[:4] == MAGIC == b"STRB"
        version, n = struct.unpack_from("<II", buf, 4)
        assert version == 1 and buf[12:12 + n].startswith(b"{")

    def test_corrupt_checkpoints(self, runs, tmp_path):
        _, ((d0, _, _), _) = runs
        buf = (d0 / "fold0.strb").read_bytes()
        (tmp_path / "magic.strb").write_bytes(b"XXXX" + buf[4:])
        (tmp_path / "tail.strb").write_bytes(buf + b"\0")
        for name in ("magic.strb", "tail.strb"):
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / name)

    def test_save_load_untrained(self, tmp_path, fig2):
        model = StruBERT(tiny_config(), make_vocab(Corpus({fig2.id: fig2}), _cfg()))
        save_checkpoint(tmp_path / "m.strb", model, {"note": "x"})
        loaded, meta = load_checkpoint(tmp_path / "m.strb")
        assert meta == {"note": "x"}
        assert loaded.score_table_pair(fig2, fig2) == model.score_table_pair(fig2, fig2)


def test_train_full_history(sim_corpus):
    model, report = train_full(_cfg(epochs=2), sim_corpus)
    assert [h["epoch"] for h in report["history"]] == [1, 2]
    assert report["seed"] == 0 and "config_hash" in report


def test_content_retrieval_examples():
    from strubert.synthetic import content_corpus

    corpus = content_corpus(n_query_tables=4, n_topics=4, tables_per_topic=3, n_irrelevant=2)
    ex = build_examples(corpus, "content_retrieval")
    assert ex and all(e.left in corpus.tables for e in ex)
    model = StruBERT(tiny_config(), make_vocab(corpus, _cfg()))
    assert float(batch_loss(model, corpus, ex[:4], "content_retrieval").data) >= 0.0
    # graded judgments double as similarity pairs
    assert all(isinstance(j, Judgment) for j in corpus.judgments)
