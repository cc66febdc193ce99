import numpy as np
import pytest

from strubert.encoder import EncoderConfig
from strubert.matcher import MiniBertConfig, ModelConfig, StruBERT
from strubert.struct_attention import StructConfig
from strubert.synthetic import appendix_tables, figure2_table
from strubert.tables import Corpus, Limits, Query, build_vocab, corpus_texts


def tiny_config(d: int = 16, positions: bool = True, layers: int = 1, seed: int = 0,
                limits: Limits = Limits()) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(layers=layers, d=d, heads=2, ffn_dim=2 * d, positions_enabled=positions),
        struct=StructConfig(horizontal_layers=layers, vertical_layers=layers, heads=2, ffn_dim=2 * d),
        minibert=MiniBertConfig(d=d, ffn_dim=2 * d),
        limits=limits,
        seed=seed,
    )


def make_model(tables=(), queries=(), perturb: float = 0.3, dtype=np.float64, **kw) -> StruBERT:
    """Small f64 model over the vocabulary of ``tables``/``queries``.

    ``perturb`` adds N(0, perturb) noise to every parameter so that properties
    are checked away from the near-degenerate initial point.
    """
    corpus = Corpus({t.id: t for t in tables}, {f"q{i}": Query(f"q{i}", q) for i, q in enumerate(queries)})
    vocab = build_vocab(corpus_texts(corpus))
    model = StruBERT(tiny_config(**kw), vocab, dtype=dtype)
    if perturb:
        rng = np.random.default_rng(1234)
        for _, p in model.store.items():
            p.data += rng.normal(scale=perturb, size=p.shape).astype(p.data.dtype)
    return model


@pytest.fixture
def fig2():
    return figure2_table()


@pytest.fixture
def appendix():
    return appendix_tables()


# ---------------------------------------------------------------------------
# acceptance reporting

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records the outcome of criterion ``n``."""

    def record(n: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[n] = (bool(ok), detail)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and rep.failed and item.name.startswith("test_") and "acceptance" in item.keywords:
        n = int(item.name.split("_")[1])
        if n not in _ACCEPTANCE:
            _ACCEPTANCE[n] = (False, f"error: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
