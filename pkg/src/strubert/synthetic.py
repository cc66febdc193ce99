"""Synthetic corpora in the on-disk table/query/qrels formats, plus the small
hand-written example tables used by the docs and tests."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .tables import Corpus, Judgment, Query, Table

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kl", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


class WordSource:
    """Unique pseudo-words; no two calls ever return the same word."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[str] = set()

    def word(self) -> str:
        while True:
            n = int(self.rng.integers(2, 4))
            w = "".join(self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) for _ in range(n))
            if w not in self.used:
                self.used.add(w)
                return w

    def words(self, n: int) -> list[str]:
        return [self.word() for _ in range(n)]


@dataclass
class Topic:
    headers: list[str]
    cells: list[str]
    context: list[str]


def _topic(src: WordSource, n_headers: int = 4, n_cells: int = 12, n_context: int = 4) -> Topic:
    return Topic(src.words(n_headers), src.words(n_cells), src.words(n_context))


def _topic_table(rng: np.random.Generator, topic: Topic, tid: str, n_cols: int = 3, n_rows: int = 3,
                 facet: str | None = None) -> Table:
    """A table over ``n_cols`` of the topic's headers; ``facet`` adds one more
    column headed by that word (values from the topic's cell words)."""
    idx = sorted(rng.choice(len(topic.headers), size=n_cols, replace=False))
    headers = [topic.headers[i] for i in idx] + ([facet] if facet else [])
    rows = [[str(rng.choice(topic.cells)) for _ in headers] for _ in range(n_rows)]
    ctx = list(rng.choice(topic.context, size=2, replace=False))
    meta = [ctx[0], " ".join(ctx), topic.context[-1]]
    return Table.from_rows(tid, headers, rows, meta)


def similarity_corpus(n_pairs: int = 400, seed: int = 0, n_topics: int = 8,
                      tables_per_topic: int = 12) -> Corpus:
    """Balanced table pairs. Positives come from one topic (>= 2 shared headers,
    overlapping cell words); negatives from two topics with disjoint vocabularies.
    Judgments use the first table's id as the query id, labels 0/1."""
    rng = np.random.default_rng(seed)
    src = WordSource(rng)
    topics = [_topic(src) for _ in range(n_topics)]
    tables: dict[str, Table] = {}
    members: list[list[str]] = []
    for ti, topic in enumerate(topics):
        ids = []
        for j in range(tables_per_topic):
            tid = f"t{ti:03d}_{j}"
            tables[tid] = _topic_table(rng, topic, tid)
            ids.append(tid)
        members.append(ids)

    def overlapping(a: str, b: str) -> bool:
        ta, tb = tables[a], tables[b]
        cells_a = {v for r in ta.cells for v in r}
        cells_b = {v for r in tb.cells for v in r}
        return len(set(ta.headers) & set(tb.headers)) >= 2 and bool(cells_a & cells_b)

    pos_pool = [p for ids in members for p in combinations(ids, 2) if overlapping(*p)]
    n_pos = n_pairs // 2
    if len(pos_pool) < n_pos:
        raise ValueError("not enough same-topic pairs; raise n_topics or tables_per_topic")
    pos = [pos_pool[i] for i in rng.choice(len(pos_pool), size=n_pos, replace=False)]
    neg: set[tuple[str, str]] = set()
    while len(neg) < n_pairs - n_pos:
        a, b = rng.choice(n_topics, size=2, replace=False)
        pair = (str(rng.choice(members[a])), str(rng.choice(members[b])))
        neg.add(tuple(sorted(pair)))
    judgments = [Judgment(a, b, 1) for a, b in pos] + [Judgment(a, b, 0) for a, b in sorted(neg)]
    order = rng.permutation(len(judgments))
    return Corpus(tables, {}, [judgments[i] for i in order])


def keyword_corpus(n_tables: int = 200, n_queries: int = 200, n_irrelevant: int = 5, seed: int = 0,
                   tables_per_topic: int = 10, query_words: int = 3, n_related: int | None = 4) -> Corpus:
    """Keyword queries drawn from a target table's metadata and headers.

    Tables of a topic share headers and context words. Each table also has
    one facet column whose header is unique within its topic and reused by
    every topic, so the target is the one table matching both the facet and
    the topic. A query is its target's facet header plus ``query_words - 1``
    distinct words sampled from the target's metadata and other headers.
    Grades: target 2, the rest of its topic 1 (``n_related`` of them sampled
    if given), sampled tables of other topics 0.
    """
    rng = np.random.default_rng(seed)
    src = WordSource(rng)
    n_topics = n_tables // tables_per_topic
    facets = src.words(tables_per_topic)
    tables: dict[str, Table] = {}
    facet_of: dict[str, str] = {}
    topic_of: dict[str, int] = {}
    by_topic: list[list[str]] = []
    for ti in range(n_topics):
        topic = _topic(src)
        ids = []
        for j in range(tables_per_topic):
            tid = f"t{ti:03d}_{j}"
            tables[tid] = _topic_table(rng, topic, tid, facet=facets[j])
            facet_of[tid] = facets[j]
            topic_of[tid] = ti
            ids.append(tid)
        by_topic.append(ids)
    all_ids = sorted(tables)
    n_queries = min(n_queries, len(all_ids))
    targets = [all_ids[i] for i in rng.choice(len(all_ids), size=n_queries, replace=False)]
    queries: dict[str, Query] = {}
    judgments: list[Judgment] = []
    for qi, target in enumerate(targets):
        t = tables[target]
        pool = sorted(({w for m in t.metadata for w in m.split()} | set(t.headers)) - {facet_of[target]})
        picked = rng.choice(pool, size=min(query_words - 1, len(pool)), replace=False)
        words = [facet_of[target], *(str(w) for w in picked)]
        rng.shuffle(words)
        qid = f"q{qi:03d}"
        queries[qid] = Query(qid, " ".join(words))
        judgments.append(Judgment(qid, target, 2))
        peers = [x for x in by_topic[topic_of[target]] if x != target]
        if n_related is not None and n_related < len(peers):
            peers = sorted(str(x) for x in rng.choice(peers, size=n_related, replace=False))
        judgments.extend(Judgment(qid, x, 1) for x in peers)
        others = [x for x in all_ids if topic_of[x] != topic_of[target]]
        for x in rng.choice(others, size=min(n_irrelevant, len(others)), replace=False):
            judgments.append(Judgment(qid, str(x), 0))
    return Corpus(tables, queries, judgments)


def content_corpus(n_query_tables: int = 20, n_topics: int = 20, tables_per_topic: int = 5,
                   n_irrelevant: int = 5, seed: int = 0) -> Corpus:
    """Query-by-table corpus: same-topic candidates graded 1 or 2 by header overlap."""
    rng = np.random.default_rng(seed)
    src = WordSource(rng)
    tables: dict[str, Table] = {}
    by_topic: list[list[str]] = []
    for ti in range(n_topics):
        topic = _topic(src)
        ids = []
        for j in range(tables_per_topic):
            tid = f"t{ti:03d}_{j}"
            tables[tid] = _topic_table(rng, topic, tid)
            ids.append(tid)
        by_topic.append(ids)
    queries: dict[str, Query] = {}
    judgments: list[Judgment] = []
    for qi in range(n_query_tables):
        ti = qi % n_topics
        qt = by_topic[ti][0]
        qid = f"qt{qi:03d}"
        queries[qid] = Query(qid, table_id=qt)
        for other in by_topic[ti][1:]:
            shared = len(set(tables[qt].headers) & set(tables[other].headers))
            judgments.append(Judgment(qid, other, 2 if shared == 3 else 1))
        others = [x for j, ids in enumerate(by_topic) if j != ti for x in ids]
        for x in rng.choice(others, size=n_irrelevant, replace=False):
            judgments.append(Judgment(qid, str(x), 0))
    return Corpus(tables, queries, judgments)


def wikitables_shaped_corpus(n_queries: int = 60, n_qrels: int = 3117, n_tables: int = 400,
                             seed: int = 0) -> Corpus:
    """Tiny tables with the query and judgment counts of the WikiTables benchmark."""
    rng = np.random.default_rng(seed)
    src = WordSource(rng)
    tables = {}
    for i in range(n_tables):
        tid = f"wt{i:04d}"
        tables[tid] = Table.from_rows(tid, src.words(2), [src.words(2)], [src.word()])
    ids = sorted(tables)
    queries = {f"wq{q:02d}": Query(f"wq{q:02d}", " ".join(src.words(2))) for q in range(n_queries)}
    per_query = np.full(n_queries, n_qrels // n_queries)
    per_query[: n_qrels % n_queries] += 1
    judgments = []
    for (qid, _), n in zip(sorted(queries.items()), per_query):
        for tid in rng.choice(ids, size=int(n), replace=False):
            judgments.append(Judgment(qid, str(tid), int(rng.integers(0, 3))))
    return Corpus(tables, queries, judgments)


def pmc_shaped_corpus(n_similar: int = 542, n_dissimilar: int = 849, seed: int = 0) -> Corpus:
    """Binary-labeled table pairs with the class counts of the PMC collection."""
    rng = np.random.default_rng(seed)
    src = WordSource(rng)
    n = n_similar + n_dissimilar
    tables = {}
    judgments = []
    for i in range(n):
        a, b = f"pa{i:04d}", f"pb{i:04d}"
        tables[a] = Table.from_rows(a, src.words(2), [src.words(2)], [src.word()])
        tables[b] = Table.from_rows(b, src.words(2), [src.words(2)], [src.word()])
        judgments.append(Judgment(a, b, 1 if i < n_similar else 0))
    order = rng.permutation(n)
    return Corpus(tables, {}, [judgments[i] for i in order])


# ---------------------------------------------------------------------------
# hand-written examples


def figure2_table() -> Table:
    """Football table whose first column is text-typed and third is real-typed."""
    return Table.from_rows(
        "fig2",
        ["player", "team", "goals"],
        [["Ronaldo", "Manchester United", "18"], ["Messi", "Barcelona", "23"], ["Salah", "Liverpool", "22"]],
        ["top scorers", "football players", "season statistics"],
    )


def appendix_tables() -> tuple[Table, Table]:
    """A two-column club table and a four-column team table."""
    clubs = Table.from_rows(
        "clubs",
        ["Club", "City/Town"],
        [["Arsenal", "London"], ["Everton", "Liverpool"], ["Leeds United", "Leeds"]],
        ["football clubs in england"],
    )
    teams = Table.from_rows(
        "teams",
        ["Team", "Location", "Stadium", "Coach"],
        [["Chelsea", "London", "Stamford Bridge", "Potter"],
         ["Liverpool", "Liverpool", "Anfield", "Klopp"]],
        ["premier league teams"],
    )
    return clubs, teams
