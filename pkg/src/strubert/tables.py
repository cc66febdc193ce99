"""Tables, tokenization, and column/row linearization into context sequences."""

from __future__ import annotations

import json
import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

CLS, SEP, PAD, UNK = "[CLS]", "[SEP]", "[PAD]", "[UNK]"
SPECIALS = (PAD, UNK, CLS, SEP)
REAL, TEXT = "real", "text"
METADATA_FIELDS = ("caption", "page_title", "section_title")

_WORD = re.compile(r"[^\W_]+|_+", re.UNICODE)
_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)$")


class ParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class DanglingReferenceError(LookupError):
    """A judgment points at an id that does not exist."""


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class Limits:
    max_rows: int = 8
    max_cols: int = 8
    max_field_tokens: int = 32
    max_len: int = 256


@dataclass(frozen=True)
class Table:
    id: str
    headers: tuple[str, ...]
    cells: tuple[tuple[str, ...], ...]
    metadata: tuple[str, ...] = ()
    col_types: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.headers:
            raise ValueError(f"table {self.id!r} has no columns")
        if not self.cells:
            raise ValueError(f"table {self.id!r} has no data rows")
        width = len(self.headers)
        for k, row in enumerate(self.cells):
            if len(row) != width:
                raise ValueError(f"table {self.id!r} row {k} has {len(row)} cells, expected {width}")
        if not self.col_types:
            types = tuple(infer_column_type([row[i] for row in self.cells]) for i in range(width))
            object.__setattr__(self, "col_types", types)
        elif len(self.col_types) != width or any(t not in (REAL, TEXT) for t in self.col_types):
            raise ValueError(f"table {self.id!r} has invalid column types {self.col_types}")

    @classmethod
    def from_rows(cls, id: str, headers: Sequence[str], rows: Sequence[Sequence],
                  metadata: Sequence[str] = (), col_types: Sequence[str] = ()) -> "Table":
        return cls(
            id=str(id),
            headers=tuple(str(h) for h in headers),
            cells=tuple(tuple("" if v is None else str(v) for v in row) for row in rows),
            metadata=tuple(str(m) for m in metadata),
            col_types=tuple(col_types),
        )

    @property
    def n_rows(self) -> int:
        """Number of data rows (s - 1)."""
        return len(self.cells)

    @property
    def n_cols(self) -> int:
        return len(self.headers)

    def truncated(self, max_rows: int, max_cols: int) -> "Table":
        if self.n_rows <= max_rows and self.n_cols <= max_cols:
            return self
        return replace(
            self,
            headers=self.headers[:max_cols],
            cells=tuple(row[:max_cols] for row in self.cells[:max_rows]),
            col_types=self.col_types[:max_cols],
        )

    def permuted(self, row_order: Sequence[int] | None = None,
                 col_order: Sequence[int] | None = None) -> "Table":
        rows = list(range(self.n_rows)) if row_order is None else list(row_order)
        cols = list(range(self.n_cols)) if col_order is None else list(col_order)
        return replace(
            self,
            headers=tuple(self.headers[j] for j in cols),
            cells=tuple(tuple(self.cells[k][j] for j in cols) for k in rows),
            col_types=tuple(self.col_types[j] for j in cols),
        )

    def to_json(self) -> dict:
        meta = dict(zip(METADATA_FIELDS, self.metadata))
        return {"id": self.id, "headers": list(self.headers),
                "rows": [list(r) for r in self.cells], "metadata": meta}


def _is_number(text: str) -> bool:
    s = text.strip().replace(",", "")
    return bool(_NUMBER.match(s))


def infer_column_type(cells: Sequence[str]) -> str:
    """``real`` when at least half of the non-empty cells parse as numbers."""
    if not cells:
        raise ValueError("column has no cells")
    filled = [c for c in cells if c.strip()]
    if not filled:
        return TEXT
    numeric = sum(_is_number(c) for c in filled)
    return REAL if 2 * numeric >= len(filled) else TEXT


# ---------------------------------------------------------------------------
# tokenization


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation separates and is dropped.

    Bracketed literals such as ``[SEP]`` in user text come out as plain words,
    so text never yields a special token.
    """
    text = unicodedata.normalize("NFKC", text).lower()
    return [t for t in _WORD.findall(text) if t.strip("_")]


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.index:
                raise ValueError(f"vocabulary lacks special token {s}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([line for line in Path(path).read_text(encoding="utf-8").split("\n") if line])


def table_texts(table: Table) -> list[str]:
    return [*table.metadata, *table.headers, *table.col_types,
            *(v for row in table.cells for v in row)]


def build_vocab(texts: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Word vocabulary over ``texts``; ties in frequency break alphabetically."""
    counts = Counter(tok for text in texts for tok in tokenize(text))
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary([*SPECIALS, *kept])


def corpus_texts(corpus: "Corpus") -> list[str]:
    texts: list[str] = []
    for t in corpus.tables.values():
        texts.extend(table_texts(t))
    for q in corpus.queries.values():
        if q.text:
            texts.append(q.text)
    # type words always present in linearized sequences
    texts.extend([REAL, TEXT])
    return texts


# ---------------------------------------------------------------------------
# linearization


@dataclass(frozen=True)
class CellEntry:
    row: int
    col: int
    header: str
    type: str
    value: str

    def text(self) -> str:
        return " ".join(s for s in (self.header, self.type, self.value) if s)

    def tokens(self) -> list[str]:
        return tokenize(self.header) + [self.type] + tokenize(self.value)


@dataclass(frozen=True)
class StructSequence:
    """One axis of a table flattened into ``header type value [SEP]`` entries."""

    view: str  # "column" or "row"
    index: int
    entries: tuple[CellEntry, ...]

    @property
    def text(self) -> str:
        return " ".join(f"{e.text()} {SEP}" for e in self.entries)

    def __str__(self) -> str:
        return self.text


def _entry(table: Table, k: int, i: int) -> CellEntry:
    return CellEntry(k, i, table.headers[i], table.col_types[i], table.cells[k][i])


def linearize_column(table: Table, i: int) -> StructSequence:
    """Column ``i`` (0-based): its header and type repeated before every cell."""
    if not 0 <= i < table.n_cols:
        raise IndexError(f"column {i} out of range for {table.n_cols} columns")
    return StructSequence("column", i, tuple(_entry(table, k, i) for k in range(table.n_rows)))


def linearize_row(table: Table, k: int) -> StructSequence:
    """Data row ``k`` (0-based) across all columns."""
    if not 0 <= k < table.n_rows:
        raise IndexError(f"row {k} out of range for {table.n_rows} rows")
    return StructSequence("row", k, tuple(_entry(table, k, i) for i in range(table.n_cols)))


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    kind: str  # cls | text_field | sep | cell | pad
    coord: tuple[int, int] | None = None

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class LinearizedSequence:
    token_ids: tuple[int, ...]
    tokens: tuple[str, ...]
    spans: tuple[Span, ...]
    view: str
    index: int

    def __len__(self) -> int:
        return len(self.token_ids)

    def layout(self) -> tuple:
        """Span kinds and lengths-independent structure, for layout comparisons."""
        return tuple(s.kind for s in self.spans if s.kind != "pad")

    def cell_spans(self) -> list[Span]:
        return [s for s in self.spans if s.kind == "cell"]


def context_fields(table: Table, query: str | None, limits: Limits = Limits()) -> list[list[str]]:
    """Tokenized textual fields, query first when present; each capped in length."""
    fields = [tokenize(query)] if query else []
    fields.extend(tokenize(m) for m in table.metadata)
    return [f[: limits.max_field_tokens] for f in fields if f]


def build_context_sequence(struct_seq: StructSequence, fields: Sequence[Sequence[str]],
                           vocab: Vocabulary) -> LinearizedSequence:
    """``[CLS] f_1 [SEP] ... [SEP] f_p [SEP] struct_seq`` with spans recorded.

    ``struct_seq`` already closes every cell with ``[SEP]``. No fields gives
    ``[CLS] [SEP] struct_seq``.
    """
    tokens: list[str] = [CLS]
    spans: list[Span] = [Span(0, 1, "cls")]

    def push(toks, kind, coord=None):
        start = len(tokens)
        tokens.extend(toks)
        spans.append(Span(start, len(tokens), kind, coord))

    for j, f in enumerate(fields):
        if j:
            push([SEP], "sep")
        push(list(f), "text_field")
    push([SEP], "sep")
    for e in struct_seq.entries:
        push(e.tokens(), "cell", (e.row, e.col))
        push([SEP], "sep")
    if not tokens:
        raise EmptyInputError("empty context sequence")
    ids = [vocab.cls_id if t == CLS else vocab.sep_id if t == SEP else vocab.id(t) for t in tokens]
    return LinearizedSequence(tuple(ids), tuple(tokens), tuple(spans), struct_seq.view, struct_seq.index)


def pad_sequence(seq: LinearizedSequence, length: int, vocab: Vocabulary) -> LinearizedSequence:
    extra = length - len(seq)
    if extra < 0:
        raise ValueError("cannot pad to a shorter length")
    if extra == 0:
        return seq
    return replace(
        seq,
        token_ids=seq.token_ids + (vocab.pad_id,) * extra,
        tokens=seq.tokens + (PAD,) * extra,
        spans=seq.spans + (Span(len(seq), length, "pad"),),
    )


def _sequence_length(n_field_tokens: int, n_fields: int, entries: Iterable[CellEntry]) -> int:
    seps = max(n_fields - 1, 0) + 1
    return 1 + n_field_tokens + seps + sum(len(e.tokens()) + 1 for e in entries)


def fit_table(table: Table, fields: Sequence[Sequence[str]], limits: Limits = Limits()) -> Table:
    """Apply row/column caps, then drop trailing rows/columns whole until every
    view sequence fits in ``limits.max_len`` tokens."""
    table = table.truncated(limits.max_rows, limits.max_cols)
    nf = sum(len(f) for f in fields)
    while True:
        col_len = max(_sequence_length(nf, len(fields), linearize_column(table, i).entries)
                      for i in range(table.n_cols))
        row_len = max(_sequence_length(nf, len(fields), linearize_row(table, k).entries)
                      for k in range(table.n_rows))
        if col_len <= limits.max_len and row_len <= limits.max_len:
            return table
        if col_len > limits.max_len and table.n_rows > 1:
            table = replace(table, cells=table.cells[:-1])
        elif row_len > limits.max_len and table.n_cols > 1:
            table = replace(table, headers=table.headers[:-1],
                            cells=tuple(r[:-1] for r in table.cells),
                            col_types=table.col_types[:-1])
        else:
            raise EmptyInputError(f"table {table.id!r} cannot fit in {limits.max_len} tokens")


def build_view_sequences(table: Table, view: str, vocab: Vocabulary, query: str | None = None,
                         limits: Limits = Limits(), fitted: bool = False) -> list[LinearizedSequence]:
    """All context sequences of one view, padded to a common token length."""
    fields = context_fields(table, query, limits)
    if not fitted:
        table = fit_table(table, fields, limits)
    if view == "column":
        structs = [linearize_column(table, i) for i in range(table.n_cols)]
    elif view == "row":
        structs = [linearize_row(table, k) for k in range(table.n_rows)]
    else:
        raise ValueError(f"unknown view {view!r}")
    seqs = [build_context_sequence(s, fields, vocab) for s in structs]
    n = max(len(s) for s in seqs)
    return [pad_sequence(s, n, vocab) for s in seqs]


# ---------------------------------------------------------------------------
# corpora


@dataclass(frozen=True)
class Query:
    id: str
    text: str | None = None
    table_id: str | None = None


@dataclass(frozen=True)
class Judgment:
    query_id: str
    table_id: str
    grade: int


@dataclass
class Corpus:
    tables: dict[str, Table]
    queries: dict[str, Query] = field(default_factory=dict)
    judgments: list[Judgment] = field(default_factory=list)

    def validate(self) -> None:
        for j in self.judgments:
            if j.table_id not in self.tables:
                raise DanglingReferenceError(f"judgment references unknown table {j.table_id!r}")
            if j.query_id not in self.queries and j.query_id not in self.tables:
                raise DanglingReferenceError(f"judgment references unknown query {j.query_id!r}")
        for q in self.queries.values():
            if q.table_id is not None and q.table_id not in self.tables:
                raise DanglingReferenceError(f"query {q.id!r} references unknown table {q.table_id!r}")

    def by_query(self) -> dict[str, list[Judgment]]:
        out: dict[str, list[Judgment]] = defaultdict(list)
        for j in self.judgments:
            out[j.query_id].append(j)
        return dict(out)


def _read_jsonl(path) -> list[tuple[int, dict]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ParseError(path, lineno, "expected a JSON object")
            out.append((lineno, obj))
    return out


def table_from_json(obj: dict) -> Table:
    meta = obj.get("metadata") or {}
    if isinstance(meta, dict):
        fields = [str(meta[k]) for k in METADATA_FIELDS if meta.get(k)]
    else:
        fields = [str(m) for m in meta if m]
    return Table.from_rows(obj["id"], obj["headers"], obj["rows"], fields, obj.get("types", ()))


def parse_tables(path) -> dict[str, Table]:
    tables: dict[str, Table] = {}
    for lineno, obj in _read_jsonl(path):
        try:
            t = table_from_json(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, lineno, f"bad table: {exc}") from None
        if t.id in tables:
            raise ParseError(path, lineno, f"duplicate table id {t.id!r}")
        tables[t.id] = t
    return tables


def parse_queries(path) -> dict[str, Query]:
    queries: dict[str, Query] = {}
    for lineno, obj in _read_jsonl(path):
        if "id" not in obj or ("text" not in obj and "table_id" not in obj):
            raise ParseError(path, lineno, "query needs 'id' and one of 'text'/'table_id'")
        q = Query(str(obj["id"]), obj.get("text"), None if obj.get("table_id") is None else str(obj["table_id"]))
        queries[q.id] = q
    return queries


def parse_qrels(path, binary: bool = False) -> list[Judgment]:
    """``query_id<TAB>table_id<TAB>grade`` lines; grades 0-2, or 0/1 if ``binary``."""
    allowed = (0, 1) if binary else (0, 1, 2)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            try:
                grade = int(parts[2])
            except ValueError:
                raise ParseError(path, lineno, f"grade {parts[2]!r} is not an integer") from None
            if grade not in allowed:
                raise ParseError(path, lineno, f"grade {grade} outside {allowed}")
            out.append(Judgment(parts[0], parts[1], grade))
    return out


def parse_corpus(tables_path, queries_path=None, qrels_path=None, binary: bool = False) -> Corpus:
    corpus = Corpus(
        tables=parse_tables(tables_path),
        queries=parse_queries(queries_path) if queries_path else {},
        judgments=parse_qrels(qrels_path, binary) if qrels_path else [],
    )
    corpus.validate()
    return corpus


def write_tables(path, tables: Iterable[Table]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tables:
            fh.write(json.dumps(t.to_json()) + "\n")


def write_queries(path, queries: Iterable[Query]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            obj = {"id": q.id, "text": q.text} if q.table_id is None else {"id": q.id, "table_id": q.table_id}
            fh.write(json.dumps(obj) + "\n")


def write_qrels(path, judgments: Iterable[Judgment]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for j in judgments:
            fh.write(f"{j.query_id}\t{j.table_id}\t{j.grade}\n")


def similarity_pairs_from_qrels(judgments: Iterable[Judgment]) -> list[tuple[str, str, int]]:
    """Table pairs labeled 1 when co-relevant to a query, 0 when one side is
    irrelevant and the other relevant. A pair seen with both labels keeps 1.
    Pairs are returned with ids in sorted order."""
    grouped: dict[str, dict[str, int]] = defaultdict(dict)
    for j in judgments:
        grouped[j.query_id][j.table_id] = max(j.grade, grouped[j.query_id].get(j.table_id, 0))
    labels: dict[tuple[str, str], int] = {}
    for grades in grouped.values():
        relevant = sorted(t for t, g in grades.items() if g >= 1)
        irrelevant = sorted(t for t, g in grades.items() if g < 1)
        for a, b in combinations(relevant, 2):
            labels[(a, b)] = 1
        for a in irrelevant:
            for b in relevant:
                key = (a, b) if a < b else (b, a)
                labels[key] = max(labels.get(key, 0), 0)
    return sorted((a, b, y) for (a, b), y in labels.items())
