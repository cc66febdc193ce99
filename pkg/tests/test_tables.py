import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strubert.synthetic import (figure2_table, keyword_corpus, pmc_shaped_corpus, similarity_corpus,
                                wikitables_shaped_corpus)
from strubert.tables import (CLS, PAD, SEP, SPECIALS, Corpus, DanglingReferenceError, EmptyInputError,
                             Judgment, Limits, ParseError, Query, Table, build_context_sequence,
                             build_vocab, build_view_sequences, context_fields, corpus_texts,
                             infer_column_type, linearize_column, linearize_row, parse_corpus, parse_qrels,
                             similarity_pairs_from_qrels, tokenize, write_qrels, write_queries, write_tables)

WORDS = st.text(alphabet="abcdefgh", min_size=1, max_size=6)


@st.composite
def tables(draw, max_rows=8, max_cols=8, max_meta=3):
    n_rows = draw(st.integers(1, max_rows))
    n_cols = draw(st.integers(1, max_cols))
    headers = draw(st.lists(WORDS, min_size=n_cols, max_size=n_cols))
    cell = st.one_of(WORDS, st.integers(-999, 999).map(str), st.just(""))
    rows = draw(st.lists(st.lists(cell, min_size=n_cols, max_size=n_cols), min_size=n_rows, max_size=n_rows))
    meta = draw(st.lists(st.lists(WORDS, min_size=1, max_size=4).map(" ".join), max_size=max_meta))
    return Table.from_rows("t", headers, rows, meta)


def _vocab_for(*ts, query=None):
    return build_vocab(corpus_texts(Corpus({t.id: t for t in ts}, {"q": Query("q", query)} if query else {})))


class TestColumnType:
    @pytest.mark.parametrize("cells,expected", [
        (["Ronaldo", "Messi"], "text"),
        (["1", "2.5", "-3"], "real"),
        (["7", "abc"], "real"),  # exactly half numeric: tie goes to real
        (["7", "abc", "def"], "text"),
        (["1,234", "+5", ".5"], "real"),
        (["", "", "  "], "text"),
        (["", "12", ""], "real"),  # empty cells do not count
    ])
    def test_rule(self, cells, expected):
        assert infer_column_type(cells) == expected

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            infer_column_type([])

    def test_figure_table_types(self):
        assert figure2_table().col_types == ("text", "text", "real")


class TestLinearization:
    def test_figure_column(self):
        s = linearize_column(figure2_table(), 0).text
        assert s.startswith("player text Ronaldo [SEP] player text Messi [SEP] ")
        assert s == "player text Ronaldo [SEP] player text Messi [SEP] player text Salah [SEP]"

    def test_figure_row(self):
        s = linearize_row(figure2_table(), 0).text
        assert s.startswith("player text Ronaldo [SEP] team text Manchester United [SEP] ")
        assert s.endswith("goals real 18 [SEP]")

    def test_single_cell(self):
        t = Table.from_rows("x", ["h"], [["v"]])
        assert linearize_column(t, 0).text == "h text v [SEP]"
        assert linearize_row(t, 0).text == "h text v [SEP]"

    def test_numeric_column(self):
        t = Table.from_rows("x", ["score"], [["12"], ["30"]])
        assert linearize_column(t, 0).text == "score real 12 [SEP] score real 30 [SEP]"

    def test_single_column_row_is_column_entry(self):
        t = Table.from_rows("x", ["h"], [["a"], ["b"]])
        assert linearize_row(t, 1).text == linearize_column(t, 0).entries[1].text() + " [SEP]"

    def test_two_by_two(self):
        t = Table.from_rows("x", ["a", "b"], [["1", "x"], ["2", "y"]])
        rows = [linearize_row(t, k).text for k in range(t.n_rows)]
        assert len(rows) == 2 and all(r.count(SEP) == 2 for r in rows)

    @pytest.mark.parametrize("fn,index", [(linearize_column, 3), (linearize_column, -1), (linearize_row, 3)])
    def test_index_out_of_range(self, fn, index):
        with pytest.raises(IndexError):
            fn(figure2_table(), index)


class TestContextSequence:
    def _seq(self, table, query=None, index=0, view="column"):
        vocab = _vocab_for(table, query=query)
        struct = linearize_column(table, index) if view == "column" else linearize_row(table, index)
        return build_context_sequence(struct, context_fields(table, query), vocab)

    def test_one_field(self):
        t = Table.from_rows("x", ["h"], [["v"]], ["cap"])
        assert list(self._seq(t).tokens) == [CLS, "cap", SEP, "h", "text", "v", SEP]

    def test_no_fields(self):
        t = Table.from_rows("x", ["h"], [["v"]])
        seq = self._seq(t)
        assert list(seq.tokens) == [CLS, SEP, "h", "text", "v", SEP]
        assert [s.kind for s in seq.spans] == ["cls", "sep", "cell", "sep"]

    def test_query_is_first_field(self):
        t = Table.from_rows("x", ["h"], [["v"]], ["cap", "page"])
        seq = self._seq(t, query="Find Me")
        assert list(seq.tokens[:7]) == [CLS, "find", "me", SEP, "cap", SEP, "page"]

    def test_cell_spans_have_coords(self):
        seq = self._seq(figure2_table(), view="row", index=1)
        cells = seq.cell_spans()
        assert [c.coord for c in cells] == [(1, 0), (1, 1), (1, 2)]
        assert list(seq.tokens[cells[1].start:cells[1].end]) == ["team", "text", "barcelona"]

    @settings(max_examples=60, deadline=None)
    @given(tables(), st.one_of(st.none(), WORDS))
    def test_view_length_and_layout_invariant(self, table, query):
        vocab = _vocab_for(table, query=query)
        for view in ("column", "row"):
            seqs = build_view_sequences(table, view, vocab, query)
            assert len({len(s) for s in seqs}) == 1
            assert len({s.layout() for s in seqs}) == 1
            assert len(seqs) == (table.n_cols if view == "column" else table.n_rows)

    @settings(max_examples=60, deadline=None)
    @given(tables())
    def test_spans_tile_the_sequence(self, table):
        vocab = _vocab_for(table)
        for view in ("column", "row"):
            for seq in build_view_sequences(table, view, vocab):
                pos = 0
                for sp in seq.spans:
                    assert sp.start == pos and sp.end > sp.start
                    pos = sp.end
                    assert (sp.coord is not None) == (sp.kind == "cell")
                assert pos == len(seq)

    @settings(max_examples=60, deadline=None)
    @given(tables())
    def test_cell_spans_round_trip(self, table):
        vocab = _vocab_for(table)
        for seq in build_view_sequences(table, "row", vocab):
            for sp in seq.cell_spans():
                k, i = sp.coord
                expected = tokenize(table.headers[i]) + [table.col_types[i]] + tokenize(table.cells[k][i])
                assert list(seq.tokens[sp.start:sp.end]) == expected

    @settings(max_examples=40, deadline=None)
    @given(tables(max_rows=12, max_cols=12, max_meta=3), st.integers(24, 80))
    def test_truncation_keeps_cls_final_sep_and_whole_cells(self, table, max_len):
        limits = Limits(max_rows=6, max_cols=6, max_field_tokens=4, max_len=max_len)
        vocab = _vocab_for(table)
        try:
            seqs = build_view_sequences(table, "column", vocab, limits=limits)
        except EmptyInputError:
            return  # even a single cell does not fit
        for seq in seqs:
            real = [t for t in seq.tokens if t != PAD]
            assert real[0] == CLS and real[-1] == SEP
            assert len(real) <= max_len
            for sp in seq.cell_spans():
                k, i = sp.coord
                assert list(seq.tokens[sp.start:sp.end]) == (
                    tokenize(table.headers[i]) + [table.col_types[i]] + tokenize(table.cells[k][i]))

    def test_truncation_drops_trailing_rows_and_columns(self):
        t = Table.from_rows("x", [f"h{i}" for i in range(10)], [[f"v{k}{i}" for i in range(10)] for k in range(10)])
        seqs = build_view_sequences(t, "row", _vocab_for(t))
        assert len(seqs) == 8 and len(seqs[0].cell_spans()) == 8
        assert seqs[-1].cell_spans()[-1].coord == (7, 7)

    def test_field_cap(self):
        t = Table.from_rows("x", ["h"], [["v"]], [" ".join(["w"] * 50)])
        assert len(context_fields(t, None)[0]) == 32


class TestTokenizer:
    def test_lowercase_split(self):
        assert tokenize("Manchester United") == ["manchester", "united"]

    def test_special_literal_is_escaped(self):
        toks = tokenize("a [SEP] b")
        assert toks == ["a", "sep", "b"]
        t = Table.from_rows("x", ["h"], [["[SEP]"]])
        vocab = _vocab_for(t)
        seq = build_view_sequences(t, "column", vocab)[0]
        cell = seq.cell_spans()[0]
        assert vocab.sep_id not in seq.token_ids[cell.start:cell.end]

    def test_punctuation_and_unicode(self):
        assert tokenize("City/Town, café!") == ["city", "town", "café"]
        assert tokenize("a b") == ["a", "b"]

    def test_min_freq(self):
        vocab = build_vocab(["a a b"], min_freq=2)
        assert vocab.tokens == [*SPECIALS, "a"]
        assert vocab.id("b") == vocab.unk_id

    def test_specials_dense_and_distinct(self):
        vocab = build_vocab(["x y"])
        ids = {vocab.pad_id, vocab.unk_id, vocab.cls_id, vocab.sep_id}
        assert len(ids) == 4 and sorted(vocab.index.values()) == list(range(len(vocab)))

    @given(st.text(max_size=40))
    def test_text_never_yields_specials(self, text):
        assert not set(tokenize(text)) & set(SPECIALS)

    def test_save_load(self, tmp_path):
        vocab = build_vocab(["b a c a"])
        vocab.save(tmp_path / "v.txt")
        assert type(vocab).load(tmp_path / "v.txt").tokens == vocab.tokens


class TestCorpusIO:
    def _write(self, tmp_path, corpus):
        write_tables(tmp_path / "t.jsonl", corpus.tables.values())
        write_queries(tmp_path / "q.jsonl", corpus.queries.values())
        write_qrels(tmp_path / "r.tsv", corpus.judgments)
        return tmp_path / "t.jsonl", tmp_path / "q.jsonl", tmp_path / "r.tsv"

    def test_wikitables_shaped_counts(self, tmp_path):
        c = parse_corpus(*self._write(tmp_path, wikitables_shaped_corpus()))
        assert len(c.queries) == 60 and len(c.judgments) == 3117

    def test_pmc_shaped_binary(self, tmp_path):
        c = parse_corpus(*self._write(tmp_path, pmc_shaped_corpus()), binary=True)
        labels = [j.grade for j in c.judgments]
        assert len(labels) == 1391 and labels.count(1) == 542 and labels.count(0) == 849

    def test_round_trip(self, tmp_path):
        t = figure2_table()
        c = parse_corpus(*self._write(tmp_path, Corpus({t.id: t}, {"q": Query("q", "goals")},
                                                       [Judgment("q", t.id, 2)])))
        assert c.tables[t.id] == t
        assert c.queries["q"].text == "goals"

    def test_metadata_field_order(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text(json.dumps({"id": "a", "headers": ["h"], "rows": [["v"]],
                                    "metadata": {"section_title": "S", "caption": "C", "page_title": "P"}}) + "\n")
        c = parse_corpus(path)
        assert c.tables["a"].metadata == ("C", "P", "S")

    def test_empty_qrels(self, tmp_path):
        (tmp_path / "r.tsv").write_text("")
        assert parse_qrels(tmp_path / "r.tsv") == []

    def test_dangling_reference(self, tmp_path):
        t = figure2_table()
        paths = self._write(tmp_path, Corpus({t.id: t}, {"q": Query("q", "x")}, [Judgment("q", "nope", 1)]))
        with pytest.raises(DanglingReferenceError):
            parse_corpus(*paths)

    @pytest.mark.parametrize("line,lineno", [("q\tt\n", 2), ("q\tt\tx\n", 2), ("q\tt\t3\n", 2)])
    def test_malformed_qrels_report_line(self, tmp_path, line, lineno):
        (tmp_path / "r.tsv").write_text("q\tt\t1\n" + line)
        with pytest.raises(ParseError) as err:
            parse_qrels(tmp_path / "r.tsv")
        assert err.value.lineno == lineno

    def test_malformed_table_line(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"id": "a", "headers": ["h"], "rows": [["v"]]}\n{"id": "b", "headers": ["h"], "rows": [["v", "w"]]}\n')
        with pytest.raises(ParseError) as err:
            parse_corpus(path)
        assert err.value.lineno == 2

    def test_bad_json(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(ParseError):
            parse_corpus(path)

    def test_ragged_table_rejected(self):
        with pytest.raises(ValueError):
            Table.from_rows("x", ["a", "b"], [["1"]])


class TestSimilarityPairs:
    def test_graded_example(self):
        js = [Judgment("q", "A", 2), Judgment("q", "B", 1), Judgment("q", "C", 0)]
        assert similarity_pairs_from_qrels(js) == [("A", "B", 1), ("A", "C", 0), ("B", "C", 0)]

    def test_single_relevant_has_no_positive(self):
        js = [Judgment("q", "A", 1), Judgment("q", "B", 0)]
        assert [y for *_, y in similarity_pairs_from_qrels(js)] == [0]

    def test_conflict_keeps_positive(self):
        js = [Judgment("q1", "A", 1), Judgment("q1", "B", 1), Judgment("q2", "A", 0), Judgment("q2", "B", 2)]
        assert similarity_pairs_from_qrels(js) == [("A", "B", 1)]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from("qr"), st.sampled_from("ABCDE"), st.integers(0, 2)), max_size=20))
    def test_order_invariance(self, rows):
        js = [Judgment(q, t, g) for q, t, g in rows]
        base = similarity_pairs_from_qrels(js)
        rng = np.random.default_rng(len(rows))
        shuffled = [js[i] for i in rng.permutation(len(js))] if js else []
        assert similarity_pairs_from_qrels(shuffled) == base
        assert all(a < b for a, b, _ in base)


class TestSyntheticCorpora:
    def test_similarity_pairs_respect_overlap_rule(self):
        c = similarity_corpus(80, seed=2)
        assert len(c.judgments) == 80 and sum(j.grade for j in c.judgments) == 40
        for j in c.judgments:
            a, b = c.tables[j.query_id], c.tables[j.table_id]
            shared_headers = set(a.headers) & set(b.headers)
            shared_cells = {v for r in a.cells for v in r} & {v for r in b.cells for v in r}
            if j.grade:
                assert len(shared_headers) >= 2 and shared_cells
            else:
                assert not shared_headers and not shared_cells

    def test_keyword_queries_come_from_their_target(self):
        c = keyword_corpus(60, n_queries=30, seed=1, tables_per_topic=6, n_related=3, n_irrelevant=4)
        for qid, q in c.queries.items():
            judged = [j for j in c.judgments if j.query_id == qid]
            assert sorted(j.grade for j in judged) == [0] * 4 + [1] * 3 + [2]
            target = c.tables[next(j.table_id for j in judged if j.grade == 2)]
            words = set(q.text.split())
            assert len(words) == 3
            assert words <= set(target.headers) | {w for m in target.metadata for w in m.split()}
            # the facet column (last header) identifies the target within its topic
            assert target.headers[-1] in words
            for j in judged:
                if j.grade == 1:
                    assert c.tables[j.table_id].headers[-1] != target.headers[-1]

    def test_generators_are_seeded(self):
        assert keyword_corpus(20, seed=5, tables_per_topic=5) == keyword_corpus(20, seed=5, tables_per_topic=5)
        assert similarity_corpus(40, seed=5) != similarity_corpus(40, seed=6)
