import json

import pytest
from hypothesis import given, strategies as st

from ragroute.dataset import (
    RELATION_TEMPLATES,
    QueryRecord,
    QuerySet,
    load_query_set,
    render_template,
    save_query_set,
    split_query_set,
    split_report,
)
from ragroute.errors import ParseError, ValidationError


def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


FOUR_ROWS = [
    {"id": "a", "question": "Who was the director of Titanic?", "answers": ["James Cameron"],
     "relation": "director", "entity": "Titanic", "entity_freq": 120000},
    {"id": "b", "question": "What is the capital of France?", "answers": ["Paris"],
     "relation": "capital"},
    {"id": "c", "question": "Who wrote it?", "answers": ["nobody", "someone"]},
    {"id": "d", "question": "Plain question?", "answers": ["x"], "extra_field": 42},
]


class TestLoad:
    def test_four_wellformed_lines(self, tmp_path):
        path = tmp_path / "qs.jsonl"
        write_jsonl(path, FOUR_ROWS)
        qs = load_query_set(path)
        assert len(qs) == 4
        assert [r.id for r in qs] == ["a", "b", "c", "d"]  # file order preserved
        assert qs["d"].entity is None  # unknown fields ignored, optionals default

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert len(load_query_set(path)) == 0

    def test_missing_answers_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        write_jsonl(path, [FOUR_ROWS[0], {"id": "x", "question": "Hm?"}])
        with pytest.raises(ParseError, match="line 2"):
            load_query_set(path)

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "question": "q?", "answers": ["x"]}\n{oops\n')
        with pytest.raises(ParseError, match="line 2"):
            load_query_set(path)

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        write_jsonl(path, [FOUR_ROWS[0], FOUR_ROWS[0]])
        with pytest.raises(ValidationError, match="duplicate id"):
            load_query_set(path)

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "qs.jsonl"
        write_jsonl(path, FOUR_ROWS)
        qs = load_query_set(path)
        out = tmp_path / "copy.jsonl"
        save_query_set(qs, out)
        assert load_query_set(out).records == qs.records


class TestRecordValidation:
    def test_empty_question(self):
        with pytest.raises(ValidationError):
            QueryRecord(id="x", question="   ", answers=("a",))

    def test_unknown_relation(self):
        with pytest.raises(ValidationError, match="birthplace"):
            QueryRecord(id="x", question="q?", answers=("a",), relation="birthplace")

    def test_negative_freq(self):
        with pytest.raises(ValidationError):
            QueryRecord(id="x", question="q?", answers=("a",), entity_freq=-1.0)


class TestTemplates:
    def test_sixteen_relations(self):
        assert len(RELATION_TEMPLATES) == 16

    def test_capital(self):
        assert render_template("capital", "France") == "What is the capital of France?"

    def test_director(self):
        assert render_template("director", "Titanic") == "Who was the director of Titanic?"

    def test_unknown_relation_lists_valid(self):
        with pytest.raises(ValidationError, match="director"):
            render_template("birthplace", "X")

    @given(st.text(min_size=1, max_size=30), st.text(min_size=1, max_size=30))
    def test_injective_in_subject(self, s1, s2):
        if s1 != s2:
            assert render_template("capital", s1) != render_template("capital", s2)


def make_set(n):
    return QuerySet(
        tuple(QueryRecord(id=f"r{i}", question=f"q{i}?", answers=("a",)) for i in range(n)),
        name="synthetic",
    )


class TestSplit:
    def test_100_at_075(self):
        train, test = split_query_set(make_set(100), 0.75, seed=1)
        assert (len(train), len(test)) == (75, 25)

    def test_3600_at_075(self):
        train, test = split_query_set(make_set(3600), 0.75, seed=1)
        assert (len(train), len(test)) == (2700, 900)

    def test_same_seed_same_membership(self):
        qs = make_set(50)
        t1 = split_query_set(qs, 0.6, seed=9)
        t2 = split_query_set(qs, 0.6, seed=9)
        assert {r.id for r in t1[0]} == {r.id for r in t2[0]}

    def test_partition(self):
        qs = make_set(37)
        train, test = split_query_set(qs, 0.5, seed=2)
        train_ids = {r.id for r in train}
        test_ids = {r.id for r in test}
        assert train_ids | test_ids == {r.id for r in qs}
        assert not (train_ids & test_ids)

    def test_bad_fraction(self):
        for frac in (0.0, 1.0, -0.1, 2.0):
            with pytest.raises(ValidationError):
                split_query_set(make_set(5), frac, seed=0)

    def test_empty_set(self):
        with pytest.raises(ValidationError):
            split_query_set(QuerySet((), name="x"), 0.5, seed=0)

    def test_report_names_rng(self):
        report = split_report(make_set(10), 0.75, seed=4)
        assert "PCG64" in report["rng"]
        assert report["n_train"] == 8
