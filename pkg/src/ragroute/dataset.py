"""QA datasets: loading, question templates, and reproducible splits.

The canonical on-disk format is JSON Lines, one record per line:

    {"id": str, "question": str, "answers": [str, ...],
     "entity": str?, "entity_freq": number?, "relation": str?}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

import numpy as np

from .errors import ParseError, ValidationError

# Identifier recorded in split reports so a split can be reproduced elsewhere.
SPLIT_RNG_ALGORITHM = "numpy.random.Generator(PCG64)"


def _load_templates() -> dict[str, str]:
    text = resources.files("ragroute.data").joinpath("relation_templates.json").read_text("utf-8")
    return json.loads(text)


RELATION_TEMPLATES: dict[str, str] = _load_templates()


@dataclass(frozen=True)
class QueryRecord:
    """One QA instance: a question with its gold answers and optional metadata."""

    id: str
    question: str
    answers: tuple[str, ...]
    entity: Optional[str] = None
    entity_freq: Optional[float] = None
    relation: Optional[str] = None

    def __post_init__(self):
        if not self.question.strip():
            raise ValidationError(f"record {self.id!r}: question is empty")
        if not self.answers:
            raise ValidationError(f"record {self.id!r}: answers is empty")
        if self.relation is not None and self.relation not in RELATION_TEMPLATES:
            raise ValidationError(
                f"record {self.id!r}: unknown relation {self.relation!r}; "
                f"valid relations: {sorted(RELATION_TEMPLATES)}"
            )
        if self.entity_freq is not None:
            if not math.isfinite(self.entity_freq) or self.entity_freq < 0:
                raise ValidationError(
                    f"record {self.id!r}: entity_freq must be finite and >= 0"
                )

    def to_dict(self) -> dict:
        out = {"id": self.id, "question": self.question, "answers": list(self.answers)}
        if self.entity is not None:
            out["entity"] = self.entity
        if self.entity_freq is not None:
            out["entity_freq"] = self.entity_freq
        if self.relation is not None:
            out["relation"] = self.relation
        return out


@dataclass(frozen=True)
class QuerySet:
    """An ordered, immutable collection of QueryRecords with unique ids."""

    records: tuple[QueryRecord, ...]
    name: str = ""
    _by_id: dict = field(init=False, repr=False, compare=False, hash=False, default=None)

    def __post_init__(self):
        by_id = {}
        for r in self.records:
            if r.id in by_id:
                raise ValidationError(f"duplicate id {r.id!r} in query set {self.name!r}")
            by_id[r.id] = r
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, query_id: str) -> QueryRecord:
        return self._by_id[query_id]

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._by_id


def _record_from_obj(obj: dict, line_no: int) -> QueryRecord:
    for key in ("id", "question", "answers"):
        if key not in obj:
            raise ParseError(f"missing required field {key!r}", line=line_no)
    answers = obj["answers"]
    if not isinstance(answers, list) or not answers:
        raise ParseError("'answers' must be a non-empty list", line=line_no)
    try:
        return QueryRecord(
            id=str(obj["id"]),
            question=str(obj["question"]),
            answers=tuple(str(a) for a in answers),
            entity=obj.get("entity"),
            entity_freq=obj.get("entity_freq"),
            relation=obj.get("relation"),
        )
    except ValidationError as exc:
        raise ParseError(str(exc), line=line_no) from exc


def load_query_set(path, name: str = "") -> QuerySet:
    """Load a QuerySet from a JSONL file, preserving file order.

    Unknown fields are ignored. Raises ParseError naming the offending
    line number on malformed input, ValidationError on duplicate ids.
    """
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            if not isinstance(obj, dict):
                raise ParseError("record is not a JSON object", line=line_no)
            records.append(_record_from_obj(obj, line_no))
    return QuerySet(records=tuple(records), name=name or str(path))


def save_query_set(qs: QuerySet, path) -> None:
    """Write a QuerySet back to JSONL (inverse of load_query_set)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in qs:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")


def render_template(relation: str, subject: str) -> str:
    """Turn a (relation, subject) pair into its templated question text."""
    try:
        template = RELATION_TEMPLATES[relation]
    except KeyError:
        raise ValidationError(
            f"unknown relation {relation!r}; valid relations: {sorted(RELATION_TEMPLATES)}"
        ) from None
    return template.replace("[subj]", subject)


def split_query_set(
    qs: QuerySet, train_fraction: float, seed: int
) -> tuple[QuerySet, QuerySet]:
    """Deterministically shuffle and split into (train, test).

    |train| = round(train_fraction * N). The shuffle uses the PRNG named in
    SPLIT_RNG_ALGORITHM so splits reproduce for the same seed.
    """
    if not (0.0 < train_fraction < 1.0):
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(qs) == 0:
        raise ValidationError("cannot split an empty query set")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(qs.records))
    n_train = int(round(train_fraction * len(qs)))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    train = QuerySet(tuple(qs.records[i] for i in train_idx), name=f"{qs.name}/train")
    test = QuerySet(tuple(qs.records[i] for i in test_idx), name=f"{qs.name}/test")
    return train, test


def split_report(qs: QuerySet, train_fraction: float, seed: int) -> dict:
    """Metadata describing a split, suitable for writing alongside artifacts."""
    n = len(qs)
    n_train = int(round(train_fraction * n))
    return {
        "source": qs.name,
        "n": n,
        "n_train": n_train,
        "n_test": n - n_train,
        "train_fraction": train_fraction,
        "seed": seed,
        "rng": SPLIT_RNG_ALGORITHM,
    }


def generate_entity_questions(
    entries: Iterable[tuple[str, str, list[str], float]],
    relation: str,
    id_prefix: str = "q",
) -> QuerySet:
    """Build an entity-centric QuerySet from (subject, entity, answers, freq) rows."""
    records = []
    for i, (subject, entity, answers, freq) in enumerate(entries):
        records.append(
            QueryRecord(
                id=f"{id_prefix}{i}",
                question=render_template(relation, subject),
                answers=tuple(answers),
                entity=entity,
                entity_freq=freq,
                relation=relation,
            )
        )
    return QuerySet(tuple(records), name=f"generated/{relation}")
