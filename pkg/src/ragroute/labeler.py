"""Dual-inference labeling: does retrieval actually improve the answer?

Each training question is answered twice, once without and once with
retrieved passages. The label is 1 exactly when the with-retrieval answer
is correct and the without-retrieval answer is not (retrieval strictly
helps); ties in either direction get label 0.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .dataset import QueryRecord, QuerySet
from .embedding import (
    DEFAULT_LAYER,
    EmbeddingProvider,
    SentenceEmbedding,
    sentence_embedding,
)
from .errors import RagRouteError, ValidationError
from .llm_client import (
    DEFAULT_ANSWER_TOKENS,
    DEFAULT_SHOTS,
    GenerationClient,
    PromptSpec,
    build_prompt,
    select_exemplars,
)
from .retrieval import DEFAULT_TOP_K, BM25Index, search

log = logging.getLogger(__name__)


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def answer_correct(prediction: str, answers, strip_punctuation: bool = False) -> bool:
    """True iff any gold answer is a substring of the prediction.

    Both sides are Unicode-lowercased with whitespace collapsed first.
    Punctuation is kept by default so golds like "U.S." must match
    literally; `strip_punctuation=True` relaxes that.
    """
    if not answers:
        raise ValidationError("answers must be non-empty")

    def norm(s: str) -> str:
        if strip_punctuation:
            s = "".join(c if c.isalnum() or c.isspace() else " " for c in s)
        return normalize(s)

    pred = norm(prediction)
    return any(norm(a) in pred for a in answers)


@dataclass(frozen=True)
class LabeledExample:
    """(query, embedding, label) with the underlying correctness bits."""

    query_id: str
    embedding: SentenceEmbedding
    label: int
    nr_correct: bool  # correct without retrieval
    fr_correct: bool  # correct with retrieval

    def __post_init__(self):
        expected = int(self.fr_correct and not self.nr_correct)
        if self.label != expected:
            raise ValidationError(
                f"{self.query_id}: label {self.label} inconsistent with "
                f"nr_correct={self.nr_correct}, fr_correct={self.fr_correct}"
            )


@dataclass(frozen=True)
class LabeledSet:
    examples: tuple[LabeledExample, ...]

    def __post_init__(self):
        ids = [e.query_id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate query ids in labeled set")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def counts(self) -> dict:
        pos = sum(e.label for e in self.examples)
        return {"label_1": pos, "label_0": len(self.examples) - pos}


@dataclass
class LabelConfig:
    """Knobs for the labeling pass."""

    exemplar_source: QuerySet = None  # defaults to the set being labeled
    shots: int = DEFAULT_SHOTS
    top_k: int = DEFAULT_TOP_K
    layer: int = DEFAULT_LAYER
    include_bos: bool = False
    max_new_tokens: int = DEFAULT_ANSWER_TOKENS
    seed: int = 0
    strict: bool = False  # abort on backend failure instead of skip-and-log
    max_workers: int = 1
    strip_punctuation: bool = False


def correctness_pair(
    query: QueryRecord,
    client: GenerationClient,
    index: BM25Index,
    cfg: LabelConfig,
    exemplar_source: QuerySet,
) -> tuple[bool, bool]:
    """Run the two inferences and score containment: (nr_correct, fr_correct)."""
    exemplars = select_exemplars(exemplar_source, query, shots=cfg.shots, seed=cfg.seed)
    nr_prompt = build_prompt(PromptSpec(question=query.question, exemplars=exemplars))
    nr_answer = client.generate(nr_prompt, max_new_tokens=cfg.max_new_tokens)
    hits = search(index, query.question, k=cfg.top_k)
    passages = tuple(p for p, _ in hits) or None
    fr_prompt = build_prompt(
        PromptSpec(question=query.question, exemplars=exemplars, passages=passages)
    )
    fr_answer = client.generate(fr_prompt, max_new_tokens=cfg.max_new_tokens)
    return (
        answer_correct(nr_answer, query.answers, strip_punctuation=cfg.strip_punctuation),
        answer_correct(fr_answer, query.answers, strip_punctuation=cfg.strip_punctuation),
    )


def make_label(
    query: QueryRecord,
    client: GenerationClient,
    index: BM25Index,
    provider: EmbeddingProvider,
    cfg: LabelConfig,
    exemplar_source: QuerySet = None,
) -> LabeledExample:
    """Label one query via dual inference and attach its sentence embedding."""
    source = exemplar_source or QuerySet((query,), name="self")
    try:
        nr_correct, fr_correct = correctness_pair(query, client, index, cfg, source)
        emb = sentence_embedding(
            query.question, provider, layer=cfg.layer, include_bos=cfg.include_bos,
            query_id=query.id,
        )
    except RagRouteError as exc:
        raise RagRouteError(f"labeling failed for query {query.id!r}: {exc}") from exc
    return LabeledExample(
        query_id=query.id,
        embedding=emb,
        label=int(fr_correct and not nr_correct),
        nr_correct=nr_correct,
        fr_correct=fr_correct,
    )


def build_labeled_set(
    train: QuerySet,
    client: GenerationClient,
    index: BM25Index,
    provider: EmbeddingProvider,
    cfg: LabelConfig = None,
) -> LabeledSet:
    """Label every training query; skip-and-log failures unless strict.

    Results are collected in input order regardless of worker completion
    order, so output is deterministic for deterministic backends.
    """
    if len(train) == 0:
        raise ValidationError("training set is empty")
    cfg = cfg or LabelConfig()
    exemplar_source = cfg.exemplar_source or train

    def work(query: QueryRecord):
        return make_label(query, client, index, provider, cfg, exemplar_source)

    results = []
    if cfg.max_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
            futures = [pool.submit(work, q) for q in train]
            outcomes = []
            for q, fut in zip(train, futures):
                try:
                    outcomes.append(fut.result())
                except RagRouteError as exc:
                    outcomes.append(exc)
            iterator = outcomes
    else:
        iterator = []
        for q in train:
            try:
                iterator.append(work(q))
            except RagRouteError as exc:
                iterator.append(exc)

    skipped = 0
    for outcome in iterator:
        if isinstance(outcome, RagRouteError):
            if cfg.strict:
                raise outcome
            log.warning("skipping query: %s", outcome)
            skipped += 1
        else:
            results.append(outcome)
    if not results:
        raise RagRouteError(f"all {len(train)} queries failed during labeling")
    labeled = LabeledSet(examples=tuple(results))
    counts = labeled.counts()
    log.info(
        "labeled %d queries (label 1: %d, label 0: %d, skipped: %d)",
        len(labeled), counts["label_1"], counts["label_0"], skipped,
    )
    return labeled


def save_labeled_set(labeled: LabeledSet, path) -> None:
    """Persist labels as JSONL; embeddings go to the binary cache separately."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in labeled:
            fh.write(
                json.dumps(
                    {
                        "query_id": ex.query_id,
                        "label": ex.label,
                        "nr_correct": ex.nr_correct,
                        "fr_correct": ex.fr_correct,
                    }
                )
                + "\n"
            )


def load_labeled_set(path, embeddings_by_id: dict[str, SentenceEmbedding]) -> LabeledSet:
    """Re-join a saved label file with its embedding cache."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            examples.append(
                LabeledExample(
                    query_id=obj["query_id"],
                    embedding=embeddings_by_id[obj["query_id"]],
                    label=int(obj["label"]),
                    nr_correct=bool(obj["nr_correct"]),
                    fr_correct=bool(obj["fr_correct"]),
                )
            )
    return LabeledSet(examples=tuple(examples))
