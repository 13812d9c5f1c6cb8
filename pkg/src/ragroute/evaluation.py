"""End-to-end evaluation: accuracy, retrieval rate, latency, and analysis.

ACC is the percentage of test queries whose generated answer contains a
gold answer; POR is the percentage for which the policy retrieved. The
2x2 quadrant counts (retrieved?, correct?) underlie both and must always
re-derive them exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import QueryRecord, QuerySet
from .embedding import (
    DEFAULT_LAYER,
    EmbeddingProvider,
    SentenceEmbedding,
    sentence_embedding,
)
from .errors import RagRouteError, ValidationError
from .labeler import LabelConfig, answer_correct, build_labeled_set, correctness_pair
from .classifier import TrainConfig, init_model, train
from .llm_client import (
    DEFAULT_ANSWER_TOKENS,
    DEFAULT_SHOTS,
    GenerationClient,
    PromptSpec,
    build_prompt,
    select_exemplars,
)
from .retrieval import DEFAULT_TOP_K, BM25Index, search
from .routers import EmbeddingRouter, Router

log = logging.getLogger(__name__)

QUADRANT_KEYS = (
    "retrieved_correct",
    "retrieved_incorrect",
    "skipped_correct",
    "skipped_incorrect",
)


@dataclass(frozen=True)
class EvalReport:
    policy: str
    dataset: str
    n: int
    acc_percent: float
    por_percent: float
    quadrants: dict[str, int]
    mean_decision_latency: float
    mean_end_to_end_latency: float
    generation_calls_total: int

    def __post_init__(self):
        if sum(self.quadrants.values()) != self.n:
            raise ValidationError("quadrant counts do not sum to n")
        retrieved = self.quadrants["retrieved_correct"] + self.quadrants["retrieved_incorrect"]
        correct = self.quadrants["retrieved_correct"] + self.quadrants["skipped_correct"]
        if self.n and (
            self.por_percent != 100.0 * retrieved / self.n
            or self.acc_percent != 100.0 * correct / self.n
        ):
            raise ValidationError("ACC/POR do not match quadrant counts")

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "dataset": self.dataset,
            "n": self.n,
            "acc_percent": self.acc_percent,
            "por_percent": self.por_percent,
            "quadrants": dict(self.quadrants),
            "mean_decision_latency": self.mean_decision_latency,
            "mean_end_to_end_latency": self.mean_end_to_end_latency,
            "generation_calls_total": self.generation_calls_total,
        }


@dataclass
class EvalConfig:
    """Knobs for an evaluation run; mirrors the labeling configuration."""

    exemplar_source: Optional[QuerySet] = None
    shots: int = DEFAULT_SHOTS
    top_k: int = DEFAULT_TOP_K
    max_new_tokens: int = DEFAULT_ANSWER_TOKENS
    seed: int = 0
    strict: bool = False
    strip_punctuation: bool = False


def evaluate(
    router: Router,
    test: QuerySet,
    client: GenerationClient,
    index: BM25Index,
    cfg: EvalConfig = None,
) -> EvalReport:
    """Route, optionally retrieve, answer, and score every test query."""
    cfg = cfg or EvalConfig()
    exemplar_source = cfg.exemplar_source or test
    calls_before = client.call_count
    quadrants = dict.fromkeys(QUADRANT_KEYS, 0)
    decision_latencies = []
    total_latencies = []
    evaluated = 0
    for query in test:
        t0 = time.perf_counter()
        try:
            decision = router.route(query)
            exemplars = select_exemplars(exemplar_source, query, shots=cfg.shots, seed=cfg.seed)
            passages = None
            if decision.retrieve:
                hits = search(index, query.question, k=cfg.top_k)
                passages = tuple(p for p, _ in hits) or None
            prompt = build_prompt(
                PromptSpec(question=query.question, exemplars=exemplars, passages=passages)
            )
            completion = client.generate(prompt, max_new_tokens=cfg.max_new_tokens)
        except RagRouteError as exc:
            if cfg.strict:
                raise
            log.warning("skipping query %s: %s", query.id, exc)
            continue
        correct = answer_correct(
            completion, query.answers, strip_punctuation=cfg.strip_punctuation
        )
        key = ("retrieved" if decision.retrieve else "skipped") + (
            "_correct" if correct else "_incorrect"
        )
        quadrants[key] += 1
        evaluated += 1
        decision_latencies.append(decision.decision_latency)
        total_latencies.append(time.perf_counter() - t0)
    retrieved = quadrants["retrieved_correct"] + quadrants["retrieved_incorrect"]
    correct_total = quadrants["retrieved_correct"] + quadrants["skipped_correct"]
    return EvalReport(
        policy=router.name,
        dataset=test.name,
        n=evaluated,
        acc_percent=100.0 * correct_total / evaluated if evaluated else 0.0,
        por_percent=100.0 * retrieved / evaluated if evaluated else 0.0,
        quadrants=quadrants,
        mean_decision_latency=float(np.mean(decision_latencies)) if decision_latencies else 0.0,
        mean_end_to_end_latency=float(np.mean(total_latencies)) if total_latencies else 0.0,
        generation_calls_total=client.call_count - calls_before,
    )


def annotate_correctness(
    queries: QuerySet,
    client: GenerationClient,
    index: BM25Index,
    cfg: LabelConfig = None,
) -> dict[str, tuple[bool, bool]]:
    """Dual-inference pass producing (nr_correct, fr_correct) per query id.

    Feeds the oracle router and threshold fitting; two generation calls
    per query.
    """
    cfg = cfg or LabelConfig()
    exemplar_source = cfg.exemplar_source or queries
    out = {}
    for query in queries:
        out[query.id] = correctness_pair(query, client, index, cfg, exemplar_source)
    return out


def sweep_layers(
    layers: Sequence[int],
    train_set: QuerySet,
    test_set: QuerySet,
    client: GenerationClient,
    index: BM25Index,
    provider: EmbeddingProvider,
    label_cfg: LabelConfig = None,
    train_cfg: TrainConfig = None,
    eval_cfg: EvalConfig = None,
    hidden_dims: tuple[int, int] = (256, 64),
) -> list[tuple[int, float]]:
    """Train and evaluate one classifier per embedding layer.

    Identical seeds and splits across layers; returns (layer, acc_percent)
    rows in the requested layer order.
    """
    label_cfg = label_cfg or LabelConfig()
    train_cfg = train_cfg or TrainConfig()
    eval_cfg = eval_cfg or EvalConfig(exemplar_source=train_set)
    for layer in layers:
        if not (0 <= layer <= provider.max_layer):
            raise ValidationError(
                f"layer {layer} unsupported: provider max layer is {provider.max_layer}"
            )
    rows = []
    for layer in layers:
        cfg_for_layer = LabelConfig(**{**label_cfg.__dict__, "layer": layer})
        if cfg_for_layer.exemplar_source is None:
            cfg_for_layer.exemplar_source = train_set
        labeled = build_labeled_set(train_set, client, index, provider, cfg_for_layer)
        model = init_model(
            provider.dim, hidden_dims[0], hidden_dims[1], seed=train_cfg.seed
        )
        trained, _ = train(model, labeled, train_cfg)
        router = EmbeddingRouter(trained, provider, layer=layer)
        report = evaluate(router, test_set, client, index, eval_cfg)
        rows.append((layer, report.acc_percent))
    return rows


def write_layer_sweep_csv(rows: Sequence[tuple[int, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "acc_percent"])
        for layer, acc in rows:
            writer.writerow([layer, f"{acc:.4f}"])


@dataclass(frozen=True)
class VizRow:
    query_id: str
    x: float
    y: float
    log_freq: Optional[float]
    relation: Optional[str]


def pca_2d(X: np.ndarray) -> np.ndarray:
    """Project rows of X onto the top-2 principal components.

    Classical covariance eigen-decomposition; deterministic sign
    convention: the first nonzero loading of each component is positive.
    Zero-variance input maps everything to the origin.
    """
    if X.shape[0] < 2:
        raise ValidationError("PCA needs at least 2 rows")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (X.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    components = eigvecs[:, order]
    if components.shape[1] < 2:
        components = np.pad(components, ((0, 0), (0, 2 - components.shape[1])))
    for j in range(components.shape[1]):
        nonzero = np.flatnonzero(np.abs(components[:, j]) > 1e-12)
        if nonzero.size and components[nonzero[0], j] < 0:
            components[:, j] = -components[:, j]
    if float(eigvals[order].max(initial=0.0)) <= 1e-24:
        log.warning("zero-variance embeddings; emitting all-zero coordinates")
        return np.zeros((X.shape[0], 2))
    return centered @ components


def emit_viz(embeddings: Sequence[SentenceEmbedding], queries: QuerySet) -> list[VizRow]:
    """2D PCA projection of embeddings joined with log(1+entity_freq)."""
    if len(embeddings) < 2:
        raise ValidationError("need at least 2 embeddings to project")
    X = np.stack([e.values for e in embeddings]).astype(np.float64)
    coords = pca_2d(X)
    rows = []
    for emb, (x, y) in zip(embeddings, coords):
        record = queries[emb.query_id] if emb.query_id in queries else None
        log_freq = None
        relation = None
        if record is not None:
            relation = record.relation
            if record.entity_freq is not None:
                log_freq = math.log1p(record.entity_freq)
        rows.append(VizRow(query_id=emb.query_id, x=float(x), y=float(y),
                           log_freq=log_freq, relation=relation))
    return rows


def write_viz_csv(rows: Sequence[VizRow], path) -> None:
    """CSV with header query_id,x,y,log_freq,relation; missing values empty."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "x", "y", "log_freq", "relation"])
        for row in rows:
            writer.writerow(
                [
                    row.query_id,
                    repr(row.x),
                    repr(row.y),
                    "" if row.log_freq is None else repr(row.log_freq),
                    row.relation or "",
                ]
            )


def write_report_json(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")


def write_combined_csv(reports: Sequence[EvalReport], path) -> None:
    """Side-by-side table: Methods, ACC(%), POR(%)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Methods", "ACC(%)", "POR(%)"])
        for report in reports:
            writer.writerow([report.policy, f"{report.acc_percent:.2f}", f"{report.por_percent:.2f}"])
