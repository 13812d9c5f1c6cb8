"""Routing policies: decide per query whether to retrieve before answering.

All policies share the Router interface (`name`, `route(query)`). The
oracle and the frequency-threshold policy need side information (hindsight
correctness bits, fitted thresholds); the prompting policies spend one
generation call per decision, everything else spends zero.
"""

from __future__ import annotations

import datetime
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, runtime_checkable

from .classifier import ClassifierModel, forward
from .dataset import QueryRecord, QuerySet
from .embedding import DEFAULT_LAYER, EmbeddingProvider, sentence_embedding
from .errors import ValidationError
from .llm_client import DECISION_TOKENS, GenerationClient

VANILLA_DECISION_TEMPLATE = (
    "Do you need to retrieve external knowledge to answer the question "
    "correctly? Answer Yes or No.\nQuestion: {question}\nAnswer:"
)

TAARE_DECISION_TEMPLATE = (
    "Today's date is {date}. Given your internal knowledge and its cutoff, "
    "do you need to retrieve external knowledge to answer the question "
    "correctly? Answer Yes or No.\nQuestion: {question}\nAnswer:"
)


@dataclass(frozen=True)
class RoutingDecision:
    retrieve: bool
    policy: str
    score: Optional[float] = None
    decision_latency: float = 0.0  # seconds
    generation_calls_used: int = 0


@runtime_checkable
class Router(Protocol):
    name: str

    def route(self, query: QueryRecord) -> RoutingDecision:
        ...


class NoRetrievalRouter:
    """Never retrieve."""

    name = "no-retrieval"

    def route(self, query: QueryRecord) -> RoutingDecision:
        t0 = time.perf_counter()
        return RoutingDecision(
            retrieve=False, policy=self.name, decision_latency=time.perf_counter() - t0
        )


class FullRetrievalRouter:
    """Always retrieve."""

    name = "full-retrieval"

    def route(self, query: QueryRecord) -> RoutingDecision:
        t0 = time.perf_counter()
        return RoutingDecision(
            retrieve=True, policy=self.name, decision_latency=time.perf_counter() - t0
        )


def route_none(query: QueryRecord) -> RoutingDecision:
    return NoRetrievalRouter().route(query)


def route_all(query: QueryRecord) -> RoutingDecision:
    return FullRetrievalRouter().route(query)


@dataclass(frozen=True)
class FrequencyThresholds:
    """Per-relation frequency cutoffs; retrieve iff freq < threshold."""

    by_relation: dict[str, float]
    default: float

    def threshold_for(self, relation: Optional[str]) -> float:
        if relation is not None and relation in self.by_relation:
            return self.by_relation[relation]
        return self.default

    def to_json(self) -> str:
        out = dict(self.by_relation)
        out["default"] = self.default
        return json.dumps(out, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FrequencyThresholds":
        obj = json.loads(text)
        default = obj.pop("default", math.inf)
        return cls(by_relation={k: float(v) for k, v in obj.items()}, default=float(default))


def _best_threshold(rows: list[tuple[float, bool, bool]]) -> float:
    """Scan candidate cutoffs over (freq, nr_correct, fr_correct) rows.

    Maximizes training accuracy of the induced policy (retrieve iff
    freq < threshold); ties go to the smaller threshold (fewer retrievals).
    Candidates are -inf, every distinct frequency, and +inf.
    """
    candidates = sorted({-math.inf, math.inf, *(freq for freq, _, _ in rows)})
    best_thr, best_correct = None, -1
    for thr in candidates:
        correct = sum(
            (fr if freq < thr else nr) for freq, nr, fr in rows
        )
        if correct > best_correct:
            best_thr, best_correct = thr, correct
    return best_thr


def fit_frequency_thresholds(
    train: QuerySet, correctness: dict[str, tuple[bool, bool]]
) -> FrequencyThresholds:
    """Brute-force per-relation thresholds from dual-inference correctness.

    `correctness` maps query id -> (nr_correct, fr_correct). Queries
    without entity_freq are ignored; if none carry a frequency the policy
    is inapplicable and an error is raised.
    """
    grouped: dict[Optional[str], list[tuple[float, bool, bool]]] = {}
    pooled: list[tuple[float, bool, bool]] = []
    for record in train:
        if record.entity_freq is None or record.id not in correctness:
            continue
        nr, fr = correctness[record.id]
        row = (record.entity_freq, nr, fr)
        grouped.setdefault(record.relation, []).append(row)
        pooled.append(row)
    if not pooled:
        raise ValidationError(
            "no training queries carry entity_freq; frequency-threshold routing "
            "is inapplicable to this dataset"
        )
    by_relation = {
        relation: _best_threshold(rows)
        for relation, rows in grouped.items()
        if relation is not None
    }
    return FrequencyThresholds(by_relation=by_relation, default=_best_threshold(pooled))


class FrequencyRouter:
    """Retrieve iff the query's entity frequency falls strictly below the cutoff."""

    name = "frequency"

    def __init__(self, thresholds: FrequencyThresholds):
        self.thresholds = thresholds

    def route(self, query: QueryRecord) -> RoutingDecision:
        t0 = time.perf_counter()
        if query.entity_freq is None:
            raise ValidationError(f"query {query.id!r} has no entity_freq")
        thr = self.thresholds.threshold_for(query.relation)
        return RoutingDecision(
            retrieve=query.entity_freq < thr,
            policy=self.name,
            score=query.entity_freq,
            decision_latency=time.perf_counter() - t0,
        )


def route_frequency(query: QueryRecord, thresholds: FrequencyThresholds) -> RoutingDecision:
    return FrequencyRouter(thresholds).route(query)


def parse_yes_no(completion: str) -> bool:
    """First "yes"/"no" word wins; neither present defaults to retrieve."""
    words = "".join(c.lower() if c.isalnum() else " " for c in completion).split()
    for word in words:
        if word == "yes":
            return True
        if word == "no":
            return False
    return True


class PromptedRouter:
    """Ask the LLM itself whether retrieval is needed (one call per decision)."""

    def __init__(
        self,
        client: GenerationClient,
        variant: str = "vanilla",
        clock: Callable[[], datetime.date] = datetime.date.today,
        template: Optional[str] = None,
    ):
        if variant not in ("vanilla", "taare"):
            raise ValidationError(f"unknown prompting variant {variant!r}")
        self.client = client
        self.variant = variant
        self.clock = clock
        self.template = template or (
            VANILLA_DECISION_TEMPLATE if variant == "vanilla" else TAARE_DECISION_TEMPLATE
        )
        self.name = f"prompted-{variant}"

    def route(self, query: QueryRecord) -> RoutingDecision:
        t0 = time.perf_counter()
        prompt = self.template.format(
            question=query.question,
            date=self.clock().isoformat() if "{date}" in self.template else "",
        )
        completion = self.client.generate(prompt, max_new_tokens=DECISION_TOKENS)
        return RoutingDecision(
            retrieve=parse_yes_no(completion),
            policy=self.name,
            decision_latency=time.perf_counter() - t0,
            generation_calls_used=1,
        )


def route_prompted(
    query: QueryRecord,
    client: GenerationClient,
    variant: str = "vanilla",
    clock: Callable[[], datetime.date] = datetime.date.today,
) -> RoutingDecision:
    return PromptedRouter(client, variant=variant, clock=clock).route(query)


class EmbeddingRouter:
    """Route via the trained classifier on the question's sentence embedding."""

    name = "ei"

    def __init__(
        self,
        model: ClassifierModel,
        provider: EmbeddingProvider,
        threshold: float = 0.5,
        layer: Optional[int] = None,
        include_bos: bool = False,
    ):
        if provider.dim != model.d:
            raise ValidationError(
                f"provider dimension {provider.dim} does not match model d={model.d}"
            )
        self.model = model
        self.provider = provider
        self.threshold = threshold
        self.layer = model.layer if layer is None else layer
        self.include_bos = include_bos

    def route(self, query: QueryRecord) -> RoutingDecision:
        t0 = time.perf_counter()
        emb = sentence_embedding(
            query.question, self.provider, layer=self.layer,
            include_bos=self.include_bos, query_id=query.id,
        )
        p = forward(self.model, emb)
        return RoutingDecision(
            retrieve=p >= self.threshold,
            policy=self.name,
            score=p,
            decision_latency=time.perf_counter() - t0,
        )


def route_embedding(
    query: QueryRecord,
    model: ClassifierModel,
    provider: EmbeddingProvider,
    threshold: float = 0.5,
) -> RoutingDecision:
    return EmbeddingRouter(model, provider, threshold=threshold).route(query)


class OracleRouter:
    """Hindsight router: retrieve exactly when retrieval strictly helps.

    Needs a correctness-annotation pass over the test set (two generations
    per query, done once and cached). An evaluation ceiling, not a
    deployable policy.
    """

    name = "oracle"

    def __init__(self, correctness: dict[str, tuple[bool, bool]]):
        self.correctness = dict(correctness)

    def route(self, query: QueryRecord) -> RoutingDecision:
        t0 = time.perf_counter()
        if query.id not in self.correctness:
            raise ValidationError(f"no correctness annotation for query {query.id!r}")
        nr_correct, fr_correct = self.correctness[query.id]
        return RoutingDecision(
            retrieve=fr_correct and not nr_correct,
            policy=self.name,
            decision_latency=time.perf_counter() - t0,
        )


def route_oracle(query: QueryRecord, correctness: tuple[bool, bool]) -> RoutingDecision:
    return OracleRouter({query.id: correctness}).route(query)
