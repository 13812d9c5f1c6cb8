"""Generation backends, prompt construction, and the deterministic stub world.

Prompts follow the `Q: <question> A:` template, optionally preceded by
`Context: <passage>` lines and few-shot exemplars. All clients are greedy
and deterministic, and expose an observable call counter so routing
policies can be charged for the generation calls they make.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from .dataset import QueryRecord, QuerySet
from .embedding import StubEmbeddingProvider
from .errors import ParseError, TransportError, ValidationError
from .retrieval import Passage

DEFAULT_SHOTS = 15
DEFAULT_ANSWER_TOKENS = 32
DECISION_TOKENS = 5


@dataclass(frozen=True)
class PromptSpec:
    """Everything needed to build one prompt."""

    question: str
    exemplars: tuple[tuple[str, str], ...] = ()
    passages: Optional[tuple[Passage, ...]] = None
    max_new_tokens: int = DEFAULT_ANSWER_TOKENS
    passages_first: bool = True

    def __post_init__(self):
        if self.passages is not None and len(self.passages) == 0:
            raise ValidationError("passages, when present, must be non-empty")
        if self.max_new_tokens < 1:
            raise ValidationError("max_new_tokens must be >= 1")


def build_prompt(spec: PromptSpec) -> str:
    """Render a PromptSpec to text.

    Default order: passage block (`Context: <text>` per line), exemplar
    lines (`Q: <q> A: <a>`), then the bare `Q: <question> A:` with no
    trailing answer. `passages_first=False` swaps the first two blocks.
    """
    context_lines = [f"Context: {p.text}" for p in (spec.passages or ())]
    exemplar_lines = [f"Q: {q} A: {a}" for q, a in spec.exemplars]
    blocks = context_lines + exemplar_lines if spec.passages_first else exemplar_lines + context_lines
    blocks.append(f"Q: {spec.question} A:")
    return "\n".join(blocks)


def select_exemplars(
    train: QuerySet, question: QueryRecord, shots: int = DEFAULT_SHOTS, seed: int = 0
) -> tuple[tuple[str, str], ...]:
    """Pick few-shot exemplars from the training split, seeded.

    For relation-tagged data: one exemplar per relation type other than the
    test question's relation. Otherwise: `shots` random training examples
    (never the test question itself).
    """
    rng = np.random.default_rng(seed)
    pool = [r for r in train if r.id != question.id]
    if question.relation is not None and any(r.relation for r in pool):
        chosen = []
        by_relation: dict[str, list[QueryRecord]] = {}
        for r in pool:
            if r.relation and r.relation != question.relation:
                by_relation.setdefault(r.relation, []).append(r)
        for relation in sorted(by_relation):
            group = by_relation[relation]
            chosen.append(group[int(rng.integers(len(group)))])
    else:
        k = min(shots, len(pool))
        idx = rng.choice(len(pool), size=k, replace=False)
        chosen = [pool[i] for i in sorted(idx.tolist())]
    return tuple((r.question, r.answers[0]) for r in chosen)


@runtime_checkable
class GenerationClient(Protocol):
    """Greedy text-completion backend with an observable call counter."""

    name: str

    def generate(self, prompt: str, max_new_tokens: int = DEFAULT_ANSWER_TOKENS) -> str:
        ...

    @property
    def call_count(self) -> int:
        ...


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self._value = 0

    def increment(self):
        with self._lock:
            self._value += 1

    @property
    def value(self) -> int:
        return self._value


class HttpGenerationClient:
    """Client for a `POST /generate` endpoint.

    Wire format: {"prompt": str, "max_new_tokens": int, "greedy": true}
    -> {"text": str}.
    """

    def __init__(
        self,
        base_url: str,
        name: str = "http",
        timeout: float = 60.0,
        retries: int = 2,
        client: Optional[httpx.Client] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.name = name
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)
        self._counter = _Counter()

    @property
    def call_count(self) -> int:
        return self._counter.value

    def generate(self, prompt: str, max_new_tokens: int = DEFAULT_ANSWER_TOKENS) -> str:
        if max_new_tokens < 1:
            raise ValidationError("max_new_tokens must be >= 1")
        self._counter.increment()
        payload = {"prompt": prompt, "max_new_tokens": max_new_tokens, "greedy": True}
        last_exc = None
        for attempt in range(1, self.retries + 2):
            try:
                resp = self._client.post(self.base_url + "/generate", json=payload)
                resp.raise_for_status()
                return str(resp.json()["text"])
            except httpx.TimeoutException as exc:
                last_exc = exc
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_exc = exc
        raise TransportError(f"generate call failed: {last_exc}", attempts=self.retries + 1)


class StubGenerationClient:
    """Deterministic fake LLM driven by per-question knowledge flags.

    For `Q: ... A:` prompts it answers with the gold answer when the
    question is "known" in the active mode (parametric vs retrieval), else
    with a fixed wrong string. Prompts that do not end in the QA template
    are treated as routing-decision prompts and answered via
    `decision_reply` (a string or a question -> string callable).
    """

    WRONG_ANSWER = "I do not know."

    def __init__(
        self,
        truth: dict[str, tuple[bool, bool]],  # question -> (knows_parametric, answer_in_corpus)
        gold: dict[str, str],  # question -> gold answer string
        name: str = "stub",
        decision_reply="Yes",
    ):
        self.truth = dict(truth)
        self.gold = dict(gold)
        self.name = name
        self.decision_reply = decision_reply
        self._counter = _Counter()

    @property
    def call_count(self) -> int:
        return self._counter.value

    def generate(self, prompt: str, max_new_tokens: int = DEFAULT_ANSWER_TOKENS) -> str:
        if max_new_tokens < 1:
            raise ValidationError("max_new_tokens must be >= 1")
        self._counter.increment()
        last_line = prompt.rsplit("\n", 1)[-1]
        if last_line.startswith("Q: ") and last_line.endswith(" A:"):
            question = last_line[len("Q: ") : -len(" A:")]
            has_context = any(line.startswith("Context: ") for line in prompt.split("\n"))
            knows, in_corpus = self.truth.get(question, (False, False))
            correct = in_corpus if has_context else knows
            if correct:
                return self.gold.get(question, self.WRONG_ANSWER)
            return self.WRONG_ANSWER
        if callable(self.decision_reply):
            return self.decision_reply(prompt)
        return self.decision_reply


@dataclass(frozen=True)
class StubQuery:
    """One entry of a stub-world spec."""

    id: str
    question: str
    answers: tuple[str, ...]
    knows_parametric: bool
    answer_in_corpus: bool
    entity: Optional[str] = None
    entity_freq: Optional[float] = None
    relation: Optional[str] = None


@dataclass(frozen=True)
class StubWorldSpec:
    """Declarative description of a synthetic benchmark world."""

    queries: tuple[StubQuery, ...]
    dim: int = 32
    max_layer: int = 4
    seed: int = 0
    noise_scale: float = 1.0
    signal_scale: float = 1.0
    signal_min_layer: int = 1


@dataclass
class StubWorld:
    """Instantiated stub backends plus ground truth for assertions."""

    client: StubGenerationClient
    provider: StubEmbeddingProvider
    corpus: list[Passage]
    query_set: QuerySet
    truth: dict[str, tuple[bool, bool]]  # query id -> (knows, in_corpus)

    def fresh_client(self) -> StubGenerationClient:
        """A new client with the same behavior and a zeroed call counter."""
        return StubGenerationClient(
            truth=self.client.truth, gold=self.client.gold, decision_reply=self.client.decision_reply
        )

    def retrieval_helps(self, query_id: str) -> bool:
        knows, in_corpus = self.truth[query_id]
        return in_corpus and not knows


def load_stub_world_spec(path, **world_kwargs) -> StubWorldSpec:
    """Read a stub-world spec from JSONL.

    Line schema: {"id": str, "question": str, "answers": [str],
    "knows_parametric": bool, "answer_in_corpus": bool}.
    """
    queries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            for key in ("id", "question", "answers", "knows_parametric", "answer_in_corpus"):
                if key not in obj:
                    raise ParseError(f"missing required field {key!r}", line=line_no)
            queries.append(
                StubQuery(
                    id=str(obj["id"]),
                    question=str(obj["question"]),
                    answers=tuple(str(a) for a in obj["answers"]),
                    knows_parametric=bool(obj["knows_parametric"]),
                    answer_in_corpus=bool(obj["answer_in_corpus"]),
                    entity=obj.get("entity"),
                    entity_freq=obj.get("entity_freq"),
                    relation=obj.get("relation"),
                )
            )
    return StubWorldSpec(queries=tuple(queries), **world_kwargs)


def make_stub_world(spec: StubWorldSpec) -> StubWorld:
    """Instantiate generation client, embedding provider, and corpus.

    The client answers correctly without passages iff knows_parametric and
    correctly with passages iff answer_in_corpus. The embedding provider
    encodes each flag as a +/- offset on its own coordinate block, applied
    only at layers >= signal_min_layer, plus seeded noise. The corpus
    contains the gold answer exactly for answer_in_corpus queries.
    """
    truth_by_question = {}
    gold_by_question = {}
    signals = {}
    records = []
    corpus = []
    truth_by_id = {}
    block = max(1, spec.dim // 8)
    signal_coords = [list(range(0, block)), list(range(block, 2 * block))]
    for q in spec.queries:
        truth_by_question[q.question] = (q.knows_parametric, q.answer_in_corpus)
        gold_by_question[q.question] = q.answers[0]
        truth_by_id[q.id] = (q.knows_parametric, q.answer_in_corpus)
        signals[q.question] = (
            1.0 if q.knows_parametric else -1.0,
            1.0 if q.answer_in_corpus else -1.0,
        )
        records.append(
            QueryRecord(
                id=q.id,
                question=q.question,
                answers=q.answers,
                entity=q.entity,
                entity_freq=q.entity_freq,
                relation=q.relation,
            )
        )
        if q.answer_in_corpus:
            text = f"{q.question} The answer is {q.answers[0]}."
        else:
            text = f"{q.question} No relevant facts are recorded."
        corpus.append(Passage(doc_id=f"doc-{q.id}", text=text))
    client = StubGenerationClient(truth=truth_by_question, gold=gold_by_question)
    provider = StubEmbeddingProvider(
        dim=spec.dim,
        max_layer=spec.max_layer,
        seed=spec.seed,
        noise_scale=spec.noise_scale,
        signal_scale=spec.signal_scale,
        signals=signals,
        signal_coords=signal_coords,
        signal_min_layer=spec.signal_min_layer,
    )
    return StubWorld(
        client=client,
        provider=provider,
        corpus=corpus,
        query_set=QuerySet(tuple(records), name="stub-world"),
        truth=truth_by_id,
    )


def random_stub_world_spec(
    n: int,
    seed: int = 0,
    p_knows: float = 0.4,
    p_in_corpus: float = 0.6,
    dim: int = 32,
    noise_scale: float = 1.0,
    signal_scale: float = 1.0,
    signal_min_layer: int = 1,
) -> StubWorldSpec:
    """Random stub-world spec with unique, lexically disjoint questions.

    Entity frequency is drawn high for parametrically known queries and low
    otherwise, so frequency-threshold routing has signal to find.
    """
    rng = np.random.default_rng(seed)
    queries = []
    for i in range(n):
        knows = bool(rng.random() < p_knows)
        in_corpus = bool(rng.random() < p_in_corpus)
        freq = float(rng.uniform(1000, 2000) if knows else rng.uniform(0, 900))
        queries.append(
            StubQuery(
                id=f"sq{i:05d}",
                question=f"What is the zorp of entity{i:05d}?",
                answers=(f"goldanswer{i:05d}",),
                knows_parametric=knows,
                answer_in_corpus=in_corpus,
                entity=f"entity{i:05d}",
                entity_freq=freq,
            )
        )
    return StubWorldSpec(
        queries=tuple(queries),
        dim=dim,
        seed=seed,
        noise_scale=noise_scale,
        signal_scale=signal_scale,
        signal_min_layer=signal_min_layer,
    )
