"""HTTP routing service: /route, /answer, /healthz.

The service holds immutable state (classifier, index, backends) built once
at startup; request handling is therefore safe under concurrency.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import metadata
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .classifier import ClassifierModel
from .dataset import QueryRecord, QuerySet
from .embedding import EmbeddingProvider
from .errors import RagRouteError
from .llm_client import (
    DEFAULT_ANSWER_TOKENS,
    DEFAULT_SHOTS,
    GenerationClient,
    PromptSpec,
    build_prompt,
    select_exemplars,
)
from .retrieval import DEFAULT_TOP_K, BM25Index, search
from .routers import Router


def _version() -> str:
    try:
        return metadata.version("ragroute")
    except metadata.PackageNotFoundError:
        return "dev"


@dataclass
class ServiceState:
    """Everything a running service needs; immutable after construction."""

    router: Router
    client: GenerationClient
    index: BM25Index
    exemplar_source: Optional[QuerySet] = None
    shots: int = DEFAULT_SHOTS
    top_k: int = DEFAULT_TOP_K
    max_new_tokens: int = DEFAULT_ANSWER_TOKENS
    seed: int = 0


class RouteRequest(BaseModel):
    question: str


class RouteResponse(BaseModel):
    retrieve: bool
    score: Optional[float]
    policy: str
    decision_ms: float


class AnswerResponse(BaseModel):
    answer: str
    retrieved: bool
    passages: list[dict]
    policy: str


def _ad_hoc_record(question: str) -> QueryRecord:
    """Wrap a bare question; the placeholder answer is never scored."""
    return QueryRecord(id=f"adhoc:{question}", question=question, answers=("",))


def build_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="ragroute", version=_version())

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": _version(), "policy": state.router.name}

    @app.post("/route", response_model=RouteResponse)
    def route(req: RouteRequest):
        try:
            query = _ad_hoc_record(req.question)
            decision = state.router.route(query)
        except RagRouteError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return RouteResponse(
            retrieve=decision.retrieve,
            score=decision.score,
            policy=decision.policy,
            decision_ms=decision.decision_latency * 1000.0,
        )

    @app.post("/answer", response_model=AnswerResponse)
    def answer(req: RouteRequest):
        try:
            query = _ad_hoc_record(req.question)
            decision = state.router.route(query)
            passages = None
            hits = []
            if decision.retrieve:
                hits = search(state.index, req.question, k=state.top_k)
                passages = tuple(p for p, _ in hits) or None
            exemplars = ()
            if state.exemplar_source is not None:
                exemplars = select_exemplars(
                    state.exemplar_source, query, shots=state.shots, seed=state.seed
                )
            prompt = build_prompt(
                PromptSpec(question=req.question, exemplars=exemplars, passages=passages)
            )
            completion = state.client.generate(prompt, max_new_tokens=state.max_new_tokens)
        except RagRouteError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return AnswerResponse(
            answer=completion,
            retrieved=decision.retrieve,
            passages=[{"doc_id": p.doc_id, "score": score} for p, score in hits],
            policy=decision.policy,
        )

    return app
