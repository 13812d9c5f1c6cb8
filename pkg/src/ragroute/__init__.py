"""ragroute: adaptive retrieval routing for retrieval-augmented generation.

Decide per question whether an LLM needs retrieved context, using a small
classifier over the model's early-layer sentence embedding, and benchmark
that policy against constant, frequency-threshold, prompting, and oracle
routing.
"""

__version__ = "0.1.0"

from .dataset import QueryRecord, QuerySet, load_query_set, render_template, split_query_set
from .embedding import SentenceEmbedding, average_pool, sentence_embedding
from .retrieval import BM25Index, Passage, build_index, search
from .llm_client import PromptSpec, build_prompt, make_stub_world
from .labeler import LabeledExample, LabeledSet, answer_correct, build_labeled_set
from .classifier import ClassifierModel, TrainConfig, decide, forward, init_model, train
from .routers import (
    EmbeddingRouter,
    FrequencyRouter,
    FullRetrievalRouter,
    NoRetrievalRouter,
    OracleRouter,
    PromptedRouter,
    RoutingDecision,
    fit_frequency_thresholds,
)
from .evaluation import EvalConfig, EvalReport, emit_viz, evaluate, sweep_layers

__all__ = [
    "QueryRecord", "QuerySet", "load_query_set", "render_template", "split_query_set",
    "SentenceEmbedding", "average_pool", "sentence_embedding",
    "BM25Index", "Passage", "build_index", "search",
    "PromptSpec", "build_prompt", "make_stub_world",
    "LabeledExample", "LabeledSet", "answer_correct", "build_labeled_set",
    "ClassifierModel", "TrainConfig", "decide", "forward", "init_model", "train",
    "EmbeddingRouter", "FrequencyRouter", "FullRetrievalRouter", "NoRetrievalRouter",
    "OracleRouter", "PromptedRouter", "RoutingDecision", "fit_frequency_thresholds",
    "EvalConfig", "EvalReport", "emit_viz", "evaluate", "sweep_layers",
]
