"""Assemble generation/embedding/retrieval backends from configuration.

Two modes: real HTTP endpoints (embed_url/generate_url) or a deterministic
stub world loaded from a JSONL spec. The stub path is what the synthetic
benchmarks and the test suite run against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .config import cfg_get
from .embedding import EmbeddingProvider, HttpEmbeddingProvider
from .errors import ValidationError
from .llm_client import (
    GenerationClient,
    HttpGenerationClient,
    StubWorld,
    load_stub_world_spec,
    make_stub_world,
)
from .retrieval import BM25Index, build_index, load_corpus, load_index


@dataclass
class Backends:
    client: GenerationClient
    provider: EmbeddingProvider
    index: BM25Index
    stub_world: Optional[StubWorld] = None


def build_backends(config: dict) -> Backends:
    """Instantiate backends per the [backends] and [paths] config sections."""
    stub_path = cfg_get(config, "backends", "stub_world")
    if stub_path:
        spec = load_stub_world_spec(
            stub_path,
            dim=cfg_get(config, "backends", "embed_dim", 32),
            seed=cfg_get(config, "backends", "seed", 0),
            noise_scale=cfg_get(config, "backends", "noise_scale", 1.0),
            signal_scale=cfg_get(config, "backends", "signal_scale", 1.0),
        )
        world = make_stub_world(spec)
        index = build_index(world.corpus)
        return Backends(
            client=world.client, provider=world.provider, index=index, stub_world=world
        )

    generate_url = cfg_get(config, "backends", "generate_url")
    embed_url = cfg_get(config, "backends", "embed_url")
    if not generate_url or not embed_url:
        raise ValidationError(
            "config must provide either backends.stub_world or both "
            "backends.generate_url and backends.embed_url"
        )
    timeout = cfg_get(config, "backends", "timeout", 60.0)
    client = HttpGenerationClient(generate_url, timeout=timeout)
    provider = HttpEmbeddingProvider(
        embed_url,
        dim=cfg_get(config, "backends", "embed_dim", 4096),
        max_layer=cfg_get(config, "backends", "embed_max_layer", 32),
        timeout=timeout,
    )
    index_path = cfg_get(config, "paths", "index")
    corpus_path = cfg_get(config, "paths", "corpus")
    if index_path:
        index = load_index(index_path)
    elif corpus_path:
        index = build_index(load_corpus(corpus_path))
    else:
        raise ValidationError("config must provide paths.index or paths.corpus")
    return Backends(client=client, provider=provider, index=index)
