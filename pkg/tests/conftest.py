import pytest

from ragroute.llm_client import StubQuery, StubWorldSpec, make_stub_world
from ragroute.retrieval import build_index


def world_queries():
    # One of each (knows_parametric, answer_in_corpus) combination, plus
    # extras so label counts are asymmetric.
    flags = [
        (True, True),
        (True, False),
        (False, True),
        (False, False),
        (False, True),
        (True, True),
        (False, True),
        (False, False),
        (True, False),
        (False, True),
    ]
    return tuple(
        StubQuery(
            id=f"q{i}",
            question=f"What is the zorp of entity{i:03d}?",
            answers=(f"goldanswer{i:03d}",),
            knows_parametric=knows,
            answer_in_corpus=in_corpus,
            entity=f"entity{i:03d}",
            entity_freq=float(1500 if knows else 100 + i),
        )
        for i, (knows, in_corpus) in enumerate(flags)
    )


@pytest.fixture
def small_world():
    spec = StubWorldSpec(queries=world_queries(), dim=16, seed=11, signal_scale=2.0)
    return make_stub_world(spec)


@pytest.fixture
def small_index(small_world):
    return build_index(small_world.corpus)
