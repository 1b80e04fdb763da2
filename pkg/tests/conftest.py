import json

import numpy as np
import pytest

from mbatf.corpus import SynthConfig, index_corpus, random_table, synth_generate
from mbatf.encoder import EncoderConfig
from mbatf.metaloop import ModelConfig

FIXTURE = {
    "P1": [
        {"tokens": ["Alice", "was", "born", "in", "Paris", "."], "h": ["Alice", "Q1", [[0]]], "t": ["Paris", "Q2", [[4]]]},
        {"tokens": ["Bob", "Smith", "lives", "in", "New", "York"], "h": ["Bob Smith", "Q3", [[0, 1]]],
         "t": ["New York", "Q4", [[4, 5]]]},
        {"tokens": ["Carol", "moved", "to", "Rome"], "h": ["Carol", "Q5", [[0]]], "t": ["Rome", "Q6", [[3]]]},
    ],
    "P2": [
        {"tokens": ["the", "Nile", "flows", "into", "the", "sea"], "h": ["Nile", "Q7", [[1]]], "t": ["sea", "Q8", [[5]]]},
        {"tokens": ["Rhine", "enters", "the", "North", "Sea", "as", "the", "Rhine", "delta"],
         "h": ["Rhine", "Q9", [[0], [7]]],
         "t": ["North Sea", "Q10", [[3, 4]]]},
        {"tokens": ["Danube", "reaches", "Black", "Sea"], "h": ["Danube", "Q11", [[0]]], "t": ["Black Sea", "Q12", [[2, 3]]]},
    ],
}


@pytest.fixture
def fixture_path(tmp_path):
    path = tmp_path / "fixture.json"
    path.write_text(json.dumps(FIXTURE))
    return path


@pytest.fixture(scope="session")
def toy_domains():
    """Small synthetic source/target pair indexed against a shared random table."""
    src, tgt = synth_generate(SynthConfig(n_relations=12, instances_per_relation=12, vocab_size=60, domain_shift=0.5), 4)
    table = random_table(src.vocabulary() | tgt.vocabulary(), 8, seed=4)
    return src, tgt, table, index_corpus(src, table, 16), index_corpus(tgt, table, 16)


def toy_config(**overrides) -> ModelConfig:
    base = dict(
        encoder=EncoderConfig(d_word=8, d_pos=2, max_len=16, window=3, n_filters=8),
        n=2,
        k=2,
        q=2,
        scorer_channels=(4, 6, 1),
        disc_hidden=8,
        dtype="float64",
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
