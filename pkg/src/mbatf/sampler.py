"""N-way K-shot episode construction.

Each episode carries a support set, a query set and an adversarial set
drawn from the source corpus over N relations disjoint from the
episode's own. Rows inside every batch are relation-major: the first K
support rows belong to relation 0, the next K to relation 1, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .corpus import IndexedBatch, IndexedCorpus
from .rng import substream


class SamplingError(ValueError):
    """Corpus too small for the requested episode shape."""


@dataclass
class LabeledSet:
    """Relation-major batch plus, per row, (relation id, corpus row)."""

    batch: IndexedBatch
    labels: np.ndarray
    refs: list[tuple[str, int]]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class AdversarialSet:
    relations: list[str]
    support: LabeledSet
    query: LabeledSet


@dataclass
class Episode:
    relations: list[str]
    n: int
    k: int
    q: int
    support: LabeledSet
    query: LabeledSet
    adversarial: AdversarialSet | None = None

    def to_dict(self) -> dict:
        """Debug/fixture dump: relation ids and corpus instance indices only."""

        def refs(s: LabeledSet):
            return [[rel, int(i)] for rel, i in s.refs]

        out = {
            "relations": list(self.relations),
            "n": self.n,
            "k": self.k,
            "q": self.q,
            "support": refs(self.support),
            "query": refs(self.query),
        }
        if self.adversarial is not None:
            out["adversarial"] = {
                "relations": list(self.adversarial.relations),
                "support": refs(self.adversarial.support),
                "query": refs(self.adversarial.query),
            }
        return out


def _eligible(corpus: IndexedCorpus, need: int, exclude=()) -> list[str]:
    exclude = set(exclude)
    return [r for r in corpus.relations if r not in exclude and corpus.size(r) >= need]


def _draw(corpus: IndexedCorpus, relations: list[str], k: int, q: int, rng) -> tuple[LabeledSet, LabeledSet]:
    s_parts, q_parts, s_refs, q_refs = [], [], [], []
    for rel in relations:
        picks = rng.choice(corpus.size(rel), size=k + q, replace=False)
        batch, rows = corpus.batches[rel], corpus.rows[rel]
        s_parts.append(batch.take(picks[:k]))
        q_parts.append(batch.take(picks[k:]))
        s_refs += [(rel, int(rows[i])) for i in picks[:k]]
        q_refs += [(rel, int(rows[i])) for i in picks[k:]]
    n = len(relations)
    support = LabeledSet(IndexedBatch.concat(s_parts), np.repeat(np.arange(n), k), s_refs)
    query = LabeledSet(IndexedBatch.concat(q_parts), np.repeat(np.arange(n), q), q_refs)
    return support, query


def sample_adversarial(
    source: IndexedCorpus, exclude, n: int, k: int, q: int, rng: np.random.Generator
) -> AdversarialSet:
    """N source relations outside `exclude`, with K support and q query rows each."""
    pool = _eligible(source, k + q, exclude)
    if len(pool) < n:
        raise SamplingError(
            f"adversarial set needs {n} source relations with >= {k + q} instances outside the "
            f"episode, found {len(pool)}"
        )
    relations = [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
    support, query = _draw(source, relations, k, q, rng)
    return AdversarialSet(relations, support, query)


def sample_episode(
    corpus: IndexedCorpus,
    source: IndexedCorpus | None,
    n: int,
    k: int,
    q: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw one episode; pass ``source=None`` to skip the adversarial set."""
    if n < 1 or k < 1 or q < 1:
        raise SamplingError(f"need n, k, q >= 1, got {(n, k, q)}")
    pool = _eligible(corpus, k + q)
    if len(pool) < n:
        raise SamplingError(
            f"{n}-way episode with {k}+{q} instances per relation needs {n} relations, "
            f"{corpus.domain or 'corpus'} has {len(pool)} eligible"
        )
    relations = [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
    support, query = _draw(corpus, relations, k, q, rng)
    adversarial = None
    if source is not None:
        adversarial = sample_adversarial(source, relations, n, k, q, rng)
    return Episode(relations, n, k, q, support, query, adversarial)


@dataclass
class StreamConfig:
    n: int = 5
    k: int = 1
    q: int = 1
    n_episodes: int | None = None
    with_adversarial: bool = True
    name: str = "episodes"


def episode_at(corpus, source, config: StreamConfig, seed: int, index: int) -> Episode:
    """Episode `index` of the stream; each one has its own derived RNG."""
    rng = substream(seed, config.name, index)
    return sample_episode(corpus, source if config.with_adversarial else None, config.n, config.k, config.q, rng)


def episode_stream(corpus, source, config: StreamConfig, seed: int) -> Iterator[Episode]:
    """Reproducible episode sequence (endless when n_episodes is None)."""
    i = 0
    while config.n_episodes is None or i < config.n_episodes:
        yield episode_at(corpus, source, config, seed, i)
        i += 1
