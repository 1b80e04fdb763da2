"""Prototypical head with relation-level scoring.

Distance from query x to relation r is ``sum_i g_r[i] * (x[i] - c_r[i])**2``
where c_r is the mean support embedding and g_r >= 0 comes from a small
CNN over the stacked K x d support map. Without scores (g_r = 1) this is
the plain squared Euclidean distance of a vanilla prototypical network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc

CONV1_W, CONV1_B = "scorer.conv1_w", "scorer.conv1_b"
CONV2_W, CONV2_B = "scorer.conv2_w", "scorer.conv2_b"
CONV3_W, CONV3_B = "scorer.conv3_w", "scorer.conv3_b"


@dataclass
class ScorerConfig:
    channels: tuple[int, int, int] = (32, 64, 1)
    k: int = 1
    kernel: int = 3

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.channels[-1] != 1:
            raise ValueError("final scorer channel count must be 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class Prototypes:
    centroids: dc.Tensor  # (N, d)
    scores: dc.Tensor | None  # (N, d); None means all-ones


def init_scorer(store: dc.ParameterStore, config: ScorerConfig, rng, dtype=np.float32, identity_start: bool = True):
    """Add scorer parameters.

    With `identity_start` the last layer has zero weights and unit bias so
    every score vector starts at exactly 1 (plain Euclidean distance).
    """
    c1, c2, _ = config.channels
    kh = config.kernel

    def glorot(shape):
        fan_in = int(np.prod(shape[1:]))
        fan_out = shape[0] * int(np.prod(shape[2:]))
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, shape).astype(dtype)

    store.add(CONV1_W, glorot((c1, 1, kh, 1)), dc.SCORER)
    store.add(CONV1_B, np.zeros(c1, dtype=dtype), dc.SCORER)
    store.add(CONV2_W, glorot((c2, c1, kh, 1)), dc.SCORER)
    store.add(CONV2_B, np.zeros(c2, dtype=dtype), dc.SCORER)
    w3 = glorot((1, c2, config.k, 1))
    b3 = np.zeros(1, dtype=dtype)
    if identity_start:
        w3[:] = 0
        b3[:] = 1
    store.add(CONV3_W, w3, dc.SCORER)
    store.add(CONV3_B, b3, dc.SCORER)


def prototypes(support: dc.Tensor, n: int, k: int) -> dc.Tensor:
    """Per-relation mean of relation-major (N*K, d) support embeddings."""
    if k < 1 or n < 1:
        raise ValueError("every relation needs at least one support embedding")
    if support.shape[0] != n * k:
        raise ValueError(f"expected {n * k} support rows, got {support.shape[0]}")
    d = support.shape[1]
    return dc.mean(dc.reshape(support, (n, k, d)), axis=1)


def score_vectors(params: Mapping[str, dc.Tensor], support: dc.Tensor, n: int, k: int) -> dc.Tensor:
    """(N, d) non-negative score vectors from (N*K, d) support embeddings."""
    if support.shape[0] != n * k:
        raise ValueError(f"expected {n * k} support rows, got {support.shape[0]}")
    w3 = params[CONV3_W]
    if w3.shape[2] != k:
        raise ValueError(f"scorer was built for K={w3.shape[2]}, got K={k}")
    d = support.shape[1]
    pad = params[CONV1_W].shape[2] // 2
    x = dc.reshape(support, (n, 1, k, d))
    x = dc.relu(dc.conv2d(x, params[CONV1_W], params[CONV1_B], padding=(pad, 0)))
    x = dc.relu(dc.conv2d(x, params[CONV2_W], params[CONV2_B], padding=(pad, 0)))
    x = dc.relu(dc.conv2d(x, w3, params[CONV3_B]))
    return dc.reshape(x, (n, d))


def build_prototypes(
    params: Mapping[str, dc.Tensor], support: dc.Tensor, n: int, k: int, use_scores: bool = True
) -> Prototypes:
    scores = score_vectors(params, support, n, k) if use_scores else None
    return Prototypes(prototypes(support, n, k), scores)


def scored_distance(x: dc.Tensor, centroid: dc.Tensor, score: dc.Tensor) -> dc.Tensor:
    """Scalar ``score . (x - centroid)**2`` for three d-vectors."""
    if not x.shape == centroid.shape == score.shape or x.data.ndim != 1:
        raise ValueError(f"width mismatch: {x.shape}, {centroid.shape}, {score.shape}")
    return dc.dot(score, dc.square(dc.sub(x, centroid)))


def distances(queries: dc.Tensor, protos: Prototypes) -> dc.Tensor:
    """(B, N) scored squared distances from each query to each prototype."""
    B, d = queries.shape
    N = protos.centroids.shape[0]
    if protos.centroids.shape[1] != d:
        raise ValueError(f"query width {d} != prototype width {protos.centroids.shape[1]}")
    diff = dc.sub(dc.reshape(queries, (B, 1, d)), dc.reshape(protos.centroids, (1, N, d)))
    sq = dc.square(diff)
    if protos.scores is not None:
        sq = dc.mul(sq, dc.reshape(protos.scores, (1, N, d)))
    return dc.sum(sq, axis=2)


def logits(queries: dc.Tensor, protos: Prototypes) -> dc.Tensor:
    """Negative distances: the class logits of the distance softmax."""
    if protos.centroids.shape[0] == 0:
        raise ValueError("no prototypes to classify against")
    return dc.mul(distances(queries, protos), -1.0)


def classify(queries: dc.Tensor, protos: Prototypes) -> np.ndarray:
    """(B, N) class probabilities, evaluated in the log domain."""
    return np.exp(dc.log_softmax(logits(queries, protos)).data)


def classification_loss(queries: dc.Tensor, protos: Prototypes, labels: np.ndarray) -> tuple[dc.Tensor, np.ndarray]:
    """Mean cross-entropy over queries and the predicted labels."""
    z = logits(queries, protos)
    return dc.softmax_cross_entropy(z, labels), z.data.argmax(axis=1)
