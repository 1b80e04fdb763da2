"""Domain discriminator and the paired discriminator / fooling objectives.

Logit column 0 is "member of S", column 1 is "member of A". The
discriminator objective sees embeddings as constants and trains only the
discriminator; the fooling objective holds the discriminator fixed and
trains the encoder against flipped membership labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc

W1, B1, W2, B2 = "disc.w1", "disc.b1", "disc.w2", "disc.b2"


@dataclass
class DiscriminatorConfig:
    input_dim: int = 230
    hidden_dim: int = 230


def init_discriminator(store: dc.ParameterStore, config: DiscriminatorConfig, rng, dtype=np.float32):
    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)

    store.add(W1, glorot(config.input_dim, config.hidden_dim), dc.DISCRIMINATOR)
    store.add(B1, np.zeros(config.hidden_dim, dtype=dtype), dc.DISCRIMINATOR)
    store.add(W2, glorot(config.hidden_dim, 2), dc.DISCRIMINATOR)
    store.add(B2, np.zeros(2, dtype=dtype), dc.DISCRIMINATOR)


def discriminate(params: Mapping[str, dc.Tensor], embeddings: dc.Tensor) -> dc.Tensor:
    w1 = params[W1]
    if embeddings.data.ndim != 2 or embeddings.shape[1] != w1.shape[0]:
        raise ValueError(f"embedding width {embeddings.shape[-1]} != discriminator input {w1.shape[0]}")
    hidden = dc.relu(dc.add(dc.matmul(embeddings, w1), params[B1]))
    return dc.add(dc.matmul(hidden, params[W2]), params[B2])


def _targets(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=bool)
    return np.where(labels, 0, 1)


def discriminator_loss(logits: dc.Tensor, labels) -> dc.Tensor:
    """Mean softmax cross-entropy against true membership (labels True iff in S)."""
    if len(labels) == 0:
        raise ValueError("empty membership batch")
    return dc.softmax_cross_entropy(logits, _targets(labels))


def fooling_loss(logits: dc.Tensor, labels) -> dc.Tensor:
    """Cross-entropy against flipped membership."""
    return discriminator_loss(logits, ~np.asarray(labels, dtype=bool))


def membership_batch(s_emb: dc.Tensor, a_emb: dc.Tensor) -> tuple[dc.Tensor, np.ndarray]:
    if s_emb.shape != a_emb.shape:
        raise ValueError(f"unbalanced membership batch: S {s_emb.shape} vs A {a_emb.shape}")
    labels = np.concatenate([np.ones(s_emb.shape[0], bool), np.zeros(a_emb.shape[0], bool)])
    return dc.concat([s_emb, a_emb], axis=0), labels


def membership_accuracy(logits: dc.Tensor | np.ndarray, labels) -> float:
    data = logits.data if isinstance(logits, dc.Tensor) else logits
    return float(np.mean(data.argmax(axis=1) == _targets(labels)))


def discriminator_objective(store: dc.ParameterStore, s_emb: dc.Tensor, a_emb: dc.Tensor):
    """Loss reaching only discriminator parameters; returns (loss, logits, labels)."""
    batch, labels = membership_batch(s_emb.detach(), a_emb.detach())
    logits = discriminate(store.view(), batch)
    return discriminator_loss(logits, labels), logits, labels


def fooling_objective(store: dc.ParameterStore, s_emb: dc.Tensor, a_emb: dc.Tensor):
    """Loss reaching only the encoder (through the embeddings); returns (loss, logits, labels)."""
    batch, labels = membership_batch(s_emb, a_emb)
    logits = discriminate(store.view(trainable=(dc.ENCODER,)), batch)
    return fooling_loss(logits, labels), logits, labels
