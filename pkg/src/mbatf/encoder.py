"""CNN sentence encoder: word + two position embeddings, conv, masked max-pool, relu."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .corpus import EmbeddingTable, IndexedBatch

WORD = "encoder.word_emb"
HEAD_POS = "encoder.head_pos_emb"
TAIL_POS = "encoder.tail_pos_emb"
CONV_W = "encoder.conv_w"
CONV_B = "encoder.conv_b"


@dataclass
class EncoderConfig:
    d_word: int = 50
    d_pos: int = 5
    max_len: int = 128
    window: int = 3
    n_filters: int = 230

    @property
    def d_in(self) -> int:
        return self.d_word + 2 * self.d_pos

    @property
    def d_out(self) -> int:
        return self.n_filters


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


def init_encoder(store: dc.ParameterStore, config: EncoderConfig, table: EmbeddingTable, rng, dtype=np.float32):
    if table.d_word != config.d_word:
        raise ValueError(f"embedding width {table.d_word} != d_word {config.d_word}")
    if config.window % 2 != 1:
        raise ValueError("window must be odd for same-padding")
    n_pos = 2 * config.max_len + 1
    store.add(WORD, table.matrix.astype(dtype), dc.ENCODER)
    store.add(HEAD_POS, rng.uniform(-0.5, 0.5, (n_pos, config.d_pos)).astype(dtype), dc.ENCODER)
    store.add(TAIL_POS, rng.uniform(-0.5, 0.5, (n_pos, config.d_pos)).astype(dtype), dc.ENCODER)
    fan_in = config.window * config.d_in
    store.add(
        CONV_W,
        _glorot(rng, (config.window, config.d_in, config.n_filters), fan_in, config.n_filters).astype(dtype),
        dc.ENCODER,
    )
    store.add(CONV_B, np.zeros(config.n_filters, dtype=dtype), dc.ENCODER)


def encode(params: Mapping[str, dc.Tensor], batch: IndexedBatch) -> dc.Tensor:
    """(B, n_filters) instance embeddings.

    Only the first max(lengths) columns are processed; inputs beyond each
    sentence's length are zeroed before the convolution, so trailing PAD
    never changes the output. A zero-length row is pooled over position 0.
    """
    lengths = np.maximum(np.asarray(batch.lengths), 1)
    L = int(lengths.max())
    word = params[WORD]
    x = dc.concat(
        [
            dc.embedding(word, batch.token_ids[:, :L]),
            dc.embedding(params[HEAD_POS], batch.head_pos[:, :L]),
            dc.embedding(params[TAIL_POS], batch.tail_pos[:, :L]),
        ],
        axis=2,
    )
    mask = (np.arange(L)[None, :] < lengths[:, None]).astype(word.dtype)[:, :, None]
    x = dc.mul(x, mask)
    w = params[CONV_W]
    h = dc.conv1d(x, w, params[CONV_B], padding=w.shape[0] // 2)
    return dc.relu(dc.masked_max_pool(h, lengths))
