"""Meta-training, per-task adversarial finetuning at meta-test time, evaluation, checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import diffcore as dc
from .adversary import (
    DiscriminatorConfig,
    discriminator_objective,
    fooling_objective,
    init_discriminator,
)
from .corpus import EmbeddingTable, IndexedCorpus
from .encoder import EncoderConfig, encode, init_encoder
from .protonet import ScorerConfig, build_prototypes, classification_loss, classify, init_scorer
from .rng import substream
from .sampler import Episode, StreamConfig, episode_at, sample_adversarial

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MBATFCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n: int = 5
    k: int = 1
    q: int = 1
    lr: float = 0.1
    scorer_channels: tuple[int, int, int] = (32, 64, 1)
    disc_hidden: int = 230
    use_meta_adv: bool = True
    use_relation_score: bool = True
    adv_iters_train: int = 1
    adv_iters_test: int = 5
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.scorer_channels = tuple(self.scorer_channels)
        if self.adv_iters_train < 0 or self.adv_iters_test < 0:
            raise ValueError("ADV iteration counts must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class TrainState:
    store: dc.ParameterStore
    config: ModelConfig
    words: list[str]
    seed: int = 0
    episodes_seen: int = 0

    def clone(self) -> "TrainState":
        return TrainState(self.store.clone(), copy.deepcopy(self.config), list(self.words), self.seed, self.episodes_seen)


def init_state(config: ModelConfig, table: EmbeddingTable, seed: int) -> TrainState:
    """Fresh parameters; every role is always initialised so ablations share draws."""
    dtype = np.dtype(config.dtype)
    store = dc.ParameterStore()
    init_encoder(store, config.encoder, table, substream(seed, "init.encoder"), dtype)
    init_scorer(store, ScorerConfig(config.scorer_channels, config.k), substream(seed, "init.scorer"), dtype)
    init_discriminator(
        store, DiscriminatorConfig(config.encoder.d_out, config.disc_hidden), substream(seed, "init.disc"), dtype
    )
    return TrainState(store, config, table.words(), seed)


def _check_episode(state: TrainState, episode: Episode) -> None:
    cfg = state.config
    if episode.k != cfg.k and cfg.use_relation_score:
        raise ValueError(f"episode has K={episode.k} but the scorer was built for K={cfg.k}")
    if len(episode.support) != episode.n * episode.k:
        raise ValueError("support size does not match N*K")


def _adv_iteration(store: dc.ParameterStore, s_batch, a_batch, lr: float) -> tuple[float, float]:
    """One discriminator step, then one encoder fooling step, on S vs A.support."""
    params = store.view()
    s_emb = encode(params, s_batch)
    a_emb = encode(params, a_batch)
    d_loss, _, _ = discriminator_objective(store, s_emb, a_emb)
    dc.backward(d_loss, store)
    dc.sgd_step(store, dc.DISCRIMINATOR, lr)
    # encoder untouched by the step above, so the recorded embeddings are still current
    fool, _, _ = fooling_objective(store, s_emb, a_emb)
    dc.backward(fool, store)
    dc.sgd_step(store, dc.ENCODER, lr)
    return d_loss.item(), fool.item()


def _classification_step(state: TrainState, support, query, labels, n: int, k: int):
    cfg, store = state.config, state.store
    params = store.view()
    s_emb = encode(params, support)
    q_emb = encode(params, query)
    protos = build_prototypes(params, s_emb, n, k, cfg.use_relation_score)
    loss, pred = classification_loss(q_emb, protos, labels)
    dc.backward(loss, store)
    dc.sgd_step(store, dc.ENCODER, cfg.lr)
    if cfg.use_relation_score:
        dc.sgd_step(store, dc.SCORER, cfg.lr)
    return loss.item(), float(np.mean(pred == labels))


def meta_train_step(state: TrainState, episode: Episode) -> dict:
    """Query classification step on encoder+scorer, then the training ADV iterations."""
    _check_episode(state, episode)
    cfg = state.config
    cls_loss, acc = _classification_step(
        state, episode.support.batch, episode.query.batch, episode.query.labels, episode.n, episode.k
    )
    d_loss = fool_loss = None
    iters = cfg.adv_iters_train if cfg.use_meta_adv else 0
    if iters:
        if episode.adversarial is None:
            raise ValueError("meta-adversarial training needs an episode with an adversarial set")
        for _ in range(iters):
            d_loss, fool_loss = _adv_iteration(
                state.store, episode.support.batch, episode.adversarial.support.batch, cfg.lr
            )
    state.episodes_seen += 1
    return {"cls_loss": cls_loss, "d_loss": d_loss, "fool_loss": fool_loss, "query_acc": acc}


def meta_train(
    state: TrainState,
    episodes: Iterable[Episode],
    on_step: Callable[[dict], None] | None = None,
    window: int = 100,
) -> list[dict]:
    """Run meta_train_step over a stream; each record gets `episode` and `window_acc`."""
    recent: deque[float] = deque(maxlen=window)
    records = []
    for episode in episodes:
        rec = {"episode": state.episodes_seen}
        rec.update(meta_train_step(state, episode))
        recent.append(rec["query_acc"])
        rec["window_acc"] = float(np.mean(recent))
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    return records


@dataclass
class TaskResult:
    predictions: np.ndarray
    probabilities: np.ndarray
    accuracy: float


def predict(state: TrainState, episode: Episode) -> tuple[np.ndarray, np.ndarray]:
    """Classify the query set against support prototypes; labels are not read."""
    cfg = state.config
    with dc.no_grad():
        params = state.store.view()
        s_emb = encode(params, episode.support.batch)
        q_emb = encode(params, episode.query.batch)
        protos = build_prototypes(params, s_emb, episode.n, episode.k, cfg.use_relation_score)
        probs = classify(q_emb, protos)
    return probs.argmax(axis=1), probs


def meta_test_task(
    trained: TrainState,
    episode: Episode,
    source: IndexedCorpus,
    adv_iters: int | None = None,
    rng: np.random.Generator | None = None,
) -> TaskResult:
    """Finetune a private clone on source A sets and S_test, then predict Q_test.

    Each iteration: classification on A.query against A.support prototypes
    (encoder + scorer), a discriminator step on S_test vs A.support, and an
    encoder fooling step. Iteration 0 uses the episode's own A set when it
    has one; later iterations draw fresh ones from `source`.
    """
    if len(episode.support) == 0:
        raise ValueError("empty support set")
    _check_episode(trained, episode)
    cfg = trained.config
    iters = cfg.adv_iters_test if adv_iters is None else adv_iters
    state = trained.clone()
    rng = rng if rng is not None else np.random.default_rng(0)
    n, k, q = episode.n, episode.k, episode.q
    for it in range(iters):
        if it == 0 and episode.adversarial is not None:
            adv = episode.adversarial
        else:
            adv = sample_adversarial(source, episode.relations, n, k, q, rng)
        _classification_step(state, adv.support.batch, adv.query.batch, adv.query.labels, n, k)
        _adv_iteration(state.store, episode.support.batch, adv.support.batch, cfg.lr)
    pred, probs = predict(state, episode)
    return TaskResult(pred, probs, float(np.mean(pred == episode.query.labels)))


@dataclass
class EvalReport:
    accuracies: list[float]
    label: str = ""

    @property
    def n(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95(self) -> float:
        if self.n < 2:
            return 0.0
        return 1.96 * float(np.std(self.accuracies, ddof=1)) / math.sqrt(self.n)

    def to_dict(self) -> dict:
        return {"label": self.label, "n_tasks": self.n, "mean": self.mean, "ci95": self.ci95, "accuracies": self.accuracies}

    def __str__(self) -> str:
        name = f"{self.label}: " if self.label else ""
        return f"{name}{100 * self.mean:.2f} +- {100 * self.ci95:.2f} (n={self.n})"


def _run_task(args) -> float:
    state, target, source, stream, seed, index, adv_iters = args
    episode = episode_at(target, source, stream, seed, index)
    rng = substream(seed, "meta_test.adv", index)
    return meta_test_task(state, episode, source, adv_iters, rng).accuracy


def evaluate(
    trained: TrainState,
    target: IndexedCorpus,
    source: IndexedCorpus,
    n_tasks: int,
    seed: int,
    adv_iters: int | None = None,
    workers: int = 1,
    label: str = "",
) -> EvalReport:
    """Mean query accuracy over `n_tasks` target episodes.

    Task i is a function of (seed, i) alone, so results do not depend on
    `workers` or on the order in which tasks run.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    cfg = trained.config
    stream = StreamConfig(cfg.n, cfg.k, cfg.q, name="meta_test")
    jobs = [(trained, target, source, stream, seed, i, adv_iters) for i in range(n_tasks)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(_run_task, jobs, chunksize=max(1, n_tasks // (4 * workers))))
    else:
        accs = [_run_task(j) for j in jobs]
    return EvalReport(accs, label)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    """Binary container: magic, version, JSON header, raw tensors, sha256 trailer."""
    manifest, blobs, offset = [], [], 0
    for name, t in state.store.items():
        raw = np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest.append(
            {"name": name, "role": state.store.role(name), "dtype": t.data.dtype.str, "shape": list(t.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": state.config.to_dict(),
        "seed": state.seed,
        "episodes_seen": state.episodes_seen,
        "words": state.words,
        "params": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + 12
    if len(data) < prefix + 32 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not an MBATF checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, hlen = struct.unpack("<IQ", body[len(CHECKPOINT_MAGIC) : prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(body[prefix : prefix + hlen])
    payload = body[prefix + hlen :]
    store = dc.ParameterStore()
    for entry in header["params"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        store.add(entry["name"], arr, entry["role"])
    return TrainState(
        store, ModelConfig.from_dict(header["config"]), header["words"], header["seed"], header["episodes_seen"]
    )
