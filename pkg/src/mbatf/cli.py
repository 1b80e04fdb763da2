"""Command-line entry point: train, eval, gradcheck and synth modes.

Settings resolve as command-line flags > MBATF_* environment variables >
--config JSON file > built-in defaults. Exit codes: 0 success, 1 config
error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .adversary import discriminator_objective, fooling_objective
from .corpus import (
    CorpusError,
    EmbeddingTable,
    RelationCorpus,
    SynthConfig,
    index_corpus,
    load_fewrel_json,
    load_glove,
    random_table,
    synth_generate,
)
from .encoder import WORD, EncoderConfig, encode
from .metaloop import (
    CheckpointError,
    ModelConfig,
    evaluate,
    init_state,
    load_checkpoint,
    meta_train,
    save_checkpoint,
)
from .protonet import CONV3_B, CONV3_W, build_prototypes, classification_loss
from .rng import substream
from .sampler import SamplingError, StreamConfig, episode_at, episode_stream

log = logging.getLogger("mbatf")

ENV_PREFIX = "MBATF_"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
MODES = ("train", "eval", "gradcheck", "synth")


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    mode: str = "train"
    config: str | None = None
    train_data: str | None = None
    test_data: str | None = None
    glove: str | None = None
    checkpoint: str | None = None
    synth: bool = False
    synth_relations: int = 16
    synth_instances: int = 60
    synth_vocab: int = 400
    synth_shift: float = 0.6
    emb_scale: float = 0.05
    d_word: int = 50
    max_len: int = 128
    n: int = 5
    k: int = 1
    q: int | None = None
    lr: float = 0.1
    episodes: int = 10_000
    eval_tasks: int = 1000
    adv_iters_train: int = 1
    adv_iters_test: int = 5
    no_meta_adv: bool = False
    no_relation_score: bool = False
    seed: int = 0
    out: str = "runs/mbatf"
    workers: int = 1
    f64: bool = False
    log_every: int = 100
    explicit: frozenset = field(default_factory=frozenset, compare=False, repr=False)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("n", "k", "d_word", "max_len", "workers", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("episodes", "adv_iters_train", "adv_iters_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.q is not None and self.q < 1:
            raise ConfigError("q must be >= 1")
        if self.eval_tasks < 1:
            raise ConfigError("eval_tasks must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.emb_scale <= 0:
            raise ConfigError("emb_scale must be positive")

    @property
    def query_size(self) -> int:
        return self.k if self.q is None else self.q

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out_dir / "model.ckpt"

    def synth_config(self) -> SynthConfig:
        return SynthConfig(self.synth_relations, self.synth_instances, self.synth_vocab, self.synth_shift)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=EncoderConfig(d_word=self.d_word, max_len=self.max_len),
            n=self.n,
            k=self.k,
            q=self.query_size,
            lr=self.lr,
            use_meta_adv=not self.no_meta_adv,
            use_relation_score=not self.no_relation_score,
            adv_iters_train=self.adv_iters_train,
            adv_iters_test=self.adv_iters_test,
            dtype="float64" if self.f64 else "float32",
        )

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data.pop("explicit")
        return data


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "explicit"}
BOOL_FLAGS = {name for name, f in FIELDS.items() if f.type == "bool"}

HELP = {
    "mode": "what to run",
    "config": "JSON file of settings (keys are the long flag names with underscores)",
    "train_data": "FewRel-format source corpus (meta-training and adversarial sets)",
    "test_data": "FewRel-format target corpus for evaluation",
    "glove": "GloVe text file; random vectors are used when absent",
    "checkpoint": "checkpoint path (default OUT/model.ckpt)",
    "synth": "use a generated source/target pair instead of corpus files",
    "synth_relations": "relations per synthetic domain",
    "synth_instances": "instances per synthetic relation",
    "synth_vocab": "synthetic filler vocabulary size",
    "synth_shift": "fraction of pattern tokens replaced in the target domain",
    "emb_scale": "half-width of the uniform range for random word vectors",
    "d_word": "word vector width",
    "max_len": "token cap per sentence",
    "q": "query instances per relation (default: K)",
    "lr": "SGD step size for every objective",
    "episodes": "meta-training episodes",
    "eval_tasks": "meta-test tasks",
    "adv_iters_train": "adversarial iterations per training episode",
    "adv_iters_test": "adversarial finetuning iterations per test task",
    "no_meta_adv": "disable adversarial steps during meta-training",
    "no_relation_score": "plain squared Euclidean distance (no scoring CNN)",
    "out": "output directory",
    "workers": "parallel processes for evaluation",
    "f64": "float64 parameters",
    "log_every": "episodes between progress lines",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mbatf", description="Meta-based adversarial few-shot relation classification.")
    for name, f in FIELDS.items():
        flag = "--" + name.replace("_", "-")
        kwargs = dict(dest=name, default=argparse.SUPPRESS, help=HELP.get(name))
        if name in BOOL_FLAGS:
            parser.add_argument(flag, action="store_true", **kwargs)
        elif name == "mode":
            parser.add_argument(flag, choices=MODES, **kwargs)
        else:
            kind = {"int": int, "float": float, "int | None": int}.get(f.type, str)
            parser.add_argument(flag, type=kind, **kwargs)
    return parser


def _coerce(name: str, raw, source: str):
    f = FIELDS[name]
    try:
        if name in BOOL_FLAGS:
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off", ""):
                return False
            raise ValueError(raw)
        if raw is None:
            return None
        if f.type in ("int", "int | None"):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if f.type == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{source}: bad value {raw!r} for {name}") from None


def resolve_config(argv: list[str] | None = None, environ: dict | None = None) -> RunConfig:
    """Merge defaults, config file, environment and flags (later wins)."""
    environ = os.environ if environ is None else environ
    flags = vars(build_parser().parse_args(argv))
    values: dict = {}

    config_path = flags.get("config") or environ.get(ENV_PREFIX + "CONFIG")
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path}: expected a JSON object")
        unknown = sorted(set(data) - set(FIELDS))
        if unknown:
            raise ConfigError(f"{config_path}: unknown keys {unknown}")
        values.update({k: _coerce(k, v, config_path) for k, v in data.items()})

    for name in FIELDS:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            values[name] = _coerce(name, environ[key], key)

    values.update(flags)
    cfg = RunConfig(**values, explicit=frozenset(values))
    cfg.validate()
    return cfg


# -- data ------------------------------------------------------------------


def load_domains(cfg: RunConfig, need_target: bool) -> tuple[RelationCorpus, RelationCorpus | None]:
    if cfg.synth:
        return synth_generate(cfg.synth_config(), cfg.seed)
    if not cfg.train_data:
        raise ConfigError("--train-data (or --synth) is required")
    source = load_fewrel_json(cfg.train_data, domain="source")
    target = None
    if cfg.test_data:
        target = load_fewrel_json(cfg.test_data, domain="target")
    elif need_target:
        raise ConfigError("--test-data (or --synth) is required")
    return source, target


def build_table(cfg: RunConfig, corpora) -> EmbeddingTable:
    words = set().union(*(c.vocabulary() for c in corpora if c is not None))
    if cfg.glove:
        return load_glove(cfg.glove, cfg.d_word, seed=cfg.seed).restrict(words)
    return random_table(words, cfg.d_word, seed=cfg.seed, scale=cfg.emb_scale)


def checkpoint_table(state) -> EmbeddingTable:
    return EmbeddingTable({w: i for i, w in enumerate(state.words)}, state.store[WORD].data)


# -- modes -------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    source, target = load_domains(cfg, need_target=False)
    table = build_table(cfg, (source, target))
    model = cfg.model_config()
    indexed = index_corpus(source, table, model.encoder.max_len)
    state = init_state(model, table, cfg.seed)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    stream = StreamConfig(model.n, model.k, model.q, n_episodes=cfg.episodes, with_adversarial=model.use_meta_adv,
                          name="train")
    header = {"config": cfg.to_dict(), "model": model.to_dict(), "vocab_size": len(table)}
    start = time.perf_counter()
    with open(out / "metrics.jsonl", "w") as metrics:
        metrics.write(json.dumps(header, sort_keys=True) + "\n")

        def record(rec):
            metrics.write(json.dumps(rec) + "\n")
            if (rec["episode"] + 1) % cfg.log_every == 0:
                log.info("episode %d  cls_loss %.4f  window_acc %.3f", rec["episode"] + 1, rec["cls_loss"],
                         rec["window_acc"])

        records = meta_train(state, episode_stream(indexed, indexed, stream, cfg.seed), on_step=record)
    save_checkpoint(state, cfg.checkpoint_path)
    final = records[-1]["window_acc"] if records else None
    summary = {"episodes": state.episodes_seen, "final_window_acc": final, "seconds": time.perf_counter() - start,
               "checkpoint": str(cfg.checkpoint_path)}
    print(json.dumps(summary))
    return EXIT_OK


EVAL_OVERRIDES = ("n", "k", "q", "lr", "adv_iters_test", "no_relation_score")


def cmd_eval(cfg: RunConfig) -> int:
    state = load_checkpoint(cfg.checkpoint_path)
    changes = {}
    for name in EVAL_OVERRIDES:
        if name in cfg.explicit:
            if name == "no_relation_score":
                changes["use_relation_score"] = not cfg.no_relation_score
            elif name == "q":
                changes["q"] = cfg.query_size
            else:
                changes[name] = getattr(cfg, name)
    if "k" in changes and "q" not in changes and cfg.q is None:
        changes["q"] = changes["k"]
    state.config = dataclasses.replace(state.config, **changes)
    model = state.config
    source, target = load_domains(cfg, need_target=True)
    table = checkpoint_table(state)
    src = index_corpus(source, table, model.encoder.max_len)
    tgt = index_corpus(target, table, model.encoder.max_len)
    label = "mbatf" if model.use_relation_score else "protonet"
    label = f"{label} adv_iters_test={model.adv_iters_test}"
    report = evaluate(state, tgt, src, cfg.eval_tasks, cfg.seed, workers=cfg.workers, label=label)
    print(report)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["model"] = model.to_dict()
    payload["seed"] = cfg.seed
    (cfg.out_dir / "report.json").write_text(json.dumps(payload, indent=1) + "\n")
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    source, target = synth_generate(cfg.synth_config(), cfg.seed)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    source.save_json(cfg.out_dir / "source.json")
    target.save_json(cfg.out_dir / "target.json")
    print(json.dumps({"source": str(cfg.out_dir / "source.json"), "target": str(cfg.out_dir / "target.json"),
                      "relations": len(source), "instances_per_relation": cfg.synth_instances}))
    return EXIT_OK


# -- gradient check --------------------------------------------------------

GRADCHECK_PATHS = (
    "train.classification",
    "train.discriminator",
    "train.fooling",
    "test.classification",
    "test.discriminator",
    "test.fooling",
)


def gradcheck_objectives(f64: bool, seed: int = 0):
    """Toy model (d=8, N=2, K=2) and the six training objectives as store -> loss callables."""
    source, target = synth_generate(SynthConfig(n_relations=6, instances_per_relation=6, vocab_size=20,
                                                domain_shift=0.5, max_len=10), seed)
    table = random_table(source.vocabulary() | target.vocabulary(), 8, seed=seed)
    model = ModelConfig(encoder=EncoderConfig(d_word=8, d_pos=2, max_len=12, n_filters=8), n=2, k=2, q=2,
                        scorer_channels=(4, 6, 1), disc_hidden=8, dtype="float64" if f64 else "float32")
    state = init_state(model, table, seed)
    # move the scorer off its identity start so every scorer weight carries gradient
    rng = substream(seed, "gradcheck.scorer")
    store = state.store
    store[CONV3_W].data = rng.uniform(-0.5, 0.5, store[CONV3_W].shape).astype(store.dtype)
    store[CONV3_B].data = np.full(store[CONV3_B].shape, 0.5, store.dtype)
    src = index_corpus(source, table, 12)
    tgt = index_corpus(target, table, 12)
    train_ep = episode_at(src, src, StreamConfig(2, 2, 2), seed, 0)
    test_ep = episode_at(tgt, src, StreamConfig(2, 2, 2, name="meta_test"), seed, 0)
    adv_train, adv_test = train_ep.adversarial, test_ep.adversarial

    def classification(support, query):
        def loss(s):
            p = s.view()
            protos = build_prototypes(p, encode(p, support.batch), 2, 2, True)
            return classification_loss(encode(p, query.batch), protos, query.labels)[0]

        return loss

    def membership(objective, s_batch, a_batch):
        def loss(s):
            p = s.view()
            return objective(s, encode(p, s_batch), encode(p, a_batch))[0]

        return loss

    enc_scorer = store.names(dc.ENCODER) + store.names(dc.SCORER)
    objectives = {
        "train.classification": (classification(train_ep.support, train_ep.query), enc_scorer),
        "train.discriminator": (membership(discriminator_objective, train_ep.support.batch, adv_train.support.batch),
                                store.names(dc.DISCRIMINATOR)),
        "train.fooling": (membership(fooling_objective, train_ep.support.batch, adv_train.support.batch),
                          store.names(dc.ENCODER)),
        "test.classification": (classification(adv_test.support, adv_test.query), enc_scorer),
        "test.discriminator": (membership(discriminator_objective, test_ep.support.batch, adv_test.support.batch),
                               store.names(dc.DISCRIMINATOR)),
        "test.fooling": (membership(fooling_objective, test_ep.support.batch, adv_test.support.batch),
                         store.names(dc.ENCODER)),
    }
    return store, objectives


def gradient_check(
    f64: bool = False,
    seed: int = 0,
    max_coords: int = 40,
    tamper: Callable[[str, dict], dict] | None = None,
) -> dict[str, dc.GradCheckReport]:
    """Finite-difference check of every objective; `tamper` may edit the analytic gradients first."""
    tolerance = 1e-5 if f64 else 1e-3
    store, objectives = gradcheck_objectives(f64, seed)
    reports = {}
    for path in GRADCHECK_PATHS:
        loss_fn, names = objectives[path]
        dc.backward(loss_fn(store), store)
        analytic = {n: store[n].grad.astype(np.float64) for n in names}
        store.zero_grad()
        if tamper is not None:
            analytic = tamper(path, analytic)
        reports[path] = dc.finite_difference_check(
            loss_fn, store, tolerance=tolerance, names=names, max_coords=max_coords, seed=seed, analytic=analytic
        )
    return reports


def cmd_gradcheck(cfg: RunConfig) -> int:
    start = time.perf_counter()
    reports = gradient_check(cfg.f64, cfg.seed)
    ok = True
    for path, report in reports.items():
        print(f"== {path}  [{'pass' if report.passed else 'FAIL'}]")
        print(report.format())
        ok &= report.passed
    print(f"{'all objectives pass' if ok else 'gradient check FAILED'} ({time.perf_counter() - start:.1f}s, "
          f"{'float64' if cfg.f64 else 'float32'})")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(argv)
        return COMMANDS[cfg.mode](cfg)
    except ConfigError as exc:
        print(f"mbatf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, SamplingError, CheckpointError, OSError) as exc:
        print(f"mbatf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # shape / configuration mismatches raised by the library
        print(f"mbatf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
