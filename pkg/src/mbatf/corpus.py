"""Corpora, word vectors and instance indexing.

FewRel JSON maps relation-id -> list of records::

    {"tokens": [...], "h": [name, kb_id, [[pos, ...], ...]], "t": [...]}

Entity spans come from the first position list of ``h`` / ``t``. GloVe
files are plain ``word v1 ... vd`` lines, optionally gzipped.
"""

from __future__ import annotations

import gzip
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
PAD_POSITION = 0  # unreachable by real tokens once the sentence is truncated to max_len


class CorpusError(ValueError):
    """Malformed corpus or embedding file."""


class SpanTruncatedError(ValueError):
    """An entity span does not survive truncation to max_len."""


@dataclass(frozen=True)
class Instance:
    tokens: tuple[str, ...]
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    relation: str
    head_id: str = ""
    tail_id: str = ""

    def __post_init__(self):
        n = len(self.tokens)
        for label, (start, end) in (("head", self.head_span), ("tail", self.tail_span)):
            if not 0 <= start < end <= n:
                raise ValueError(f"{label} span {(start, end)} outside sentence of {n} tokens")
        if tuple(self.head_span) == tuple(self.tail_span):
            raise ValueError("head and tail spans are identical")


@dataclass
class RelationCorpus:
    relations: dict[str, list[Instance]]
    domain: str = ""

    def __post_init__(self):
        for rel, items in self.relations.items():
            if not items:
                raise CorpusError(f"relation {rel!r} has no instances")
            for i, inst in enumerate(items):
                if inst.relation != rel:
                    raise CorpusError(f"instance {i} of {rel!r} is labelled {inst.relation!r}")

    def __len__(self) -> int:
        return len(self.relations)

    def counts(self) -> dict[str, int]:
        return {r: len(v) for r, v in self.relations.items()}

    def vocabulary(self) -> set[str]:
        return {tok for items in self.relations.values() for inst in items for tok in inst.tokens}

    def to_fewrel(self) -> dict:
        out = {}
        for rel, items in self.relations.items():
            out[rel] = [
                {
                    "tokens": list(inst.tokens),
                    "h": _entity_record(inst.tokens, inst.head_span, inst.head_id),
                    "t": _entity_record(inst.tokens, inst.tail_span, inst.tail_id),
                }
                for inst in items
            ]
        return out

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_fewrel(), ensure_ascii=False) + "\n", encoding="utf-8")


def _entity_record(tokens, span, kb_id):
    start, end = span
    return [" ".join(tokens[start:end]), kb_id, [list(range(start, end))]]


def _parse_entity(rec, key: str, n_tokens: int) -> tuple[tuple[int, int], str]:
    ent = rec.get(key)
    if not isinstance(ent, list) or len(ent) < 3 or not ent[2] or not isinstance(ent[2], list):
        raise ValueError(f"field {key!r} must be [name, id, [[positions]]]")
    positions = ent[2][0]
    if not isinstance(positions, list) or not positions or not all(isinstance(p, int) for p in positions):
        raise ValueError(f"field {key!r} has no integer position list")
    start, end = min(positions), max(positions) + 1
    if start < 0 or end > n_tokens:
        raise ValueError(f"{key!r} positions {positions} out of range for {n_tokens} tokens")
    return (start, end), str(ent[1]) if ent[1] is not None else ""


def parse_fewrel(data, domain: str = "") -> RelationCorpus:
    if not isinstance(data, dict):
        raise CorpusError("FewRel data must be a JSON object keyed by relation id")
    if not data:
        raise CorpusError("no relations")
    relations: dict[str, list[Instance]] = {}
    for rel, records in data.items():
        if not isinstance(records, list) or not records:
            raise CorpusError(f"relation {rel!r}: expected a non-empty list of instances")
        items = []
        for i, rec in enumerate(records):
            try:
                tokens = rec["tokens"]
                if not isinstance(tokens, list) or not tokens:
                    raise ValueError("'tokens' must be a non-empty list")
                head, head_id = _parse_entity(rec, "h", len(tokens))
                tail, tail_id = _parse_entity(rec, "t", len(tokens))
                items.append(Instance(tuple(map(str, tokens)), head, tail, rel, head_id, tail_id))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"relation {rel!r}, instance {i}: {exc}") from exc
        relations[rel] = items
    return RelationCorpus(relations, domain)


def load_fewrel_json(path, domain: str | None = None) -> RelationCorpus:
    path = Path(path)
    try:
        with _open_text(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: malformed JSON ({exc})") from exc
    corpus = parse_fewrel(data, domain if domain is not None else path.stem)
    log.info("loaded %s: %d relations, %d instances", path, len(corpus), sum(corpus.counts().values()))
    return corpus


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


# -- word vectors --------------------------------------------------------


@dataclass
class EmbeddingTable:
    vocab: dict[str, int]
    matrix: np.ndarray

    @property
    def d_word(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.vocab)

    def lookup(self, word: str) -> int:
        idx = self.vocab.get(word)
        if idx is None:
            idx = self.vocab.get(word.lower(), UNK_ID)
        return idx

    def vector(self, word: str) -> np.ndarray:
        return self.matrix[self.lookup(word)]

    def words(self) -> list[str]:
        return sorted(self.vocab, key=self.vocab.__getitem__)

    def restrict(self, words: Iterable[str]) -> "EmbeddingTable":
        """Sub-table holding PAD, UNK and the entries `words` resolve to; lookups are unchanged."""
        keep = sorted({self.lookup(w) for w in words} | {PAD_ID, UNK_ID})
        names = self.words()
        return EmbeddingTable({names[i]: j for j, i in enumerate(keep)}, self.matrix[keep].copy())


def _fresh_table(dim: int, rng: np.random.Generator) -> tuple[dict[str, int], list[np.ndarray]]:
    return {PAD: PAD_ID, UNK: UNK_ID}, [np.zeros(dim), rng.uniform(-0.5, 0.5, dim)]


def load_glove(path, expected_dim: int, seed: int = 0) -> EmbeddingTable:
    """Read a GloVe text file; PAD is zeros, UNK is seeded uniform in [-0.5, 0.5]."""
    path = Path(path)
    vocab, rows = _fresh_table(expected_dim, np.random.default_rng(seed))
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) == 1 and not parts[0].strip():
                continue
            if len(parts) - 1 != expected_dim:
                raise CorpusError(f"{path}:{lineno}: expected {expected_dim} values, got {len(parts) - 1}")
            word = parts[0]
            if word in vocab:
                continue
            try:
                vec = np.array(parts[1:], dtype=np.float64)
            except ValueError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            vocab[word] = len(rows)
            rows.append(vec)
    return EmbeddingTable(vocab, np.vstack(rows))


def random_table(words: Iterable[str], dim: int, seed: int = 0, scale: float = 0.5) -> EmbeddingTable:
    """Seeded uniform [-scale, scale] vectors for a sorted vocabulary (no pretrained file).

    PAD stays zero and UNK keeps the [-0.5, 0.5] draw used for GloVe tables.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    vocab, rows = _fresh_table(dim, rng)
    for word in sorted(set(words) - {PAD, UNK}):
        vocab[word] = len(rows)
        rows.append(rng.uniform(-scale, scale, dim))
    return EmbeddingTable(vocab, np.vstack(rows))


# -- indexing ------------------------------------------------------------


def position_id(offset: int, max_len: int) -> int:
    return int(np.clip(offset, -max_len, max_len)) + max_len


@dataclass
class IndexedInstance:
    token_ids: np.ndarray
    head_pos_ids: np.ndarray
    tail_pos_ids: np.ndarray
    length: int
    label: int = -1


def index_instance(instance: Instance, table: EmbeddingTable, max_len: int) -> IndexedInstance:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if instance.head_span[1] > max_len or instance.tail_span[1] > max_len:
        raise SpanTruncatedError(f"entity span falls beyond max_len={max_len}")
    n = min(len(instance.tokens), max_len)
    token_ids = np.full(max_len, PAD_ID, dtype=np.int64)
    head = np.full(max_len, PAD_POSITION, dtype=np.int64)
    tail = np.full(max_len, PAD_POSITION, dtype=np.int64)
    idx = np.arange(n)
    token_ids[:n] = [table.lookup(w) for w in instance.tokens[:n]]
    head[:n] = np.clip(idx - instance.head_span[0], -max_len, max_len) + max_len
    tail[:n] = np.clip(idx - instance.tail_span[0], -max_len, max_len) + max_len
    return IndexedInstance(token_ids, head, tail, len(instance.tokens))


@dataclass
class IndexedBatch:
    """Row-stacked indexed instances; `lengths` are already clipped to max_len."""

    token_ids: np.ndarray
    head_pos: np.ndarray
    tail_pos: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.lengths)

    @property
    def max_len(self) -> int:
        return self.token_ids.shape[1]

    def take(self, rows) -> "IndexedBatch":
        rows = np.asarray(rows, dtype=np.int64)
        return IndexedBatch(self.token_ids[rows], self.head_pos[rows], self.tail_pos[rows], self.lengths[rows])

    @staticmethod
    def stack(items: Sequence[IndexedInstance]) -> "IndexedBatch":
        max_len = len(items[0].token_ids)
        return IndexedBatch(
            np.stack([i.token_ids for i in items]),
            np.stack([i.head_pos_ids for i in items]),
            np.stack([i.tail_pos_ids for i in items]),
            np.array([min(i.length, max_len) for i in items], dtype=np.int64),
        )

    @staticmethod
    def concat(batches: Sequence["IndexedBatch"]) -> "IndexedBatch":
        return IndexedBatch(
            np.concatenate([b.token_ids for b in batches]),
            np.concatenate([b.head_pos for b in batches]),
            np.concatenate([b.tail_pos for b in batches]),
            np.concatenate([b.lengths for b in batches]),
        )


@dataclass
class IndexedCorpus:
    """A corpus indexed against one embedding table, one batch per relation.

    `rows[r]` maps each indexed row back to its position in the source
    RelationCorpus list (instances whose spans were truncated away are
    absent and counted in `skipped`).
    """

    relations: list[str]
    batches: dict[str, IndexedBatch]
    rows: dict[str, np.ndarray]
    domain: str = ""
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.relations)

    def size(self, relation: str) -> int:
        return len(self.batches[relation])


def index_corpus(corpus: RelationCorpus, table: EmbeddingTable, max_len: int) -> IndexedCorpus:
    batches, rows, skipped = {}, {}, 0
    for rel, items in corpus.relations.items():
        kept, keep_rows = [], []
        for i, inst in enumerate(items):
            try:
                kept.append(index_instance(inst, table, max_len))
                keep_rows.append(i)
            except SpanTruncatedError:
                skipped += 1
        if kept:
            batches[rel] = IndexedBatch.stack(kept)
            rows[rel] = np.array(keep_rows, dtype=np.int64)
    if skipped:
        log.warning("%s: skipped %d instances with spans beyond max_len=%d", corpus.domain, skipped, max_len)
    return IndexedCorpus(list(batches), batches, rows, corpus.domain, skipped)


# -- synthetic corpora ---------------------------------------------------


@dataclass
class SynthConfig:
    """Seeded two-domain corpus where a 2-token pattern between the entities fixes the label.

    Target relations reuse the source patterns under disjoint ids; a
    `domain_shift` fraction of the pattern vocabulary is swapped for
    target-only synonyms. Filler and entity tokens are shared.
    """

    n_relations: int = 16
    instances_per_relation: int = 60
    vocab_size: int = 200
    domain_shift: float = 0.0
    min_len: int = 8
    max_len: int = 16

    def validate(self) -> None:
        if self.n_relations < 2:
            raise ValueError("n_relations must be >= 2")
        if self.instances_per_relation < 1:
            raise ValueError("instances_per_relation must be >= 1")
        if not 0.0 <= self.domain_shift <= 1.0:
            raise ValueError("domain_shift must lie in [0, 1]")
        if self.vocab_size < 2 * self.n_relations + 4:
            raise ValueError(
                f"vocab_size={self.vocab_size} too small for {self.n_relations} relations "
                f"(need >= {2 * self.n_relations + 4})"
            )
        if not 5 <= self.min_len <= self.max_len:
            raise ValueError("need 5 <= min_len <= max_len")


def pattern_tokens(config: SynthConfig, relation: int) -> tuple[str, str]:
    return f"p{2 * relation:03d}", f"p{2 * relation + 1:03d}"


def synth_generate(config: SynthConfig, seed: int) -> tuple[RelationCorpus, RelationCorpus]:
    config.validate()
    src_seq, tgt_seq, swap_seq = np.random.SeedSequence(seed).spawn(3)
    n_patterns = 2 * config.n_relations
    filler = [f"w{i:03d}" for i in range(config.vocab_size - n_patterns)]

    # fixed swap order, so shift s replaces a prefix of it and nothing else moves
    order = np.random.default_rng(swap_seq).permutation(n_patterns)
    n_swap = int(round(config.domain_shift * n_patterns))
    synonym = {f"p{j:03d}": f"q{j:03d}" for j in order[:n_swap]}

    def build(seq, prefix, domain, rename):
        rng = np.random.default_rng(seq)
        relations = {}
        for r in range(config.n_relations):
            rel = f"{prefix}{r:02d}"
            pat = tuple(rename.get(p, p) for p in pattern_tokens(config, r))
            items = []
            for _ in range(config.instances_per_relation):
                length = int(rng.integers(config.min_len, config.max_len + 1))
                start = int(rng.integers(0, length - 4 + 1))
                words = [filler[k] for k in rng.integers(0, len(filler), size=length)]
                words[start + 1 : start + 3] = pat
                items.append(Instance(tuple(words), (start, start + 1), (start + 3, start + 4), rel))
            relations[rel] = items
        return RelationCorpus(relations, domain)

    source = build(src_seq, "S", "synthetic-source", {})
    target = build(tgt_seq, "T", "synthetic-target", synonym)
    return source, target


def pattern_rule(instance: Instance) -> tuple[str, ...]:
    """Tokens strictly between head and tail; on synthetic data this determines the label."""
    return instance.tokens[instance.head_span[1] : instance.tail_span[0]]
