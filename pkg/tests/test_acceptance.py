"""Desk-scale acceptance criteria AC-1 .. AC-7.

Each test prints one line, ``AC-n PASS|FAIL  <measurement>  (<seconds>)``,
straight to the terminal. Run just this file with

    pytest tests/test_acceptance.py -v

or as a script (``python3 tests/test_acceptance.py``). AC-5 trains 60 models
and takes roughly 20 minutes on one core; the others finish in about a
minute together. AC-8 (full FewRel 2.0 + GloVe reproduction) is described
in the README and is not run here.
"""

from __future__ import annotations

import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from mbatf import diffcore as dc
from mbatf.adversary import (
    DiscriminatorConfig,
    discriminate,
    discriminator_objective,
    fooling_objective,
    init_discriminator,
    membership_accuracy,
    membership_batch,
)
from mbatf.cli import gradient_check
from mbatf.corpus import (
    IndexedBatch,
    Instance,
    SynthConfig,
    index_corpus,
    index_instance,
    random_table,
    synth_generate,
)
from mbatf.encoder import CONV_B, CONV_W, HEAD_POS, TAIL_POS, WORD, EncoderConfig, encode, init_encoder
from mbatf.metaloop import (
    ModelConfig,
    evaluate,
    init_state,
    load_checkpoint,
    meta_test_task,
    meta_train,
    meta_train_step,
    save_checkpoint,
)
from mbatf.protonet import Prototypes, classify, prototypes, scored_distance
from mbatf.rng import substream
from mbatf.sampler import StreamConfig, episode_at, episode_stream

T = dc.Tensor


def announce(request, ac: str, ok: bool, detail: str, seconds: float) -> None:
    line = f"{ac} {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f}s)"
    capman = request.config.pluginmanager.getplugin("capturemanager") if request is not None else None
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)


def synth_domains(seed, n_relations=16, shift=0.6, vocab=400, scale=0.05, d_word=50, max_len=32, instances=60):
    src, tgt = synth_generate(SynthConfig(n_relations, instances, vocab, shift), seed)
    table = random_table(src.vocabulary() | tgt.vocabulary(), d_word, seed=seed, scale=scale)
    return table, index_corpus(src, table, max_len), index_corpus(tgt, table, max_len)


def train(config, table, source, episodes, seed, name="train"):
    state = init_state(config, table, seed)
    stream = StreamConfig(config.n, config.k, config.q, n_episodes=episodes, with_adversarial=config.use_meta_adv,
                          name=name)
    records = meta_train(state, episode_stream(source, source, stream, seed))
    return state, records


# -- AC-1 ------------------------------------------------------------------


def test_ac1_gradient_fidelity(request):
    start = time.perf_counter()
    f32 = gradient_check(f64=False)
    f64 = gradient_check(f64=True)
    seconds = time.perf_counter() - start
    worst32 = max(r.max_rel_error for r in f32.values())
    worst64 = max(r.max_rel_error for r in f64.values())
    ok = all(r.passed for r in f32.values()) and all(r.passed for r in f64.values()) and len(f32) == 6
    ok = ok and seconds < 30
    announce(request, "AC-1", ok, f"6 objectives, worst rel err f32 {worst32:.2e} (tol 1e-3), "
             f"f64 {worst64:.2e} (tol 1e-5)", seconds)
    assert ok


# -- AC-2 ------------------------------------------------------------------


def oracle_embed(p, batch):
    """Plain numpy encoder: lookup, zero-padded window conv over the true length, max, relu."""
    word, hp, tp = p[WORD], p[HEAD_POS], p[TAIL_POS]
    w, b = p[CONV_W], p[CONV_B]
    half = w.shape[0] // 2
    out = []
    for row in range(len(batch.lengths)):
        length = max(int(batch.lengths[row]), 1)
        feats = np.concatenate(
            [word[batch.token_ids[row, :length]], hp[batch.head_pos[row, :length]], tp[batch.tail_pos[row, :length]]],
            axis=1,
        )
        padded = np.vstack([np.zeros((half, feats.shape[1])), feats, np.zeros((half, feats.shape[1]))])
        conv = np.stack([sum(padded[t + j] @ w[j] for j in range(w.shape[0])) + b for t in range(length)])
        out.append(np.maximum(conv.max(axis=0), 0))
    return np.array(out)


def oracle_protonet(p, episode):
    s = oracle_embed(p, episode.support.batch)
    q = oracle_embed(p, episode.query.batch)
    centroids = s.reshape(episode.n, episode.k, -1).mean(axis=1)
    d = ((q[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    z = np.exp(-(d - d.min(axis=1, keepdims=True)))
    return z / z.sum(axis=1, keepdims=True)


def test_ac2_baseline_reduction(request):
    start = time.perf_counter()
    table, source, target = synth_domains(0)
    cfg = ModelConfig(encoder=EncoderConfig(max_len=32), use_meta_adv=False, use_relation_score=False,
                      adv_iters_test=0)
    state, _ = train(cfg, table, source, 100, seed=0)
    params = {name: t.data.astype(np.float64) for name, t in state.store.items()}
    stream = StreamConfig(5, 1, 1, name="meta_test")
    worst, same_pred = 0.0, True
    for i in range(100):
        ep = episode_at(target, source, stream, 0, i)
        got = meta_test_task(state, ep, source, rng=substream(0, "meta_test.adv", i))
        want = oracle_protonet(params, ep)
        worst = max(worst, float(np.abs(got.probabilities - want).max()))
        same_pred &= bool(np.array_equal(got.predictions, want.argmax(axis=1)))
    seconds = time.perf_counter() - start
    ok = worst <= 1e-6 and same_pred and seconds < 60
    announce(request, "AC-2", ok, f"100 episodes, max prob deviation {worst:.2e} (tol 1e-6), "
             f"predictions identical: {same_pred}", seconds)
    assert ok


# -- AC-3 ------------------------------------------------------------------


def test_ac3_scored_distance_equivalence(request):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 65))
        x, c = rng.normal(size=d), rng.normal(size=d)
        got = scored_distance(T(x), T(c), T(np.ones(d))).item()
        plain = float(np.sum((x - c) ** 2))
        worst = max(worst, abs(got - plain))
    seconds = time.perf_counter() - start
    ok = worst <= 1e-6
    announce(request, "AC-3", ok, f"1000 triples d<=64, max |scored - euclidean| {worst:.2e} (tol 1e-6)", seconds)
    assert ok


# -- AC-4 ------------------------------------------------------------------


def test_ac4_overfit_sanity(request):
    start = time.perf_counter()
    # 8 relations leave only 3 outside a 5-way episode, too few for a disjoint
    # adversarial set, so this run trains the classifier path alone
    table, source, _ = synth_domains(0, n_relations=8, shift=0.0)
    cfg = ModelConfig(encoder=EncoderConfig(max_len=32), use_meta_adv=False)
    state = init_state(cfg, table, 0)
    stream = StreamConfig(5, 1, 1, n_episodes=2000, with_adversarial=False, name="train")
    reached = None
    window = None
    for rec in meta_train(state, episode_stream(source, source, stream, 0)):
        window = rec["window_acc"]
        if rec["episode"] >= 99 and window >= 0.95:
            reached = rec["episode"] + 1
            break
    seconds = time.perf_counter() - start
    ok = reached is not None and seconds < 300
    where = f"reached at episode {reached}" if reached else f"not reached, final {window:.3f}"
    announce(request, "AC-4", ok, f"5-way 1-shot, 100-episode window accuracy >= 0.95 {where}", seconds)
    assert ok


# -- AC-5 ------------------------------------------------------------------

AC5_SEEDS = range(20)
AC5_VARIANTS = {
    "protonet": dict(use_meta_adv=False, use_relation_score=False, adv_iters_test=0),
    "meta_adv": dict(use_meta_adv=True, use_relation_score=False, adv_iters_test=5),
    "mbatf": dict(use_meta_adv=True, use_relation_score=True, adv_iters_test=5),
}


def ac5_seed(seed, episodes=500, tasks=200):
    table, source, target = synth_domains(seed)
    out = {}
    for name, flags in AC5_VARIANTS.items():
        cfg = ModelConfig(encoder=EncoderConfig(max_len=32), **flags)
        state, _ = train(cfg, table, source, episodes, seed)
        out[name] = evaluate(state, target, source, tasks, seed + 1000, label=name).mean
    # same MBATF model without test-time finetuning: the paired adv_iters 5 vs 0 comparison
    out["mbatf_adv0"] = evaluate(state, target, source, tasks, seed + 1000, adv_iters=0).mean
    return out


def test_ac5_cross_domain_improvement(request):
    start = time.perf_counter()
    rows = [ac5_seed(seed) for seed in AC5_SEEDS]
    seconds = time.perf_counter() - start
    means = {name: float(np.mean([r[name] for r in rows])) for name in AC5_VARIANTS}
    wins = sum(r["mbatf"] > r["meta_adv"] for r in rows)
    margin = means["mbatf"] - means["protonet"]
    test_adv = float(np.mean([r["mbatf"] - r["mbatf_adv0"] for r in rows]))
    ok = margin > 0 and wins >= 12 and seconds < 1800
    detail = (f"20 seeds x 200 tasks, means protonet {means['protonet']:.4f} / +meta_adv {means['meta_adv']:.4f} / "
              f"mbatf {means['mbatf']:.4f}, margin {margin:+.4f}, mbatf beats +meta_adv in {wins}/20 seeds; "
              f"[info] test-time ADV effect on mbatf (adv 5 minus 0) {test_adv:+.4f}")
    for seed, r in zip(AC5_SEEDS, rows):
        print(f"seed {seed:2d}  " + "  ".join(f"{k} {v:.3f}" for k, v in r.items()))
    announce(request, "AC-5", ok, detail, seconds)
    assert ok


# -- AC-6 ------------------------------------------------------------------


def separated_domain(prefix, seed, n=300, vocab=60):
    """Sentences over a private vocabulary, so the two domains share no tokens."""
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        length = int(rng.integers(8, 16))
        tokens = tuple(f"{prefix}{rng.integers(vocab):03d}" for _ in range(length))
        h = int(rng.integers(0, length - 3))
        t = int(rng.integers(h + 1, length))
        items.append(Instance(tokens, (h, h + 1), (t, t + 1), "r"))
    return items


def test_ac6_adversarial_mechanics(request):
    start = time.perf_counter()
    xs, ys = separated_domain("x", 0), separated_domain("y", 1)
    table = random_table({w for inst in xs + ys for w in inst.tokens}, 50, seed=0)
    store = dc.ParameterStore()
    init_encoder(store, EncoderConfig(max_len=32), table, np.random.default_rng(0))
    init_discriminator(store, DiscriminatorConfig(230, 230), np.random.default_rng(1))
    bx = IndexedBatch.stack([index_instance(i, table, 32) for i in xs])
    by = IndexedBatch.stack([index_instance(i, table, 32) for i in ys])
    train_rows, held = np.arange(200), np.arange(200, 300)
    held_labels = np.r_[np.ones(100, bool), np.zeros(100, bool)]

    def held_accuracy():
        with dc.no_grad():
            p = store.view()
            batch, _ = membership_batch(encode(p, bx.take(held)), encode(p, by.take(held)))
            return membership_accuracy(discriminate(p, batch), held_labels)

    def pair(rng):
        p = store.view()
        i, j = rng.choice(train_rows, 5, replace=False), rng.choice(train_rows, 5, replace=False)
        return encode(p, bx.take(i)), encode(p, by.take(j))

    rng = np.random.default_rng(2)
    encoder_before = {n: store[n].data.copy() for n in store.names(dc.ENCODER)}
    d_steps, d_acc = None, held_accuracy()
    for step in range(1, 201):
        loss, _, _ = discriminator_objective(store, *pair(rng))
        dc.backward(loss, store)
        dc.sgd_step(store, dc.DISCRIMINATOR, 0.1)
        d_acc = held_accuracy()
        if d_acc >= 0.8:
            d_steps = step
            break
    frozen_encoder = all(np.array_equal(store[n].data, v) for n, v in encoder_before.items())
    disc_before = {n: store[n].data.copy() for n in store.names(dc.DISCRIMINATOR)}
    for _ in range(200):
        loss, _, _ = fooling_objective(store, *pair(rng))
        dc.backward(loss, store)
        dc.sgd_step(store, dc.ENCODER, 0.1)
    fooled = held_accuracy()
    frozen_disc = all(np.array_equal(store[n].data, v) for n, v in disc_before.items())
    seconds = time.perf_counter() - start
    ok = d_steps is not None and fooled < 0.65 and frozen_encoder and frozen_disc
    announce(request, "AC-6", ok, f"discriminator held-out acc {d_acc:.3f} after {d_steps or 200} steps (>= 0.8), "
             f"after 200 fooling steps {fooled:.3f} (< 0.65)", seconds)
    assert ok


# -- AC-7 ------------------------------------------------------------------


def test_ac7_structural_invariants(request, tmp_path):
    start = time.perf_counter()
    checks = {}
    table, source, target = synth_domains(3, n_relations=12, instances=20, d_word=8, max_len=16)
    cfg = ModelConfig(encoder=EncoderConfig(d_word=8, d_pos=2, max_len=16, n_filters=8), n=3, k=2, q=2,
                      scorer_channels=(4, 6, 1), disc_hidden=8, dtype="float64")

    stream = StreamConfig(3, 2, 2, n_episodes=200, name="meta_test")
    ok = True
    for ep in episode_stream(target, source, stream, 0):
        s, q, a = set(ep.support.refs), set(ep.query.refs), ep.adversarial
        ok &= not s & q and not set(ep.relations) & set(a.relations)
        ok &= {r for r, _ in ep.support.refs + ep.query.refs} <= set(ep.relations)
        ok &= len(a.support) == len(ep.support) == ep.n * ep.k
    checks["episode disjointness"] = ok

    state = init_state(cfg, table, 0)
    ep = episode_at(source, source, StreamConfig(3, 2, 2), 0, 0)
    p = state.store.view()
    s_emb, a_emb = encode(p, ep.support.batch), encode(p, ep.adversarial.support.batch)
    batch, labels = membership_batch(s_emb, a_emb)
    checks["balanced 2NK discriminator batch"] = batch.shape[0] == 2 * 3 * 2 and labels.sum() == 3 * 2

    centroids = prototypes(s_emb, 3, 2).data
    manual = np.stack([s_emb.data[2 * r : 2 * r + 2].mean(axis=0) for r in range(3)])
    checks["prototype equals mean"] = np.allclose(centroids, manual, rtol=1e-12, atol=0)

    rng = np.random.default_rng(0)
    rows_ok = True
    for _ in range(200):
        probs = classify(T(rng.normal(size=(4, 5))), Prototypes(T(rng.normal(size=(3, 5))), T(rng.uniform(size=(3, 5)))))
        rows_ok &= np.allclose(probs.sum(axis=1), 1.0) and bool(np.all(probs >= 0))
    checks["row-stochastic softmax"] = rows_ok

    def changed(before):
        return {state.store.role(n) for n in before if not np.array_equal(before[n], state.store[n].data)}

    routing = True
    cls_only = init_state(replace(cfg, use_meta_adv=False), table, 0)
    before = cls_only.store.snapshot()
    meta_train_step(cls_only, ep)
    routing &= {cls_only.store.role(n) for n in before
                if not np.array_equal(before[n], cls_only.store[n].data)} == {dc.ENCODER, dc.SCORER}
    before = state.store.snapshot()
    loss, _, _ = discriminator_objective(state.store, s_emb, a_emb)
    dc.backward(loss, state.store)
    dc.sgd_step(state.store, dc.DISCRIMINATOR, 0.1)
    routing &= changed(before) == {dc.DISCRIMINATOR}
    before = state.store.snapshot()
    p = state.store.view()
    loss, _, _ = fooling_objective(state.store, encode(p, ep.support.batch), encode(p, ep.adversarial.support.batch))
    dc.backward(loss, state.store)
    dc.sgd_step(state.store, dc.ENCODER, 0.1)
    routing &= changed(before) == {dc.ENCODER}
    checks["gradient routing (bitwise)"] = routing

    trained, _ = train(cfg, table, source, 20, seed=0)
    tasks = [episode_at(target, source, stream, 1, i) for i in range(6)]
    order = [3, 0, 5, 1, 4, 2]
    forward = [meta_test_task(trained, t, source, rng=substream(1, "meta_test.adv", i)).probabilities
               for i, t in enumerate(tasks)]
    permuted = {i: meta_test_task(trained, tasks[i], source, rng=substream(1, "meta_test.adv", i)).probabilities
                for i in order}
    checks["task isolation under permutation"] = all(np.array_equal(forward[i], permuted[i]) for i in range(6))

    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(trained, first)
    loaded = load_checkpoint(first)
    save_checkpoint(loaded, second)
    same_eval = evaluate(trained, target, source, 3, 0).accuracies == evaluate(loaded, target, source, 3, 0).accuracies
    checks["checkpoint round-trip"] = first.read_bytes() == second.read_bytes() and same_eval

    seconds = time.perf_counter() - start
    failed = [name for name, passed in checks.items() if not passed]
    ok = not failed and seconds < 120
    announce(request, "AC-7", ok, f"{len(checks) - len(failed)}/{len(checks)} invariant groups hold"
             + (f", failing: {', '.join(failed)}" if failed else ""), seconds)
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
