"""Numbered acceptance criteria; each test prints one PASS/FAIL line in the terminal summary.

The slow ones (bench, keyword-gap, finetune, sweep) run at full size; the
whole module takes roughly half an hour on one core.
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from krls_lab import autodiff as ad
from krls_lab import trainer as T
from krls_lab.cli import main
from krls_lab.evaluation import evaluate
from krls_lab.generation import SamplingConfig, Trajectory, bench_episodes, bench_generation
from krls_lab.model import (CheckpointError, ModelConfig, PolicyModel, TruncatedCheckpointError,
                            VocabHashMismatchError, load_checkpoint, response_logits, save_checkpoint,
                            sl_loss, teacher_batch)
from krls_lab.reward import RewardSpec, per_token_reward, returns

from conftest import tiny_model

acceptance = pytest.mark.acceptance


def _grad_vector(model):
    return np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
                           for p in model.parameters()])


# ---------------------------------------------------------------- 1

@acceptance(1, "gradient correctness of sl/pg/ppo/kl losses")
def test_gradcheck_losses(report):
    start = time.perf_counter()
    worst = {"sl": 0.0, "pg": 0.0, "ppo": 0.0, "kl": 0.0}
    n_models = 20
    for seed in range(n_models):
        rng = np.random.default_rng(seed)
        model = tiny_model(vocab_size=12, d_model=8, max_len=16, seed=seed)
        reference = tiny_model(vocab_size=12, d_model=8, max_len=16, seed=seed + 500)
        B = 2
        ctxs = [rng.integers(4, 12, rng.integers(1, 7)) for _ in range(B)]
        golds = [rng.integers(4, 12, rng.integers(1, 7)) for _ in range(B)]
        batch = teacher_batch(ctxs, golds)
        n = len(batch.targets)
        acts = rng.integers(0, 12, n)
        adv = rng.normal(size=n)
        with ad.no_grad():
            base = ad.log_softmax_array(response_logits(model, batch).data)[np.arange(n), acts]
        # ratios either well inside [1-eps, 1+eps] or well outside, so no kink lies within h
        shift = np.where(rng.random(n) < 0.7, rng.uniform(-0.1, 0.1, n), rng.choice([-0.6, 0.6], n))
        old = base - shift
        with ad.no_grad():
            ref_lp = ad.log_softmax_array(response_logits(reference, batch).data)

        def logp():
            return ad.pick_log_softmax(response_logits(model, batch), acts)

        losses = {
            "sl": lambda: sl_loss(model, ctxs, golds),
            "pg": lambda: T.pg_loss(logp(), adv),
            "ppo": lambda: T.ppo_loss(logp(), old, adv, 0.2),
            "kl": lambda: T.kl_penalty(ad.log_softmax(response_logits(model, batch)), ref_lp),
        }
        for name, fn in losses.items():
            # 20 random coordinates per tensor (small tensors fully) keeps this inside a minute
            worst[name] = max(worst[name], ad.gradcheck(fn, model.parameters(), h=1e-5, coords_per_param=20,
                                                        rng=np.random.default_rng(seed)))
    elapsed = time.perf_counter() - start
    report(f"{n_models} models, max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
           + f", {elapsed:.1f}s")
    assert max(worst.values()) < 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------- 2

@acceptance(2, "KRLS(PG) on gold trajectories reproduces the SL gradient")
def test_sl_equivalence(small_corpus, report):
    start = time.perf_counter()
    V = len(small_corpus.vocab)
    model = PolicyModel(ModelConfig(vocab_size=V, seed=2), small_corpus.vocab.hash)
    scorer = PolicyModel(ModelConfig(vocab_size=V, seed=9), small_corpus.vocab.hash)
    episodes = small_corpus.encoded("train")[:8]
    # the terminal bonus is a separate additive term, so it is switched off here
    spec = RewardSpec(variant="prob", mu=1.0, gamma=0.0, terminal_scale=0.0)
    cfg = T.TrainerConfig(algorithm="krls_pg", reward=spec, sampling=SamplingConfig(temperature=1.0, top_p=1.0))
    trajs = [Trajectory(episode=ep, prefix=ep.response, generated=ep.response.copy(),
                        old_logp=np.zeros(len(ep.response)), raw_logp=np.zeros(len(ep.response)),
                        support=np.ones((len(ep.response), V), dtype=bool)) for ep in episodes]
    probs = T.scorer_distributions(scorer, episodes)
    for tr, p in zip(trajs, probs):
        T.assign_rewards([tr], spec, small_corpus.vocab.key_ids, scorer, p)

    model.zero_grad()
    loss, _ = T.rl_objective(model, trajs, cfg, None)
    ad.backward(loss)
    g_rl = _grad_vector(model)
    model.zero_grad()
    ad.backward(sl_loss(model, [e.context for e in episodes], [e.response for e in episodes]))
    g_sl = _grad_vector(model)

    cos = float(g_rl @ g_sl / (np.linalg.norm(g_rl) * np.linalg.norm(g_sl)))
    rel = float(np.linalg.norm(g_rl - g_sl) / np.linalg.norm(g_sl))
    elapsed = time.perf_counter() - start
    report(f"cosine 1-{1 - cos:.1e}, rel L2 {rel:.1e}, {elapsed:.1f}s")
    assert cos >= 1 - 1e-10
    assert rel < 1e-8
    assert elapsed < 10


# ---------------------------------------------------------------- 3

@acceptance(3, "next-word sampling at most a third of greedy decode time")
def test_generation_speed(default_corpus, report):
    start = time.perf_counter()
    model = PolicyModel(ModelConfig(vocab_size=len(default_corpus.vocab)), default_corpus.vocab.hash)
    episodes = bench_episodes(model.config.vocab_size, 200, 64, seed=0)
    rep = bench_generation(model, episodes, SamplingConfig(), batch_size=8)
    elapsed = time.perf_counter() - start
    report(f"sample {rep.sample_ms:.0f}ms, decode {rep.decode_ms:.0f}ms, ratio {rep.ratio:.3f}, {elapsed:.0f}s")
    assert rep.ratio <= 0.34
    assert elapsed < 300


# ---------------------------------------------------------------- 4

@acceptance(4, "KRLS keyword accuracy never below SL-only")
def test_keyword_gap(default_corpus, report):
    start = time.perf_counter()
    V = len(default_corpus.vocab)
    curves = {"sl": [], "krls": []}
    for seed in range(3):
        init = PolicyModel(ModelConfig(vocab_size=V, seed=seed), default_corpus.vocab.hash)
        sl_model, sl_log = T.krls_train(T.TrainerConfig(algorithm="sl", epochs=5, seed=seed), default_corpus,
                                        init.copy())
        # 5 SL epochs from the same init is exactly the scorer the CLI would train
        scorer = sl_model.copy().freeze()
        _, krls_log = T.krls_train(T.TrainerConfig(algorithm="krls", epochs=5, seed=seed,
                                                   sampling=SamplingConfig(seed=seed)),
                                   default_corpus, init.copy(), scorer=scorer)
        curves["sl"].append([r["keyword_acc"] for r in sl_log.phase("eval")])
        curves["krls"].append([r["keyword_acc"] for r in krls_log.phase("eval")])
    sl = np.mean(curves["sl"], axis=0)
    krls = np.mean(curves["krls"], axis=0)
    gap = krls - sl  # index 0 is the shared initial model
    elapsed = time.perf_counter() - start
    per_seed = np.array(curves["krls"]) - np.array(curves["sl"])
    report("mean gap by epoch " + " ".join(f"{g:+.3f}" for g in gap[1:]) + "; per seed "
           + " | ".join(" ".join(f"{g:+.3f}" for g in row[1:]) for row in per_seed) + f", {elapsed / 60:.1f}min")
    assert len(gap) == 6 and gap[0] == 0.0
    assert (gap[1:] >= 0).all()
    assert gap[1] > 0
    assert elapsed <= 30 * 60


# ---------------------------------------------------------------- 5

@acceptance(5, "finetune+KRLS does not degrade a converged SL checkpoint")
def test_finetune_non_degradation(default_corpus, report):
    start = time.perf_counter()
    V = len(default_corpus.vocab)
    test_eps = default_corpus.encoded("test")
    keys = default_corpus.vocab.key_ids
    ckpt, _ = T.krls_train(T.TrainerConfig(algorithm="sl", epochs=20, eval_at_start=False), default_corpus,
                           PolicyModel(ModelConfig(vocab_size=V), default_corpus.vocab.hash))
    base = evaluate(ckpt, test_eps, keys)
    scorer = ckpt.copy().freeze()
    scores = []
    for seed in range(3):
        cfg = T.TrainerConfig(algorithm="krls", epochs=2, seed=seed, lr=5e-5, initial_checkpoint="sl-converged",
                              eval_at_start=False, sampling=SamplingConfig(seed=seed))
        tuned, _ = T.krls_train(cfg, default_corpus, ckpt.copy(), scorer=scorer, reference=ckpt.copy().freeze())
        rep = evaluate(tuned, test_eps, keys)
        scores.append((rep.combined, rep.keyword_f1))
    combined, f1 = np.mean(scores, axis=0)
    elapsed = time.perf_counter() - start
    report(f"combined {base.combined:.4f} -> {combined:.4f}, keyword F1 {base.keyword_f1:.4f} -> {f1:.4f}, "
           f"{elapsed / 60:.1f}min")
    assert combined >= base.combined
    assert f1 > base.keyword_f1
    assert elapsed <= 30 * 60


# ---------------------------------------------------------------- 6

@acceptance(6, "per-token reward decision table")
def test_reward_table(report):
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    checked = 0
    for _ in range(300):
        Tn, V = int(rng.integers(1, 16)), int(rng.integers(2, 20))
        mu = float(rng.choice([1.0, 2.0, 5.0, rng.uniform(1, 10)]))
        gold = rng.integers(0, V, Tn)
        gen = np.where(rng.random(Tn) < 0.5, gold, rng.integers(0, V, Tn))
        key = rng.random(Tn) < 0.4
        probs = rng.random((Tn, V))
        probs /= probs.sum(-1, keepdims=True)
        r = per_token_reward(gen, gold, key, probs, RewardSpec(variant="prob", mu=mu))
        for t in range(Tn):
            if key[t] and gen[t] == gold[t]:
                want = 1.0
            elif key[t]:
                want = -1.0
            elif gen[t] == gold[t]:
                want = 1.0 / mu
            else:
                want = probs[t, gen[t]] / mu
            assert r[t] == want
            checked += 1
        assert np.array_equal(per_token_reward(gen, gold, key, None, RewardSpec(variant="zero", mu=mu)),
                              np.zeros(Tn))
        err = per_token_reward(gen, gold, key, None, RewardSpec(variant="error", mu=mu))
        assert set(np.unique(err)) <= {-1.0, 1.0}
        assert np.array_equal(err == 1.0, gen == gold)
    elapsed = time.perf_counter() - start
    report(f"{checked} positions exact, {elapsed:.2f}s")
    assert elapsed < 1


# ---------------------------------------------------------------- 7

@acceptance(7, "discounted returns match a brute-force double loop")
def test_returns_oracle(report):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        gamma = [0.0, 0.5, 0.9, 0.99][i % 4]
        n = int(rng.integers(1, 33))
        r = rng.uniform(-1, 1, n)
        terminal = float(rng.uniform(0, 5)) if i % 2 else 0.0
        G = returns(r, gamma, terminal)
        full = r.copy()
        full[-1] += terminal
        oracle = [sum(gamma ** (l - t) * full[l] for l in range(t, n)) for t in range(n)]
        worst = max(worst, float(np.abs(G - oracle).max()))
        for t in range(n - 1):
            assert G[t] == full[t] + gamma * G[t + 1]
        assert G[-1] == full[-1]
    elapsed = time.perf_counter() - start
    report(f"1000 vectors, max abs err {worst:.1e}, {elapsed:.2f}s")
    assert worst < 1e-12
    assert elapsed < 5


# ---------------------------------------------------------------- 8

@acceptance(8, "PPO clipped branches have zero gradient; ratio one equals PG")
def test_ppo_clip_semantics(report):
    rng = np.random.default_rng(8)
    start = time.perf_counter()
    eps = 0.2
    n = 2000
    old = np.log(rng.uniform(0.01, 1.0, n))
    log_ratio = rng.uniform(-1.0, 1.0, n)
    adv = rng.normal(size=n)
    new = ad.Tensor(old + log_ratio, requires_grad=True)
    ad.backward(T.ppo_loss(new, old, adv, eps))
    ratio = np.exp(log_ratio)
    clipped = ((ratio > 1 + eps) & (adv > 0)) | ((ratio < 1 - eps) & (adv < 0))
    max_clipped = float(np.abs(new.grad[clipped]).max())
    assert clipped.sum() > 100
    assert max_clipped < 1e-12

    at_one = ad.Tensor(old.copy(), requires_grad=True)
    ad.backward(T.ppo_loss(at_one, old, adv, eps))
    pg = ad.Tensor(old.copy(), requires_grad=True)
    ad.backward(T.pg_loss(pg, adv))
    diff = float(np.abs(at_one.grad - pg.grad).max())
    elapsed = time.perf_counter() - start
    report(f"{int(clipped.sum())} clipped grads max {max_clipped:.1e}, |ppo-pg| at r=1 {diff:.1e}, {elapsed:.2f}s")
    assert diff < 1e-15
    assert elapsed < 5


# ---------------------------------------------------------------- 9

@acceptance(9, "train --algo krls --seed 7 is reproducible bit for bit")
def test_cli_determinism(tmp_path, report):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "corpus": {"spec": {"n_train": 64, "n_valid": 16, "n_test": 16, "seed": 5}},
        "train": {"epochs": 2, "scorer_epochs": 2},
    }))
    times = []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        assert main(["train", "--config", str(cfg), "--algo", "krls", "--seed", "7",
                     "--out", str(tmp_path / name)]) == 0
        times.append(time.perf_counter() - t0)

    def metrics(run):
        with open(tmp_path / run / "runlog.csv") as fh:
            return [{k: v for k, v in row.items() if k != "wall_ms"} for row in csv.DictReader(fh)]

    rows_a, rows_b = metrics("a"), metrics("b")
    ck_a = (tmp_path / "a" / "final.ckpt").read_bytes()
    ck_b = (tmp_path / "b" / "final.ckpt").read_bytes()
    report(f"{len(rows_a)} runlog rows, checkpoint {len(ck_a)} bytes, runs {times[0]:.1f}s/{times[1]:.1f}s")
    assert rows_a == rows_b and len(rows_a) > 0
    assert ck_a == ck_b


# ---------------------------------------------------------------- 10

@acceptance(10, "replay buffer sizes at RL entry and exit")
def test_buffer_semantics(default_corpus, report):
    start = time.perf_counter()
    entries, exits = [], []
    cfg = T.TrainerConfig(algorithm="krls", epochs=1, kappa=0.5, k=3, batch_size=4, eval_at_start=False,
                          train_fraction=0.25)
    V = len(default_corpus.vocab)
    T.krls_train(cfg, default_corpus, PolicyModel(ModelConfig(vocab_size=V), default_corpus.vocab.hash),
                 scorer=PolicyModel(ModelConfig(vocab_size=V, seed=1), default_corpus.vocab.hash),
                 hooks={"rl_enter": lambda b: entries.append((b.n_learned, b.n_replay)),
                        "rl_exit": lambda b: exits.append((b.n_learned, b.n_replay))})
    elapsed = time.perf_counter() - start
    report(f"{len(entries)} RL phases, entries {sorted(set(entries))}, exits {sorted(set(exits))}, {elapsed:.0f}s")
    assert len(entries) == len(exits) >= 2
    assert all(n_r == 3 * n_l and n_l > 0 for n_l, n_r in entries)
    assert all(e == (0, 0) for e in exits)
    assert elapsed < 300


# ---------------------------------------------------------------- 11

@acceptance(11, "3x3 kappa/mu sweep emits a finite 9-row summary")
def test_sweep_grid(tmp_path, report, monkeypatch):
    start = time.perf_counter()
    corpus_dir = tmp_path / "corpus"
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_train": 200, "n_valid": 40, "n_test": 40, "seed": 11}))
    assert main(["gen-corpus", "--spec", str(spec), "--out", str(corpus_dir)]) == 0
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps({"train": {"epochs": 2, "scorer_epochs": 3, "k": 3}}))
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--corpus", str(corpus_dir), "--grid", "kappa=0.1,0.5,1.0",
                 "mu=2,5,10", "--out", str(out)]) == 0
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    elapsed = time.perf_counter() - start
    best = max(rows, key=lambda r: float(r["combined"] or "nan"))
    report(f"{len(rows)} rows, best kappa={best['kappa']} mu={best['mu']} combined={float(best['combined']):.3f}, "
           f"{elapsed / 60:.1f}min")
    assert len(rows) == 9
    assert {(float(r["kappa"]), float(r["mu"])) for r in rows} == {(a, b) for a in (0.1, 0.5, 1.0)
                                                                   for b in (2.0, 5.0, 10.0)}
    for r in rows:
        assert r["status"] == "ok" and int(r["k"]) == 3
        for key in ("combined", "inform", "success", "bleu", "keyword_f1"):
            assert math.isfinite(float(r[key]))
    assert elapsed <= 2 * 3600


# ---------------------------------------------------------------- 12

@acceptance(12, "checkpoint roundtrip is bit exact and rejects bad files")
def test_checkpoint_roundtrip(tmp_path, report):
    start = time.perf_counter()
    rng = np.random.default_rng(12)
    for i in range(10):
        cfg = ModelConfig(vocab_size=int(rng.integers(8, 40)), d_model=int(rng.choice([8, 16])),
                          n_layers=int(rng.integers(1, 3)), n_heads=2, d_ff=int(rng.choice([16, 32])),
                          max_sequence_length=24, seed=i)
        vocab_hash = rng.bytes(32)
        model = PolicyModel(cfg, vocab_hash)
        path = tmp_path / f"m{i}.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path, expected_vocab_hash=vocab_hash)
        ids = rng.integers(0, cfg.vocab_size, (2, 10))
        with ad.no_grad():
            assert model.logits(ids).data.tobytes() == loaded.logits(ids).data.tobytes()
        with pytest.raises(VocabHashMismatchError):
            load_checkpoint(path, expected_vocab_hash=bytes(32))
        cut = tmp_path / f"cut{i}.ckpt"
        cut.write_bytes(path.read_bytes()[: int(rng.integers(9, path.stat().st_size - 1))])
        (tmp_path / f"cut{i}.ckpt.json").write_text((tmp_path / f"m{i}.ckpt.json").read_text())
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(cut)
        assert issubclass(TruncatedCheckpointError, CheckpointError)
    elapsed = time.perf_counter() - start
    report(f"10 models bit exact, mismatch and truncation rejected, {elapsed:.2f}s")
    assert elapsed < 10
