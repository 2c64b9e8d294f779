"""KRLS training loop and its baselines.

Algorithms
  sl       supervised learning only
  krls     SL per batch; every kappa batches, next-word sampling on the learned
           buffer, per-token rewards, one clipped-surrogate pass over the replay buffer
  krls_pg  as krls with the plain policy-gradient objective
  sl_gold  as krls_pg but the replayed trajectory is the gold response (no sampling)
  std_rl   no SL; sampled autoregressive rollouts with zero per-token reward and a
           keyword-F1 + BLEU terminal reward
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .corpus import EOS_ID, EncodedEpisode
from .evaluation import bleu_lite, evaluate
from .generation import SamplingConfig, Trajectory, decode_batch, make_rng, next_word_sample_batch
from .model import PolicyModel, response_logits, sl_loss, teacher_batch
from .reward import (RewardSpec, contextual_closeness, per_token_reward, returns, static_closeness,
                     terminal_keyword_f1)

log = logging.getLogger(__name__)

ALGORITHMS = ("sl", "krls", "krls_pg", "sl_gold", "std_rl")
RUNLOG_COLUMNS = ["step", "epoch", "phase", "loss_sl", "loss_rl", "kl", "mean_reward", "mean_return",
                  "keyword_acc", "token_acc", "inform", "success", "bleu", "combined", "wall_ms"]


class VocabularyMismatchError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    algorithm: str = "krls"
    epochs: int = 5
    batch_size: int = 4
    kappa: float = 0.5
    k: int = 3
    clip_eps: float = 0.2
    kl_weight: float | None = None
    lr: float = 3e-4
    warmup_fraction: float = 0.2
    seed: int = 0
    initial_checkpoint: str | None = None
    scorer_checkpoint: str | None = None
    scorer_epochs: int = 5
    eval_split: str = "valid"
    eval_at_start: bool = True
    decode_max_len: int = 32
    train_fraction: float = 1.0
    reward: RewardSpec = field(default_factory=RewardSpec)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError(f"kappa must be a fraction in (0, 1], got {self.kappa}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if self.kl_weight is not None and self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0, 1]")

    @property
    def effective_kl_weight(self) -> float:
        if self.kl_weight is not None:
            return self.kl_weight
        return 0.01 if self.initial_checkpoint else 0.0

    @property
    def uses_scorer(self) -> bool:
        return self.algorithm in ("krls", "krls_pg") and self.reward.variant in ("prob", "static", "bertscore")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Buffers:
    learned: list[list[EncodedEpisode]] = field(default_factory=list)
    replay: list[list[Trajectory]] = field(default_factory=list)

    @property
    def n_learned(self) -> int:
        return sum(len(b) for b in self.learned)

    @property
    def n_replay(self) -> int:
        return sum(len(g) for g in self.replay)

    def clear(self) -> None:
        self.learned.clear()
        self.replay.clear()


class RunLog:
    """Append-only per-step records, optionally mirrored to a CSV file."""

    def __init__(self, config: dict | None = None, path: str | Path | None = None):
        self.rows: list[dict] = []
        self.config = config or {}
        self.version = __version__
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(RUNLOG_COLUMNS)

    def append(self, **values) -> dict:
        row = {c: values.get(c) for c in RUNLOG_COLUMNS}
        if self.rows and row["step"] < self.rows[-1]["step"]:
            raise ValueError("RunLog steps must be monotone")
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in RUNLOG_COLUMNS])
        return row

    def phase(self, name: str) -> list[dict]:
        return [r for r in self.rows if r["phase"] == name]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNLOG_COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in RUNLOG_COLUMNS])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- losses

def ppo_loss(new_logp: ad.Tensor, old_logp, advantages, eps: float) -> ad.Tensor:
    """Mean over tokens of -min(r A, clip(r, 1-eps, 1+eps) A), r = exp(new - old)."""
    old = ad.Tensor(np.asarray(old_logp, dtype=np.float64))
    adv = ad.Tensor(np.asarray(advantages, dtype=np.float64))
    ratio = ad.exp(ad.sub(new_logp, old))
    surr = ad.minimum(ad.mul(ratio, adv), ad.mul(ad.clip(ratio, 1.0 - eps, 1.0 + eps), adv))
    return ad.scale(ad.mean_all(surr), -1.0)


def pg_loss(logp: ad.Tensor, returns_) -> ad.Tensor:
    """Mean over tokens of -G_t log p(x_t)."""
    g = ad.Tensor(np.asarray(returns_, dtype=np.float64))
    return ad.scale(ad.mean_all(ad.mul(logp, g)), -1.0)


def kl_penalty(policy_logp: ad.Tensor, reference_logp: np.ndarray, mask=None) -> ad.Tensor:
    """Mean over masked rows of KL(policy || reference); both given as (N, V) log-probabilities."""
    ref = np.asarray(reference_logp, dtype=np.float64)
    if policy_logp.shape != ref.shape:
        raise ad.ShapeError(f"kl_penalty: policy {policy_logp.shape} vs reference {ref.shape}")
    for name, lp in (("policy", policy_logp.data), ("reference", ref)):
        if np.abs(np.exp(lp).sum(axis=-1) - 1.0).max() > 1e-6:
            raise ValueError(f"kl_penalty: {name} rows are not normalised")
    p = ad.exp(policy_logp)
    rows = ad.sum_last(ad.mul(p, ad.sub(policy_logp, ad.Tensor(ref))))
    mask = np.ones(rows.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return ad.masked_mean(rows, mask)


# ---------------------------------------------------------------- helpers

def take_rows(x: ad.Tensor, idx: np.ndarray) -> ad.Tensor:
    idx = np.asarray(idx)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return ad._node(x.data[idx], (x,), backward, "take_rows")


@dataclass
class _PolicyEval:
    logits: ad.Tensor           # (N_unique, V) response-position logits
    new_logp: ad.Tensor         # (M,) per trajectory token
    batch: object


def trajectory_logps(model: PolicyModel, trajs: Sequence[Trajectory], tau: float,
                     use_support: bool = True) -> _PolicyEval:
    """Current log-probs of every trajectory token, sharing one forward per distinct prefix."""
    keys: dict[tuple, int] = {}
    ctxs, prefixes, which = [], [], []
    for tr in trajs:
        key = (tr.episode.index, tr.prefix.tobytes())
        if key not in keys:
            keys[key] = len(ctxs)
            ctxs.append(tr.episode.context)
            prefixes.append(tr.prefix)
        which.append(keys[key])
    batch = teacher_batch(ctxs, prefixes)
    logits = response_logits(model, batch)
    sel = np.concatenate([np.arange(batch.offsets[u], batch.offsets[u + 1]) for u in which])
    picked = take_rows(logits, sel)
    targets = np.concatenate([tr.generated for tr in trajs])
    support = np.concatenate([tr.support for tr in trajs]) if use_support else None
    return _PolicyEval(logits=logits, new_logp=ad.pick_log_softmax(picked, targets, tau, support), batch=batch)


def epoch_batches(episodes: Sequence[EncodedEpisode], batch_size: int, seed: int, epoch: int):
    order = make_rng(seed, "shuffle", epoch).permutation(len(episodes))
    return [[episodes[int(i)] for i in order[s:s + batch_size]] for s in range(0, len(order), batch_size)]


def scorer_distributions(scorer: PolicyModel, episodes: Sequence[EncodedEpisode]) -> list[np.ndarray]:
    batch = teacher_batch([e.context for e in episodes], [e.response for e in episodes])
    with ad.no_grad():
        logits = response_logits(scorer, batch).data
    return batch.split(ad.softmax_array(logits))


def assign_rewards(trajs: Sequence[Trajectory], spec: RewardSpec, key_ids, scorer: PolicyModel | None,
                   scorer_probs: np.ndarray | None) -> None:
    for tr in trajs:
        ep = tr.episode
        closeness = None
        if spec.variant == "static":
            closeness = static_closeness(scorer, tr.generated, ep.response)
        elif spec.variant == "bertscore":
            closeness = contextual_closeness(scorer, ep.context, tr.generated, ep.response)
        tr.rewards = per_token_reward(tr.generated, ep.response, ep.key_mask, scorer_probs, spec, closeness)
        tr.terminal = terminal_keyword_f1(tr.generated, ep.response, key_ids, spec.terminal_scale)
        tr.returns = returns(tr.rewards, spec.gamma, tr.terminal)


def gold_trajectories(model: PolicyModel, episodes: Sequence[EncodedEpisode], spec: RewardSpec,
                      key_ids) -> list[Trajectory]:
    """Trajectories whose actions are the gold responses themselves (GOLD-style replay)."""
    out = []
    for ep in episodes:
        T = len(ep.response)
        V = model.config.vocab_size
        support = np.ones((T, V), dtype=bool)
        tr = Trajectory(episode=ep, prefix=ep.response, generated=ep.response.copy(),
                        old_logp=np.zeros(T), raw_logp=np.zeros(T), support=support)
        closeness = np.ones(T) if spec.variant in ("static", "bertscore") else None
        tr.rewards = per_token_reward(tr.generated, ep.response, ep.key_mask, None, spec, closeness)
        tr.terminal = terminal_keyword_f1(tr.generated, ep.response, key_ids, spec.terminal_scale)
        tr.returns = returns(tr.rewards, spec.gamma, tr.terminal)
        out.append(tr)
    return out


def gold_step(model: PolicyModel, episodes: Sequence[EncodedEpisode], spec: RewardSpec, key_ids) -> ad.Tensor:
    """PG loss with the gold response as the trajectory (rewards from the per-token function)."""
    trajs = gold_trajectories(model, episodes, spec, key_ids)
    ev = trajectory_logps(model, trajs, 1.0, use_support=False)
    return pg_loss(ev.new_logp, np.concatenate([t.returns for t in trajs]))


def _strip_eos(tokens) -> list[int]:
    toks = [int(t) for t in tokens]
    return toks[:toks.index(EOS_ID)] if EOS_ID in toks else toks


def std_rl_terminal(gen, gold, key_ids, terminal_scale: float) -> float:
    return (terminal_keyword_f1(gen, gold, key_ids, terminal_scale)
            + bleu_lite([_strip_eos(gen)], [_strip_eos(gold)]))


def std_rl_collect(model: PolicyModel, episodes: Sequence[EncodedEpisode], cfg: SamplingConfig, k: int,
                   spec: RewardSpec, key_ids, max_len: int = 32, stream=()) -> list[Trajectory]:
    """k sampled autoregressive rollouts per episode; zero per-token reward."""
    contexts, rngs, owners = [], [], []
    for ep in episodes:
        for j in range(k):
            contexts.append(ep.context)
            rngs.append(make_rng(cfg.seed, *stream, ep.index, j))
            owners.append(ep)
    res = decode_batch(model, contexts, max_len, cfg, rngs, stop_at_eos=True, record=not cfg.greedy)
    out = []
    for i, ep in enumerate(owners):
        gen = res.tokens[i]
        T = len(gen)
        if cfg.greedy:
            support = np.zeros((T, model.config.vocab_size), dtype=bool)
            support[np.arange(T), gen] = True
            old = np.zeros(T)
        else:
            support, old = res.supports[i], res.old_logp[i]
        tr = Trajectory(episode=ep, prefix=gen, generated=gen, old_logp=old, raw_logp=np.full(T, np.nan),
                        support=support)
        tr.rewards = np.zeros(T)
        tr.terminal = std_rl_terminal(gen, ep.response, key_ids, spec.terminal_scale)
        tr.returns = returns(tr.rewards, spec.gamma, tr.terminal)
        out.append(tr)
    return out


def rl_objective(model: PolicyModel, trajs: Sequence[Trajectory], config: TrainerConfig,
                 reference: PolicyModel | None) -> tuple[ad.Tensor, float]:
    """Surrogate loss (+ weighted KL) for one replay minibatch; returns (loss, kl value)."""
    if config.algorithm == "sl_gold":
        ev = trajectory_logps(model, trajs, 1.0, use_support=False)
    else:
        ev = trajectory_logps(model, trajs, config.sampling.temperature)
    adv = np.concatenate([t.returns for t in trajs])
    if config.algorithm == "krls" or config.algorithm == "std_rl":
        loss = ppo_loss(ev.new_logp, np.concatenate([t.old_logp for t in trajs]), adv, config.clip_eps)
    else:
        loss = pg_loss(ev.new_logp, adv)
    beta = config.effective_kl_weight
    kl_value = 0.0
    if beta > 0 and reference is not None:
        with ad.no_grad():
            ref_logits = reference.logits(ev.batch.ids, ev.batch.rows, ev.batch.cols).data
        kl = kl_penalty(ad.log_softmax(ev.logits), ad.log_softmax_array(ref_logits))
        kl_value = kl.item()
        loss = ad.add(loss, ad.scale(kl, beta))
    return loss, kl_value


# ---------------------------------------------------------------- training loop

def steps_per_epoch(n_episodes: int, batch_size: int) -> int:
    return math.ceil(n_episodes / batch_size)


def kappa_interval(config: TrainerConfig, m: int) -> int:
    return max(1, round(config.kappa * m))


def total_optimizer_steps(config: TrainerConfig, n_episodes: int) -> int:
    m = steps_per_epoch(n_episodes, config.batch_size)
    per_epoch = 0 if config.algorithm == "std_rl" else m
    if config.algorithm != "sl":
        per_epoch += m
    return config.epochs * per_epoch


def check_vocab(corpus_hash: bytes, **models) -> None:
    for name, m in models.items():
        if m is not None and m.vocab_hash != corpus_hash:
            raise VocabularyMismatchError(f"{name} was built for a different vocabulary")


def krls_train(config: TrainerConfig, corpus, model: PolicyModel, scorer: PolicyModel | None = None,
               reference: PolicyModel | None = None, runlog_path=None,
               hooks: dict[str, Callable] | None = None) -> tuple[PolicyModel, RunLog]:
    """Train `model` in place according to `config.algorithm`.

    `hooks` may hold callables ``rl_enter(buffers)``, ``rl_exit(buffers)``,
    ``epoch_end(epoch, model)``.
    """
    hooks = hooks or {}
    check_vocab(corpus.vocab.hash, model=model, scorer=scorer, reference=reference)
    if config.uses_scorer and scorer is None:
        raise ValueError(f"reward variant {config.reward.variant!r} needs an SL-finetuned scorer")
    if config.effective_kl_weight > 0 and reference is None:
        reference = model.copy().freeze()
    key_ids = corpus.vocab.key_ids
    train = corpus.encoded("train")
    if config.train_fraction < 1.0:
        train = train[:max(1, math.ceil(config.train_fraction * len(train)))]
    eval_eps = corpus.encoded(config.eval_split)

    m = steps_per_epoch(len(train), config.batch_size)
    interval = kappa_interval(config, m)
    total = total_optimizer_steps(config, len(train))
    opt = ad.Adam(model.parameters(), lr=config.lr, warmup_steps=round(config.warmup_fraction * total),
                  total_steps=total)
    runlog = RunLog(config.to_dict(), runlog_path)
    buffers = Buffers()
    step = 0
    rl_phase = 0
    t_start = time.perf_counter()

    def wall():
        return (time.perf_counter() - t_start) * 1000.0

    def update(loss: ad.Tensor) -> None:
        opt.zero_grad()
        ad.backward(loss)
        opt.step()

    def run_eval(epoch: int) -> None:
        rep = evaluate(model, eval_eps, key_ids, config.decode_max_len)
        runlog.append(step=step, epoch=epoch, phase="eval", keyword_acc=rep.keyword_accuracy,
                      token_acc=rep.token_accuracy, inform=rep.inform, success=rep.success, bleu=rep.bleu,
                      combined=rep.combined, wall_ms=wall())
        log.info("epoch %d eval: keyword_acc=%.4f combined=%.4f", epoch, rep.keyword_accuracy, rep.combined)

    def collect(group: list[EncodedEpisode], epoch: int) -> list[Trajectory]:
        stream = ("collect", epoch, rl_phase)
        if config.algorithm == "sl_gold":
            return gold_trajectories(model, group, config.reward, key_ids)
        if config.algorithm == "std_rl":
            return std_rl_collect(model, group, config.sampling, config.k, config.reward, key_ids,
                                  config.decode_max_len, stream)
        per_ep = next_word_sample_batch(model, group, config.sampling, config.k, stream)
        probs = scorer_distributions(scorer, group) if config.reward.variant == "prob" else [None] * len(group)
        flat = []
        for trajs, sp in zip(per_ep, probs):
            assign_rewards(trajs, config.reward, key_ids, scorer, sp)
            flat.extend(trajs)
        return flat

    def rl(epoch: int) -> None:
        nonlocal step, rl_phase
        rl_phase += 1
        for group in buffers.learned:
            buffers.replay.append(collect(group, epoch))
        if "rl_enter" in hooks:
            hooks["rl_enter"](buffers)
        for trajs in buffers.replay:
            loss, kl_value = rl_objective(model, trajs, config, reference)
            loss_value = loss.item()
            update(loss)
            step += 1
            runlog.append(step=step, epoch=epoch, phase="rl", loss_rl=loss_value, kl=kl_value,
                          mean_reward=float(np.mean(np.concatenate([t.rewards for t in trajs]))),
                          mean_return=float(np.mean(np.concatenate([t.returns for t in trajs]))),
                          wall_ms=wall())
        buffers.clear()
        if "rl_exit" in hooks:
            hooks["rl_exit"](buffers)

    epoch = 0
    try:
        if config.eval_at_start:
            run_eval(0)
        for epoch in range(1, config.epochs + 1):
            batches = epoch_batches(train, config.batch_size, config.seed, epoch)
            for i, batch in enumerate(batches, 1):
                if config.algorithm != "std_rl":
                    loss = sl_loss(model, [e.context for e in batch], [e.response for e in batch])
                    loss_value = loss.item()
                    update(loss)
                    step += 1
                    runlog.append(step=step, epoch=epoch, phase="sl", loss_sl=loss_value, wall_ms=wall())
                if config.algorithm == "sl":
                    continue
                buffers.learned.append(batch)
                if i % interval == 0 or i == len(batches):
                    rl(epoch)
            run_eval(epoch)
            if "epoch_end" in hooks:
                hooks["epoch_end"](epoch, model)
    except (ad.NonFiniteError, FloatingPointError) as exc:
        runlog.append(step=step, epoch=epoch, phase="abort", wall_ms=wall())
        raise TrainingAborted(f"non-finite value at step {step}: {exc}") from exc
    return model, runlog
