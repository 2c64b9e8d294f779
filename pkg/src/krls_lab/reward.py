"""Per-token rewards, the keyword-F1 terminal reward, and discounted returns."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

VARIANTS = ("prob", "zero", "error", "static", "bertscore")


@dataclass(frozen=True)
class RewardSpec:
    variant: str = "prob"
    mu: float = 5.0
    gamma: float = 0.9
    terminal_scale: float = 5.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown reward variant {self.variant!r}; choose from {VARIANTS}")
        if self.mu < 1.0:
            raise ValueError(f"importance scale mu must be >= 1, got {self.mu}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.terminal_scale < 0:
            raise ValueError("terminal_scale must be non-negative")


@dataclass
class TokenReward:
    values: np.ndarray
    terminal: float = 0.0


def per_token_reward(gen, gold, key_mask, scorer_probs: np.ndarray | None, spec: RewardSpec,
                     closeness: np.ndarray | None = None) -> np.ndarray:
    """Reward of each generated token against the aligned gold token, in [-1, 1].

    `prob` needs `scorer_probs` (T, V) from the frozen scorer on the gold
    prefix. `static` and `bertscore` need `closeness`, the per-position
    cosine similarity (see `static_closeness` / `contextual_closeness`).
    Key positions are weighted by mu, the rest by 1, and everything is then
    divided by mu.
    """
    gen = np.asarray(gen)
    gold = np.asarray(gold)
    key = np.asarray(key_mask, dtype=bool)
    T = len(gold)
    if gen.shape != (T,) or key.shape != (T,):
        raise ValueError(f"length mismatch: gen {gen.shape}, gold {gold.shape}, key_mask {key.shape}")
    mu = spec.mu
    correct = gen == gold

    if spec.variant == "zero":
        return np.zeros(T)
    if spec.variant == "error":
        return np.where(correct, 1.0, -1.0)

    if spec.variant == "prob":
        if scorer_probs is None:
            if not correct.all():
                raise ValueError("the prob reward needs scorer probabilities")
            return np.where(key, mu, 1.0) / mu
        scorer_probs = np.asarray(scorer_probs)
        if scorer_probs.ndim != 2 or scorer_probs.shape[0] != T:
            raise ValueError(f"scorer_probs shape {scorer_probs.shape} does not cover {T} positions")
        if np.abs(scorer_probs.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("scorer_probs rows are not normalised")
        close = np.where(correct, 1.0, np.where(key, -1.0, scorer_probs[np.arange(T), gen]))
    else:
        if closeness is None:
            raise ValueError(f"the {spec.variant} reward needs per-position closeness scores")
        close = np.asarray(closeness, dtype=np.float64)
        if close.shape != (T,):
            raise ValueError(f"closeness shape {close.shape} does not match {T} positions")
        close = np.clip(close, -1.0, 1.0)
    return close * np.where(key, mu, 1.0) / mu


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return (a * b).sum(axis=-1) / np.maximum(na * nb, 1e-12)


def static_closeness(scorer, gen, gold) -> np.ndarray:
    """Cosine of the scorer's input-embedding rows for gen vs gold tokens."""
    table = scorer.params["tok_emb"].data
    return _cosine_rows(table[np.asarray(gen)], table[np.asarray(gold)])


def contextual_closeness(scorer, context, gen, gold) -> np.ndarray:
    """Cosine of final hidden states: gold teacher-forced, gen as a standalone continuation."""
    from . import autodiff as ad
    from .model import teacher_batch

    batch = teacher_batch([context, context], [gold, gen], include_last=True)
    with ad.no_grad():
        h = scorer.hidden(batch.ids).data
    hg = h[batch.rows, batch.cols]
    gold_h, gen_h = batch.split(hg)
    return _cosine_rows(gen_h, gold_h)


def terminal_keyword_f1(gen: Iterable[int], gold: Iterable[int], key_ids, scale: float = 1.0) -> float:
    """scale * multiset F1 of key tokens in gen against gold."""
    g = Counter(int(t) for t in gen if int(t) in key_ids)
    r = Counter(int(t) for t in gold if int(t) in key_ids)
    ng, nr = sum(g.values()), sum(r.values())
    if ng == 0 and nr == 0:
        return float(scale)
    if ng == 0 or nr == 0:
        return 0.0
    overlap = sum((g & r).values())
    if overlap == 0:
        return 0.0
    precision = overlap / ng
    recall = overlap / nr
    return float(scale * 2 * precision * recall / (precision + recall))


def returns(rewards: np.ndarray | TokenReward, gamma: float, terminal: float | None = None) -> np.ndarray:
    """G_t = sum_l gamma^l r_{t+l}, with the terminal reward added to the last position."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    if isinstance(rewards, TokenReward):
        terminal = rewards.terminal if terminal is None else terminal
        rewards = rewards.values
    r = np.array(rewards, dtype=np.float64)
    if r.size and terminal:
        r[-1] += terminal
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out
