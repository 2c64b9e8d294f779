"""Next-word sampling, autoregressive decoding, and the generation-time bench."""

from __future__ import annotations

import csv
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import BOS_ID, EOS_ID, PAD_ID, SEP_ID, EncodedEpisode
from .model import PolicyModel, response_logits, teacher_batch


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based (Philox) generator for the named stream under `seed`."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.1
    top_p: float = 0.9
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")


@dataclass
class Trajectory:
    episode: EncodedEpisode
    prefix: np.ndarray          # response-side tokens fed as teacher-forced input
    generated: np.ndarray
    old_logp: np.ndarray        # log-prob under the tempered, truncated distribution sampled from
    raw_logp: np.ndarray        # log-prob under the untempered model, diagnostics only
    support: np.ndarray         # (T, V) nucleus each token was drawn from
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))
    terminal: float = 0.0
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def advantages(self) -> np.ndarray:
        return self.returns


def nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Boolean mask of the smallest top-probability set with mass >= top_p, per row."""
    probs = np.atleast_2d(probs)
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    before = np.cumsum(sorted_p, axis=-1) - sorted_p
    keep_sorted = before < top_p
    keep_sorted[:, 0] = True
    mask = np.zeros_like(keep_sorted)
    np.put_along_axis(mask, order, keep_sorted, axis=-1)
    return mask


def sampling_distribution(logits: np.ndarray, cfg: SamplingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Tempered, nucleus-truncated, renormalised rows and their support masks."""
    if cfg.greedy:
        support = np.zeros(logits.shape, dtype=bool)
        support[np.arange(len(logits)), logits.argmax(axis=-1)] = True
        return support.astype(np.float64), support
    p = ad.softmax_array(logits, cfg.temperature)
    support = nucleus(p, cfg.top_p)
    q = np.where(support, p, 0.0)
    q /= q.sum(axis=-1, keepdims=True)
    return q, support


def _draw(q: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(q, axis=-1)
    # scaling by the row total keeps u strictly below cdf[-1] despite rounding
    u = rng.random(len(q)) * cdf[:, -1]
    return (cdf <= u[:, None]).sum(axis=-1)


def next_word_sample_batch(model: PolicyModel, episodes: Sequence[EncodedEpisode], cfg: SamplingConfig,
                           k: int, stream=()) -> list[list[Trajectory]]:
    """k trajectories per episode, all from one teacher-forced forward pass per episode.

    Each response position is sampled independently from its row of the
    next-word distributions given the gold prefix. The RNG stream of sample j
    of an episode is keyed by (seed, *stream, episode.index, j).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    batch = teacher_batch([e.context for e in episodes], [e.response for e in episodes])
    with ad.no_grad():
        logits = response_logits(model, batch).data
    raw = ad.log_softmax_array(logits)
    q, support = sampling_distribution(logits, cfg)
    out = []
    for b, ep in enumerate(episodes):
        sl = slice(batch.offsets[b], batch.offsets[b + 1])
        qb, sb, rb = q[sl], support[sl], raw[sl]
        T = len(ep.response)
        trajs = []
        for j in range(k):
            if cfg.greedy:
                tokens = qb.argmax(axis=-1)
            else:
                tokens = _draw(qb, make_rng(cfg.seed, *stream, ep.index, j))
            pos = np.arange(T)
            trajs.append(Trajectory(
                episode=ep,
                prefix=ep.response,
                generated=tokens,
                old_logp=np.log(qb[pos, tokens]),
                raw_logp=rb[pos, tokens],
                support=sb,
            ))
        out.append(trajs)
    return out


def next_word_sample(model: PolicyModel, episode: EncodedEpisode, cfg: SamplingConfig, k: int = 1,
                     stream=()) -> list[Trajectory]:
    return next_word_sample_batch(model, [episode], cfg, k, stream)[0]


@dataclass
class DecodeResult:
    tokens: list[np.ndarray]
    old_logp: list[np.ndarray]
    supports: list[np.ndarray]


def decode_batch(model: PolicyModel, contexts: Sequence[np.ndarray], max_len: int,
                 cfg: SamplingConfig | None = None, rngs: Sequence[np.random.Generator] | None = None,
                 stop_at_eos: bool = True, record: bool = False) -> DecodeResult:
    """Autoregressive decoding, one full forward per generated token.

    Greedy when `cfg` is None or `cfg.greedy`; otherwise each row draws from
    its own generator in `rngs`.
    """
    greedy = cfg is None or cfg.greedy
    if not greedy and (rngs is None or len(rngs) != len(contexts)):
        raise ValueError("sampled decoding needs one generator per context")
    B = len(contexts)
    prefixes = [np.concatenate([[BOS_ID], np.asarray(c, dtype=np.int64), [SEP_ID]]) for c in contexts]
    gen: list[list[int]] = [[] for _ in range(B)]
    logps: list[list[float]] = [[] for _ in range(B)]
    sups: list[list[np.ndarray]] = [[] for _ in range(B)]
    active = list(range(B))
    limit = model.config.max_sequence_length
    for _ in range(max_len):
        active = [b for b in active if len(prefixes[b]) + len(gen[b]) <= limit]
        if not active:
            break
        seqs = [np.concatenate([prefixes[b], np.asarray(gen[b], dtype=np.int64)]) for b in active]
        L = max(len(s) for s in seqs)
        ids = np.full((len(active), L), PAD_ID, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
        rows = np.arange(len(active))
        cols = np.array([len(s) - 1 for s in seqs])
        with ad.no_grad():
            logits = model.logits(ids, rows, cols).data
        if greedy:
            tokens = logits.argmax(axis=-1)
            q = support = None
        else:
            q, support = sampling_distribution(logits, cfg)
            tokens = np.array([_draw(q[i:i + 1], rngs[b])[0] for i, b in enumerate(active)])
        still = []
        for i, b in enumerate(active):
            t = int(tokens[i])
            gen[b].append(t)
            if record and q is not None:
                logps[b].append(float(np.log(q[i, t])))
                sups[b].append(support[i])
            if not (stop_at_eos and t == EOS_ID):
                still.append(b)
        active = still
    V = model.config.vocab_size
    return DecodeResult(
        tokens=[np.array(g, dtype=np.int64) for g in gen],
        old_logp=[np.array(l) for l in logps],
        supports=[np.array(s, dtype=bool).reshape(-1, V) for s in sups],
    )


def autoregressive_decode(model: PolicyModel, context, mode: str = "greedy", max_len: int = 32,
                          cfg: SamplingConfig | None = None, rng: np.random.Generator | None = None,
                          stop_at_eos: bool = True) -> np.ndarray:
    if mode == "greedy":
        return decode_batch(model, [context], max_len, None, stop_at_eos=stop_at_eos).tokens[0]
    if mode == "sample":
        cfg = cfg or SamplingConfig()
        rng = rng or make_rng(cfg.seed, "decode")
        return decode_batch(model, [context], max_len, cfg, [rng], stop_at_eos=stop_at_eos).tokens[0]
    raise ValueError(f"unknown decode mode {mode!r}")


# ---------------------------------------------------------------- timing bench

@dataclass
class BenchReport:
    rows: list[dict]
    sample_ms: float
    decode_ms: float

    @property
    def ratio(self) -> float:
        return self.sample_ms / self.decode_ms

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["procedure", "batch", "episodes", "tokens", "wall_ms"])
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def bench_generation(model: PolicyModel, episodes: Sequence[EncodedEpisode], cfg: SamplingConfig,
                     batch_size: int = 8) -> BenchReport:
    """Wall time of next-word sampling vs greedy decoding of the same responses.

    Decoding always runs for the gold length (no early stop) so both
    procedures emit the same number of tokens. One CSV row per batch and
    procedure plus a total row for each.
    """
    rows = []
    totals = {"next_word_sample": 0.0, "autoregressive_decode": 0.0}
    n_tokens = {"next_word_sample": 0, "autoregressive_decode": 0}
    for start in range(0, len(episodes), batch_size):
        chunk = list(episodes[start:start + batch_size])
        T = max(len(e.response) for e in chunk)
        tokens = sum(len(e.response) for e in chunk)

        t0 = time.perf_counter()
        next_word_sample_batch(model, chunk, cfg, k=1, stream=("bench",))
        ms = (time.perf_counter() - t0) * 1000.0
        rows.append({"procedure": "next_word_sample", "batch": start // batch_size,
                     "episodes": len(chunk), "tokens": tokens, "wall_ms": ms})
        totals["next_word_sample"] += ms
        n_tokens["next_word_sample"] += tokens

        t0 = time.perf_counter()
        decode_batch(model, [e.context for e in chunk], T, None, stop_at_eos=False)
        ms = (time.perf_counter() - t0) * 1000.0
        rows.append({"procedure": "autoregressive_decode", "batch": start // batch_size,
                     "episodes": len(chunk), "tokens": T * len(chunk), "wall_ms": ms})
        totals["autoregressive_decode"] += ms
        n_tokens["autoregressive_decode"] += T * len(chunk)
    for proc in totals:
        rows.append({"procedure": proc, "batch": "total", "episodes": len(episodes),
                     "tokens": n_tokens[proc], "wall_ms": totals[proc]})
    return BenchReport(rows=rows, sample_ms=totals["next_word_sample"],
                       decode_ms=totals["autoregressive_decode"])


def bench_episodes(vocab_size: int, n: int, length: int, context_len: int = 20, seed: int = 0,
                   key_ids=frozenset()) -> list[EncodedEpisode]:
    """Random-token episodes with a fixed response length, for timing only."""
    rng = make_rng(seed, "bench-episodes")
    lo = 4  # skip special tokens
    eps = []
    for i in range(n):
        ctx = rng.integers(lo, vocab_size, size=context_len)
        resp = np.concatenate([rng.integers(lo, vocab_size, size=length - 1), [EOS_ID]])
        eps.append(EncodedEpisode(index=i, context=ctx.astype(np.int64), response=resp.astype(np.int64),
                                  key_mask=np.isin(resp, list(key_ids)), requested_ids=frozenset(),
                                  entity_id=None, domain="bench"))
    return eps
