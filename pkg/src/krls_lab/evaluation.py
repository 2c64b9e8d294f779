"""Measurement probes: keyword/token accuracy, inform/success analogs, BLEU-lite."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import EncodedEpisode
from .generation import decode_batch
from .model import response_logits, teacher_batch
from .reward import terminal_keyword_f1

EVAL_BATCH = 64


@dataclass
class EvalReport:
    keyword_accuracy: float
    token_accuracy: float
    inform: float
    success: float
    bleu: float
    combined: float
    keyword_f1: float
    episodes: int
    per_domain: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def combined_score(inform: float, success: float, bleu: float) -> float:
    return (inform + success) * 0.5 + bleu


def _teacher_argmax(model, episodes: Sequence[EncodedEpisode]) -> list[np.ndarray]:
    preds = []
    for start in range(0, len(episodes), EVAL_BATCH):
        chunk = episodes[start:start + EVAL_BATCH]
        batch = teacher_batch([e.context for e in chunk], [e.response for e in chunk])
        with ad.no_grad():
            logits = response_logits(model, batch).data
        preds.extend(batch.split(logits.argmax(axis=-1)))
    return preds


def _accuracy_counts(model, episodes, keys_only: bool) -> tuple[int, int]:
    hits = total = 0
    for ep, pred in zip(episodes, _teacher_argmax(model, episodes)):
        sel = ep.key_mask if keys_only else np.ones(len(ep.response), dtype=bool)
        hits += int((pred[sel] == ep.response[sel]).sum())
        total += int(sel.sum())
    return hits, total


def keyword_accuracy(model, episodes: Sequence[EncodedEpisode]) -> float:
    """Greedy next-token accuracy at key positions, conditioned on the gold prefix."""
    hits, total = _accuracy_counts(model, episodes, keys_only=True)
    if total == 0:
        raise ValueError("keyword_accuracy: episodes contain no key positions")
    return hits / total


def token_accuracy(model, episodes: Sequence[EncodedEpisode]) -> float:
    hits, total = _accuracy_counts(model, episodes, keys_only=False)
    if total == 0:
        raise ValueError("token_accuracy: episodes contain no response positions")
    return hits / total


def greedy_responses(model, episodes: Sequence[EncodedEpisode], max_len: int = 32) -> list[np.ndarray]:
    out = []
    for start in range(0, len(episodes), EVAL_BATCH):
        chunk = episodes[start:start + EVAL_BATCH]
        out.extend(decode_batch(model, [e.context for e in chunk], max_len).tokens)
    return out


def inform_success_from(decoded: Sequence[np.ndarray], episodes: Sequence[EncodedEpisode]) -> tuple[float, float]:
    offered = informed = succeeded = 0
    for toks, ep in zip(decoded, episodes):
        present = set(int(t) for t in toks)
        if ep.entity_id is not None:
            offered += 1
            informed += ep.entity_id in present
        succeeded += ep.requested_ids <= present
    inform = informed / offered if offered else 1.0
    success = succeeded / len(episodes) if episodes else 0.0
    return inform, success


def inform_success(model, episodes: Sequence[EncodedEpisode], max_len: int = 32) -> tuple[float, float]:
    return inform_success_from(greedy_responses(model, episodes, max_len), episodes)


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_lite(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]], max_n: int = 4) -> float:
    """Corpus BLEU on [0, 1]: add-one smoothed 1..4-gram precisions, brevity penalty."""
    if len(hypotheses) != len(references):
        raise ValueError("bleu_lite: hypotheses and references differ in count")
    if not hypotheses:
        raise ValueError("bleu_lite: empty corpus")
    matches = [0] * max_n
    counts = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = [int(t) for t in hyp]
        ref = [int(t) for t in ref]
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum((h & r).values())
            counts[n - 1] += sum(h.values())
    if hyp_len == 0:
        return 0.0
    log_p = sum(math.log((m + 1) / (c + 1)) for m, c in zip(matches, counts)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def _strip_eos(tokens: np.ndarray, eos_id: int = 2) -> list[int]:
    toks = [int(t) for t in tokens]
    return toks[:toks.index(eos_id)] if eos_id in toks else toks


def evaluate(model, episodes: Sequence[EncodedEpisode], key_ids, max_len: int = 32) -> EvalReport:
    """All probes on one episode set; decoding is greedy."""
    episodes = list(episodes)
    decoded = greedy_responses(model, episodes, max_len)
    inform, success = inform_success_from(decoded, episodes)
    hyps = [_strip_eos(d) for d in decoded]
    refs = [_strip_eos(e.response) for e in episodes]
    bleu = bleu_lite(hyps, refs)
    kf1 = float(np.mean([terminal_keyword_f1(d, e.response, key_ids) for d, e in zip(decoded, episodes)]))

    by_domain: dict[str, list[int]] = defaultdict(list)
    for i, ep in enumerate(episodes):
        by_domain[ep.domain].append(i)
    per_domain = {}
    for dom, idx in sorted(by_domain.items()):
        sub = [episodes[i] for i in idx]
        d_inf, d_suc = inform_success_from([decoded[i] for i in idx], sub)
        d_bleu = bleu_lite([hyps[i] for i in idx], [refs[i] for i in idx])
        per_domain[dom] = {"episodes": len(idx), "inform": d_inf, "success": d_suc, "bleu": d_bleu,
                           "combined": combined_score(d_inf, d_suc, d_bleu)}

    return EvalReport(
        keyword_accuracy=keyword_accuracy(model, episodes),
        token_accuracy=token_accuracy(model, episodes),
        inform=inform,
        success=success,
        bleu=bleu,
        combined=combined_score(inform, success, bleu),
        keyword_f1=kf1,
        episodes=len(episodes),
        per_domain=per_domain,
    )
