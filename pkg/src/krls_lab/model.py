"""Tiny decoder-only transformer used as policy, scorer and KL reference.

Input layout for one episode is ``<bos> context <sep> response``; the
distribution over response token t is read at the position holding the
previous token (``<sep>`` for t = 0). Right padding is safe because
attention is causal.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import BOS_ID, PAD_ID, SEP_ID

CKPT_MAGIC = b"KRLS"
CKPT_VERSION = 1
HASH_BYTES = 32


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_sequence_length: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_sequence_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class PolicyModel:
    def __init__(self, config: ModelConfig, vocab_hash: bytes = bytes(HASH_BYTES)):
        self.config = config
        self.vocab_hash = vocab_hash
        self.forward_count = 0
        rng = np.random.default_rng(config.seed)
        D, F, V = config.d_model, config.d_ff, config.vocab_size
        std = 0.02
        proj_std = std / math.sqrt(2 * config.n_layers)

        def normal(*shape, s=std):
            return rng.normal(0.0, s, size=shape)

        p: dict[str, np.ndarray] = {
            "tok_emb": normal(V, D),
            "pos_emb": normal(config.max_sequence_length, D),
        }
        for i in range(config.n_layers):
            pre = f"layers.{i}."
            p[pre + "ln1.g"] = np.ones(D)
            p[pre + "ln1.b"] = np.zeros(D)
            p[pre + "attn.qkv.w"] = normal(D, 3 * D)
            p[pre + "attn.qkv.b"] = np.zeros(3 * D)
            p[pre + "attn.out.w"] = normal(D, D, s=proj_std)
            p[pre + "attn.out.b"] = np.zeros(D)
            p[pre + "ln2.g"] = np.ones(D)
            p[pre + "ln2.b"] = np.zeros(D)
            p[pre + "ff.in.w"] = normal(D, F)
            p[pre + "ff.in.b"] = np.zeros(F)
            p[pre + "ff.out.w"] = normal(F, D, s=proj_std)
            p[pre + "ff.out.b"] = np.zeros(D)
        p["ln_f.g"] = np.ones(D)
        p["ln_f.b"] = np.zeros(D)
        p["head.w"] = normal(D, V)
        p["head.b"] = np.zeros(V)
        self.params = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError("state dict keys do not match the model")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ad.ShapeError(f"{k}: {arr.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    def copy(self) -> "PolicyModel":
        other = PolicyModel.__new__(PolicyModel)
        other.config = self.config
        other.vocab_hash = self.vocab_hash
        other.forward_count = 0
        other.params = {k: ad.Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
                        for k, t in self.params.items()}
        return other

    def freeze(self) -> "PolicyModel":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    # ------------------------------------------------------------ forward

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.ndim != 2:
            raise ad.ShapeError(f"expected (batch, length) token ids, got shape {ids.shape}")
        if ids.shape[1] > self.config.max_sequence_length:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_sequence_length "
                             f"{self.config.max_sequence_length}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"token id outside [0, {self.config.vocab_size})")

    def hidden(self, ids: np.ndarray) -> ad.Tensor:
        """Final-layer (post layer-norm) hidden states, shape (B, L, D)."""
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        B, L = ids.shape
        self.forward_count += B
        P = self.params
        H = self.config.n_heads
        dh = self.config.d_model // H
        x = ad.add(ad.embedding(P["tok_emb"], ids),
                   ad.embedding(P["pos_emb"], np.broadcast_to(np.arange(L), (B, L))))
        for i in range(self.config.n_layers):
            pre = f"layers.{i}."
            h = ad.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
            qkv = ad.linear(h, P[pre + "attn.qkv.w"], P[pre + "attn.qkv.b"])
            D = self.config.d_model
            q = ad.split_heads(ad.slice_last(qkv, 0, D), H)
            k = ad.split_heads(ad.slice_last(qkv, D, 2 * D), H)
            v = ad.split_heads(ad.slice_last(qkv, 2 * D, 3 * D), H)
            att = ad.causal_softmax(ad.scale(ad.matmul(q, ad.transpose_last(k)), 1.0 / math.sqrt(dh)))
            y = ad.merge_heads(ad.matmul(att, v), H)
            x = ad.add(x, ad.linear(y, P[pre + "attn.out.w"], P[pre + "attn.out.b"]))
            h = ad.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            h = ad.relu(ad.linear(h, P[pre + "ff.in.w"], P[pre + "ff.in.b"]))
            x = ad.add(x, ad.linear(h, P[pre + "ff.out.w"], P[pre + "ff.out.b"]))
        return ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"])

    def logits(self, ids: np.ndarray, rows: np.ndarray | None = None,
               cols: np.ndarray | None = None) -> ad.Tensor:
        """Next-token logits; (B, L, V), or (N, V) at the given (row, col) positions."""
        h = self.hidden(ids)
        if rows is not None:
            h = ad.gather_positions(h, rows, cols)
        return ad.linear(h, self.params["head.w"], self.params["head.b"])


# ---------------------------------------------------------------- batching

@dataclass
class TeacherBatch:
    """Padded teacher-forced inputs plus the flat index of every response position."""

    ids: np.ndarray        # (B, L)
    rows: np.ndarray       # (N,)
    cols: np.ndarray       # (N,)
    targets: np.ndarray    # (N,) the response tokens those positions predict
    offsets: np.ndarray    # (B + 1,) slice bounds of each row's positions in the flat arrays

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        return [flat[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.offsets) - 1)]


def teacher_batch(contexts: Sequence[np.ndarray], responses: Sequence[np.ndarray],
                  include_last: bool = False) -> TeacherBatch:
    """Build ``<bos> c <sep> x`` inputs.

    The last response token is only fed as input when `include_last` is set
    (needed when embedding a whole response rather than predicting it).
    """
    if len(contexts) != len(responses):
        raise ValueError("contexts and responses differ in length")
    seqs = []
    rows, cols, targets, offsets = [], [], [], [0]
    for b, (c, x) in enumerate(zip(contexts, responses)):
        c = np.asarray(c, dtype=np.int64)
        x = np.asarray(x, dtype=np.int64)
        fed = x if include_last else x[:-1]
        seqs.append(np.concatenate([[BOS_ID], c, [SEP_ID], fed]).astype(np.int64))
        start = len(c) + 1
        T = len(x)
        rows.append(np.full(T, b))
        cols.append(np.arange(start, start + T) + (1 if include_last else 0))
        targets.append(x)
        offsets.append(offsets[-1] + T)
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
    return TeacherBatch(ids=ids, rows=np.concatenate(rows), cols=np.concatenate(cols),
                        targets=np.concatenate(targets), offsets=np.array(offsets))


def response_logits(model: PolicyModel, batch: TeacherBatch) -> ad.Tensor:
    return model.logits(batch.ids, batch.rows, batch.cols)


def forward_next_word_dists(model: PolicyModel, context, gold_response) -> np.ndarray:
    """(T, V) matrix; row t is p(x_t | context, x_<t) from a single forward pass."""
    batch = teacher_batch([context], [gold_response])
    with ad.no_grad():
        logits = response_logits(model, batch).data
    return ad.softmax_array(logits)


def sl_loss(model: PolicyModel, contexts, responses) -> ad.Tensor:
    """Mean negative log-likelihood over response positions of a batch."""
    batch = teacher_batch(contexts, responses)
    logits = response_logits(model, batch)
    return ad.scale(ad.mean_all(ad.pick_log_softmax(logits, batch.targets)), -1.0)


# ---------------------------------------------------------------- checkpoints

class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VocabHashMismatchError(CheckpointError):
    pass


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(model: PolicyModel, path: str | Path) -> None:
    path = Path(path)
    if len(model.vocab_hash) != HASH_BYTES:
        raise CheckpointError("vocabulary hash must be 32 bytes")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    parts.append(model.vocab_hash)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    _sidecar(path).write_text(json.dumps(asdict(model.config), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"{self.path}: file ends early at byte {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path, expected_vocab_hash: bytes | None = None) -> PolicyModel:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    r = _Reader(buf, path)
    r.take(4)
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    count = r.u32()
    state = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    vocab_hash = r.take(HASH_BYTES)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after vocabulary hash")
    if expected_vocab_hash is not None and vocab_hash != expected_vocab_hash:
        raise VocabHashMismatchError(
            f"{path}: vocabulary hash mismatch ({vocab_hash.hex()[:12]} vs {expected_vocab_hash.hex()[:12]})")
    side = _sidecar(path)
    if not side.exists():
        raise CheckpointError(f"{path}: missing config sidecar {side.name}")
    config = ModelConfig(**json.loads(side.read_text(encoding="utf-8")))
    model = PolicyModel.__new__(PolicyModel)
    model.config = config
    model.vocab_hash = vocab_hash
    model.forward_count = 0
    model.params = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in state.items()}
    reference = PolicyModel(ModelConfig(**{**asdict(config), "seed": 0}))
    if set(reference.params) != set(model.params) or any(
            reference.params[k].shape != model.params[k].shape for k in model.params):
        raise CheckpointError(f"{path}: tensors do not match the configured architecture")
    model.params = {k: model.params[k] for k in reference.params}
    return model
