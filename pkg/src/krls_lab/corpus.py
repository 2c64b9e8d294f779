"""Synthetic delexicalised task-oriented dialog corpus.

Each episode is one turn: a templated user goal (domain, constraints,
requested attributes, a database-result marker) and a gold system response
in which slot values appear as atomic placeholder tokens such as
``[value_phone]``. Placeholders are the key tokens.

Which placeholders a response must contain is a function of the context
alone; the surrounding phrasing (openers, closers, connectives) is drawn at
random, so most response tokens are abundant but uninformative.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIAL_TOKENS = (PAD, BOS, EOS, SEP)
PAD_ID, BOS_ID, EOS_ID, SEP_ID = range(4)

DB_MATCH, DB_NOMATCH = "<db_match>", "<db_nomatch>"


class CorpusError(ValueError):
    pass


class EpisodeParseError(CorpusError):
    pass


class EpisodeValidationError(CorpusError):
    pass


class UnknownTokenError(KeyError):
    pass


def is_placeholder(token: str) -> bool:
    return token.startswith("[value_") and token.endswith("]")


def ph(slot: str) -> str:
    return f"[value_{slot}]"


# ---------------------------------------------------------------- domain catalog

# user-side surface words for requestable slots
REQUEST_WORDS = {
    "phone": ["phone", "number"],
    "address": ["address"],
    "postcode": ["postcode"],
    "area": ["area"],
    "price": ["price", "range"],
    "food": ["cuisine"],
    "stars": ["star", "rating"],
    "type": ["kind", "of", "place"],
    "time": ["departure", "time"],
    "reference": ["reference"],
}

# lexical constraint values the user may state, with the phrase pattern
CONSTRAINT_VALUES = {
    "area": (["in", "the"], ["north", "south", "east", "west", "centre"]),
    "price": ([], ["cheap", "moderate", "expensive"]),
    "food": (["serving"], ["italian", "chinese", "indian", "british", "thai", "french"]),
    "stars": (["rated"], ["two", "three", "four", "five"]),
    "type": (["like", "a"], ["museum", "park", "gallery", "theatre", "college"]),
    "time": (["leaving", "in", "the"], ["morning", "afternoon", "evening"]),
    "route": (["from"], ["cambridge", "london", "ely", "norwich", "stevenage"]),
}

# how the system echoes a constraint back in the response
ECHO_PHRASES = {
    "area": [["in", "the", ph("area")], ["located", "in", "the", ph("area")]],
    "price": [["in", "the", ph("price"), "price", "range"], ["which", "is", ph("price")]],
    "food": [["serving", ph("food"), "food"], ["that", "serves", ph("food")]],
    "stars": [["with", ph("stars"), "stars"], ["rated", ph("stars"), "stars"]],
    "type": [["which", "is", "a", ph("type")], ["a", "lovely", ph("type")]],
    "time": [["leaving", "at", ph("time")], ["departing", "at", ph("time")]],
}

# descriptive answer clauses for a requested slot
DESCRIBE_PHRASES = {
    "phone": [["their", "phone", "is", ph("phone")], ["you", "can", "call", "them", "on", ph("phone")]],
    "address": [["the", "address", "is", ph("address")], ["they", "are", "at", ph("address")]],
    "postcode": [["the", "postcode", "is", ph("postcode")], ["postcode", ph("postcode")]],
    "area": [["it", "is", "in", "the", ph("area")], ["the", "area", "is", ph("area")]],
    "price": [["it", "is", ph("price")], ["the", "price", "is", ph("price")]],
    "food": [["they", "serve", ph("food")], ["the", "cuisine", "is", ph("food")]],
    "stars": [["it", "has", ph("stars"), "stars"], ["rated", ph("stars"), "stars"]],
    "type": [["it", "is", "a", ph("type")], ["the", "type", "is", ph("type")]],
    "time": [["it", "leaves", "at", ph("time")], ["departure", "is", "at", ph("time")]],
    "reference": [["your", "reference", "is", ph("reference")], ["reference", "number", ph("reference")]],
}

DOMAIN_CATALOG = {
    "restaurant": {"entity": "name", "constraints": ["area", "price", "food"],
                   "requestable": ["phone", "address", "postcode", "area", "price", "food"]},
    "hotel": {"entity": "name", "constraints": ["area", "price", "stars"],
              "requestable": ["phone", "address", "postcode", "area", "price", "stars"]},
    "attraction": {"entity": "name", "constraints": ["area", "type"],
                   "requestable": ["phone", "address", "postcode", "area", "price", "type"]},
    "train": {"entity": "id", "constraints": ["route", "time"],
              "requestable": ["price", "time", "reference"]},
    "taxi": {"entity": "car", "constraints": ["route", "time"],
             "requestable": ["phone", "reference"]},
}

ENTITY_PLACEHOLDERS = frozenset(ph(d["entity"]) for d in DOMAIN_CATALOG.values())

OFFER_PHRASES = [
    ["@E", "is", "a", "good", "choice"],
    ["how", "about", "@E"],
    ["i", "recommend", "@E"],
    ["@E", "would", "suit", "you"],
    ["you", "could", "try", "@E"],
    ["there", "is", "@E"],
]

LIST_LEADS = [["here", "are", "the", "details", ":"], ["details", ":"], ["info", ":"],
              ["you", "asked", "for", ":"]]
LIST_JOINERS = [[","], ["and"], [";"]]

USER_LEADS = [["i", "need", "a"], ["i", "am", "looking", "for", "a"], ["can", "you", "find", "me", "a"],
              ["please", "find", "a"], ["i", "want", "a"]]
REQUEST_LEADS = [["what", "is", "the"], ["can", "you", "tell", "me", "the"], ["i", "need", "the"],
                 ["please", "give", "me", "the"]]
NOMATCH_PHRASES = [["sorry", ",", "there", "is", "no"], ["i", "could", "not", "find", "a"],
                   ["unfortunately", "no"]]
NOMATCH_TAILS = [["would", "you", "like", "something", "else", "?"], ["shall", "i", "try", "another", "?"]]

FILLER_WORDS = [
    "sure", "certainly", "great", "okay", "absolutely", "of", "course", "happy", "to", "help", "glad",
    "well", "alright", "lovely", "perfect", "thanks", "enjoy", "your", "stay", "anything", "else",
    "have", "a", "nice", "day", "goodbye", "welcome", "let", "me", "know", "if", "you", "need",
    "more", "hope", "that", "helps", "cheers", "wonderful", "fine", "indeed", "yes", "good",
]


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    domains: tuple[str, ...] = ("restaurant", "hotel", "attraction", "train", "taxi")
    templates_per_domain: int = 8
    filler_vocab_size: int = 40
    n_filler_phrases: int = 12
    match_rate: float = 0.85
    min_response_len: int = 8
    max_response_len: int = 24
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_train", "n_valid", "n_test"):
            if getattr(self, name) < 0:
                raise CorpusError(f"{name} must be non-negative")
        if not self.domains:
            raise CorpusError("at least one domain is required")
        unknown = [d for d in self.domains if d not in DOMAIN_CATALOG]
        if unknown:
            raise CorpusError(f"unknown domains: {unknown}")
        if self.templates_per_domain < 1:
            raise CorpusError("templates_per_domain must be >= 1")
        if not 1 <= self.filler_vocab_size <= len(FILLER_WORDS):
            raise CorpusError(f"filler_vocab_size must be in [1, {len(FILLER_WORDS)}]")
        if self.n_filler_phrases < 1:
            raise CorpusError("n_filler_phrases must be >= 1")
        if not 0.0 < self.match_rate <= 1.0:
            raise CorpusError("match_rate must be in (0, 1]")
        if not 3 <= self.min_response_len <= self.max_response_len:
            raise CorpusError("response length bounds are inconsistent")
        for d in self.domains:
            entry = DOMAIN_CATALOG[d]
            if len(entry["requestable"]) < 2:
                raise CorpusError(f"domain {d} needs >= 2 requestable slots")

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise CorpusError(f"unknown corpus spec keys: {sorted(extra)}")
        data = dict(data)
        if "domains" in data:
            data["domains"] = tuple(data["domains"])
        spec = cls(**data)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domains"] = list(self.domains)
        return d


@dataclass
class Episode:
    context: list[str]
    response: list[str]
    key_mask: list[bool]
    requested_slots: list[str]
    offers_entity: bool
    domain: str

    def to_json(self) -> dict:
        return {"context": list(self.context), "response": list(self.response),
                "key_mask": [bool(k) for k in self.key_mask],
                "requested_slots": list(self.requested_slots),
                "offers_entity": bool(self.offers_entity), "domain": self.domain}

    @property
    def entity_placeholder(self) -> str | None:
        if not self.offers_entity:
            return None
        entry = DOMAIN_CATALOG.get(self.domain)
        if entry is not None:
            return ph(entry["entity"])
        return next((t for t in self.response if t in ENTITY_PLACEHOLDERS), None)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise CorpusError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.key_ids = frozenset(i for i, t in enumerate(tokens) if is_placeholder(t))
        self.hash = hashlib.sha256("\n".join(tokens).encode("utf-8")).digest()

    pad_id, bos_id, eos_id, sep_id = PAD_ID, BOS_ID, EOS_ID, SEP_ID

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.tokens, indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list) or not all(isinstance(t, str) for t in data):
            raise CorpusError(f"{path}: vocabulary must be a JSON array of strings")
        return cls(data)


def encode(tokens: Iterable[str], vocab: Vocabulary) -> list[int]:
    out = []
    for t in tokens:
        try:
            out.append(vocab.index[t])
        except KeyError:
            raise UnknownTokenError(f"token {t!r} is not in the vocabulary") from None
    return out


def decode(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    out = []
    n = len(vocab.tokens)
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise IndexError(f"token id {i} outside [0, {n})")
        out.append(vocab.tokens[i])
    return out


@dataclass
class EncodedEpisode:
    """Integer view of an Episode used by the model-facing code."""

    index: int
    context: np.ndarray
    response: np.ndarray
    key_mask: np.ndarray
    requested_ids: frozenset
    entity_id: int | None
    domain: str


def encode_episode(ep: Episode, vocab: Vocabulary, index: int = 0) -> EncodedEpisode:
    entity = ep.entity_placeholder
    return EncodedEpisode(
        index=index,
        context=np.array(encode(ep.context, vocab), dtype=np.int64),
        response=np.array(encode(ep.response, vocab), dtype=np.int64),
        key_mask=np.array(ep.key_mask, dtype=bool),
        requested_ids=frozenset(encode(ep.requested_slots, vocab)),
        entity_id=None if entity is None else vocab.index[entity],
        domain=ep.domain,
    )


# ---------------------------------------------------------------- validation

def requested_from_context(context: Sequence[str]) -> list[str]:
    """Recover requested placeholders from the request sentence of a context."""
    try:
        start = context.index(".") + 1
    except ValueError:
        return []
    words = list(context[start:])
    found = []
    for slot, surface in REQUEST_WORDS.items():
        n = len(surface)
        if any(words[i:i + n] == surface for i in range(len(words) - n + 1)):
            found.append((min(i for i in range(len(words) - n + 1) if words[i:i + n] == surface), ph(slot)))
    return [p for _, p in sorted(found)]


def validate_episode(ep: Episode, where: str = "episode") -> None:
    if len(ep.key_mask) != len(ep.response):
        raise EpisodeValidationError(
            f"{where}: key_mask length {len(ep.key_mask)} != response length {len(ep.response)}")
    for i, (tok, key) in enumerate(zip(ep.response, ep.key_mask)):
        if bool(key) != is_placeholder(tok):
            raise EpisodeValidationError(f"{where}: key_mask wrong at response position {i} ({tok!r})")
    if not ep.context or ep.context[-1] != EOS:
        raise EpisodeValidationError(f"{where}: context must end with {EOS}")
    if not ep.response or ep.response[-1] != EOS:
        raise EpisodeValidationError(f"{where}: response must end with {EOS}")
    missing = [s for s in ep.requested_slots if s not in ep.response]
    if missing:
        raise EpisodeValidationError(f"{where}: requested slots {missing} absent from response")
    if sorted(requested_from_context(ep.context)) != sorted(ep.requested_slots):
        raise EpisodeValidationError(f"{where}: requested slots not recoverable from context")
    if ep.offers_entity and ep.entity_placeholder not in ep.response:
        raise EpisodeValidationError(f"{where}: entity-offering response lacks its entity placeholder")


# ---------------------------------------------------------------- generation

@dataclass
class _Template:
    offer: int
    echo_style: int
    request_style: str          # "describe" or "list"
    describe_variant: int
    list_lead: int
    joiner: int
    use_opener: bool
    use_closer: bool


def _phrases_from_words(words: Sequence[str], count: int, rng: np.random.Generator) -> list[list[str]]:
    phrases = []
    seen = set()
    attempts = 0
    while len(phrases) < count and attempts < 50 * count:
        attempts += 1
        n = int(rng.integers(1, 4))
        p = [words[int(i)] for i in rng.integers(0, len(words), size=n)]
        if tuple(p) not in seen:
            seen.add(tuple(p))
            phrases.append(p)
    return phrases


def _make_templates(spec: CorpusSpec, rng: np.random.Generator) -> dict[str, list[_Template]]:
    out = {}
    for d in spec.domains:
        out[d] = [_Template(
            offer=int(rng.integers(len(OFFER_PHRASES))),
            echo_style=int(rng.integers(2)),
            request_style="describe" if rng.random() < 0.5 else "list",
            describe_variant=int(rng.integers(2)),
            list_lead=int(rng.integers(len(LIST_LEADS))),
            joiner=int(rng.integers(len(LIST_JOINERS))),
            use_opener=bool(rng.random() < 0.7),
            use_closer=bool(rng.random() < 0.6),
        ) for _ in range(spec.templates_per_domain)]
    return out


def _draw_instance(spec, templates, openers, closers, rng):
    domain = spec.domains[int(rng.integers(len(spec.domains)))]
    entry = DOMAIN_CATALOG[domain]
    tid = int(rng.integers(len(templates[domain])))
    tpl = templates[domain][tid]
    match = bool(rng.random() < spec.match_rate)

    cons_slots = [s for s in entry["constraints"] if rng.random() < 0.5]
    cons_values = {s: int(rng.integers(len(CONSTRAINT_VALUES[s][1]))) for s in cons_slots}
    if match:
        candidates = [s for s in entry["requestable"] if s not in cons_slots]
        n_req = int(rng.integers(0, min(3, len(candidates)) + 1))
        order = rng.permutation(len(candidates))[:n_req]
        requests = [candidates[int(i)] for i in order]
    else:
        requests = []
    key = (domain, tid, match, tuple(sorted(cons_values.items())), tuple(requests),
           int(rng.integers(len(USER_LEADS))), int(rng.integers(len(REQUEST_LEADS))),
           int(rng.integers(len(openers))), int(rng.integers(len(closers))),
           int(rng.integers(len(NOMATCH_PHRASES))), int(rng.integers(len(NOMATCH_TAILS))))
    return key


def _render(key, spec, templates, openers, closers) -> Episode:
    (domain, tid, match, cons_items, requests, ulead, rlead, oi, ci, ni, nt) = key
    entry = DOMAIN_CATALOG[domain]
    tpl = templates[domain][tid]
    cons = dict(cons_items)

    context = [f"<{domain}>"] + USER_LEADS[ulead] + [domain]
    for s in entry["constraints"]:
        if s in cons:
            lead, values = CONSTRAINT_VALUES[s]
            if s == "route":
                a = values[cons[s]]
                b = values[(cons[s] + 1) % len(values)]
                context += ["from", a, "to", b]
            else:
                context += lead + [values[cons[s]]]
    context.append(".")
    if requests:
        context += REQUEST_LEADS[rlead]
        for i, s in enumerate(requests):
            if i:
                context.append("and")
            context += REQUEST_WORDS[s]
        context.append("?")
    context += [DB_MATCH if match else DB_NOMATCH, EOS]

    echo = []
    for s in entry["constraints"]:
        if s in cons and s in ECHO_PHRASES:
            echo += ECHO_PHRASES[s][tpl.echo_style]

    body = []
    if match:
        entity = ph(entry["entity"])
        body += [entity if w == "@E" else w for w in OFFER_PHRASES[tpl.offer]] + echo
        if requests:
            body.append(".")
            if tpl.request_style == "describe":
                for i, s in enumerate(requests):
                    if i:
                        body += LIST_JOINERS[tpl.joiner]
                    body += DESCRIBE_PHRASES[s][tpl.describe_variant]
            else:
                body += LIST_LEADS[tpl.list_lead]
                for i, s in enumerate(requests):
                    if i:
                        body += LIST_JOINERS[tpl.joiner]
                    body.append(ph(s))
        body.append(".")
    else:
        body += NOMATCH_PHRASES[ni] + [domain] + echo + ["."] + NOMATCH_TAILS[nt]

    def assemble(with_opener, with_closer):
        resp = []
        if with_opener:
            resp += openers[oi] + [","]
        resp += body
        if with_closer:
            resp += closers[ci]
        return resp + [EOS]

    response = assemble(tpl.use_opener, tpl.use_closer)
    if len(response) > spec.max_response_len:
        response = assemble(False, False)
    if len(response) < spec.min_response_len:
        response = assemble(True, True)
    return Episode(
        context=context,
        response=response,
        key_mask=[is_placeholder(t) for t in response],
        requested_slots=[ph(s) for s in requests],
        offers_entity=match,
        domain=domain,
    )


@dataclass
class Corpus:
    train: list[Episode]
    valid: list[Episode]
    test: list[Episode]
    vocab: Vocabulary
    spec: CorpusSpec | None = None
    stats: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Episode]:
        if name not in ("train", "valid", "test"):
            raise CorpusError(f"unknown split {name!r}")
        return getattr(self, name)

    def encoded(self, name: str) -> list[EncodedEpisode]:
        return [encode_episode(e, self.vocab, i) for i, e in enumerate(self.split(name))]


def build_vocabulary(spec: CorpusSpec) -> Vocabulary:
    """Every token the generator can emit for `spec`, in a stable order."""
    words: set[str] = set(FILLER_WORDS[:spec.filler_vocab_size])
    words |= {DB_MATCH, DB_NOMATCH, ".", ",", "?", ":", ";", "and"}
    for d in spec.domains:
        entry = DOMAIN_CATALOG[d]
        words |= {f"<{d}>", d, ph(entry["entity"])}
        for s in entry["constraints"]:
            lead, values = CONSTRAINT_VALUES[s]
            words |= set(lead) | set(values) | {"from", "to"}
            for phrase in ECHO_PHRASES.get(s, []):
                words |= set(phrase)
        for s in entry["requestable"]:
            words |= set(REQUEST_WORDS[s]) | {ph(s)}
            for phrase in DESCRIBE_PHRASES[s]:
                words |= set(phrase)
    for group in (OFFER_PHRASES, LIST_LEADS, LIST_JOINERS, USER_LEADS, REQUEST_LEADS,
                  NOMATCH_PHRASES, NOMATCH_TAILS):
        for phrase in group:
            words |= {w for w in phrase if w != "@E"}
    placeholders = sorted(w for w in words if is_placeholder(w))
    rest = sorted(w for w in words if not is_placeholder(w) and w not in SPECIAL_TOKENS)
    return Vocabulary(list(SPECIAL_TOKENS) + placeholders + rest)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic corpus for `spec`; splits never share an instantiation."""
    spec.validate()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(spec.seed)))
    fillers = FILLER_WORDS[:spec.filler_vocab_size]
    templates = _make_templates(spec, rng)
    openers = _phrases_from_words(fillers, spec.n_filler_phrases, rng)
    closers = _phrases_from_words(fillers, spec.n_filler_phrases, rng)
    vocab = build_vocabulary(spec)

    total = spec.n_train + spec.n_valid + spec.n_test
    seen: set = set()
    episodes: list[Episode] = []
    attempts = 0
    while len(episodes) < total:
        attempts += 1
        if attempts > 200 * max(total, 1):
            raise CorpusError("could not draw enough distinct episodes; enlarge the template space")
        key = _draw_instance(spec, templates, openers, closers, rng)
        if key in seen:
            continue
        ep = _render(key, spec, templates, openers, closers)
        if not spec.min_response_len <= len(ep.response) <= spec.max_response_len:
            continue
        sig = (tuple(ep.context), tuple(ep.response))
        if sig in seen:
            continue
        seen.add(key)
        seen.add(sig)
        bad = [t for t in ep.context + ep.response if t not in vocab]
        if bad:
            raise CorpusError(f"generator emitted tokens outside the vocabulary: {bad}")
        validate_episode(ep, f"generated episode {len(episodes)}")
        episodes.append(ep)

    train = episodes[:spec.n_train]
    valid = episodes[spec.n_train:spec.n_train + spec.n_valid]
    test = episodes[spec.n_train + spec.n_valid:]
    corpus = Corpus(train=train, valid=valid, test=test, vocab=vocab, spec=spec)
    corpus.stats = corpus_stats(corpus)
    return corpus


def corpus_stats(corpus: Corpus) -> dict:
    stats = {"vocab_size": len(corpus.vocab), "vocab_hash": corpus.vocab.hash.hex(), "splits": {}}
    key_total = resp_total = 0
    max_total = 0
    for name in ("train", "valid", "test"):
        eps = corpus.split(name)
        k = sum(sum(e.key_mask) for e in eps)
        r = sum(len(e.response) for e in eps)
        key_total += k
        resp_total += r
        if eps:
            max_total = max(max_total, max(len(e.context) + len(e.response) for e in eps))
        stats["splits"][name] = {
            "episodes": len(eps),
            "response_tokens": r,
            "key_tokens": k,
            "key_fraction": k / r if r else 0.0,
            "mean_response_len": r / len(eps) if eps else 0.0,
            "offers_entity": sum(e.offers_entity for e in eps),
        }
    stats["key_fraction"] = key_total / resp_total if resp_total else 0.0
    stats["max_context_plus_response"] = max_total
    return stats


def low_resource(episodes: Sequence[Episode], fraction: float) -> list[Episode]:
    """Deterministic prefix of an already shuffled split."""
    if not 0.0 < fraction <= 1.0:
        raise CorpusError(f"fraction must be in (0, 1], got {fraction}")
    return list(episodes[:max(1, math.ceil(fraction * len(episodes)))])


# ---------------------------------------------------------------- file I/O

_FIELDS = {"context": list, "response": list, "key_mask": list, "requested_slots": list,
           "offers_entity": bool, "domain": str}


def save_episodes(episodes: Iterable[Episode], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json(), separators=(",", ":")) + "\n")


def _parse_line(obj, lineno: int, path) -> Episode:
    where = f"{path}:{lineno}"
    if not isinstance(obj, dict):
        raise EpisodeParseError(f"{where}: expected a JSON object")
    for name, kind in _FIELDS.items():
        if name not in obj:
            raise EpisodeParseError(f"{where}: missing field '{name}'")
        if not isinstance(obj[name], kind):
            raise EpisodeParseError(f"{where}: field '{name}' must be {kind.__name__}")
    extra = set(obj) - set(_FIELDS)
    if extra:
        raise EpisodeParseError(f"{where}: unexpected fields {sorted(extra)}")
    for name in ("context", "response", "requested_slots"):
        if not all(isinstance(t, str) for t in obj[name]):
            raise EpisodeParseError(f"{where}: field '{name}' must hold strings")
    if not all(isinstance(k, bool) for k in obj["key_mask"]):
        raise EpisodeParseError(f"{where}: field 'key_mask' must hold booleans")
    return Episode(**{k: obj[k] for k in _FIELDS})


def load_episodes(path: str | Path) -> list[Episode]:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EpisodeParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            ep = _parse_line(obj, lineno, path)
            validate_episode(ep, f"{path}:{lineno} (episode {len(episodes)})")
            episodes.append(ep)
    return episodes


def write_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        save_episodes(corpus.split(name), out / f"{name}.jsonl")
    corpus.vocab.save(out / "vocab.json")
    stats = dict(corpus.stats or corpus_stats(corpus))
    if corpus.spec is not None:
        stats["spec"] = corpus.spec.to_dict()
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_corpus(corpus_dir: str | Path) -> Corpus:
    d = Path(corpus_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory {d} does not exist")
    vocab = Vocabulary.load(d / "vocab.json")
    splits = {name: load_episodes(d / f"{name}.jsonl") for name in ("train", "valid", "test")}
    for name, eps in splits.items():
        for i, ep in enumerate(eps):
            bad = [t for t in ep.context + ep.response if t not in vocab]
            if bad:
                raise EpisodeValidationError(f"{name} episode {i}: tokens outside vocabulary {bad[:3]}")
    corpus = Corpus(vocab=vocab, **splits)
    corpus.stats = corpus_stats(corpus)
    return corpus
