"""Command-line entry point: gen-corpus, train, sweep, bench, eval.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import config as cfgmod
from .corpus import Corpus, CorpusError, CorpusSpec, generate_corpus, read_corpus, write_corpus
from .evaluation import EvalReport, evaluate
from .generation import SamplingConfig, bench_episodes, bench_generation
from .model import CheckpointError, PolicyModel, load_checkpoint, save_checkpoint
from .trainer import TrainingAborted, VocabularyMismatchError, krls_train

log = logging.getLogger("krls_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST_VERSION = 1
GRID_ALIASES = {"kappa": "train.kappa", "mu": "reward.mu", "k": "train.k", "gamma": "reward.gamma",
                "epochs": "train.epochs", "variant": "reward.variant", "lr": "train.lr"}
SUMMARY_COLUMNS = ["kappa", "mu", "k", "combined", "inform", "success", "bleu", "keyword_f1", "status", "dir"]


class UsageError(Exception):
    """Bad input detected before any work starts (exit code 2)."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seed: int
    corpus_hash: str
    output_dir: str
    checkpoints: dict = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = "running"
    error: str | None = None
    version: str = __version__

    def write(self, path: Path) -> None:
        doc = {"manifest_version": MANIFEST_VERSION, **self.__dict__}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- shared plumbing

def resolve_corpus(run: cfgmod.RunConfig) -> Corpus:
    if run.corpus_path:
        try:
            return read_corpus(run.corpus_path)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
    return generate_corpus(run.corpus_spec)


def load_model_for(path: str | None, corpus: Corpus, what: str) -> PolicyModel | None:
    if not path:
        return None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return load_checkpoint(p, expected_vocab_hash=corpus.vocab.hash)


def train_scorer(run: cfgmod.RunConfig, corpus: Corpus, path: Path) -> PolicyModel:
    """SL-finetune a scorer from the configured init; used when none is supplied."""
    tc = run.trainer
    sl_cfg = cfgmod.TrainerConfig(algorithm="sl", epochs=tc.scorer_epochs, batch_size=tc.batch_size,
                                  lr=tc.lr, warmup_fraction=tc.warmup_fraction, seed=tc.seed,
                                  eval_at_start=False, decode_max_len=tc.decode_max_len,
                                  train_fraction=tc.train_fraction)
    model = PolicyModel(run.model_config(len(corpus.vocab)), corpus.vocab.hash)
    log.info("training SL scorer for %d epochs", tc.scorer_epochs)
    krls_train(sl_cfg, corpus, model)
    save_checkpoint(model, path)
    return model


def prepare_models(run: cfgmod.RunConfig, corpus: Corpus):
    """(initial model, scorer or None if it must be trained) after validating checkpoints."""
    tc = run.trainer
    init = load_model_for(tc.initial_checkpoint, corpus, "initial checkpoint")
    scorer = load_model_for(tc.scorer_checkpoint, corpus, "scorer checkpoint")
    if init is None:
        init = PolicyModel(run.model_config(len(corpus.vocab)), corpus.vocab.hash)
    if scorer is None and tc.uses_scorer and tc.initial_checkpoint:
        scorer = init.copy()
    return init, scorer


def run_training(run: cfgmod.RunConfig, corpus: Corpus, out: Path, command: list[str],
                 model: PolicyModel, scorer: PolicyModel | None) -> EvalReport:
    """Train one configuration into `out`; returns the final test EvalReport."""
    tc = run.trainer
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    manifest = RunManifest(command=command, config=run.to_dict(), seed=tc.seed,
                           corpus_hash=corpus.vocab.hash.hex(), output_dir=str(out))
    manifest.write(out / "manifest.json")
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    try:
        if scorer is None and tc.uses_scorer:
            scorer = train_scorer(run, corpus, out / "scorer.ckpt")
            manifest.checkpoints["scorer"] = str(out / "scorer.ckpt")
        if scorer is not None:
            scorer.freeze()

        def epoch_end(epoch, m):
            p = ckpt_dir / f"epoch_{epoch}.ckpt"
            save_checkpoint(m, p)
            manifest.checkpoints[f"epoch_{epoch}"] = str(p)

        model, runlog = krls_train(tc, corpus, model, scorer=scorer, runlog_path=out / "runlog.csv",
                                   hooks={"epoch_end": epoch_end})
        save_checkpoint(model, out / "final.ckpt")
        manifest.checkpoints["final"] = str(out / "final.ckpt")
        report = evaluate(model, corpus.encoded("test"), corpus.vocab.key_ids, tc.decode_max_len)
        report.save(out / "eval_test.json")
        last = runlog.rows[-1]["step"] if runlog.rows else 0
        runlog.append(step=last, epoch=tc.epochs, phase="eval", keyword_acc=report.keyword_accuracy,
                      token_acc=report.token_accuracy, inform=report.inform, success=report.success,
                      bleu=report.bleu, combined=report.combined)
        manifest.status = "ok"
        return report
    except BaseException as exc:
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest.finished = _now()
        manifest.write(out / "manifest.json")


def _ensure_fresh_out(out: Path) -> None:
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"output directory {out} is not empty")


def _overrides(pairs: list[str] | None) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise cfgmod.ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key] = cfgmod.parse_value(value)
    return out


# ---------------------------------------------------------------- commands

def cmd_gen_corpus(args) -> int:
    spec_doc = {}
    if args.spec:
        p = Path(args.spec)
        if not p.is_file():
            raise UsageError(f"spec file not found: {p}")
        try:
            spec_doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from exc
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    spec = CorpusSpec.from_dict(spec_doc)
    corpus = generate_corpus(spec)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.train)}/{len(corpus.valid)}/{len(corpus.test)} episodes, "
          f"vocab {len(corpus.vocab)} to {args.out}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    ov = _overrides(args.set)
    if args.algo:
        ov["train.algorithm"] = args.algo.replace("-", "_")
    if args.seed is not None:
        ov["train.seed"] = args.seed
        ov["sample.seed"] = args.seed
        ov["model.seed"] = args.seed
    if args.epochs is not None:
        ov["train.epochs"] = args.epochs
    if getattr(args, "init_checkpoint", None):
        ov["train.initial_checkpoint"] = args.init_checkpoint
    if args.scorer_checkpoint:
        ov["train.scorer_checkpoint"] = args.scorer_checkpoint
    if args.corpus:
        ov["corpus.path"] = args.corpus
    return ov


def cmd_train(args) -> int:
    run = cfgmod.load(args.config, _train_overrides(args))
    out = Path(args.out)
    _ensure_fresh_out(out)
    corpus = resolve_corpus(run)
    model, scorer = prepare_models(run, corpus)
    try:
        report = run_training(run, corpus, out, sys.argv[:1] + args.argv, model, scorer)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(report.to_json())
    return EXIT_OK


def parse_grid(items: list[str]) -> list[tuple[str, list]]:
    grid = []
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise cfgmod.ConfigError(f"grid entry {item!r} must look like key=v1,v2")
        dotted = GRID_ALIASES.get(key, key)
        grid.append((dotted, [cfgmod.parse_value(v) for v in values.split(",")]))
    return grid


def _cell_name(assign: dict) -> str:
    return "_".join(f"{k.split('.')[-1]}={v}" for k, v in assign.items())


def _sweep_cell(payload):
    doc, out, command, scorer_path = payload
    logging.getLogger("krls_lab").setLevel(logging.WARNING)
    try:
        run = cfgmod.build(doc)
        corpus = resolve_corpus(run)
        model, scorer = prepare_models(run, corpus)
        if scorer is None and scorer_path:
            scorer = load_checkpoint(scorer_path, corpus.vocab.hash)
        report = run_training(run, corpus, Path(out), command, model, scorer)
        return {"status": "ok", "report": report}
    except Exception as exc:  # a failed cell must not stop the sweep
        return {"status": f"failed: {type(exc).__name__}: {exc}", "report": None}


def sweep_workers(n_cells: int) -> int:
    env = os.environ.get("KRLS_LAB_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_cells))


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    base_doc = cfgmod.read_document(args.config)
    base_doc = json.loads(json.dumps(base_doc))
    for k, v in _overrides(args.set).items():
        cfgmod.apply_override(base_doc, k, v)
    if args.corpus:
        cfgmod.apply_override(base_doc, "corpus.path", args.corpus)
    base = cfgmod.build(base_doc)
    cells = []
    for values in itertools.product(*[vals for _, vals in grid]):
        assign = dict(zip([k for k, _ in grid], values))
        doc = json.loads(json.dumps(base_doc))
        for k, v in assign.items():
            cfgmod.apply_override(doc, k, v)
        cfgmod.build(doc)  # validate every cell before any training
        cells.append((assign, doc))

    out = Path(args.out)
    _ensure_fresh_out(out)
    corpus = resolve_corpus(base)
    load_model_for(base.trainer.initial_checkpoint, corpus, "initial checkpoint")
    scorer_path = base.trainer.scorer_checkpoint
    out.mkdir(parents=True, exist_ok=True)
    needs_scorer = any(cfgmod.build(doc).trainer.uses_scorer for _, doc in cells)
    if needs_scorer and not scorer_path and not base.trainer.initial_checkpoint:
        scorer_path = str(out / "scorer.ckpt")
        train_scorer(base, corpus, Path(scorer_path))
    elif scorer_path:
        load_model_for(scorer_path, corpus, "scorer checkpoint")

    command = sys.argv[:1] + args.argv
    payloads = [(doc, str(out / "cells" / _cell_name(assign)), command, scorer_path) for assign, doc in cells]
    workers = sweep_workers(len(cells))
    log.info("sweep: %d cells, %d worker(s)", len(cells), workers)
    if workers == 1:
        results = [_sweep_cell(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, payloads))

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for (assign, doc), payload, res in zip(cells, payloads, results):
            run = cfgmod.build(doc)
            rep = res["report"]
            w.writerow({
                "kappa": run.trainer.kappa, "mu": run.trainer.reward.mu, "k": run.trainer.k,
                "combined": rep.combined if rep else "", "inform": rep.inform if rep else "",
                "success": rep.success if rep else "", "bleu": rep.bleu if rep else "",
                "keyword_f1": rep.keyword_f1 if rep else "", "status": res["status"], "dir": payload[1],
            })
    failed = sum(r["status"] != "ok" for r in results)
    print(f"sweep finished: {len(cells) - failed}/{len(cells)} cells ok, summary at {out / 'summary.csv'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    p = Path(args.checkpoint)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    model = load_checkpoint(p)
    episodes = bench_episodes(model.config.vocab_size, args.episodes, args.len, seed=args.seed)
    cfg = SamplingConfig(seed=args.seed)
    report = bench_generation(model, episodes, cfg, batch_size=args.batch)
    summary = {"next_word_sample_ms": report.sample_ms, "autoregressive_decode_ms": report.decode_ms,
               "ratio": report.ratio, "episodes": args.episodes, "len": args.len, "batch": args.batch}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "bench.csv")
        (out / "bench.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    p = Path(args.checkpoint)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    ov = {"corpus.path": args.corpus} if args.corpus else {}
    run = cfgmod.load(args.config, ov)
    corpus = resolve_corpus(run)
    model = load_checkpoint(p, expected_vocab_hash=corpus.vocab.hash)
    report = evaluate(model, corpus.encoded(args.split), corpus.vocab.key_ids, run.trainer.decode_max_len)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.save(args.out)
    print(report.to_json())
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="krls-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate the synthetic dialog corpus")
    g.add_argument("--spec", help="JSON corpus spec (defaults used when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_corpus)

    def common_train(p):
        p.add_argument("--config", help="JSON config or a run manifest to replay")
        p.add_argument("--corpus", help="corpus directory (overrides corpus.path)")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--scorer-checkpoint")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")

    t = sub.add_parser("train", help="train one configuration")
    common_train(t)
    t.add_argument("--algo", choices=["sl", "krls", "krls-pg", "sl-gold", "std-rl"])
    t.add_argument("--init-checkpoint")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a cartesian hyperparameter grid")
    common_train(s)
    s.add_argument("--grid", nargs="+", required=True, metavar="KEY=V1,V2")
    s.set_defaults(func=cmd_sweep, algo=None, init_checkpoint=None)

    b = sub.add_parser("bench", help="time next-word sampling against autoregressive decoding")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--episodes", type=int, default=200)
    b.add_argument("--len", type=int, default=64)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--corpus")
    e.add_argument("--split", default="test", choices=["train", "valid", "test"])
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError, CorpusError, CheckpointError, VocabularyMismatchError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        log.exception("runtime failure")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
