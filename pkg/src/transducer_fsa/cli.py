"""Command-line entry point: ``transducer-fsa <command> ...``.

Exit codes: 0 success, 2 usage, 3 data/validation error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .fsa import (
    FsaError,
    best_path,
    ngram_graph_from_arpa,
    parse_fsa_text,
    remove_blanks_unique,
    sample_nbest,
    serialize_fsa_text,
    total_logprob,
    trivial_graph,
)
from .fsa_search import FsaSearchParams, fsa_beam_search, lattice_to_best_seq, lattice_to_text
from .model import (
    DEFAULT_TRAIN_ITEMS,
    CheckpointError,
    ModelConfig,
    TrainConfig,
    TrainingDivergedError,
    init_model,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    synth_dataset,
    train,
)
from .search import SearchParams, beam_search, greedy_search, greedy_search_batch, token_accuracy

log = logging.getLogger("transducer_fsa")

OUT_DIR_ENV = "TRANSDUCER_FSA_OUT_DIR"
FRAME_SHIFT = 0.01

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _max_symbols(text: str) -> int | None:
    if text.lower() in ("inf", "infinity", "none"):
        return None
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("max-symbols must be >= 1 or 'inf'")
    return v


def _limit(text: str) -> int | None:
    if text.lower() in ("inf", "none"):
        return None
    return int(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transducer-fsa", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-utterance decoding")
    p.add_argument("--out-dir", default=os.environ.get(OUT_DIR_ENV, "."))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("toygen", help="generate a synthetic dataset")
    g.add_argument("--num", type=int, default=DEFAULT_TRAIN_ITEMS)
    g.add_argument("--vocab-size", type=int, default=6)
    g.add_argument("--min-len", type=int, default=1)
    g.add_argument("--max-len", type=int, default=6)
    g.add_argument("--frames-per-token", type=int, default=3)
    g.add_argument("--noise-std", type=float, default=0.2)
    g.add_argument("--allow-repeats", action="store_true")

    t = sub.add_parser("train", help="train a toy transducer")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=["regular", "modified", "constrained"], default="constrained")
    t.add_argument("--lm-scale", type=float, default=0.25)
    t.add_argument("--lambda-simple", type=float, default=0.5)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=0.02)
    t.add_argument("--batch-size", type=int, default=1)
    t.add_argument("--enc-dim", type=int, default=32)
    t.add_argument("--emb-dim", type=int, default=16)
    t.add_argument("--joiner-dim", type=int, default=32)
    t.add_argument("--out", default="model.ckpt")

    d = sub.add_parser("decode", help="decode a dataset")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--method", choices=["greedy", "beam", "fsa-beam"], default="greedy")
    d.add_argument("--max-symbols", type=_max_symbols, default=1)
    d.add_argument("--beam-size", type=int, default=4)
    d.add_argument("--merge-op", choices=["max", "log_add"], default="max")
    d.add_argument("--length-norm", action="store_true")
    d.add_argument("--graph", default="trivial", help="'trivial' or an FSA text file")
    d.add_argument("--beam", type=float, default=20.0)
    d.add_argument("--max-states", type=_limit, default=64)
    d.add_argument("--max-contexts", type=_limit, default=8)
    d.add_argument("--nbest", type=int, default=100)
    d.add_argument("--batched", action="store_true")
    d.add_argument("--batch-size", type=int, default=64)
    d.add_argument("--out", default="transcripts.txt")

    gr = sub.add_parser("graph", help="build a decoding graph")
    gr.add_argument("kind", choices=["trivial", "ngram"])
    gr.add_argument("--vocab", type=int)
    gr.add_argument("--arpa")
    gr.add_argument("--tokens", help="file of 'symbol id' lines")
    gr.add_argument("--out", default="graph.fsa")

    la = sub.add_parser("lattice", help="query a lattice file")
    la.add_argument("op", choices=["best-path", "total", "nbest"])
    la.add_argument("lattice")
    la.add_argument("--n", type=int, default=10)

    b = sub.add_parser("bench", help="real-time-factor benchmark")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--methods", default="greedy,beam,fsa-beam")
    b.add_argument("--batch-size", type=int, default=64)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--beam-size", type=int, default=4)
    b.add_argument("--out", default="bench.jsonl")

    r = sub.add_parser("replay", help="re-run a command from its run manifest")
    r.add_argument("manifest")
    return p


def _write_manifest(args: argparse.Namespace, argv: Sequence[str]) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "flags": {k: v for k, v in vars(args).items() if k != "func"},
        "versions": {"transducer_fsa": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    (out / f"run.{args.command}.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")


def _out(args: argparse.Namespace, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else Path(args.out_dir) / p


def cmd_toygen(args: argparse.Namespace) -> int:
    ds = synth_dataset(
        args.seed,
        args.num,
        vocab_size=args.vocab_size,
        min_len=args.min_len,
        max_len=args.max_len,
        frames_per_token=args.frames_per_token,
        noise_std=args.noise_std,
        allow_repeats=args.allow_repeats,
    )
    path = save_dataset(ds, args.out_dir)
    print(f"wrote {len(ds.items)} utterances to {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    ds = load_dataset(args.data)
    cfg = ModelConfig(
        vocab_size=ds.vocab_size,
        feat_dim=ds.feat_dim,
        enc_dim=args.enc_dim,
        emb_dim=args.emb_dim,
        joiner_dim=args.joiner_dim,
        seed=args.seed,
    )
    tcfg = TrainConfig(
        variant=args.variant,
        lm_scale=args.lm_scale,
        lambda_simple=args.lambda_simple,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    res = train(init_model(cfg), ds, tcfg)
    ckpt = _out(args, args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.model, ckpt)
    with open(str(ckpt) + ".loss.jsonl", "w") as f:
        for epoch, loss in enumerate(res.loss_history):
            f.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")
    print(f"wrote {ckpt}; final loss {res.loss_history[-1]:.4f}; skipped {res.skipped} items")
    return 0


def _load_graph(source: str, vocab_size: int):
    if source == "trivial":
        return trivial_graph(vocab_size)
    return parse_fsa_text(Path(source).read_text())


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def cmd_decode(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.batched and args.method == "greedy" and args.max_symbols != 1:
        parser.error("--batched greedy decoding requires --max-symbols 1")
    if args.method == "fsa-beam" and args.max_symbols != 1:
        parser.error("fsa-beam decodes with --max-symbols 1 only")
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    feats = [u.features for u in ds.items]
    lattices = None
    if args.method == "greedy":
        if args.batched:
            hyps = []
            for i in range(0, len(feats), args.batch_size):
                hyps += greedy_search_batch(model, feats[i : i + args.batch_size])
        else:
            hyps = _map(lambda f: greedy_search(model, f, args.max_symbols), feats, args.threads)
    elif args.method == "beam":
        params = SearchParams(args.max_symbols, args.beam_size, args.merge_op, args.length_norm)
        hyps = _map(lambda f: beam_search(model, f, params), feats, args.threads)
    else:
        graph = _load_graph(args.graph, model.vocab_size)
        params = FsaSearchParams(args.beam, args.max_states, args.max_contexts)
        size = args.batch_size if args.batched else 1
        lattices = []
        for i in range(0, len(feats), size):
            chunk = feats[i : i + size]
            lattices += fsa_beam_search(model, chunk, [graph] * len(chunk), params)
        hyps = [lattice_to_best_seq(lat, args.merge_op, args.nbest, args.seed) for lat in lattices]
    out = _out(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(" ".join(map(str, h)) + "\n" for h in hyps))
    if lattices is not None:
        ldir = Path(args.out_dir) / "lattices"
        ldir.mkdir(parents=True, exist_ok=True)
        for i, (lat, f) in enumerate(zip(lattices, feats)):
            (ldir / f"utt_{i:05d}.fsa").write_text(lattice_to_text(lat, i, len(f)))
    acc = token_accuracy([u.targets for u in ds.items], hyps)
    report = {"method": args.method, "utterances": len(hyps), "token_accuracy": acc}
    (Path(args.out_dir) / "decode_report.json").write_text(json.dumps(report) + "\n")
    print(f"token accuracy {acc:.4f} over {len(hyps)} utterances")
    return 0


def read_token_map(path: str) -> dict[str, int]:
    tokens = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            sym, idx = line.split()
            tokens[sym] = int(idx)
    return tokens


def cmd_graph(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.kind == "trivial":
        if args.vocab is None:
            parser.error("graph trivial needs --vocab")
        g = trivial_graph(args.vocab)
    else:
        if not (args.arpa and args.tokens):
            parser.error("graph ngram needs --arpa and --tokens")
        g = ngram_graph_from_arpa(Path(args.arpa).read_text(), read_token_map(args.tokens))
    out = _out(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(serialize_fsa_text(g))
    print(f"wrote {out}: {g.num_states} states, {len(g.arcs)} arcs")
    return 0


def cmd_lattice(args: argparse.Namespace) -> int:
    lat = parse_fsa_text(Path(args.lattice).read_text())
    if args.op == "best-path":
        p = best_path(lat)
        rec = {"score": p.score, "labels": list(p.labels), "tokens": [x for x in p.labels if x]}
        print(json.dumps(rec))
    elif args.op == "total":
        print(json.dumps({"total_logprob": total_logprob(lat)}))
    else:
        paths = sample_nbest(lat, args.n, args.seed)
        for p in paths:
            print(json.dumps({"score": p.score, "labels": list(p.labels)}))
        print(json.dumps({"unique": [list(y) for y in remove_blanks_unique(paths)]}))
    return 0


@dataclass
class BenchRow:
    method: str
    max_symbols: str
    batched: bool
    wall_seconds: float
    audio_seconds: float
    rtf: float
    utterances: int


def run_bench(model, feats: Sequence[np.ndarray], methods: Sequence[str], repeats: int, beam_size: int = 4) -> list[BenchRow]:
    audio = sum(len(f) for f in feats) * FRAME_SHIFT
    graph = trivial_graph(model.vocab_size)
    fparams = FsaSearchParams()
    bparams = SearchParams(max_symbols=None, beam_size=beam_size)
    jobs: list[tuple[str, str, bool, Callable[[], object]]] = []
    for m in methods:
        if m == "greedy":
            jobs.append(("greedy", "1", False, lambda: [greedy_search(model, f, 1) for f in feats]))
            jobs.append(("greedy", "1", True, lambda: greedy_search_batch(model, feats)))
            jobs.append(("greedy", "inf", False, lambda: [greedy_search(model, f, None) for f in feats]))
        elif m == "beam":
            jobs.append(("beam", "inf", False, lambda: [beam_search(model, f, bparams) for f in feats]))
        elif m == "fsa-beam":
            jobs.append(("fsa-beam", "1", False, lambda: [fsa_beam_search(model, [f], [graph], fparams) for f in feats]))
            jobs.append(("fsa-beam", "1", True, lambda: fsa_beam_search(model, feats, [graph] * len(feats), fparams)))
        else:
            raise ValueError(f"unknown bench method {m!r}")
    rows = []
    for name, S, batched, fn in jobs:
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        wall = statistics.median(times)
        rows.append(BenchRow(name, S, batched, wall, audio, wall / audio, len(feats)))
    return rows


def cmd_bench(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if len(ds.items) < args.batch_size:
        raise ValueError(f"need at least {args.batch_size} utterances, have {len(ds.items)}")
    feats = [u.features for u in ds.items[: args.batch_size]]
    rows = run_bench(model, feats, [m.strip() for m in args.methods.split(",") if m.strip()], args.repeats, args.beam_size)
    out = _out(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        for r in rows:
            f.write(json.dumps(asdict(r)) + "\n")
    print(f"{'method':<10} {'S':>4} {'batched':>8} {'wall_s':>9} {'audio_s':>8} {'rtf':>9}")
    for r in rows:
        print(f"{r.method:<10} {r.max_symbols:>4} {str(r.batched):>8} {r.wall_seconds:9.4f} {r.audio_seconds:8.2f} {r.rtf:9.5f}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay":
        try:
            manifest = json.loads(Path(args.manifest).read_text())
        except (OSError, json.JSONDecodeError) as e:
            print(f"error: cannot read manifest: {e}", file=sys.stderr)
            return EXIT_DATA
        return main(manifest["argv"])
    try:
        _write_manifest(args, argv)
        if args.command == "toygen":
            return cmd_toygen(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "decode":
            return cmd_decode(args, parser)
        if args.command == "graph":
            return cmd_graph(args, parser)
        if args.command == "lattice":
            return cmd_lattice(args)
        if args.command == "bench":
            return cmd_bench(args)
    except SystemExit as e:
        return int(e.code or 0)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FsaError, CheckpointError, ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
