#!/usr/bin/env python3
"""Train a toy transducer per loss variant and decode the held-out set.

Prints one row per (variant, decoder) with token accuracy.  Usage:

    python3 scripts/run_toy_experiment.py --epochs 10 --variants constrained,modified
"""
import argparse
import json
import time

from transducer_fsa.fsa import trivial_graph
from transducer_fsa.fsa_search import FsaSearchParams, fsa_beam_search, lattice_to_best_seq
from transducer_fsa.model import (
    DEFAULT_TEST_ITEMS,
    DEFAULT_TRAIN_ITEMS,
    ModelConfig,
    TrainConfig,
    init_model,
    synth_dataset,
    train,
)
from transducer_fsa.search import SearchParams, beam_search, greedy_search, greedy_search_batch, token_accuracy


def decoders(model):
    graph = trivial_graph(model.vocab_size)
    beam = SearchParams(max_symbols=None, beam_size=4)
    return {
        "greedy S=1 (batched)": lambda feats: greedy_search_batch(model, feats),
        "greedy S=inf": lambda feats: [greedy_search(model, f, None) for f in feats],
        "beam 4 S=inf": lambda feats: [beam_search(model, f, beam) for f in feats],
        "fsa-beam max": lambda feats: [lattice_to_best_seq(lat) for lat in fsa_beam_search(model, feats, [graph] * len(feats), FsaSearchParams())],
        "fsa-beam log_add": lambda feats: [
            lattice_to_best_seq(lat, "log_add") for lat in fsa_beam_search(model, feats, [graph] * len(feats), FsaSearchParams())
        ],
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", default="regular,modified,constrained")
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--lm-scale", type=float, default=TrainConfig.lm_scale)
    ap.add_argument("--train-items", type=int, default=DEFAULT_TRAIN_ITEMS)
    ap.add_argument("--test-items", type=int, default=DEFAULT_TEST_ITEMS)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write rows to this JSON-lines file")
    args = ap.parse_args()

    train_ds = synth_dataset(args.seed, args.train_items)
    test_ds = synth_dataset(args.seed + 1, args.test_items)
    feats = [u.features for u in test_ds.items]
    refs = [u.targets for u in test_ds.items]
    rows = []
    for variant in args.variants.split(","):
        cfg = ModelConfig(vocab_size=train_ds.vocab_size, feat_dim=train_ds.feat_dim, seed=args.seed)
        tcfg = TrainConfig(variant=variant, lm_scale=args.lm_scale, epochs=args.epochs, seed=args.seed)
        t0 = time.perf_counter()
        res = train(init_model(cfg), train_ds, tcfg)
        train_s = time.perf_counter() - t0
        for name, fn in decoders(res.model).items():
            t0 = time.perf_counter()
            acc = token_accuracy(refs, fn(feats))
            row = dict(variant=variant, decoder=name, accuracy=acc, final_loss=res.loss_history[-1],
                       train_seconds=train_s, decode_seconds=time.perf_counter() - t0)
            rows.append(row)
            print(f"{variant:12s} {name:22s} acc={acc:.4f} loss={row['final_loss']:.3f} decode={row['decode_seconds']:.2f}s")
    if args.json:
        with open(args.json, "w") as f:
            for r in rows:
                f.write(json.dumps(r) + "\n")


if __name__ == "__main__":
    main()
