"""Shared fixtures and small independent oracles."""
from __future__ import annotations

import math

import numpy as np
import pytest

from transducer_fsa.model import ModelConfig, init_model


def small_model(seed: int, V: int = 4, feat_dim: int = 5, scale: float = 1.0, blank_bias: float = 0.0):
    """Random toy model; ``scale`` sharpens the joiner output, ``blank_bias`` favors blank."""
    cfg = ModelConfig(vocab_size=V, feat_dim=feat_dim, enc_dim=8, emb_dim=6, joiner_dim=8, seed=seed)
    m = init_model(cfg)
    if scale != 1.0:
        m.params["join_out_w"] = (m.params["join_out_w"] * scale).astype(np.float32)
    m.params["join_out_b"][0] += blank_bias
    return m


def random_feats(rng: np.random.Generator, T: int, feat_dim: int = 5) -> np.ndarray:
    return rng.normal(size=(T, feat_dim)).astype(np.float32)


class TableModel:
    """Model whose joiner output is looked up from ``table[t][context]``.

    ``encode`` returns the frame index as a 1-wide row; ``decode`` returns the
    packed context.  Missing contexts fall back to ``default``.
    """

    def __init__(self, V: int, table: dict, default: np.ndarray):
        self.vocab_size = V
        self.table = table
        self.default = np.asarray(default, dtype=np.float64)

    def encode(self, features):
        return np.arange(len(features), dtype=np.float64)[:, None]

    def decode(self, contexts):
        return np.asarray(contexts, dtype=np.float64).reshape(-1, 1)

    def join(self, enc_rows, dec_rows):
        out = []
        for e, d in zip(np.asarray(enc_rows)[:, 0], np.asarray(dec_rows)[:, 0]):
            row = self.table.get((int(e), int(d)), self.default)
            out.append(np.asarray(row, dtype=np.float64))
        return np.stack(out)


def random_table_model(seed: int, V: int, T: int, blank_boost: float = 1.0) -> TableModel:
    """TableModel with an independent random log-distribution per (frame, context)."""
    rng = np.random.default_rng(seed)
    table = {}
    for t in range(T):
        for c in range(V * V):
            logits = rng.normal(size=V)
            logits[0] += blank_boost
            table[(t, c)] = logits - np.logaddexp.reduce(logits)
    return TableModel(V, table, np.log(np.full(V, 1.0 / V)))


def joiner_table(model, feats) -> np.ndarray:
    """Dense T x V^2 x V log-prob table, one joiner call per (frame, context)."""
    V = model.vocab_size
    enc = model.encode(feats)
    ctx = np.arange(V * V)
    dec = model.decode(ctx)
    return np.stack([np.asarray(model.join(np.repeat(enc[t : t + 1], V * V, axis=0), dec), np.float64) for t in range(len(enc))])


def s1_logadd_dp(model, feats) -> float:
    """Total probability of all S=1 paths, summed over (frame, two-token context)."""
    V = model.vocab_size
    lp = joiner_table(model, feats)
    alpha = {0: 0.0}
    for t in range(lp.shape[0]):
        nxt: dict[int, float] = {}
        for c, a in alpha.items():
            moves = [(c, lp[t, c, 0])] + [((c % V) * V + k, lp[t, c, k]) for k in range(1, V)]
            for d, w in moves:
                nxt[d] = np.logaddexp(nxt.get(d, -math.inf), a + w)
        alpha = nxt
    return float(np.logaddexp.reduce(list(alpha.values())))


def exhaustive_sequences(model, feats, max_per_frame: int) -> dict[tuple[int, ...], float]:
    """Max-symbols alignments enumerated explicitly, max-merged per label sequence.

    A frame emits between 0 and ``max_per_frame`` tokens.  Emitting fewer
    than the limit ends the frame with a blank; reaching it ends the frame
    without one.
    """
    V = model.vocab_size
    enc = model.encode(feats)
    best: dict[tuple[int, ...], float] = {}

    def lp(t, ys):
        a = ys[-2] if len(ys) >= 2 else 0
        b = ys[-1] if ys else 0
        return np.asarray(model.join(enc[t : t + 1], model.decode([a * V + b])), np.float64)[0]

    def rec(t, ys, score):
        if t == len(enc):
            if score > best.get(ys, -math.inf):
                best[ys] = score
            return
        frame(t, ys, score, 0)

    def frame(t, ys, score, n):
        row = lp(t, ys)
        rec(t + 1, ys, score + row[0])
        for k in range(1, V):
            if n + 1 == max_per_frame:
                rec(t + 1, ys + (k,), score + row[k])
            else:
                frame(t, ys + (k,), score + row[k], n + 1)

    rec(0, (), 0.0)
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def capped_viterbi(model, feats, max_per_frame: int) -> tuple[tuple[int, ...], float]:
    """Best single alignment under the max-symbols rule, by DP over (context, n).

    Same alignment space as :func:`exhaustive_sequences`, tractable for
    larger per-frame limits.
    """
    V = model.vocab_size
    S = max_per_frame
    lp = joiner_table(model, feats)
    # frame-start states: context -> (score, ys)
    start = {0: (0.0, ())}
    for t in range(lp.shape[0]):
        nxt: dict[int, tuple[float, tuple]] = {}

        def push(d, c, s, ys):
            if d not in c or s > c[d][0]:
                c[d] = (s, ys)

        layer = start
        for n in range(S):
            deeper: dict[int, tuple[float, tuple]] = {}
            for c, (s, ys) in layer.items():
                push(c, nxt, s + lp[t, c, 0], ys)
                for k in range(1, V):
                    d = (c % V) * V + k
                    target = nxt if n + 1 == S else deeper
                    push(d, target, s + lp[t, c, k], ys + (k,))
            layer = deeper
        start = nxt
    ys_best, s_best = (), -math.inf
    for s, ys in start.values():
        if s > s_best:
            s_best, ys_best = s, ys
    return ys_best, s_best
