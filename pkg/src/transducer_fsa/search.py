"""Max-symbols greedy and beam search over full-history hypotheses.

Any object with ``encode(features)``, ``decode(packed_contexts)``,
``join(enc_rows, dec_rows)`` and ``vocab_size`` works as the model.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .fsa import log_add
from .model import INITIAL_CONTEXT, next_context

log = logging.getLogger(__name__)

SYMBOL_CAP = 10
NEG_INF = float("-inf")


class TransducerModel(Protocol):
    vocab_size: int

    def encode(self, features: np.ndarray) -> np.ndarray: ...

    def decode(self, contexts) -> np.ndarray: ...

    def join(self, enc_rows: np.ndarray, dec_rows: np.ndarray) -> np.ndarray: ...


class MergeOp(str, enum.Enum):
    MAX = "max"
    LOG_ADD = "log_add"


@dataclass
class SearchStats:
    """Counts frames where the safety cap forced a frame advance."""

    cap_hits: int = 0
    max_symbols_on_frame: int = 0


@dataclass(frozen=True)
class SearchParams:
    max_symbols: int | None = 1  # None means unlimited, bounded by symbol_cap
    beam_size: int = 4
    merge_op: MergeOp = MergeOp.MAX
    length_norm: bool = False
    symbol_cap: int = SYMBOL_CAP

    def __post_init__(self) -> None:
        if self.max_symbols is not None and self.max_symbols < 1:
            raise ValueError("max_symbols must be >= 1 or None")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.symbol_cap < 1:
            raise ValueError("symbol_cap must be >= 1")
        object.__setattr__(self, "merge_op", MergeOp(self.merge_op))

    @property
    def effective_symbols(self) -> int:
        return self.symbol_cap if self.max_symbols is None else self.max_symbols


def _context_of(ys: Sequence[int], V: int) -> int:
    a = ys[-2] if len(ys) >= 2 else 0
    b = ys[-1] if len(ys) >= 1 else 0
    return a * V + b


def greedy_search(
    model: TransducerModel,
    features: np.ndarray,
    max_symbols: int | None = 1,
    symbol_cap: int = SYMBOL_CAP,
    stats: SearchStats | None = None,
) -> list[int]:
    """Argmax decoding emitting at most ``max_symbols`` tokens per frame.

    ``max_symbols=None`` is unlimited up to ``symbol_cap``.  Ties go to the
    smaller token id, so blank wins ties.
    """
    if max_symbols is not None and max_symbols < 1:
        raise ValueError("max_symbols must be >= 1")
    S = symbol_cap if max_symbols is None else max_symbols
    V = model.vocab_size
    enc = model.encode(features)
    ys: list[int] = []
    ctx = INITIAL_CONTEXT
    dec = model.decode([ctx])
    for t in range(enc.shape[0]):
        n = 0
        while n < S:
            lp = model.join(enc[t : t + 1], dec)[0]
            k = int(np.argmax(lp))
            if k == 0:
                break
            ys.append(k)
            ctx = next_context(ctx, k, V)
            dec = model.decode([ctx])
            n += 1
        if stats is not None:
            stats.max_symbols_on_frame = max(stats.max_symbols_on_frame, n)
            if max_symbols is None and n == S:
                stats.cap_hits += 1
    if stats is not None and stats.cap_hits:
        log.warning("greedy search hit the %d-symbol cap on %d frames", S, stats.cap_hits)
    return ys


def greedy_search_batch(model: TransducerModel, batch: Sequence[np.ndarray], max_symbols: int = 1) -> list[list[int]]:
    """S=1 greedy search over many utterances with one joiner call per frame."""
    if max_symbols != 1:
        raise ValueError("batched greedy search supports max_symbols=1 only")
    V = model.vocab_size
    if not batch:
        return []
    lens = np.array([len(f) for f in batch])
    encs = [model.encode(f) for f in batch]
    ctx = np.full(len(batch), INITIAL_CONTEXT, dtype=np.int64)
    results: list[list[int]] = [[] for _ in batch]
    for t in range(int(lens.max(initial=0))):
        live = np.nonzero(lens > t)[0]
        enc_rows = np.stack([encs[i][t] for i in live])
        lp = model.join(enc_rows, model.decode(ctx[live]))
        best = np.argmax(lp, axis=-1)
        for i, k in zip(live, best):
            if k != 0:
                results[i].append(int(k))
                ctx[i] = next_context(ctx[i], int(k), V)
    return results


@dataclass(frozen=True)
class Hypothesis:
    ys: tuple[int, ...]
    score: float
    n: int = 0


def _rank_key(h: Hypothesis, length_norm: bool = False):
    score = h.score / max(1, len(h.ys)) if length_norm else h.score
    return (-score, len(h.ys), h.ys)


class _HypSet:
    def __init__(self, merge_op: MergeOp) -> None:
        self.merge_op = merge_op
        self.data: dict[tuple[int, ...], Hypothesis] = {}

    def add(self, ys: tuple[int, ...], score: float, n: int) -> None:
        old = self.data.get(ys)
        if old is None:
            self.data[ys] = Hypothesis(ys, score, n)
        elif self.merge_op is MergeOp.MAX:
            if score > old.score:
                self.data[ys] = Hypothesis(ys, score, n)
        else:
            self.data[ys] = Hypothesis(ys, log_add(old.score, score), n)

    def topk(self, k: int) -> list[Hypothesis]:
        return sorted(self.data.values(), key=_rank_key)[:k]


def beam_search(model: TransducerModel, features: np.ndarray, params: SearchParams) -> list[int]:
    return list(beam_search_hyps(model, features, params)[0].ys)


def beam_search_hyps(model: TransducerModel, features: np.ndarray, params: SearchParams) -> list[Hypothesis]:
    """Frame-synchronous beam search; returns final hypotheses, best first.

    Within a frame a hypothesis that has emitted ``n`` symbols may emit
    another unless ``n + 1`` reaches the per-frame limit, in which case the
    symbol also advances the frame (blank probability taken as 1).  Duplicate
    label sequences are merged with ``params.merge_op`` whenever they meet.
    """
    V = model.vocab_size
    S = params.effective_symbols
    enc = model.encode(features)

    def logprobs(t: int, hyps: list[Hypothesis]) -> np.ndarray:
        dec = model.decode([_context_of(h.ys, V) for h in hyps])
        enc_rows = np.repeat(enc[t : t + 1], len(hyps), axis=0)
        return np.asarray(model.join(enc_rows, dec), dtype=np.float64)

    beam = [Hypothesis((), 0.0)]
    for t in range(enc.shape[0]):
        advanced = _HypSet(params.merge_op)
        current = beam
        for n in range(S):
            if not current:
                break
            lp = logprobs(t, current)
            within = _HypSet(params.merge_op)
            last = n + 1 == S
            for h, row in zip(current, lp):
                advanced.add(h.ys, h.score + float(row[0]), 0)
                for k in range(1, V):
                    target = advanced if last else within
                    target.add(h.ys + (k,), h.score + float(row[k]), 0 if last else n + 1)
            current = within.topk(params.beam_size)
        beam = advanced.topk(params.beam_size)
    return sorted(beam, key=lambda h: _rank_key(h, params.length_norm))


def viterbi_oracle_s1(model: TransducerModel, features: np.ndarray) -> tuple[list[int], float]:
    """Exact best S=1 path over (context, frame) states with no graph constraint."""
    V = model.vocab_size
    enc = model.encode(features)
    T = enc.shape[0]
    all_ctx = np.arange(V * V)
    dec = model.decode(all_ctx)
    score = np.full(V * V, NEG_INF)
    score[INITIAL_CONTEXT] = 0.0
    backptr = []
    for t in range(T):
        lp = np.asarray(model.join(np.repeat(enc[t : t + 1], V * V, axis=0), dec), dtype=np.float64)
        new = score + lp[:, 0]
        src = all_ctx.copy()
        lab = np.zeros(V * V, dtype=np.int64)
        for c in range(V * V):
            if score[c] == NEG_INF:
                continue
            for k in range(1, V):
                d = next_context(c, k, V)
                v = score[c] + lp[c, k]
                if v > new[d]:
                    new[d], src[d], lab[d] = v, c, k
        score = new
        backptr.append((src, lab))
    c = int(np.argmax(score))
    best = float(score[c])
    ys = []
    for src, lab in reversed(backptr):
        if lab[c]:
            ys.append(int(lab[c]))
        c = int(src[c])
    return ys[::-1], best


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def token_accuracy(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> float:
    """1 - total edit distance / total reference tokens."""
    errors = sum(edit_distance(r, h) for r, h in zip(refs, hyps, strict=True))
    total = sum(len(r) for r in refs)
    return 1.0 - errors / max(total, 1)
