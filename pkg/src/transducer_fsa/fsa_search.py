"""FSA-based parallel beam search producing lattices (max-symbols = 1).

A search state is ``(context, graph_state)`` at frame t.  Every transition
moves to frame t+1: blank keeps the state; a graph arc ``s -> r`` labelled c
moves context (a, b) to (b, c) and graph state to r.  All streams share one
decoder/joiner call per frame; expansion and pruning are per stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fsa import (
    BLANK,
    Arc,
    EmptyLatticeError,
    Fsa,
    RaggedShape,
    best_path,
    build_ragged,
    connect,
    remove_blanks_unique,
    sample_nbest,
    sequence_total_logprob,
    serialize_fsa_text,
)
from .model import INITIAL_CONTEXT

NEG_INF = float("-inf")


class SearchConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class FsaSearchParams:
    """``max_states``/``max_contexts`` of None mean unlimited."""

    beam: float = 20.0
    max_states: int | None = 64
    max_contexts: int | None = 8

    def __post_init__(self) -> None:
        if not self.beam >= 0:
            raise ValueError("beam must be >= 0")
        for name in ("max_states", "max_contexts"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def unpruned(cls) -> "FsaSearchParams":
        return cls(math.inf, None, None)


@dataclass(frozen=True)
class StreamState:
    context: int
    graph_state: int
    score: float
    lattice_node: int


class _GraphArrays:
    def __init__(self, graph: Fsa) -> None:
        self.num_states = graph.num_states
        self.splits = graph.arc_splits()
        self.labels = np.array([a.label for a in graph.arcs], dtype=np.int64)
        self.dsts = np.array([a.dst for a in graph.arcs], dtype=np.int64)
        self.scores = np.array([a.score for a in graph.arcs], dtype=np.float64)


@dataclass
class DecodeStream:
    graph: Fsa
    params: FsaSearchParams
    num_frames: int
    stream_id: int = 0
    t: int = 0
    done: bool = False
    ctx: np.ndarray = field(default_factory=lambda: np.array([INITIAL_CONTEXT], dtype=np.int64))
    gstate: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    score: np.ndarray = field(default_factory=lambda: np.zeros(1))
    node: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    num_nodes: int = 1
    final_nodes: np.ndarray | None = None
    lattice_arcs: list[tuple[np.ndarray, ...]] = field(default_factory=list)
    _garr: _GraphArrays | None = field(default=None, repr=False)
    _ctx_uniq: np.ndarray | None = field(default=None, repr=False)
    _ctx_row: np.ndarray | None = field(default=None, repr=False)
    _cand: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self._garr = _GraphArrays(self.graph)
        if self.num_frames <= 0:
            self.done = True
            self.final_nodes = self.node.copy()

    def active_states(self) -> list[StreamState]:
        return [
            StreamState(int(c), int(g), float(s), int(n))
            for c, g, s, n in zip(self.ctx, self.gstate, self.score, self.node)
        ]

    def candidates(self) -> list[StreamState]:
        """Expanded, not yet pruned, next-frame states (lattice_node = -1)."""
        if self._cand is None:
            return []
        c = self._cand
        return [StreamState(int(x), int(g), float(s), -1) for x, g, s in zip(c["ctx"], c["gstate"], c["score"])]

    def num_candidate_arcs(self) -> int:
        return 0 if self._cand is None else len(self._cand["arc_target"])


def init_streams(
    graphs: Sequence[Fsa],
    params: FsaSearchParams,
    num_frames: Sequence[int] | None = None,
) -> list[DecodeStream]:
    streams = []
    for i, g in enumerate(graphs):
        if g.has_blank_arcs():
            raise ValueError(f"decoding graph {i} has label-0 arcs; graphs must be epsilon-free")
        T = num_frames[i] if num_frames is not None else 1 << 30
        streams.append(DecodeStream(g, params, T, stream_id=i))
    return streams


def get_contexts(streams: Sequence[DecodeStream], vocab_size: int) -> tuple[RaggedShape, np.ndarray]:
    """Distinct active contexts per stream, as a ragged shape and an (n, 2) matrix."""
    counts = []
    chunks = []
    for s in streams:
        if s.done:
            s._ctx_uniq = s._ctx_row = None
            counts.append(0)
            continue
        uniq, inverse = np.unique(s.ctx, return_inverse=True)
        s._ctx_uniq, s._ctx_row = uniq, inverse
        counts.append(len(uniq))
        chunks.append(uniq)
    shape = build_ragged(counts)
    packed = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    a, b = np.divmod(packed, vocab_size)
    return shape, np.stack([a, b], axis=1)


def expand_arcs(streams: Sequence[DecodeStream], log_probs: np.ndarray) -> None:
    """Propagate every active state one frame, with no pruning.

    Duplicate target states keep their best score; every incoming arc is
    kept as a pending lattice arc.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    V = log_probs.shape[1]
    expected = sum(len(s._ctx_uniq) for s in streams if not s.done and s._ctx_uniq is not None)
    if log_probs.shape[0] != expected:
        raise SearchConsistencyError(f"got {log_probs.shape[0]} log-prob rows for {expected} contexts")
    off = 0
    for s in streams:
        if s.done:
            continue
        if s._ctx_uniq is None:
            raise SearchConsistencyError("get_contexts must run before expand_arcs")
        lp = log_probs[off : off + len(s._ctx_uniq)]
        off += len(s._ctx_uniq)
        g = s._garr
        assert g is not None
        rows = s._ctx_row
        n = len(s.ctx)

        blank_w = lp[rows, BLANK]
        counts = g.splits[s.gstate + 1] - g.splits[s.gstate]
        rep = np.repeat(np.arange(n), counts)
        first = np.repeat(g.splits[s.gstate], counts)
        within = np.arange(len(rep)) - np.repeat(np.cumsum(counts) - counts, counts)
        arc_idx = first + within
        labels = g.labels[arc_idx]
        if labels.size and labels.max() >= V:
            raise SearchConsistencyError("graph label outside the model vocabulary")
        arc_w = g.scores[arc_idx] + lp[rows[rep], labels]

        c_ctx = np.concatenate([s.ctx, (s.ctx[rep] % V) * V + labels])
        c_g = np.concatenate([s.gstate, g.dsts[arc_idx]])
        weight = np.concatenate([blank_w, arc_w])
        c_score = np.concatenate([s.score, s.score[rep]]) + weight
        src_node = np.concatenate([s.node, s.node[rep]])
        label = np.concatenate([np.zeros(n, dtype=np.int64), labels])

        key = c_ctx * g.num_states + c_g
        uniq, target = np.unique(key, return_inverse=True)
        best = np.full(len(uniq), NEG_INF)
        np.maximum.at(best, target, c_score)
        s._cand = {
            "ctx": uniq // g.num_states,
            "gstate": uniq % g.num_states,
            "score": best,
            "arc_target": target,
            "arc_src": src_node,
            "arc_label": label,
            "arc_weight": weight,
        }


def _top(order: np.ndarray, k: int | None) -> np.ndarray:
    return order if k is None else order[:k]


def prune_streams(streams: Sequence[DecodeStream]) -> None:
    """Beam + max-states in one pass, then max-contexts; commit survivors."""
    for s in streams:
        if s.done or s._cand is None:
            continue
        c = s._cand
        p = s.params
        ctx, g, score = c["ctx"], c["gstate"], c["score"]
        idx = np.arange(len(score))
        if math.isfinite(p.beam):
            idx = idx[score >= score.max() - p.beam]
        order = idx[np.lexsort((g[idx], ctx[idx], -score[idx]))]
        order = _top(order, p.max_states)

        if p.max_contexts is not None:
            # order is best-first, so a context's first member is its best
            uctx, first = np.unique(ctx[order], return_index=True)
            ubest = score[order][first]
            rank = np.lexsort((uctx, -ubest))
            keep_ctx = uctx[rank[: p.max_contexts]]
            order = order[np.isin(ctx[order], keep_ctx)]

        new_node = np.full(len(score), -1, dtype=np.int64)
        new_node[order] = s.num_nodes + np.arange(len(order))
        dst = new_node[c["arc_target"]]
        keep = dst >= 0
        s.lattice_arcs.append((c["arc_src"][keep], dst[keep], c["arc_label"][keep], c["arc_weight"][keep]))

        s.ctx, s.gstate, s.score = ctx[order], g[order], score[order]
        s.node = new_node[order]
        s.num_nodes += len(order)
        s._cand = None
        s.t += 1
        if s.t >= s.num_frames or len(order) == 0:
            s.done = True
            s.final_nodes = s.node.copy() if s.t >= s.num_frames else np.zeros(0, dtype=np.int64)


def terminate_and_flush(streams: Sequence[DecodeStream]) -> None:
    """Mark surviving states of streams at their last frame as final."""
    for s in streams:
        if s.final_nodes is None:
            s.done = True
            s.final_nodes = s.node.copy() if s.t >= s.num_frames else np.zeros(0, dtype=np.int64)


def format_output(stream: DecodeStream) -> Fsa:
    """Lattice of one stream: start node 0, finals with score 0, trimmed."""
    arcs: list[Arc] = []
    for src, dst, lab, w in stream.lattice_arcs:
        arcs += [Arc(int(a), int(b), int(c), float(d)) for a, b, c, d in zip(src, dst, lab, w)]
    finals = {int(n): 0.0 for n in (stream.final_nodes if stream.final_nodes is not None else [])}
    return connect(Fsa(stream.num_nodes, tuple(arcs), finals))


def fsa_beam_search(
    model,
    batch: Sequence[np.ndarray],
    graphs: Sequence[Fsa],
    params: FsaSearchParams = FsaSearchParams(),
) -> list[Fsa]:
    """Decode a batch of utterances, one decoding graph each, into lattices."""
    if len(batch) != len(graphs):
        raise ValueError("need exactly one graph per utterance")
    V = model.vocab_size
    lens = [len(f) for f in batch]
    streams = init_streams(graphs, params, lens)
    for t in range(max(lens, default=0)):
        live = [i for i, s in enumerate(streams) if not s.done]
        if not live:
            break
        enc_t = model.encode(np.stack([batch[i][t] for i in live]))
        shape, contexts = get_contexts(streams, V)
        dec_out = model.decode(contexts[:, 0] * V + contexts[:, 1])
        pos = np.full(len(streams), -1, dtype=np.int64)
        pos[live] = np.arange(len(live))
        enc_out = enc_t[pos[shape.row_ids]]
        log_probs = model.join(enc_out, dec_out)
        expand_arcs(streams, log_probs)
        prune_streams(streams)
    terminate_and_flush(streams)
    return [format_output(s) for s in streams]


def lattice_to_text(lattice: Fsa, stream_id: int, num_frames: int) -> str:
    return serialize_fsa_text(lattice, header=[f"stream {stream_id}", f"frames {num_frames}"])


def lattice_to_best_seq(lattice: Fsa, method: str = "max", nbest_n: int = 100, seed: int = 0) -> list[int]:
    """Best blank-free token sequence by best path (``max``) or by summed alignments (``log_add``)."""
    try:
        if method == "max":
            return [x for x in best_path(lattice).labels if x != BLANK]
        if method != "log_add":
            raise ValueError(f"unknown method {method!r}")
        cands = remove_blanks_unique(sample_nbest(lattice, nbest_n, seed))
    except EmptyLatticeError:
        return []
    if not cands:
        return []
    scored = [(-sequence_total_logprob(lattice, y), y) for y in cands]
    return list(min(scored)[1])
