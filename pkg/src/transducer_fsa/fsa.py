"""Weighted finite-state acceptors.

Scores are natural-log probabilities, additive along a path.  Label 0 is the
blank: it is allowed in lattices and forbidden in decoding graphs.
"""
from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

NEG_INF = float("-inf")
BLANK = 0


class FsaError(ValueError):
    pass


class FsaParseError(FsaError):
    def __init__(self, lineno: int, line: str, reason: str) -> None:
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno


class FsaStructureError(FsaError):
    pass


class EmptyLatticeError(FsaError):
    pass


class VocabularyError(FsaError):
    def __init__(self, symbols: Iterable[str]) -> None:
        self.symbols = sorted(set(symbols))
        super().__init__(f"symbols missing from token map: {' '.join(self.symbols)}")


class UnsupportedError(FsaError):
    pass


def log_add(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def log_sum(values: Iterable[float]) -> float:
    vals = [v for v in values if v != NEG_INF]
    if not vals:
        return NEG_INF
    m = max(vals)
    return m + math.log(math.fsum(math.exp(v - m) for v in vals))


@dataclass(frozen=True)
class Arc:
    src: int
    dst: int
    label: int
    score: float


@dataclass(frozen=True, eq=True)
class Fsa:
    """An acceptor with start state 0 and arcs grouped by source state."""

    num_states: int
    arcs: tuple[Arc, ...]
    finals: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        arcs = tuple(sorted(self.arcs, key=lambda a: a.src))
        object.__setattr__(self, "arcs", arcs)
        object.__setattr__(self, "finals", dict(sorted(self.finals.items())))
        n = self.num_states
        if n < 1:
            raise FsaStructureError("an FSA needs at least one state")
        for a in arcs:
            if not (0 <= a.src < n and 0 <= a.dst < n):
                raise FsaStructureError(f"arc {a} references a state outside [0, {n})")
            if not math.isfinite(a.score):
                raise FsaStructureError(f"arc {a} has a non-finite score")
        for s in self.finals:
            if not 0 <= s < n:
                raise FsaStructureError(f"final state {s} outside [0, {n})")

    @property
    def start(self) -> int:
        return 0

    def __hash__(self) -> int:
        return hash((self.num_states, self.arcs, tuple(self.finals.items())))

    def arc_splits(self) -> np.ndarray:
        """Row splits of the arc list indexed by source state."""
        counts = np.bincount([a.src for a in self.arcs], minlength=self.num_states)
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def out_arcs(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.num_states)]
        for i, a in enumerate(self.arcs):
            out[a.src].append(i)
        return out

    def has_blank_arcs(self) -> bool:
        return any(a.label == BLANK for a in self.arcs)


@dataclass(frozen=True)
class Path:
    arcs: tuple[int, ...]
    labels: tuple[int, ...]
    score: float


@dataclass(frozen=True)
class RaggedShape:
    """Two-level index: rows (e.g. streams) owning a contiguous run of elements."""

    row_splits: np.ndarray
    row_ids: np.ndarray

    @property
    def num_rows(self) -> int:
        return len(self.row_splits) - 1

    @property
    def tot_size(self) -> int:
        return int(self.row_splits[-1])

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.row_splits)


def build_ragged(counts: Sequence[int]) -> RaggedShape:
    counts = np.asarray(counts, dtype=np.int64).reshape(-1)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    row_splits = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=row_splits[1:])
    row_ids = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    return RaggedShape(row_splits, row_ids)


# ---------------------------------------------------------------------------
# text format

_FLOAT = r"[-+]?(?:\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|inf|Infinity)"
_INT = r"-?\d+"


def parse_fsa_text(text: str) -> Fsa:
    """Parse ``src dst label score`` arc lines and ``state final_score`` lines.

    Lines starting with ``#`` are comments.  State ids are renumbered densely,
    preserving order, so the smallest id becomes the start state.
    """
    raw_arcs: list[tuple[int, int, int, float]] = []
    raw_finals: list[tuple[int, float]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        try:
            if len(fields) == 4:
                src, dst, label = (int(f) for f in fields[:3])
                score = float(fields[3])
                if src < 0 or dst < 0:
                    raise ValueError("negative state id")
                if not math.isfinite(score):
                    raise ValueError("non-finite arc score")
                raw_arcs.append((src, dst, label, score))
            elif len(fields) in (1, 2):
                state = int(fields[0])
                if state < 0:
                    raise ValueError("negative state id")
                score = float(fields[1]) if len(fields) == 2 else 0.0
                raw_finals.append((state, score))
            else:
                raise ValueError(f"expected 1, 2 or 4 fields, got {len(fields)}")
        except ValueError as e:
            raise FsaParseError(lineno, line, str(e)) from None
    if not raw_finals:
        raise FsaStructureError("FSA has no final state")
    ids = sorted({s for a in raw_arcs for s in a[:2]} | {s for s, _ in raw_finals})
    remap = {s: i for i, s in enumerate(ids)}
    arcs = tuple(Arc(remap[s], remap[d], lab, sc) for s, d, lab, sc in raw_arcs)
    finals: dict[int, float] = {}
    for s, sc in raw_finals:
        finals[remap[s]] = sc
    return Fsa(len(ids), arcs, finals)


def serialize_fsa_text(fsa: Fsa, header: Sequence[str] = ()) -> str:
    lines = [f"# {h}" for h in header]
    lines += [f"{a.src} {a.dst} {a.label} {a.score!r}" for a in fsa.arcs]
    lines += [f"{s} {sc!r}" for s, sc in fsa.finals.items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# constructors


def trivial_graph(vocab_size: int) -> Fsa:
    """One state, final, with a zero-score self-loop per non-blank token."""
    if vocab_size < 1:
        raise ValueError("vocab_size must be >= 1")
    arcs = tuple(Arc(0, 0, k, 0.0) for k in range(1, vocab_size))
    return Fsa(1, arcs, {0: 0.0})


def linear_fsa(seq: Sequence[int], blank_loops: bool = False) -> Fsa:
    n = len(seq)
    arcs = [Arc(i, i + 1, int(lab), 0.0) for i, lab in enumerate(seq)]
    if blank_loops:
        arcs += [Arc(i, i, BLANK, 0.0) for i in range(n + 1)]
    return Fsa(n + 1, tuple(arcs), {n: 0.0})


# ---------------------------------------------------------------------------
# structural algorithms


def topo_order(fsa: Fsa) -> list[int]:
    indeg = [0] * fsa.num_states
    out = fsa.out_arcs()
    for a in fsa.arcs:
        indeg[a.dst] += 1
    ready = [s for s in range(fsa.num_states) if indeg[s] == 0]
    order: list[int] = []
    while ready:
        s = ready.pop()
        order.append(s)
        for i in out[s]:
            d = fsa.arcs[i].dst
            indeg[d] -= 1
            if indeg[d] == 0:
                ready.append(d)
    if len(order) != fsa.num_states:
        raise FsaStructureError("FSA is cyclic")
    return order


def _forward(fsa: Fsa, order: list[int], tropical: bool) -> list[float]:
    fwd = [NEG_INF] * fsa.num_states
    fwd[0] = 0.0
    out = fsa.out_arcs()
    for s in order:
        if fwd[s] == NEG_INF:
            continue
        for i in out[s]:
            a = fsa.arcs[i]
            v = fwd[s] + a.score
            fwd[a.dst] = max(fwd[a.dst], v) if tropical else log_add(fwd[a.dst], v)
    return fwd


def backward_scores(fsa: Fsa, tropical: bool = False, order: list[int] | None = None) -> list[float]:
    """Suffix score of each state: best (tropical) or log-sum (log) over completions."""
    order = topo_order(fsa) if order is None else order
    out = fsa.out_arcs()
    bwd = [NEG_INF] * fsa.num_states
    for s in reversed(order):
        acc = fsa.finals.get(s, NEG_INF)
        for i in out[s]:
            a = fsa.arcs[i]
            v = a.score + bwd[a.dst]
            acc = max(acc, v) if tropical else log_add(acc, v)
        bwd[s] = acc
    return bwd


def connect(fsa: Fsa) -> Fsa:
    """Drop states not on any start-to-final path, keeping relative order.

    Returns a single non-final state when nothing survives.
    """
    out = fsa.out_arcs()
    acc = {0}
    stack = [0]
    while stack:
        s = stack.pop()
        for i in out[s]:
            d = fsa.arcs[i].dst
            if d not in acc:
                acc.add(d)
                stack.append(d)
    rev: dict[int, list[int]] = defaultdict(list)
    for a in fsa.arcs:
        rev[a.dst].append(a.src)
    coacc = set(fsa.finals)
    stack = list(coacc)
    while stack:
        s = stack.pop()
        for p in rev[s]:
            if p not in coacc:
                coacc.add(p)
                stack.append(p)
    keep = sorted(acc & coacc)
    if not keep or keep[0] != 0:
        return Fsa(1, (), {})
    remap = {s: i for i, s in enumerate(keep)}
    arcs = tuple(
        Arc(remap[a.src], remap[a.dst], a.label, a.score)
        for a in fsa.arcs
        if a.src in remap and a.dst in remap
    )
    finals = {remap[s]: sc for s, sc in fsa.finals.items() if s in remap}
    return Fsa(len(keep), arcs, finals)


def intersect(a: Fsa, b: Fsa) -> Fsa:
    """Product of two acceptors, matching labels exactly; scores add."""
    out_a, out_b = a.out_arcs(), b.out_arcs()
    b_by_label: list[dict[int, list[int]]] = []
    for s in range(b.num_states):
        d: dict[int, list[int]] = defaultdict(list)
        for i in out_b[s]:
            d[b.arcs[i].label].append(i)
        b_by_label.append(d)
    ids = {(0, 0): 0}
    queue = [(0, 0)]
    arcs: list[Arc] = []
    finals: dict[int, float] = {}
    head = 0
    while head < len(queue):
        sa, sb = queue[head]
        src = head
        head += 1
        if sa in a.finals and sb in b.finals:
            finals[src] = a.finals[sa] + b.finals[sb]
        for i in out_a[sa]:
            arc_a = a.arcs[i]
            for j in b_by_label[sb].get(arc_a.label, ()):
                arc_b = b.arcs[j]
                key = (arc_a.dst, arc_b.dst)
                if key not in ids:
                    ids[key] = len(queue)
                    queue.append(key)
                arcs.append(Arc(src, ids[key], arc_a.label, arc_a.score + arc_b.score))
    return connect(Fsa(len(queue), tuple(arcs), finals))


def intersect_linear(fsa: Fsa, seq: Sequence[int]) -> Fsa:
    return intersect(fsa, linear_fsa(seq))


def remove_epsilon(fsa: Fsa, failure: bool = False) -> Fsa:
    """Remove label-0 arcs, assuming the epsilon subgraph is acyclic.

    With ``failure=False`` this is log-semiring removal: every epsilon path is
    summed in.  With ``failure=True`` each state may have at most one epsilon
    arc, read as a backoff: a label is taken from the nearest state along the
    backoff chain that has an arc for it, and finals likewise.
    """
    out = fsa.out_arcs()
    eps_out: list[list[Arc]] = [[] for _ in range(fsa.num_states)]
    for a in fsa.arcs:
        if a.label == BLANK:
            eps_out[a.src].append(a)
    eps_fsa = Fsa(fsa.num_states, tuple(a for a in fsa.arcs if a.label == BLANK), {})
    order = topo_order(eps_fsa)
    if failure:
        if any(len(e) > 1 for e in eps_out):
            raise FsaStructureError("failure-mode removal needs at most one epsilon arc per state")
        # resolved[s]: label -> list of (dst, score); process backoff targets first
        resolved: list[dict[int, list[tuple[int, float]]] | None] = [None] * fsa.num_states
        final_res: list[float] = [NEG_INF] * fsa.num_states
        for s in reversed(order):
            own: dict[int, list[tuple[int, float]]] = defaultdict(list)
            for i in out[s]:
                a = fsa.arcs[i]
                if a.label != BLANK:
                    own[a.label].append((a.dst, a.score))
            fin = fsa.finals.get(s, NEG_INF)
            if eps_out[s]:
                e = eps_out[s][0]
                lower = resolved[e.dst]
                assert lower is not None
                for lab, lst in lower.items():
                    if lab not in own:
                        own[lab] = [(d, sc + e.score) for d, sc in lst]
                if s not in fsa.finals and final_res[e.dst] != NEG_INF:
                    fin = final_res[e.dst] + e.score
            resolved[s] = own
            final_res[s] = fin
        arcs = [
            Arc(s, d, lab, sc)
            for s in range(fsa.num_states)
            for lab, lst in sorted(resolved[s].items())  # type: ignore[union-attr]
            for d, sc in lst
        ]
        finals = {s: f for s, f in enumerate(final_res) if f != NEG_INF}
        return connect(Fsa(fsa.num_states, tuple(arcs), finals))

    # closure[s]: target -> log-sum over epsilon paths s ~> target (incl. s itself)
    closure: list[dict[int, float]] = [dict() for _ in range(fsa.num_states)]
    for s in reversed(order):
        c = {s: 0.0}
        for e in eps_out[s]:
            for tgt, w in closure[e.dst].items():
                c[tgt] = log_add(c.get(tgt, NEG_INF), w + e.score)
        closure[s] = c
    merged: dict[tuple[int, int, int], float] = {}
    finals = {}
    for s in range(fsa.num_states):
        fin = NEG_INF
        for tgt, w in closure[s].items():
            if tgt in fsa.finals:
                fin = log_add(fin, w + fsa.finals[tgt])
            for i in out[tgt]:
                a = fsa.arcs[i]
                if a.label == BLANK:
                    continue
                key = (s, a.dst, a.label)
                merged[key] = log_add(merged.get(key, NEG_INF), w + a.score)
        if fin != NEG_INF:
            finals[s] = fin
    arcs = [Arc(s, d, lab, sc) for (s, d, lab), sc in merged.items()]
    return connect(Fsa(fsa.num_states, tuple(arcs), finals))


# ---------------------------------------------------------------------------
# path algorithms on acyclic FSAs


def best_path(lattice: Fsa) -> Path:
    """Highest-scoring path; ties go to the lexicographically smallest arc indices."""
    order = topo_order(lattice)
    bwd = backward_scores(lattice, tropical=True, order=order)
    if bwd[0] == NEG_INF:
        raise EmptyLatticeError("no path from the start state to a final state")
    out = lattice.out_arcs()
    s = 0
    arcs: list[int] = []
    while True:
        target = bwd[s]
        if lattice.finals.get(s, NEG_INF) == target:
            break
        chosen = None
        for i in out[s]:
            a = lattice.arcs[i]
            if a.score + bwd[a.dst] == target:
                chosen = i
                break
        assert chosen is not None
        arcs.append(chosen)
        s = lattice.arcs[chosen].dst
    labels = tuple(lattice.arcs[i].label for i in arcs)
    score = math.fsum([lattice.arcs[i].score for i in arcs] + [lattice.finals[s]])
    return Path(tuple(arcs), labels, score)


def total_logprob(lattice: Fsa) -> float:
    order = topo_order(lattice)
    fwd = _forward(lattice, order, tropical=False)
    return log_sum(fwd[s] + f for s, f in lattice.finals.items())


def sample_nbest(lattice: Fsa, n: int, seed: int) -> list[Path]:
    """Draw ``n`` paths, each with probability exp(score - total_logprob)."""
    bwd = backward_scores(lattice)
    if bwd[0] == NEG_INF or n <= 0:
        return []
    out = lattice.out_arcs()
    rng = np.random.default_rng(seed)
    # per-state cumulative choice distributions; choice -1 means "stop here"
    tables: dict[int, tuple[list[int], np.ndarray]] = {}

    def table(s: int) -> tuple[list[int], np.ndarray]:
        if s not in tables:
            choices, logits = [], []
            if s in lattice.finals:
                choices.append(-1)
                logits.append(lattice.finals[s])
            for i in out[s]:
                a = lattice.arcs[i]
                if bwd[a.dst] != NEG_INF:
                    choices.append(i)
                    logits.append(a.score + bwd[a.dst])
            p = np.exp(np.asarray(logits) - bwd[s])
            cdf = np.cumsum(p)
            cdf /= cdf[-1]
            tables[s] = (choices, cdf)
        return tables[s]

    paths = []
    for _ in range(n):
        s, arcs = 0, []
        while True:
            choices, cdf = table(s)
            k = min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)
            c = choices[k]
            if c == -1:
                break
            arcs.append(c)
            s = lattice.arcs[c].dst
        labels = tuple(lattice.arcs[i].label for i in arcs)
        score = math.fsum([lattice.arcs[i].score for i in arcs] + [lattice.finals[s]])
        paths.append(Path(tuple(arcs), labels, score))
    return paths


def remove_blanks_unique(paths: Iterable[Path | Sequence[int]]) -> list[tuple[int, ...]]:
    seen: dict[tuple[int, ...], None] = {}
    for p in paths:
        labels = p.labels if isinstance(p, Path) else p
        seen.setdefault(tuple(int(x) for x in labels if x != BLANK), None)
    return list(seen)


def sequence_total_logprob(lattice: Fsa, seq: Sequence[int]) -> float:
    if any(x == BLANK for x in seq):
        raise ValueError("sequence must be blank-free")
    return total_logprob(intersect(lattice, linear_fsa(seq, blank_loops=True)))


# ---------------------------------------------------------------------------
# ARPA n-gram graphs

_SECTION = re.compile(r"^\\(\d+)-grams:$")


@dataclass
class ArpaModel:
    order: int
    # ngram tuple -> (log10 prob, log10 backoff)
    entries: dict[tuple[str, ...], tuple[float, float]]


def parse_arpa(text: str) -> ArpaModel:
    entries: dict[tuple[str, ...], tuple[float, float]] = {}
    declared: dict[int, int] = {}
    section = None
    seen_data = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s == "\\data\\":
            seen_data = True
            section = "data"
            continue
        if s == "\\end\\":
            break
        m = _SECTION.match(s)
        if m:
            section = int(m.group(1))
            if section > 3:
                raise UnsupportedError(f"ARPA order {section} > 3 is not supported")
            continue
        if section == "data":
            m2 = re.match(r"^ngram\s+(\d+)\s*=\s*(\d+)$", s)
            if not m2:
                raise FsaParseError(lineno, line, "bad \\data\\ entry")
            n = int(m2.group(1))
            if n > 3:
                raise UnsupportedError(f"ARPA order {n} > 3 is not supported")
            declared[n] = int(m2.group(2))
        elif isinstance(section, int):
            fields = s.split()
            n = section
            if len(fields) not in (n + 1, n + 2):
                raise FsaParseError(lineno, line, f"expected {n + 1} or {n + 2} fields")
            try:
                lp = float(fields[0])
                bo = float(fields[n + 1]) if len(fields) == n + 2 else 0.0
            except ValueError:
                raise FsaParseError(lineno, line, "bad number") from None
            entries[tuple(fields[1 : n + 1])] = (lp, bo)
        else:
            raise FsaParseError(lineno, line, "content outside any section")
    if not seen_data:
        raise FsaParseError(0, "", "missing \\data\\ header")
    order = max(declared) if declared else 0
    for n, count in declared.items():
        got = sum(1 for k in entries if len(k) == n)
        if got != count:
            raise FsaParseError(0, "", f"declared {count} {n}-grams, found {got}")
    return ArpaModel(order, entries)


_LN10 = math.log(10.0)


def ngram_graph_from_arpa(arpa_text: str, token_map: Mapping[str, int]) -> Fsa:
    """Epsilon-free token graph for an ARPA model of order <= 3.

    States are LM histories.  Backoff is first built as epsilon arcs and then
    removed with backoff (failure) semantics, so every path score equals the
    ARPA chain-rule log-probability; ``</s>`` goes to final scores.
    """
    lm = parse_arpa(arpa_text)
    specials = {"<s>", "</s>", "<unk>"}
    vocab = {w for k in lm.entries for w in k} - specials
    missing = [w for w in vocab if w not in token_map]
    if missing:
        raise VocabularyError(missing)
    if any(token_map[w] == BLANK for w in vocab):
        raise VocabularyError([w for w in vocab if token_map[w] == BLANK])

    hist_len = max(lm.order - 1, 0)
    histories = {()}
    for k in lm.entries:
        if len(k) <= hist_len and "</s>" not in k and "<unk>" not in k:
            histories.add(k)

    def state_for(h: tuple[str, ...]) -> tuple[str, ...]:
        h = h[len(h) - hist_len :] if hist_len else ()
        while h not in histories:
            h = h[1:]
        return h

    start = state_for(("<s>",))
    ordered = [start] + sorted(histories - {start}, key=lambda h: (len(h), h))
    sid = {h: i for i, h in enumerate(ordered)}
    arcs: list[Arc] = []
    finals: dict[int, float] = {}
    for h in ordered:
        for k, (lp, _) in lm.entries.items():
            if k[:-1] != h:
                continue
            w = k[-1]
            if w == "</s>":
                finals[sid[h]] = lp * _LN10
            elif w in specials:
                continue
            else:
                arcs.append(Arc(sid[h], sid[state_for(h + (w,))], token_map[w], lp * _LN10))
        if h:
            bo = lm.entries.get(h, (0.0, 0.0))[1]
            arcs.append(Arc(sid[h], sid[state_for(h[1:])], BLANK, bo * _LN10))
    if "</s>" not in vocab and ("</s>",) not in lm.entries:
        # no end-of-sentence mass: every history may end freely
        finals.setdefault(sid[()], 0.0)
    graph = Fsa(len(ordered), tuple(arcs), finals)
    return remove_epsilon(graph, failure=True)


def arpa_logprob(arpa_text: str, words: Sequence[str], add_eos: bool = True) -> float:
    """Natural-log chain-rule score of ``words`` under an ARPA model."""
    lm = parse_arpa(arpa_text)
    hist: tuple[str, ...] = ("<s>",)
    total = 0.0
    seq = list(words) + (["</s>"] if add_eos and any(k == ("</s>",) for k in lm.entries) else [])
    for w in seq:
        h = hist[len(hist) - (lm.order - 1) :] if lm.order > 1 else ()
        lp10 = 0.0
        while True:
            if h + (w,) in lm.entries:
                lp10 += lm.entries[h + (w,)][0]
                break
            if not h:
                raise VocabularyError([w])
            lp10 += lm.entries.get(h, (0.0, 0.0))[1]
            h = h[1:]
        total += lp10 * _LN10
        hist = hist + (w,)
    return total


def estimate_bigram_arpa(sequences: Iterable[Sequence[str]], vocab: Sequence[str], discount: float = 0.5) -> str:
    """Absolute-discount bigram ARPA text, with add-one unigrams over ``vocab``."""
    uni: dict[str, float] = {w: 1.0 for w in list(vocab) + ["</s>"]}
    big: dict[tuple[str, str], int] = defaultdict(int)
    for seq in sequences:
        toks = ["<s>"] + list(seq) + ["</s>"]
        for w in toks[1:]:
            uni[w] += 1
        for a, b in zip(toks, toks[1:]):
            big[(a, b)] += 1
    z = sum(uni.values())
    p_uni = {w: c / z for w, c in uni.items()}
    lines_uni = [(-99.0, "<s>", None)]
    lines_big = []
    backoff: dict[str, float] = {}
    for h in ["<s>"] + list(vocab):
        succ = {b: c for (a, b), c in big.items() if a == h}
        total = sum(succ.values())
        if total == 0:
            backoff[h] = 0.0
            continue
        # every successor seen: nothing left to back off to, so no discount
        d = 0.0 if len(succ) == len(uni) else discount
        seen_mass = 0.0
        lower_seen = 0.0
        for b, c in sorted(succ.items()):
            p = (c - d) / total
            seen_mass += p
            lower_seen += p_uni[b]
            lines_big.append((math.log10(p), f"{h} {b}"))
        backoff[h] = 0.0 if d == 0.0 else math.log10((1.0 - seen_mass) / (1.0 - lower_seen))
    for w in vocab:
        lines_uni.append((math.log10(p_uni[w]), w, backoff.get(w, 0.0)))
    lines_uni.append((math.log10(p_uni["</s>"]), "</s>", None))
    lines_uni[0] = (-99.0, "<s>", backoff["<s>"])
    out = ["\\data\\", f"ngram 1={len(lines_uni)}", f"ngram 2={len(lines_big)}", "", "\\1-grams:"]
    for lp, w, bo in lines_uni:
        out.append(f"{lp:.10f}\t{w}" + (f"\t{bo:.10f}" if bo is not None else ""))
    out += ["", "\\2-grams:"]
    out += [f"{lp:.10f}\t{w}" for lp, w in lines_big]
    out += ["", "\\end\\", ""]
    return "\n".join(out)
