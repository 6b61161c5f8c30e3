"""Transducer forward/backward recursions over (frame, target-position) grids.

Three variants share one grid layout:

* ``regular``: blank moves t -> t+1, a symbol moves u -> u+1 on the same
  frame; the likelihood ends with a blank on the last frame.
* ``modified``: a symbol moves diagonally (t, u) -> (t+1, u+1).
* ``constrained``: as modified, but each symbol also pays the blank
  log-prob of the next context on the same frame.

All computation is float64.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

NEG_INF = float("-inf")


class Variant(str, enum.Enum):
    REGULAR = "regular"
    MODIFIED = "modified"
    CONSTRAINED = "constrained"


class UndefinedGradientError(ValueError):
    pass


@dataclass
class LogProbGrid:
    """``blank_lp`` is T x (U+1); ``symbol_lp[t, u]`` scores target[u] from context u."""

    blank_lp: np.ndarray
    symbol_lp: np.ndarray

    def __post_init__(self) -> None:
        self.blank_lp = np.asarray(self.blank_lp, dtype=np.float64)
        self.symbol_lp = np.asarray(self.symbol_lp, dtype=np.float64)
        if self.blank_lp.ndim != 2 or self.symbol_lp.ndim != 2:
            raise ValueError("grid arrays must be 2-D")
        T, U1 = self.blank_lp.shape
        if self.symbol_lp.shape != (T, U1 - 1):
            raise ValueError(
                f"symbol_lp shape {self.symbol_lp.shape} does not match blank_lp {self.blank_lp.shape}"
            )

    @property
    def T(self) -> int:
        return self.blank_lp.shape[0]

    @property
    def U(self) -> int:
        return self.blank_lp.shape[1] - 1

    @classmethod
    def uniform(cls, T: int, U: int, value: float) -> "LogProbGrid":
        return cls(np.full((T, U + 1), value), np.full((T, U), value))


@dataclass
class LossResult:
    loglik: float
    alpha: np.ndarray
    variant: Variant
    infeasible: bool = False


@dataclass
class GridGradient:
    d_blank: np.ndarray
    d_symbol: np.ndarray


def _check(grid: LogProbGrid) -> None:
    if grid.T < 1:
        raise ValueError("grid needs at least one frame")


def forward_regular(grid: LogProbGrid) -> LossResult:
    _check(grid)
    T, U = grid.T, grid.U
    b, y = grid.blank_lp, grid.symbol_lp
    alpha = np.full((T, U + 1), NEG_INF)
    for t in range(T):
        row = alpha[t]
        if t == 0:
            row[0] = 0.0
        else:
            row[:] = alpha[t - 1] + b[t - 1]
        for u in range(1, U + 1):
            row[u] = np.logaddexp(row[u], row[u - 1] + y[t, u - 1])
    loglik = float(alpha[T - 1, U] + b[T - 1, U])
    return LossResult(loglik, alpha, Variant.REGULAR)


def _forward_diagonal(grid: LogProbGrid, constrained: bool) -> LossResult:
    _check(grid)
    T, U = grid.T, grid.U
    variant = Variant.CONSTRAINED if constrained else Variant.MODIFIED
    b, y = grid.blank_lp, grid.symbol_lp
    diag = y + b[:, 1:] if constrained else y
    alpha = np.full((T + 1, U + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(1, T + 1):
        alpha[t] = alpha[t - 1] + b[t - 1]
        alpha[t, 1:] = np.logaddexp(alpha[t, 1:], alpha[t - 1, :-1] + diag[t - 1])
    loglik = float(alpha[T, U])
    return LossResult(loglik, alpha, variant, infeasible=U > T)


def forward_modified(grid: LogProbGrid) -> LossResult:
    return _forward_diagonal(grid, constrained=False)


def forward_constrained(grid: LogProbGrid) -> LossResult:
    return _forward_diagonal(grid, constrained=True)


def forward(grid: LogProbGrid, variant: Variant | str) -> LossResult:
    variant = Variant(variant)
    if variant is Variant.REGULAR:
        return forward_regular(grid)
    return _forward_diagonal(grid, constrained=variant is Variant.CONSTRAINED)


def terminal_loglik(result: LossResult, grid: LogProbGrid) -> float:
    """Recompute the likelihood from a finished alpha table."""
    if result.variant is Variant.REGULAR:
        return float(result.alpha[grid.T - 1, grid.U] + grid.blank_lp[grid.T - 1, grid.U])
    return float(result.alpha[grid.T, grid.U])


def brute_force_loglik(grid: LogProbGrid, variant: Variant | str) -> float:
    """Log-sum over explicitly enumerated alignments.  Refuses T > 8 or U > 6."""
    variant = Variant(variant)
    T, U = grid.T, grid.U
    if T < 1:
        raise ValueError("grid needs at least one frame")
    if T > 8 or U > 6:
        raise ValueError(f"enumeration bound exceeded (T={T}, U={U})")
    b, y = grid.blank_lp, grid.symbol_lp
    scores = []
    if variant is Variant.REGULAR:
        # choose which of the T-1+U moves are symbols
        n = T - 1 + U
        for sym_moves in itertools.combinations(range(n), U):
            t = u = 0
            total = 0.0
            sym = set(sym_moves)
            for k in range(n):
                if k in sym:
                    total += y[t, u]
                    u += 1
                else:
                    total += b[t, u]
                    t += 1
            scores.append(total + b[T - 1, U])
    else:
        constrained = variant is Variant.CONSTRAINED
        for frames in itertools.combinations(range(T), U):
            assert all(f1 < f2 for f1, f2 in zip(frames, frames[1:]))
            u = 0
            total = 0.0
            emit = set(frames)
            for t in range(T):
                if t in emit:
                    total += y[t, u]
                    if constrained:
                        total += b[t, u + 1]
                    u += 1
                else:
                    total += b[t, u]
            scores.append(total)
    if not scores:
        return NEG_INF
    m = max(scores)
    if m == NEG_INF:
        return NEG_INF
    return m + math.log(math.fsum(math.exp(s - m) for s in scores))


def _backward_regular(grid: LogProbGrid) -> np.ndarray:
    T, U = grid.T, grid.U
    b, y = grid.blank_lp, grid.symbol_lp
    beta = np.full((T, U + 1), NEG_INF)
    for t in range(T - 1, -1, -1):
        row = beta[t]
        if t == T - 1:
            row[U] = b[t, U]
        else:
            row[:] = b[t] + beta[t + 1]
        for u in range(U - 1, -1, -1):
            row[u] = np.logaddexp(row[u], y[t, u] + row[u + 1])
    return beta


def _backward_diagonal(grid: LogProbGrid, diag: np.ndarray) -> np.ndarray:
    T, U = grid.T, grid.U
    b = grid.blank_lp
    beta = np.full((T + 1, U + 1), NEG_INF)
    beta[T, U] = 0.0
    for t in range(T - 1, -1, -1):
        beta[t] = b[t] + beta[t + 1]
        beta[t, :-1] = np.logaddexp(beta[t, :-1], diag[t] + beta[t + 1, 1:])
    return beta


def grad(grid: LogProbGrid, variant: Variant | str) -> GridGradient:
    """Exact d(loglik)/d(grid entry) as transition occupation probabilities."""
    variant = Variant(variant)
    res = forward(grid, variant)
    L = res.loglik
    if not math.isfinite(L):
        raise UndefinedGradientError(f"loglik is {L}; gradient undefined")
    T, U = grid.T, grid.U
    b, y = grid.blank_lp, grid.symbol_lp
    alpha = res.alpha
    with np.errstate(invalid="ignore"):
        if variant is Variant.REGULAR:
            beta = _backward_regular(grid)
            d_blank = np.zeros((T, U + 1))
            d_blank[:-1] = np.exp(alpha[:-1] + b[:-1] + beta[1:] - L)
            d_blank[T - 1, U] = np.exp(alpha[T - 1, U] + b[T - 1, U] - L)
            d_symbol = np.exp(alpha[:, :-1] + y + beta[:, 1:] - L)
        else:
            constrained = variant is Variant.CONSTRAINED
            diag = y + b[:, 1:] if constrained else y
            beta = _backward_diagonal(grid, diag)
            d_blank = np.exp(alpha[:-1] + b + beta[1:] - L)
            d_symbol = np.exp(alpha[:-1, :-1] + diag + beta[1:, 1:] - L)
            if constrained:
                d_blank[:, 1:] += d_symbol
    d_blank = np.nan_to_num(d_blank, nan=0.0)
    d_symbol = np.nan_to_num(d_symbol, nan=0.0)
    return GridGradient(d_blank, d_symbol)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def check_normalized(rows: np.ndarray, name: str, tol: float = 1e-6) -> None:
    lse = np.logaddexp.reduce(np.asarray(rows, dtype=np.float64), axis=-1)
    if np.any(np.abs(lse) > tol):
        raise ValueError(f"{name} rows are not log-normalized (max |logsumexp| = {np.abs(lse).max():.3g})")


def trivial_joiner_full(enc_lp: np.ndarray, dec_lp: np.ndarray, lm_scale: float) -> np.ndarray:
    """T x (U+1) x V log-probs of the trivial joiner.

    Scores are ``enc_lp[t] + (1 + lm_scale) * dec_lp[u]``, renormalized over
    the vocabulary.
    """
    enc_lp = np.asarray(enc_lp, dtype=np.float64)
    dec_lp = np.asarray(dec_lp, dtype=np.float64)
    if lm_scale < 0:
        raise ValueError("lm_scale must be >= 0")
    check_normalized(enc_lp, "enc_lp")
    check_normalized(dec_lp, "dec_lp")
    z = enc_lp[:, None, :] + (1.0 + lm_scale) * dec_lp[None, :, :]
    return _log_softmax(z)


def grid_from_logprobs(logp: np.ndarray, targets) -> LogProbGrid:
    """Extract blank and target-token columns from a T x (U+1) x V tensor."""
    targets = np.asarray(targets, dtype=np.int64)
    U = len(targets)
    if logp.shape[1] != U + 1:
        raise ValueError("context axis must have U+1 entries")
    blank = logp[:, :, 0]
    sym = logp[:, np.arange(U), targets] if U else np.zeros((logp.shape[0], 0))
    return LogProbGrid(blank, sym)


def trivial_joiner_logprobs(enc_lp: np.ndarray, dec_lp: np.ndarray, lm_scale: float, targets) -> LogProbGrid:
    return grid_from_logprobs(trivial_joiner_full(enc_lp, dec_lp, lm_scale), targets)


@dataclass
class CombinedLoss:
    value: float
    full: LossResult
    trivial: LossResult
    d_full: GridGradient
    d_trivial: GridGradient


def combined_loss(
    full_grid: LogProbGrid,
    trivial_grid: LogProbGrid,
    variant: Variant | str,
    lambda_simple: float,
) -> CombinedLoss:
    """``-loglik(full) - lambda_simple * loglik(trivial)`` and its grid gradients."""
    if (full_grid.T, full_grid.U) != (trivial_grid.T, trivial_grid.U):
        raise ValueError("grids differ in shape")
    variant = Variant(variant)
    full = forward(full_grid, variant)
    triv = forward(trivial_grid, variant)
    gf = grad(full_grid, variant)
    value = -full.loglik
    d_full = GridGradient(-gf.d_blank, -gf.d_symbol)
    if lambda_simple != 0.0:
        gt = grad(trivial_grid, variant)
        value += lambda_simple * -triv.loglik
        d_triv = GridGradient(-lambda_simple * gt.d_blank, -lambda_simple * gt.d_symbol)
    else:
        d_triv = GridGradient(np.zeros_like(trivial_grid.blank_lp), np.zeros_like(trivial_grid.symbol_lp))
    return CombinedLoss(value, full, triv, d_full, d_triv)
