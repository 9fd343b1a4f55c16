"""Pathwise payoff matrices coupling simulated paths to the optimiser."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SmartMCError
from .paths import PathSet

VANILLA = "vanilla_call"
DIGITAL = "digital_spread"
FORWARD_START = "forward_start_call"
LOG_CONTRACT = "log_contract"
KINDS = (VANILLA, DIGITAL, FORWARD_START, LOG_CONTRACT)


class EvaluationError(SmartMCError):
    """A payoff function returned a non-finite value."""

    def __init__(self, message: str, path_index: int):
        super().__init__(message)
        self.path_index = path_index


@dataclass(frozen=True)
class InstrumentSpec:
    """One calibration instrument.

    ``index`` is the fixing index of the maturity; forward-start calls also use
    ``start`` (the fixing index of the reset date) and quote ``strike`` as a
    ratio of the reset level.
    """

    kind: str
    index: int
    strike: float = 0.0
    start: int = 0
    eps: float = 0.0

    @classmethod
    def vanilla(cls, index: int, strike: float) -> "InstrumentSpec":
        return cls(VANILLA, index, strike)

    @classmethod
    def digital(cls, index: int, strike: float, eps: float) -> "InstrumentSpec":
        return cls(DIGITAL, index, strike, eps=eps)

    @classmethod
    def forward_start(cls, start: int, end: int, ratio: float) -> "InstrumentSpec":
        return cls(FORWARD_START, end, ratio, start=start)

    @classmethod
    def log_contract(cls, index: int) -> "InstrumentSpec":
        return cls(LOG_CONTRACT, index)

    @property
    def label(self) -> str:
        if self.kind == VANILLA:
            return f"van[t{self.index},K={self.strike:.6g}]"
        if self.kind == DIGITAL:
            return f"dig[t{self.index},K={self.strike:.6g},e={self.eps:.3g}]"
        if self.kind == FORWARD_START:
            return f"fwd[t{self.start}->t{self.index},k={self.strike:.6g}]"
        return f"log[t{self.index}]"

    def check(self, n_fixings: int) -> None:
        if self.kind not in KINDS:
            raise DomainError(f"unknown instrument kind {self.kind!r}")
        if not 1 <= self.index <= n_fixings:
            raise DomainError(f"{self.label}: maturity index outside the grid 1..{n_fixings}")
        if self.kind == FORWARD_START and not 0 <= self.start < self.index:
            raise DomainError(f"{self.label}: reset index must precede the maturity index")
        if self.kind != LOG_CONTRACT and not self.strike > 0:
            raise DomainError(f"{self.label}: strike must be positive")
        if self.kind == DIGITAL and not (0 < self.eps < 2 * self.strike):
            raise DomainError(f"{self.label}: spread width must lie in (0, 2K)")


@dataclass
class PayoffMatrix:
    X: np.ndarray                 # (N, m), Fortran order
    instruments: list
    discounts: np.ndarray
    times: np.ndarray | None = None      # fixing grid of the source paths

    @property
    def labels(self) -> list[str]:
        return [ins.label for ins in self.instruments]

    @property
    def shape(self):
        return self.X.shape

    def columns(self, kind: str) -> np.ndarray:
        return np.array([j for j, ins in enumerate(self.instruments) if ins.kind == kind], dtype=int)

    def prices(self, w=None) -> np.ndarray:
        if w is None:
            return self.X.mean(axis=0)
        return np.asarray(w) @ self.X

    def select(self, cols) -> "PayoffMatrix":
        cols = np.asarray(cols, dtype=int)
        return PayoffMatrix(np.asfortranarray(self.X[:, cols]),
                            [self.instruments[j] for j in cols], self.discounts[cols], self.times)

    def maturity(self, j: int) -> float:
        return float(self.times[self.instruments[j].index])

    def tau(self, j: int) -> float:
        ins = self.instruments[j]
        return float(self.times[ins.index] - self.times[ins.start])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.labels)
            for row in self.X:
                w.writerow([repr(float(x)) for x in row])


def _vanilla(levels, k):
    return np.maximum(levels - k, 0.0)


def payoff_matrix(paths: PathSet, instruments) -> PayoffMatrix:
    """Discounted pathwise payoffs, one column per instrument."""
    instruments = list(instruments)
    n, l = paths.n_paths, paths.n_fixings
    X = np.empty((n, len(instruments)), order="F")
    dfs = np.empty(len(instruments))
    for j, ins in enumerate(instruments):
        ins.check(l)
        t = float(paths.times[ins.index])
        s = paths.levels[:, ins.index]
        if ins.kind == VANILLA:
            df = paths.discount(t)
            X[:, j] = df * _vanilla(s, ins.strike)
        elif ins.kind == DIGITAL:
            df = paths.discount(t)
            lo, hi = ins.strike - 0.5 * ins.eps, ins.strike + 0.5 * ins.eps
            X[:, j] = df * (_vanilla(s, lo) - _vanilla(s, hi)) / ins.eps
        elif ins.kind == FORWARD_START:
            # forward measure: one discount factor at the outer maturity
            df = paths.discount(t)
            X[:, j] = df * _vanilla(s / paths.levels[:, ins.start], ins.strike)
        else:
            df = 1.0
            X[:, j] = (2.0 / t) * (math.log(paths.forward(t)) - np.log(s))
        dfs[j] = df
    return PayoffMatrix(X, instruments, dfs, paths.times.copy())


def reverse_cliquet(paths: PathSet, cap: float, fixings=None) -> np.ndarray:
    """max(0, H + (1/n) sum_i min(r_i, 0)) over consecutive fixing intervals.

    ``fixings`` are grid indices (default: the whole grid); the payoff is
    discounted from the last one.
    """
    if not cap >= 0:
        raise DomainError(f"cap must be non-negative, got {cap}")
    idx = np.arange(paths.n_fixings + 1) if fixings is None else np.asarray(fixings, dtype=int)
    if idx.size < 2 or np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] > paths.n_fixings:
        raise DomainError("need at least two increasing fixing indices on the grid")
    lv = paths.levels[:, idx]
    r = lv[:, 1:] / lv[:, :-1] - 1.0
    n = r.shape[1]
    pay = np.maximum(0.0, cap + np.minimum(r, 0.0).sum(axis=1) / n)
    return paths.discount(float(paths.times[idx[-1]])) * pay


def exotic_payoff(paths: PathSet, fn, *, vectorized: bool = False, discount: float = 1.0) -> np.ndarray:
    """Apply ``fn`` to every path (a row of levels) and scale by ``discount``.

    With ``vectorized`` the function receives the whole level matrix and must
    return one value per path.
    """
    if vectorized:
        out = np.asarray(fn(paths.levels), dtype=float).reshape(-1)
        if out.size != paths.n_paths:
            raise DomainError("vectorised payoff must return one value per path")
    else:
        out = np.fromiter((fn(row) for row in paths.levels), dtype=float, count=paths.n_paths)
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise EvaluationError(f"non-finite payoff on path {bad[0]}", int(bad[0]))
    return discount * out
