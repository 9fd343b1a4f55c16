"""Runtime scaling and Monte Carlo error studies."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DomainError, SmartMCError

# exponents and coefficients reported for a laptop CPU; reference only
REFERENCE_FITS = {"N": (0.183, 0.79), "m": (1.61, 1.648), "l": (9.105, 1.051)}


def fit_power_law(points):
    """Least squares of log t on log x. Returns ``(c, p, r2)`` with t ~ c x^p."""
    pts = [(float(x), float(t)) for x, t in points]
    if len(pts) < 2:
        raise DomainError("a power-law fit needs at least two points")
    x, t = np.array(pts).T
    if np.any(x <= 0) or np.any(t <= 0):
        raise DomainError("power-law fit needs positive sizes and times")
    if np.unique(x).size < 2:
        raise DomainError("power-law fit needs two distinct sizes")
    lx, lt = np.log(x), np.log(t)
    p, lc = np.polyfit(lx, lt, 1)
    resid = lt - (lc + p * lx)
    ss = float(np.sum((lt - lt.mean()) ** 2))
    # constant timings leave only rounding noise in ss
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss if ss > 1e-24 * (1.0 + float(lt @ lt)) else 1.0
    return float(math.exp(lc)), float(p), r2


@dataclass
class ScalingRun:
    axis: str
    grid: list
    fixed: dict
    times: list = field(default_factory=list)
    fit: tuple | None = None          # (c, p)
    r2: float | None = None
    error: str | None = None

    @property
    def exponent(self) -> float | None:
        return None if self.fit is None else self.fit[1]

    def to_csv(self, path) -> None:
        c, p = self.fit if self.fit else (math.nan, math.nan)
        r2 = self.r2 if self.r2 is not None else math.nan
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["axis", "value", "t_median_s", "c", "p", "R2"])
            for v, t in zip(self.grid, self.times):
                wr.writerow([self.axis, v, repr(t), repr(c), repr(p), repr(r2)])

    def to_json(self) -> str:
        d = asdict(self)
        d["reference"] = REFERENCE_FITS.get(self.axis)
        return json.dumps(d, sort_keys=True, default=float)


@dataclass(frozen=True)
class ScalingConfig:
    """Problem timed by :func:`run_scaling`: one native joint-variance solve."""

    n_paths: int = 2048
    n_strikes: int = 11
    n_fixings: int = 10
    seed: int = 11
    repeats: int = 3
    generator: str = "heston2"

    def with_axis(self, axis: str, value) -> "ScalingConfig":
        key = {"N": "n_paths", "m": "n_strikes", "l": "n_fixings"}.get(axis)
        if key is None:
            raise DomainError(f"unknown scaling axis {axis!r}")
        return replace(self, **{key: int(value)})


def _timed_solve(cfg: ScalingConfig) -> float:
    # imported here: bench is importable without pulling in the whole pipeline
    from .calibrator import base_blocks, initialize, _problem
    from .conic import CalibrationSpec, require_optimal, solve
    from .pipeline import GridConfig, build_data, generator_spec, simulate

    grid = GridConfig(n_fixings=cfg.n_fixings, n_strikes=cfg.n_strikes)
    paths = simulate(grid, generator_spec(cfg.generator), cfg.n_paths, cfg.seed)
    data = build_data(paths, grid)
    spec = CalibrationSpec()
    state = initialize(data, spec)
    t0 = time.perf_counter()
    prob = _problem(state, data, spec, None, base_blocks(data, spec))
    require_optimal(solve(prob, spec.backend), prob)
    return time.perf_counter() - t0


def run_scaling(axis: str, grid, base: ScalingConfig | None = None, timer=None) -> ScalingRun:
    """Median-of-``repeats`` wall time of assembly plus solve along one axis.

    Path generation and payoff evaluation are excluded. A failing point stops
    the sweep; the times gathered so far are kept and the error recorded.
    """
    base = base or ScalingConfig()
    grid = [int(g) for g in grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise DomainError("scaling grid must be strictly increasing")
    timer = timer or _timed_solve
    fixed = {k: v for k, v in asdict(base).items()}
    run = ScalingRun(axis, [], fixed)
    for g in grid:
        cfg = base.with_axis(axis, g)
        try:
            ts = [timer(cfg) for _ in range(max(1, base.repeats))]
        except SmartMCError as exc:
            run.error = f"{axis}={g}: {exc}"
            break
        run.grid.append(g)
        run.times.append(float(np.median(ts)))
    if len(run.grid) >= 2:
        c, p, r2 = fit_power_law(zip(run.grid, run.times))
        run.fit, run.r2 = (c, p), r2
    return run


@dataclass
class RmseTable:
    n_grid: list
    rmse: list
    n_seeds: int
    reference: float
    slope: float | None
    intercept: float | None
    prices: list = field(repr=False, default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["N", "rmse", "seeds", "slope"])
            for n, r in zip(self.n_grid, self.rmse):
                wr.writerow([n, repr(r), self.n_seeds, repr(self.slope)])


def rmse_study(estimator, seeds, n_grid, reference: float) -> RmseTable:
    """RMSE across seeds of ``estimator(seed, n)`` against ``reference``, per n.

    The fitted log-log slope estimates -(1/2 - alpha) for RMSE ~ N^(alpha - 1/2).
    """
    seeds = list(seeds)
    if len(seeds) < 4:
        raise DomainError("need at least 4 seeds for a usable RMSE")
    n_grid = [int(n) for n in n_grid]
    rmse, prices = [], []
    for n in n_grid:
        p = np.array([float(estimator(s, n)) for s in seeds])
        prices.append(p)
        rmse.append(float(np.sqrt(np.mean((p - reference) ** 2))))
    slope = intercept = None
    if len(n_grid) >= 2 and all(r > 0 for r in rmse):
        intercept, slope, _ = fit_power_law(zip(n_grid, rmse))
    return RmseTable(n_grid, rmse, len(seeds), float(reference), slope, intercept, prices)
