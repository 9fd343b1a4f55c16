"""Experiment wiring: instrument grids, market targets and calibration data."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .black import implied_vol, static_forward_vol
from .calibrator import CalibrationData
from .constraints import martingale_block, vanilla_groups
from .errors import DomainError
from .paths import (BLACK_SET, HESTON_SET1, HESTON_SET2, MERTON_SET1, MERTON_SET2, PSEUDO, SOBOL,
                    ModelSpec, PathSet, generate_paths, monthly_grid)
from .payoffs import (DIGITAL, FORWARD_START, LOG_CONTRACT, VANILLA, InstrumentSpec, payoff_matrix,
                      reverse_cliquet)
from .surface import VanillaSurface, mfiv_anchor, synth_surface


@dataclass
class GridConfig:
    """Calibration instrument layout.

    Vanilla strikes at maturity T are ``s0 * exp(z * sigma_ref * sqrt(T))`` for
    ``n_strikes`` values of z evenly spread over ``[-z_width, z_width]``.
    Digitals sit on the interior vanilla strikes with a spread of one strike
    pitch. Forward-start ratios use the same construction over one period;
    left unset they copy the vanilla grid (``n_strikes`` points over ``z_width``).
    ``martingale`` adds one mean-return row per period (see
    :func:`~smartmc.constraints.martingale_block`).
    """

    n_fixings: int = 10
    dt: float = 1.0 / 12.0
    n_strikes: int = 11
    z_width: float = 1.5
    sigma_ref: float = 0.2
    digitals: bool = True
    n_fwd_ratios: int | None = None
    fwd_z_width: float | None = None
    log_contracts: bool = False
    martingale: bool = True
    s0: float = 100.0

    @property
    def times(self) -> np.ndarray:
        return monthly_grid(self.n_fixings, self.dt)

    def strikes(self, t: float) -> np.ndarray:
        z = np.linspace(-self.z_width, self.z_width, self.n_strikes)
        return self.s0 * np.exp(z * self.sigma_ref * math.sqrt(t))

    def digital_eps(self, t: float) -> float:
        return float(np.min(np.diff(self.strikes(t))))

    def fwd_ratios(self) -> np.ndarray:
        n = self.n_strikes if self.n_fwd_ratios is None else self.n_fwd_ratios
        width = self.z_width if self.fwd_z_width is None else self.fwd_z_width
        if n <= 0:
            return np.zeros(0)
        if n == 1:
            return np.ones(1)
        z = np.linspace(-width, width, n)
        return np.exp(z * self.sigma_ref * math.sqrt(self.dt))

    def to_dict(self) -> dict:
        return asdict(self)


GENERATORS = {"heston1": HESTON_SET1, "heston2": HESTON_SET2, "merton1": MERTON_SET1,
              "merton2": MERTON_SET2, "black": BLACK_SET}


def generator_spec(gen) -> ModelSpec:
    """A ModelSpec from a preset name or a parameter dictionary."""
    if isinstance(gen, ModelSpec):
        return gen
    if isinstance(gen, dict):
        return ModelSpec.from_dict(gen)
    try:
        return GENERATORS[str(gen).lower()]
    except KeyError:
        raise DomainError(f"unknown generator {gen!r}; presets are {sorted(GENERATORS)}") from None


def market_instruments(grid: GridConfig) -> list[InstrumentSpec]:
    out = []
    times = grid.times
    for i in range(1, grid.n_fixings + 1):
        ks = grid.strikes(times[i])
        out += [InstrumentSpec.vanilla(i, float(k)) for k in ks]
        if grid.digitals:
            e = grid.digital_eps(times[i])
            out += [InstrumentSpec.digital(i, float(k), e) for k in ks[1:-1]]
    return out


def forward_instruments(grid: GridConfig) -> list[InstrumentSpec]:
    return [InstrumentSpec.forward_start(i - 1, i, float(k))
            for i in range(1, grid.n_fixings + 1) for k in grid.fwd_ratios()]


def log_instruments(grid: GridConfig) -> list[InstrumentSpec]:
    return [InstrumentSpec.log_contract(i) for i in range(1, grid.n_fixings + 1)]


def surface_strikes(grid: GridConfig, t: float) -> np.ndarray:
    """Vanilla strikes plus the digital spread legs, so targets need no interpolation."""
    ks = grid.strikes(t)
    if not grid.digitals:
        return ks
    e = grid.digital_eps(t)
    legs = np.r_[ks[1:-1] - 0.5 * e, ks[1:-1] + 0.5 * e]
    return np.unique(np.r_[ks, legs])


def market_surface(grid: GridConfig, generator: ModelSpec, *, n_paths: int = 2 ** 17,
                   seed: int = 987654321, sampler: str = PSEUDO) -> VanillaSurface:
    mats = grid.times[1:]
    return synth_surface(generator, mats, [surface_strikes(grid, t) for t in mats], s0=grid.s0,
                         n_paths=n_paths, seed=seed, sampler=sampler)


def surface_targets(surface: VanillaSurface, instruments, times) -> np.ndarray:
    out = np.empty(len(instruments))
    for j, ins in enumerate(instruments):
        t = float(times[ins.index])
        if ins.kind == VANILLA:
            out[j] = float(surface.call(t, ins.strike))
        elif ins.kind == DIGITAL:
            lo, hi = ins.strike - 0.5 * ins.eps, ins.strike + 0.5 * ins.eps
            out[j] = float((surface.call(t, lo) - surface.call(t, hi)) / ins.eps)
        else:
            raise ValueError(f"no surface target for {ins.label}")
    return out


def default_sampler(spec: ModelSpec) -> str:
    return SOBOL if spec.variant == "merton" else PSEUDO


def simulate(grid: GridConfig, spec: ModelSpec, n_paths: int, seed: int, sampler: str | None = None,
             threads: int = 1) -> PathSet:
    return generate_paths(spec, grid.times, n_paths, seed, sampler or default_sampler(spec),
                          s0=grid.s0, threads=threads)


def build_data(paths: PathSet, grid: GridConfig, surface: VanillaSurface | None = None, *,
               forward_nodes: bool = True, anchor_surface: VanillaSurface | None = None,
               extra_blocks=(), extras=()) -> CalibrationData:
    """Payoff matrix and targets for one path set.

    Without ``surface`` the targets are the uniform-weight prices of the paths
    themselves (the natively calibrated case). ``anchor_surface`` adds log
    contracts anchored to its MFIV values.
    """
    mkt = market_instruments(grid)
    fwd = forward_instruments(grid) if forward_nodes else []
    logs = log_instruments(grid) if anchor_surface is not None else []
    X = payoff_matrix(paths, mkt + fwd + logs)
    rep = np.arange(len(mkt))
    targets = X.prices()[rep] if surface is None else surface_targets(surface, mkt, paths.times)
    fwd_cols = np.arange(len(mkt), len(mkt) + len(fwd))
    log_cols = np.arange(len(mkt) + len(fwd), X.shape[1])
    anchor = mfiv_anchor(anchor_surface) if anchor_surface is not None else None
    static = static_forward_vols(surface, X, fwd_cols) if surface is not None and len(fwd) else None
    extra_blocks = list(extra_blocks)
    if grid.martingale:
        # against its own prices the path set is its own market, drift included
        rhs = None
        if surface is None:
            rhs = (paths.levels[:, 1:] / paths.levels[:, :-1]).mean(axis=0)
        extra_blocks.append(martingale_block(paths, rhs))
    return CalibrationData(X, rep, targets, fwd_cols, None, anchor,
                           log_cols if anchor is not None else None, list(extra_blocks), tuple(extras),
                           static)


def atm_vol(surface: VanillaSurface, t: float) -> float:
    fwd = surface.spot * math.exp((surface.rate - surface.dividend) * t)
    return implied_vol(float(surface.call(t, fwd)), fwd, fwd, t, math.exp(-surface.rate * t))


def static_forward_vols(surface: VanillaSurface, X, columns) -> np.ndarray:
    """Market static forward vol over each forward-start node's period, from ATM implied vols.

    The value depends on the period only; a period starting at 0 takes the
    ATM vol of its end date.
    """
    out = np.empty(len(columns))
    cache = {}
    for i, j in enumerate(columns):
        ins = X.instruments[j]
        t1, t2 = float(X.times[ins.start]), float(X.times[ins.index])
        for t in (t1, t2):
            if t > 0 and t not in cache:
                cache[t] = atm_vol(surface, t)
        out[i] = cache[t2] if t1 == 0 else static_forward_vol(cache[t1], t1, cache[t2], t2)
    return out


def rc_payoff(paths: PathSet, cap: float = 0.5) -> np.ndarray:
    return reverse_cliquet(paths, cap)


def atm_strip(data: CalibrationData) -> np.ndarray:
    """Pathwise payoff of the ATM forward-start strip (reference for the joint band)."""
    X = data.X
    cols = [j for j in data.fwd_nodes if abs(X.instruments[j].strike - 1.0) < 1e-12]
    if not cols:
        k = np.array([X.instruments[j].strike for j in data.fwd_nodes])
        near = np.min(np.abs(k - 1.0))
        cols = [j for j, kk in zip(data.fwd_nodes, k) if abs(kk - 1.0) == near]
    return X.X[:, cols].sum(axis=1)


__all__ = ["GridConfig", "market_instruments", "forward_instruments", "log_instruments",
           "market_surface", "generator_spec", "GENERATORS", "surface_targets", "static_forward_vols", "simulate", "build_data", "rc_payoff", "atm_strip",
           "vanilla_groups", "FORWARD_START", "LOG_CONTRACT"]
