"""Exotic price bands and the desk metrics derived from them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .calibrator import CalibratedModel, CalibrationData, base_blocks, calibrate
from .conic import CalibrationSpec, Regime, minmax_price
from .errors import DomainError

RAW, PINNED, MIN_VAR_VOL, JOINT = "raw", "pinned", "min_var_vol", "joint"


@dataclass
class PriceBand:
    d_min: float
    d_max: float
    generator: str = ""
    fixings: int = 0
    regime: str = RAW
    w_min: np.ndarray | None = field(default=None, repr=False)
    w_max: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.d_min > self.d_max:
            # solver noise on a degenerate band can swap the ends by a few ulps
            if self.d_min - self.d_max > 1e-9 * (1 + abs(self.d_max)):
                raise DomainError(f"band ends out of order: {self.d_min} > {self.d_max}")
            self.d_min = self.d_max = 0.5 * (self.d_min + self.d_max)

    @property
    def mid(self) -> float:
        return 0.5 * (self.d_min + self.d_max)

    @property
    def width(self) -> float:
        return self.d_max - self.d_min


class SpreadMetrics(NamedTuple):
    mid: float
    spread_rel: float        # percent, NaN when undefined
    undefined: bool


def spread_metrics(band: PriceBand) -> SpreadMetrics:
    mid = band.mid
    if mid == 0.0:
        return SpreadMetrics(mid, math.nan, True)
    return SpreadMetrics(mid, (band.d_max - band.d_min) / mid * 100.0, False)


def model_risk_rel(mid_a: float, mid_b: float) -> float:
    """Signed relative distance of two mids in percent (NaN when the mean mid is zero)."""
    den = 0.5 * (mid_a + mid_b)
    if den == 0.0:
        return math.nan
    return (mid_a - mid_b) / den * 100.0


def _regime_spec(spec: CalibrationSpec | None, regime: Regime) -> CalibrationSpec:
    spec = spec or CalibrationSpec()
    return replace(spec, regime=regime)


def price_band(source, F, mode: str = RAW, *, spec: CalibrationSpec | None = None,
               generator: str = "", fixings: int = 0, reference=None, eps: float = 0.0,
               backend=None, w0=None) -> PriceBand:
    """Band for the pathwise payoff ``F``.

    * ``raw``: min and max of sum w_i F_i over the feasible set; ``source`` is
      a list of blocks or a :class:`CalibrationData`.
    * ``pinned``: evaluate at a :class:`CalibratedModel` (zero width).
    * ``min_var_vol``: two fixed-point calibrations with objective
      +/- F plus the forward-smile penalty and barrier of ``spec``.
    * ``joint``: two joint-variance calibrations tilted by +/- ``eps`` times
      the ``reference`` payoff; ``eps = 0`` pins the weights.
    """
    F = np.asarray(F, dtype=float)
    if mode == PINNED:
        if not isinstance(source, CalibratedModel):
            raise DomainError("pinned mode needs a CalibratedModel")
        d = float(F @ source.w)
        return PriceBand(d, d, generator, fixings, PINNED, source.w, source.w)
    if mode == RAW:
        rs = _regime_spec(spec, Regime.MIN_MAX_ONLY)
        blocks = base_blocks(source, rs) if isinstance(source, CalibrationData) else list(source)
        lo, w_lo, _ = minmax_price(blocks, F, "min", spec=rs, backend=backend)
        hi, w_hi, _ = minmax_price(blocks, F, "max", spec=rs, backend=backend)
        return PriceBand(lo, hi, generator, fixings, RAW, w_lo, w_hi)
    if not isinstance(source, CalibrationData):
        raise DomainError(f"{mode} mode needs CalibrationData")
    if mode == MIN_VAR_VOL:
        rs = _regime_spec(spec, Regime.MIN_VAR_VOL)
        m_lo = calibrate(source, rs, linear={"w": F}, backend=backend, w0=w0)
        m_hi = calibrate(source, rs, linear={"w": -F}, backend=backend, w0=w0)
    elif mode == JOINT:
        rs = _regime_spec(spec, Regime.MIN_ALL_VARIANCES)
        if eps == 0.0:
            m = calibrate(source, rs, backend=backend, w0=w0)
            d = float(F @ m.w)
            return PriceBand(d, d, generator, fixings, JOINT, m.w, m.w)
        if reference is None:
            raise DomainError("joint band with eps > 0 needs a reference payoff")
        ref = np.asarray(reference, dtype=float)
        m_lo = calibrate(source, rs, linear={"w": eps * ref}, backend=backend, w0=w0)
        m_hi = calibrate(source, rs, linear={"w": -eps * ref}, backend=backend, w0=w0)
    else:
        raise DomainError(f"unknown band mode {mode!r}")
    a, b = float(F @ m_lo.w), float(F @ m_hi.w)
    (lo, w_lo), (hi, w_hi) = sorted([(a, m_lo.w), (b, m_hi.w)], key=lambda t: t[0])
    return PriceBand(lo, hi, generator, fixings, mode, w_lo, w_hi)


def write_bands_csv(bands, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["generator", "l", "regime", "D_min", "D_max", "mid", "S_intra_rel"])
        for b in bands:
            m = spread_metrics(b)
            wr.writerow([b.generator, b.fixings, b.regime, repr(b.d_min), repr(b.d_max), repr(m.mid),
                         repr(m.spread_rel)])
