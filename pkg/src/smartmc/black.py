"""Black (forward) pricing, vega, implied volatility and forward-start helpers.

Prices are computed on the out-of-the-money side and converted by put-call
parity, which keeps the time value accurate for deep in-the-money quotes and
lets the implied-volatility inversion work on a quantity that is strictly
increasing in volatility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import CalendarArbitrageError, DegenerateVegaError, DomainError, NoSolutionError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class BlackQuote:
    forward: float
    strike: float
    vol: float
    tau: float
    discount: float = 1.0

    def __post_init__(self):
        _check_inputs(self.forward, self.strike, self.vol, self.tau, self.discount)


def _check_inputs(forward, strike, vol, tau, discount):
    vals = (forward, strike, vol, tau, discount)
    if not all(math.isfinite(float(v)) for v in vals):
        raise DomainError(f"non-finite Black input: {vals}")
    if forward <= 0.0:
        raise DomainError(f"forward must be positive, got {forward}")
    if strike < 0.0:
        raise DomainError(f"strike must be non-negative, got {strike}")
    if vol < 0.0:
        raise DomainError(f"vol must be non-negative, got {vol}")
    if tau < 0.0:
        raise DomainError(f"tau must be non-negative, got {tau}")
    if not 0.0 < discount <= 1.0 + 1e-15:
        raise DomainError(f"discount factor must lie in (0, 1], got {discount}")


def _ncdf(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def _npdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def _otm_price(forward: float, strike: float, total_sd: float) -> float:
    """Undiscounted out-of-the-money option value (call if K >= F, else put)."""
    if total_sd <= 0.0 or strike <= 0.0:
        return 0.0
    d1 = math.log(forward / strike) / total_sd + 0.5 * total_sd
    d2 = d1 - total_sd
    if strike >= forward:
        return forward * _ncdf(d1) - strike * _ncdf(d2)
    return strike * _ncdf(-d2) - forward * _ncdf(-d1)


def bs_call_price(q: BlackQuote | None = None, *, forward=None, strike=None, vol=None,
                  tau=None, discount=1.0) -> float:
    """Discounted Black call price.

    Accepts either a :class:`BlackQuote` or keyword arguments. ``tau == 0`` or
    ``vol == 0`` returns the discounted intrinsic value; ``strike == 0`` returns
    the discounted forward.
    """
    if q is None:
        q = BlackQuote(forward, strike, vol, tau, discount)
    F, K, df = q.forward, q.strike, q.discount
    intrinsic = max(F - K, 0.0)
    sd = q.vol * math.sqrt(q.tau)
    if sd == 0.0 or K == 0.0:
        return df * intrinsic
    otm = _otm_price(F, K, sd)
    if K >= F:
        return df * otm
    return df * (otm + (F - K))


def bs_vega(q: BlackQuote | None = None, *, forward=None, strike=None, vol=None,
            tau=None, discount=1.0) -> float:
    """dPrice/dvol of the discounted Black call."""
    if q is None:
        q = BlackQuote(forward, strike, vol, tau, discount)
    if q.tau == 0.0:
        raise DegenerateVegaError("vega is undefined at zero maturity")
    if q.strike == 0.0 or q.vol == 0.0:
        return 0.0
    sqrt_t = math.sqrt(q.tau)
    sd = q.vol * sqrt_t
    d1 = math.log(q.forward / q.strike) / sd + 0.5 * sd
    return q.discount * q.forward * _npdf(d1) * sqrt_t


def implied_vol(target: float, forward: float, strike: float, tau: float,
                discount: float = 1.0, *, lo: float = 1e-6, hi: float = 5.0,
                max_iter: int = 200) -> float:
    """Black volatility reproducing a discounted call price.

    Safeguarded Newton on the out-of-the-money price inside a bracket that
    starts at ``[lo, hi]`` and doubles ``hi`` until it encloses the target.
    Returns 0.0 when the target equals the intrinsic value.
    """
    _check_inputs(forward, strike, 0.0, tau, discount)
    if not math.isfinite(target):
        raise DomainError(f"non-finite target price {target}")
    if tau == 0.0:
        raise DomainError("implied volatility undefined at zero maturity")
    F, K = forward, strike
    intrinsic = max(F - K, 0.0)
    tv = target / discount - intrinsic
    if tv < -1e-15 * F:
        raise NoSolutionError(f"target {target} below discounted intrinsic {discount * intrinsic}")
    if target >= discount * F:
        raise NoSolutionError(f"target {target} not below discounted forward {discount * F}")
    if K == 0.0:
        raise NoSolutionError("implied volatility undefined at zero strike")
    if tv <= 0.0:
        return 0.0
    sqrt_t = math.sqrt(tau)
    log_tv = math.log(tv)
    log_fk = math.log(F / K)

    # Newton on log(OTM price): the OTM value is log-concave-like in vol, so the
    # iteration stays well conditioned deep in the wings where vega underflows.
    def g(s):
        otm = _otm_price(F, K, s * sqrt_t)
        return (math.log(otm) if otm > 0.0 else -math.inf) - log_tv, otm

    while g(hi)[0] < 0.0:
        hi *= 2.0
        if hi > 1e4:
            raise NoSolutionError(f"cannot bracket implied vol for target {target}")
    a, b = lo, hi
    while g(a)[0] > 0.0 and a > 1e-300:
        b, a = a, a * 0.01
    x = math.sqrt(2.0 * math.pi / tau) * tv / F
    if not a < x < b:
        x = 0.5 * (a + b)
    for _ in range(max_iter):
        gx, otm = g(x)
        if gx == 0.0:
            break
        if gx > 0.0:
            b = x
        else:
            a = x
        sd = x * sqrt_t
        d1 = log_fk / sd + 0.5 * sd
        xn = math.nan
        if otm > 0.0:
            dlog = F * _npdf(d1) * sqrt_t / otm
            if dlog > 0.0 and math.isfinite(dlog):
                xn = x - gx / dlog
        if not (a < xn < b):
            xn = 0.5 * (a + b)
        if abs(xn - x) <= 4e-16 * x or (b - a) <= 4e-16 * b:
            x = xn
            break
        x = xn
    return x


def black_call_array(forward, strike, vol, tau, discount=1.0) -> np.ndarray:
    """Vectorised discounted Black call (used for bulk linearisation)."""
    F, K, s, t, df = np.broadcast_arrays(*(np.asarray(a, dtype=float)
                                           for a in (forward, strike, vol, tau, discount)))
    out = df * np.maximum(F - K, 0.0)
    sd = s * np.sqrt(t)
    live = (sd > 0.0) & (K > 0.0)
    if np.any(live):
        Fl, Kl, sdl = F[live], K[live], sd[live]
        d1 = np.log(Fl / Kl) / sdl + 0.5 * sdl
        d2 = d1 - sdl
        call = np.where(Kl >= Fl,
                        Fl * ndtr(d1) - Kl * ndtr(d2),
                        Kl * ndtr(-d2) - Fl * ndtr(-d1) + (Fl - Kl))
        out[live] = df[live] * call
    return out


def black_vega_array(forward, strike, vol, tau, discount=1.0) -> np.ndarray:
    F, K, s, t, df = np.broadcast_arrays(*(np.asarray(a, dtype=float)
                                           for a in (forward, strike, vol, tau, discount)))
    if np.any(t <= 0.0):
        raise DegenerateVegaError("vega is undefined at zero maturity")
    out = np.zeros(F.shape)
    sd = s * np.sqrt(t)
    live = (sd > 0.0) & (K > 0.0)
    d1 = np.log(F[live] / K[live]) / sd[live] + 0.5 * sd[live]
    out[live] = df[live] * F[live] * np.exp(-0.5 * d1 * d1) * _INV_SQRT_2PI * np.sqrt(t[live])
    return out


def forward_start_black_price(k_ratio: float, vol: float, t1: float, t2: float,
                              discount: float = 1.0) -> float:
    """Black price of the ratio call max(S_T2 / S_T1 - k, 0) on a unit forward."""
    if not t2 > t1 >= 0.0:
        raise DomainError(f"forward start requires t2 > t1 >= 0, got t1={t1}, t2={t2}")
    return bs_call_price(forward=1.0, strike=k_ratio, vol=vol, tau=t2 - t1, discount=discount)


def forward_start_vega(k_ratio: float, vol: float, t1: float, t2: float,
                       discount: float = 1.0) -> float:
    if not t2 > t1 >= 0.0:
        raise DomainError(f"forward start requires t2 > t1 >= 0, got t1={t1}, t2={t2}")
    return bs_vega(forward=1.0, strike=k_ratio, vol=vol, tau=t2 - t1, discount=discount)


def static_forward_vol(sigma1: float, t1: float, sigma2: float, t2: float) -> float:
    """Forward volatility between t1 and t2 from variance additivity."""
    if not t2 > t1 > 0.0:
        raise DomainError(f"requires t2 > t1 > 0, got t1={t1}, t2={t2}")
    fwd_var = sigma2 * sigma2 * t2 - sigma1 * sigma1 * t1
    if fwd_var < 0.0:
        raise CalendarArbitrageError(
            f"negative forward variance {fwd_var:.6g} between t1={t1} and t2={t2}")
    return math.sqrt(fwd_var / (t2 - t1))
