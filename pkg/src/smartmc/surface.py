"""Vanilla target surfaces: validation, synthesis, digital targets and MFIV anchors."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .black import black_call_array
from .errors import DomainError, PreconditionError, SmartMCError
from .paths import BLACK, PSEUDO, ModelSpec, generate_paths


class SurfaceArbitrageError(SmartMCError):
    """Raised by :func:`validate_surface`; ``violations`` lists every offending quote set."""

    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(f"{v.kind} at T={v.maturity:g} K={v.strikes}: {v.value:.3g}"
                         for v in self.violations[:5])
        super().__init__(f"{len(self.violations)} shape violation(s): {head}")


@dataclass(frozen=True)
class Violation:
    kind: str              # "butterfly", "monotone" or "bounds"
    maturity: float
    strikes: tuple
    value: float


@dataclass
class VanillaSurface:
    maturities: np.ndarray
    strikes: list            # one ascending array per maturity
    calls: list              # discounted call prices aligned with ``strikes``
    spot: float
    rate: float = 0.0
    dividend: float = 0.0
    meta: dict = field(default_factory=dict)

    def forward(self, t: float) -> float:
        return self.spot * math.exp((self.rate - self.dividend) * t)

    def discount(self, t: float) -> float:
        return math.exp(-self.rate * t)

    def index(self, t: float, tol: float = 1e-10) -> int:
        hits = np.flatnonzero(np.abs(self.maturities - t) <= tol)
        if hits.size == 0:
            raise DomainError(f"maturity {t} not on the surface")
        return int(hits[0])

    def call(self, t: float, k) -> np.ndarray:
        """Call price at strike(s) ``k`` by linear interpolation in price."""
        i = self.index(t)
        ks, cs = self.strikes[i], self.calls[i]
        k = np.asarray(k, dtype=float)
        if np.any(k < ks[0] - 1e-12) or np.any(k > ks[-1] + 1e-12):
            raise DomainError(f"strike outside the quoted range [{ks[0]}, {ks[-1]}] at T={t}")
        return np.interp(k, ks, cs)

    def rows(self):
        for t, ks, cs in zip(self.maturities, self.strikes, self.calls):
            for k, c in zip(ks, cs):
                yield float(t), float(k), float(c)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["maturity", "strike", "call_price"])
            for row in self.rows():
                w.writerow([repr(x) for x in row])

    def to_json(self, path) -> None:
        doc = {"spot": self.spot, "rate": self.rate, "dividend": self.dividend,
               "quotes": [{"maturity": t, "strike": k, "call_price": c} for t, k, c in self.rows()]}
        Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def _group(rows):
    by_t: dict[float, list] = {}
    for t, k, c in rows:
        t, k, c = float(t), float(k), float(c)
        if not all(math.isfinite(x) for x in (t, k, c)):
            raise DomainError(f"non-finite quote {(t, k, c)}")
        if t <= 0 or k <= 0:
            raise DomainError(f"maturity and strike must be positive, got {(t, k)}")
        by_t.setdefault(t, []).append((k, c))
    return by_t


def butterfly(k1, k2, k3, c1, c2, c3) -> float:
    """Convexity measure that reduces to C1 - 2 C2 + C3 on an even strike grid."""
    return ((k3 - k2) * c1 - (k3 - k1) * c2 + (k2 - k1) * c3) / (0.5 * (k3 - k1))


def surface_violations(surface: VanillaSurface, tol: float | None = None) -> list[Violation]:
    tol = 1e-12 * surface.spot if tol is None else tol
    out = []
    for t, ks, cs in zip(surface.maturities, surface.strikes, surface.calls):
        df = surface.discount(t)
        fwd = surface.forward(t)
        upper = surface.spot * math.exp(-surface.dividend * t)
        for k, c in zip(ks, cs):
            lo = df * max(fwd - k, 0.0)
            if c < lo - tol or c > upper + tol:
                out.append(Violation("bounds", float(t), (float(k),), float(c - lo if c < lo else c - upper)))
        for j in range(len(ks) - 1):
            d = cs[j] - cs[j + 1]
            if d < -tol:
                out.append(Violation("monotone", float(t), (float(ks[j]), float(ks[j + 1])), float(d)))
        for j in range(1, len(ks) - 1):
            b = butterfly(ks[j - 1], ks[j], ks[j + 1], cs[j - 1], cs[j], cs[j + 1])
            if b < -tol:
                out.append(Violation("butterfly", float(t),
                                     (float(ks[j - 1]), float(ks[j]), float(ks[j + 1])), float(b)))
    return out


def validate_surface(rows, spot: float, rate: float = 0.0, dividend: float = 0.0,
                     tol: float | None = None) -> VanillaSurface:
    """Build a surface from ``(maturity, strike, call_price)`` rows and check its shape.

    Raises :class:`SurfaceArbitrageError` listing monotonicity, butterfly and
    price-bound violations; raises :class:`PreconditionError` when a maturity
    carries fewer than three strikes.
    """
    if spot <= 0:
        raise DomainError("spot must be positive")
    by_t = _group(rows)
    if not by_t:
        raise PreconditionError("no quotes")
    mats = np.array(sorted(by_t))
    strikes, calls = [], []
    for t in mats:
        q = sorted(by_t[t])
        ks = np.array([k for k, _ in q])
        if ks.size < 3:
            raise PreconditionError(f"maturity {t} has {ks.size} strikes; at least 3 required")
        if np.any(np.diff(ks) <= 0):
            raise DomainError(f"duplicate strikes at maturity {t}")
        strikes.append(ks)
        calls.append(np.array([c for _, c in q]))
    surf = VanillaSurface(mats, strikes, calls, float(spot), rate, dividend)
    bad = surface_violations(surf, tol)
    if bad:
        raise SurfaceArbitrageError(bad)
    return surf


def load_surface(path, spot: float | None = None, rate: float = 0.0, dividend: float = 0.0,
                 tol: float | None = None) -> VanillaSurface:
    """Read a CSV (``maturity,strike,call_price``) or JSON surface file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"surface file not found: {path}")
    if path.suffix.lower() == ".json":
        doc = json.loads(path.read_text(encoding="utf-8"))
        rows = [(q["maturity"], q["strike"], q["call_price"]) for q in doc["quotes"]]
        spot = doc.get("spot", spot)
        rate = doc.get("rate", rate)
        dividend = doc.get("dividend", dividend)
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
            missing = {"maturity", "strike", "call_price"} - set(reader.fieldnames or ())
            if missing:
                raise DomainError(f"{path}: missing columns {sorted(missing)}")
            rows = [(r["maturity"], r["strike"], r["call_price"]) for r in reader]
    if spot is None:
        raise DomainError(f"{path}: spot level not given")
    return validate_surface(rows, spot, rate, dividend, tol)


def synth_surface(spec: ModelSpec, maturities, strikes, *, s0: float = 100.0, rate: float = 0.0,
                  dividend: float = 0.0, n_paths: int = 2 ** 17, seed: int = 20240101,
                  sampler: str = PSEUDO, closed_form: bool = True) -> VanillaSurface:
    """Synthetic call surface from a generator.

    ``strikes`` is either one grid shared by all maturities or one grid per
    maturity. Black surfaces use the closed form unless ``closed_form`` is off;
    other generators average the discounted payoffs of a dedicated path set.
    """
    mats = np.asarray(maturities, dtype=float)
    if mats.ndim != 1 or mats.size == 0 or np.any(np.diff(mats) <= 0) or mats[0] <= 0:
        raise DomainError("maturities must be positive and strictly increasing")
    if np.ndim(strikes[0]) == 0:
        grids = [np.asarray(strikes, dtype=float)] * mats.size
    else:
        grids = [np.asarray(k, dtype=float) for k in strikes]
    if len(grids) != mats.size:
        raise DomainError("one strike grid per maturity required")
    spec.validate()
    calls = []
    if spec.variant == BLACK and closed_form:
        for t, ks in zip(mats, grids):
            fwd = s0 * math.exp((rate - dividend) * t)
            calls.append(black_call_array(fwd, ks, spec.sigma, t, math.exp(-rate * t)))
        meta = {"source": "closed_form"}
    else:
        grid = np.concatenate([[0.0], mats])
        ps = generate_paths(spec, grid, n_paths, seed, sampler, s0=s0, rate=rate, dividend=dividend)
        for i, (t, ks) in enumerate(zip(mats, grids), start=1):
            st = ps.levels[:, i]
            df = math.exp(-rate * t)
            # sort once so each strike costs a tail sum instead of a full pass
            srt = np.sort(st)
            tail = np.concatenate([np.cumsum(srt[::-1])[::-1], [0.0]])
            pos = np.searchsorted(srt, ks, side="right")
            cnt = srt.size - pos
            calls.append(df * (tail[pos] - cnt * ks) / srt.size)
        meta = {"source": "monte_carlo", "n_paths": n_paths, "seed": seed, "sampler": sampler}
    meta["generator"] = spec.to_dict()
    return VanillaSurface(mats, grids, calls, float(s0), rate, dividend, meta)


@dataclass
class DigitalTargets:
    maturities: np.ndarray
    strikes: list            # digital strikes per maturity
    prices: list
    eps: np.ndarray          # spread width per maturity


def digital_targets(surface: VanillaSurface, eps: float | None = None, strikes=None) -> DigitalTargets:
    """Call-spread digitals (C(K - eps/2) - C(K + eps/2)) / eps.

    Default ``eps`` is the smallest strike pitch of each maturity's grid and
    default digital strikes are the interior grid points.
    """
    if eps is not None and not eps > 0:
        raise DomainError(f"spread width must be positive, got {eps}")
    out_k, out_p, out_e = [], [], []
    for i, t in enumerate(surface.maturities):
        ks = surface.strikes[i]
        e = float(np.min(np.diff(ks))) if eps is None else float(eps)
        kd = ks[1:-1] if strikes is None else np.asarray(
            strikes[i] if np.ndim(strikes[0]) else strikes, dtype=float)
        lo, hi = kd - 0.5 * e, kd + 0.5 * e
        if np.any(lo < ks[0] - 1e-12) or np.any(hi > ks[-1] + 1e-12):
            raise DomainError(f"digital strikes +/- eps/2 leave the quoted grid at T={t:g}")
        p = (surface.call(t, lo) - surface.call(t, hi)) / e
        out_k.append(np.asarray(kd, dtype=float))
        out_p.append(p)
        out_e.append(e)
    return DigitalTargets(surface.maturities.copy(), out_k, out_p, np.array(out_e))


def otm_prices(strikes, calls, forward: float, discount: float) -> np.ndarray:
    """Out-of-the-money prices: puts (via parity) below the forward, calls above."""
    ks = np.asarray(strikes, dtype=float)
    cs = np.asarray(calls, dtype=float)
    puts = cs - discount * (forward - ks)
    q = np.where(ks < forward, puts, cs)
    at = np.isclose(ks, forward, rtol=0.0, atol=1e-12 * forward)
    q[at] = 0.5 * (cs[at] + puts[at])
    return q


def mfiv(strikes, calls, t: float, spot: float, rate: float = 0.0, dividend: float = 0.0):
    """Discrete Carr-Madan variance (2 e^{rT} / T) sum Q(K)/K^2 dK.

    Returns ``(variance, info)`` where ``info`` reports the strike range and the
    OTM prices at both ends, the size of the truncated tails.
    """
    ks = np.asarray(strikes, dtype=float)
    if ks.size == 0:
        raise DomainError("empty strike grid")
    if ks.size == 1:
        raise DomainError("at least two strikes are needed")
    if t <= 0:
        raise DomainError("maturity must be positive")
    fwd = spot * math.exp((rate - dividend) * t)
    df = math.exp(-rate * t)
    q = otm_prices(ks, calls, fwd, df)
    dk = np.empty_like(ks)
    dk[1:-1] = 0.5 * (ks[2:] - ks[:-2])
    dk[0] = ks[1] - ks[0]
    dk[-1] = ks[-1] - ks[-2]
    var = 2.0 * math.exp(rate * t) / t * float(np.sum(q / ks ** 2 * dk))
    info = {"k_min": float(ks[0]), "k_max": float(ks[-1]),
            "q_low_end": float(q[0]), "q_high_end": float(q[-1])}
    return var, info


@dataclass
class MfivAnchor:
    maturities: np.ndarray
    variance: np.ndarray        # annualised sigma^2_mfiv(T)
    truncation: list = field(default_factory=list)
    calendar_ok: bool = True

    @property
    def total_variance(self) -> np.ndarray:
        return self.variance * self.maturities

    def at(self, t: float, tol: float = 1e-10) -> float:
        hits = np.flatnonzero(np.abs(self.maturities - t) <= tol)
        if hits.size == 0:
            raise DomainError(f"no variance anchor for maturity {t}")
        return float(self.variance[hits[0]])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["maturity", "total_variance"])
            for t, tv in zip(self.maturities, self.total_variance):
                w.writerow([repr(float(t)), repr(float(tv))])

    @classmethod
    def from_csv(cls, path) -> "MfivAnchor":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [(float(r["maturity"]), float(r["total_variance"])) for r in csv.DictReader(fh)]
        mats = np.array([r[0] for r in rows])
        return cls(mats, np.array([r[1] for r in rows]) / mats)


def mfiv_anchor(surface: VanillaSurface) -> MfivAnchor:
    vs, info = [], []
    for t, ks, cs in zip(surface.maturities, surface.strikes, surface.calls):
        v, meta = mfiv(ks, cs, t, surface.spot, surface.rate, surface.dividend)
        vs.append(v)
        info.append(meta)
    vs = np.array(vs)
    ok = bool(np.all(np.diff(vs * surface.maturities) >= -1e-12))
    return MfivAnchor(surface.maturities.copy(), vs, info, ok)
