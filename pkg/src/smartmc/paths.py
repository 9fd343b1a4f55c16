"""Monte Carlo path generation (Black, two-sided Merton, Heston) and path-set I/O."""

from __future__ import annotations

import json
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri
from scipy.stats import poisson, qmc

from .errors import DomainError

BLACK, MERTON, HESTON = "black", "merton", "heston"
PSEUDO, SOBOL = "pseudo", "sobol"
HESTON_DT = 1.0 / 365.0
BLOCK_SIZE = 4096

_MAGIC = b"SMCPATH\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sIQIdq8s")


@dataclass(frozen=True)
class ModelSpec:
    """Generator parameters. Only the fields of the chosen ``variant`` are used.

    Merton jumps are fixed multipliers ``j_up > 1`` and ``0 < j_down < 1``
    arriving with intensities ``lam_up`` and ``lam_down``; ``sigma`` is the
    diffusive volatility. Heston uses ``eta`` for the vol-of-vol.
    """

    variant: str
    sigma: float = 0.0
    lam_up: float = 0.0
    j_up: float = 1.5
    lam_down: float = 0.0
    j_down: float = 0.5
    v0: float = 0.0
    kappa: float = 0.0
    theta: float = 0.0
    rho: float = 0.0
    eta: float = 0.0

    @classmethod
    def black(cls, sigma: float) -> "ModelSpec":
        return cls(BLACK, sigma=sigma)

    @classmethod
    def merton(cls, sigma, lam_up, j_up, lam_down, j_down) -> "ModelSpec":
        return cls(MERTON, sigma=sigma, lam_up=lam_up, j_up=j_up, lam_down=lam_down, j_down=j_down)

    @classmethod
    def heston(cls, v0, kappa, theta, rho, eta) -> "ModelSpec":
        return cls(HESTON, v0=v0, kappa=kappa, theta=theta, rho=rho, eta=eta)

    def validate(self) -> "ModelSpec":
        if self.variant not in (BLACK, MERTON, HESTON):
            raise DomainError(f"unknown model variant {self.variant!r}")
        vals = [v for k, v in asdict(self).items() if k != "variant"]
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"non-finite parameter in {self}")
        if self.variant in (BLACK, MERTON) and self.sigma < 0:
            raise DomainError("sigma must be non-negative")
        if self.variant == MERTON:
            if self.lam_up < 0 or self.lam_down < 0:
                raise DomainError("jump intensities must be non-negative")
            if not self.j_up > 1.0:
                raise DomainError(f"j_up must exceed 1, got {self.j_up}")
            if not 0.0 < self.j_down < 1.0:
                raise DomainError(f"j_down must lie in (0, 1), got {self.j_down}")
        if self.variant == HESTON:
            if self.v0 < 0 or self.kappa < 0 or self.theta < 0 or self.eta < 0:
                raise DomainError("Heston v0, kappa, theta, eta must be non-negative")
            if not -1.0 <= self.rho <= 1.0:
                raise DomainError(f"rho must lie in [-1, 1], got {self.rho}")
        return self

    @property
    def feller(self) -> bool:
        """2*kappa*theta > eta**2 (recorded only; never enforced)."""
        return 2.0 * self.kappa * self.theta > self.eta ** 2

    @property
    def tag(self) -> str:
        return self.variant

    def params(self) -> dict:
        keys = {BLACK: ("sigma",),
                MERTON: ("sigma", "lam_up", "j_up", "lam_down", "j_down"),
                HESTON: ("v0", "kappa", "theta", "rho", "eta")}[self.variant]
        return {k: getattr(self, k) for k in keys}

    def to_dict(self) -> dict:
        return {"variant": self.variant, **self.params()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        variant = d.pop("variant").lower()
        return cls(variant, **d).validate()


def jump_moments(spec: ModelSpec) -> tuple[float, float, float]:
    """Intensity-weighted raw moments M2, M3, M4 of the log jump sizes."""
    y_up, y_dn = math.log(spec.j_up), math.log(spec.j_down)
    return tuple(spec.lam_up * y_up ** k + spec.lam_down * y_dn ** k for k in (2, 3, 4))


def merton_to_heston(merton: ModelSpec) -> ModelSpec:
    """Short-maturity cumulant match of a two-sided Merton model onto Heston.

    v0 = theta = sigma^2 + M2, kappa = max(lambda, 2),
    eta = min(0.95 sqrt(2 kappa theta), sqrt(2/3 M4 / v0^2)),
    rho = (2/3) M3 / (eta v0^1.5) clamped to [-1, 1] (0 when eta == 0).
    """
    merton.validate()
    if merton.variant != MERTON:
        raise DomainError(f"expected a Merton spec, got {merton.variant}")
    m2, m3, m4 = jump_moments(merton)
    v0 = merton.sigma ** 2 + m2
    kappa = max(merton.lam_up + merton.lam_down, 2.0)
    theta = v0
    eta = min(0.95 * math.sqrt(2.0 * kappa * theta), math.sqrt(2.0 / 3.0 * m4 / v0 ** 2))
    if eta > 0.0:
        rho = (2.0 / 3.0) * m3 / (eta * v0 ** 1.5)
        rho = min(1.0, max(-1.0, rho))
    else:
        rho = 0.0
    return ModelSpec.heston(v0=v0, kappa=kappa, theta=theta, rho=rho, eta=eta)


@dataclass
class PathSet:
    levels: np.ndarray          # (N, l + 1); column 0 is S0
    times: np.ndarray           # (l + 1,), times[0] == 0
    spec: ModelSpec
    seed: int
    sampler: str = PSEUDO
    rate: float = 0.0
    dividend: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.levels.shape[0]

    @property
    def n_fixings(self) -> int:
        return self.levels.shape[1] - 1

    @property
    def s0(self) -> float:
        return float(self.levels[0, 0])

    def forward(self, t: float) -> float:
        return self.s0 * math.exp((self.rate - self.dividend) * t)

    def discount(self, t: float) -> float:
        return math.exp(-self.rate * t)

    def time_index(self, t: float, tol: float = 1e-12) -> int:
        hits = np.flatnonzero(np.abs(self.times - t) <= tol)
        if hits.size == 0:
            raise DomainError(f"time {t} is not on the fixing grid")
        return int(hits[0])

    def permuted(self, perm: np.ndarray) -> "PathSet":
        return PathSet(self.levels[perm], self.times, self.spec, self.seed, self.sampler,
                       self.rate, self.dividend, dict(self.meta, permuted=True))

    def subset(self, rows) -> "PathSet":
        return PathSet(self.levels[rows], self.times, self.spec, self.seed, self.sampler,
                       self.rate, self.dividend, dict(self.meta))

    # --- persistence -------------------------------------------------------
    def save(self, path: str | Path) -> tuple[Path, Path]:
        path = Path(path)
        tag = self.spec.tag.encode("ascii")[:8].ljust(8, b"\x00")
        header = _HEADER.pack(_MAGIC, _VERSION, self.n_paths, self.n_fixings,
                              self.s0, int(self.seed), tag)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.levels, dtype="<f8").tobytes())
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps({
            "spec": self.spec.to_dict(),
            "times": self.times.tolist(),
            "seed": int(self.seed),
            "sampler": self.sampler,
            "rate": self.rate,
            "dividend": self.dividend,
            "meta": self.meta,
        }, indent=2, sort_keys=True))
        return path, sidecar

    @classmethod
    def load(cls, path: str | Path) -> "PathSet":
        path = Path(path)
        raw = path.read_bytes()
        magic, version, n, l, s0, seed, tag = _HEADER.unpack_from(raw, 0)
        if magic != _MAGIC:
            raise DomainError(f"{path} is not a path-set file")
        if version != _VERSION:
            raise DomainError(f"unsupported path-set version {version}")
        levels = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size, count=n * (l + 1))
        levels = levels.reshape(n, l + 1).copy()
        side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        spec = ModelSpec.from_dict(side["spec"])
        if spec.tag.encode("ascii")[:8].ljust(8, b"\x00") != tag:
            raise DomainError("model tag in header does not match sidecar")
        return cls(levels, np.asarray(side["times"], dtype=float), spec, seed,
                   side["sampler"], side["rate"], side["dividend"], side.get("meta", {}))


# --- generators -----------------------------------------------------------

def _check_grid(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2 or times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise DomainError("fixing grid must be strictly increasing and start at 0")
    return times


def _merton_log_increments(spec, dt, z, u_up, u_dn, drift):
    """Log increments from normals and jump uniforms, shape (n, l)."""
    n_up = poisson.ppf(u_up, spec.lam_up * dt) if spec.lam_up > 0 else 0.0
    n_dn = poisson.ppf(u_dn, spec.lam_down * dt) if spec.lam_down > 0 else 0.0
    return (drift * dt + spec.sigma * np.sqrt(dt) * z
            + n_up * math.log(spec.j_up) + n_dn * math.log(spec.j_down))


def _block_levels(spec, times, n, rng, s0, mu, heston_dt):
    dt = np.diff(times)
    l = dt.size
    if spec.variant == BLACK:
        z = rng.standard_normal((n, l))
        inc = (mu - 0.5 * spec.sigma ** 2) * dt + spec.sigma * np.sqrt(dt) * z
    elif spec.variant == MERTON:
        comp = spec.lam_up * (spec.j_up - 1.0) + spec.lam_down * (spec.j_down - 1.0)
        drift = mu - 0.5 * spec.sigma ** 2 - comp
        z = rng.standard_normal((n, l))
        n_up = rng.poisson(spec.lam_up * dt, size=(n, l))
        n_dn = rng.poisson(spec.lam_down * dt, size=(n, l))
        inc = (drift * dt + spec.sigma * np.sqrt(dt) * z
               + n_up * math.log(spec.j_up) + n_dn * math.log(spec.j_down))
    else:
        inc = _heston_increments(spec, dt, n, rng, mu, heston_dt)
    out = np.empty((n, l + 1))
    out[:, 0] = s0
    out[:, 1:] = s0 * np.exp(np.cumsum(inc, axis=1))
    return out


def _heston_increments(spec, dt, n, rng, mu, heston_dt):
    """Full-truncation Euler on variance, log-Euler on the asset."""
    inc = np.zeros((n, dt.size))
    v = np.full(n, spec.v0)
    rho_c = math.sqrt(max(0.0, 1.0 - spec.rho ** 2))
    for i, step in enumerate(dt):
        k = max(1, int(math.ceil(step / heston_dt - 1e-9)))
        h = step / k
        sq = math.sqrt(h)
        acc = np.zeros(n)
        for _ in range(k):
            z = rng.standard_normal((2, n))
            vp = np.maximum(v, 0.0)
            sv = np.sqrt(vp)
            z1 = z[0]
            z2 = spec.rho * z1 + rho_c * z[1]
            acc += (mu - 0.5 * vp) * h + sv * sq * z1
            v = v + spec.kappa * (spec.theta - vp) * h + spec.eta * sv * sq * z2
        inc[:, i] = acc
    return inc


def _sobol_levels(spec, times, n, seed, s0, mu):
    dt = np.diff(times)
    l = dt.size
    per_step = 1 if spec.variant == BLACK else 3
    dim = per_step * l
    if dim > 21201:
        raise DomainError(f"Sobol dimension {dim} exceeds the supported 21201")
    engine = qmc.Sobol(d=dim, scramble=True, seed=np.random.default_rng(seed))
    m = int(math.ceil(math.log2(max(n, 2))))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        u = engine.random_base2(m)[:n] if (1 << m) == n else engine.random(n)
    u = np.clip(u, 1e-16, 1.0 - 1e-16).reshape(n, l, per_step)
    z = ndtri(u[..., 0])
    if spec.variant == BLACK:
        inc = (mu - 0.5 * spec.sigma ** 2) * dt + spec.sigma * np.sqrt(dt) * z
    else:
        comp = spec.lam_up * (spec.j_up - 1.0) + spec.lam_down * (spec.j_down - 1.0)
        inc = _merton_log_increments(spec, dt, z, u[..., 1], u[..., 2],
                                     mu - 0.5 * spec.sigma ** 2 - comp)
    out = np.empty((n, l + 1))
    out[:, 0] = s0
    out[:, 1:] = s0 * np.exp(np.cumsum(inc, axis=1))
    return out


def generate_paths(spec: ModelSpec, times, n_paths: int, seed: int, sampler: str = PSEUDO,
                   *, s0: float = 100.0, rate: float = 0.0, dividend: float = 0.0,
                   heston_dt: float = HESTON_DT, threads: int = 1) -> PathSet:
    """Simulate ``n_paths`` risk-neutral paths on the fixing grid ``times``.

    Pseudo-random paths are produced in fixed blocks of ``BLOCK_SIZE`` rows,
    each from its own child of ``SeedSequence(seed)``, so the output does not
    depend on ``threads``. The low-discrepancy sampler is a scrambled Sobol
    sequence (Black and Merton only).
    """
    spec.validate()
    times = _check_grid(times)
    if n_paths < 2:
        raise DomainError("need at least two paths")
    if s0 <= 0:
        raise DomainError("s0 must be positive")
    mu = rate - dividend
    if sampler == SOBOL:
        if spec.variant == HESTON:
            raise DomainError("the low-discrepancy sampler is restricted to Black and Merton paths")
        levels = _sobol_levels(spec, times, n_paths, seed, s0, mu)
    elif sampler == PSEUDO:
        n_blocks = -(-n_paths // BLOCK_SIZE)
        children = np.random.SeedSequence(seed).spawn(n_blocks)
        sizes = [min(BLOCK_SIZE, n_paths - b * BLOCK_SIZE) for b in range(n_blocks)]

        def work(b):
            return _block_levels(spec, times, sizes[b], np.random.default_rng(children[b]),
                                 s0, mu, heston_dt)

        if threads > 1 and n_blocks > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(work, range(n_blocks)))
        else:
            parts = [work(b) for b in range(n_blocks)]
        levels = np.vstack(parts)
    else:
        raise DomainError(f"unknown sampler {sampler!r}")
    return PathSet(levels, times, spec, int(seed), sampler, rate, dividend,
                   {"heston_dt": heston_dt} if spec.variant == HESTON else {})


def monthly_grid(n_fixings: int, dt: float = 1.0 / 12.0) -> np.ndarray:
    return dt * np.arange(n_fixings + 1)


# Parameter sets of the reference experiments.
MERTON_SET1 = ModelSpec.merton(sigma=0.20, lam_up=0.10, j_up=1.30, lam_down=0.40, j_down=0.70)
MERTON_SET2 = ModelSpec.merton(sigma=0.20, lam_up=0.075, j_up=1.15, lam_down=0.30, j_down=0.85)
HESTON_SET1 = ModelSpec.heston(v0=0.09777, kappa=2.0, theta=0.09777, rho=-0.59993, eta=0.5941)
HESTON_SET2 = ModelSpec.heston(v0=0.04939, kappa=2.0, theta=0.04939, rho=-0.25797, eta=0.255)
BLACK_SET = ModelSpec.black(0.20)
