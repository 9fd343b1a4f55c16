"""Generator-equivalence and consistency diagnostics."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .black import implied_vol
from .calibrator import CalibratedModel, CalibrationData, calibrate
from .conic import CalibrationSpec
from .constraints import LAMBDA, mass_split_block
from .errors import DomainError, NoSolutionError
from .paths import PathSet
from .payoffs import PayoffMatrix, payoff_matrix


@dataclass
class DiagnosticReport:
    test: str
    inputs_digest: str
    statistic: float
    threshold: float
    verdict: bool
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
    return h.hexdigest()[:16]


# --- span projectors ------------------------------------------------------

@dataclass
class SpanProjector:
    basis: np.ndarray            # (m, r) orthonormal
    rank: int
    singular_values: np.ndarray
    tol: float

    @property
    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.T


def span_projector(X, rank_tol: float = 1e-10) -> SpanProjector:
    """Orthogonal projector onto the row span of X in instrument space (m x m)."""
    A = X.X if isinstance(X, PayoffMatrix) else np.asarray(X, dtype=float)
    if A.ndim != 2 or A.shape[1] < 1:
        raise DomainError("payoff matrix must have at least one column")
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    smax = s[0] if s.size else 0.0
    r = int(np.sum(s > rank_tol * smax)) if smax > 0 else 0
    return SpanProjector(vt[:r].T.copy(), r, s, rank_tol)


def projector_distance(pa: SpanProjector, pb: SpanProjector, eps: float = 0.05):
    """Frobenius distance and the interchangeability verdict at ``eps``."""
    a, b = pa.matrix, pb.matrix
    if a.shape != b.shape:
        raise DomainError(f"projector dimensions differ: {a.shape} vs {b.shape}")
    d = float(np.linalg.norm(a - b, "fro"))
    return d, d < eps


# --- mass splitting --------------------------------------------------------

@dataclass
class MassSplitResult:
    lam: float
    model: CalibratedModel
    n_a: int
    n_b: int


def pooled_paths(a: PathSet, b: PathSet) -> PathSet:
    if a.times.shape != b.times.shape or np.any(a.times != b.times):
        raise DomainError("path sets live on different fixing grids")
    return PathSet(np.vstack([a.levels, b.levels]), a.times, a.spec, a.seed, a.sampler, a.rate,
                   a.dividend, {"pooled": [a.spec.to_dict(), b.spec.to_dict()]})


def mass_split_test(paths_a: PathSet, paths_b: PathSet, instruments, targets, spec: CalibrationSpec,
                    *, pin: float | None = None, fwd_instruments=(), backend=None) -> MassSplitResult:
    """Pooled calibration reporting lambda, the total weight on batch A."""
    pool = pooled_paths(paths_a, paths_b)
    instruments = list(instruments)
    fwd = list(fwd_instruments)
    X = payoff_matrix(pool, instruments + fwd)
    n_a = paths_a.n_paths
    block = mass_split_block(pool.n_paths, np.arange(n_a), pin)
    data = CalibrationData(X, np.arange(len(instruments)), targets,
                           np.arange(len(instruments), len(instruments) + len(fwd)),
                           extra_blocks=[block], extras=(LAMBDA,))
    model = calibrate(data, spec, backend=backend)
    lam = float(np.sum(model.w[:n_a]))
    return MassSplitResult(lam, model, n_a, paths_b.n_paths)


# --- spot limit ------------------------------------------------------------

@dataclass
class SpotLimitRow:
    t1: float
    max_error: float
    errors: np.ndarray
    fwd_vols: np.ndarray
    spot_vols: np.ndarray


def _iv(price, k, tau):
    try:
        return implied_vol(price, 1.0, k, tau)
    except NoSolutionError:
        return math.nan


def spot_limit_check(paths: PathSet, t1_values, t2: float, ratios, w=None) -> list[SpotLimitRow]:
    """Forward smile (t1 -> t2) against the spot smile (0 -> t2), per t1.

    Prices use normalised payoffs so both smiles live on a unit forward; ``w``
    defaults to uniform weights. Rates are taken as zero.
    """
    n = paths.n_paths
    w = np.full(n, 1.0 / n) if w is None else np.asarray(w, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    i2 = paths.time_index(t2)
    s2 = paths.levels[:, i2]
    spot = np.array([_iv(w @ np.maximum(s2 / paths.s0 - k, 0.0), k, t2) for k in ratios])
    rows = []
    for t1 in t1_values:
        i1 = paths.time_index(t1)
        if i1 >= i2:
            raise DomainError("forward start must precede t2")
        r = s2 / paths.levels[:, i1]
        fwd = np.array([_iv(w @ np.maximum(r - k, 0.0), k, t2 - t1) for k in ratios])
        err = np.abs(fwd - spot)
        rows.append(SpotLimitRow(float(t1), float(np.nanmax(err)), err, fwd, spot))
    return rows


def count_inversions(values) -> int:
    """Number of adjacent increases in a sequence expected to be non-increasing."""
    v = np.asarray(values, dtype=float)
    return int(np.sum(np.diff(v) > 0))


# --- pooling ---------------------------------------------------------------

@dataclass
class PooledSample:
    weights: np.ndarray          # concatenated, each block scaled by 1/M
    seeds: list
    sizes: list
    sources: list = field(repr=False, default_factory=list)

    @property
    def n_replications(self) -> int:
        return len(self.seeds)

    def price(self, payoff) -> float:
        """Pooled price of ``payoff`` (a function of a PathSet, or a concatenated vector)."""
        if callable(payoff):
            vec = np.concatenate([np.asarray(payoff(s), dtype=float) for s in self.sources])
        else:
            vec = np.asarray(payoff, dtype=float)
        return float(self.weights @ vec)


def pool_replications(entries) -> PooledSample:
    """Concatenate independent calibrations ``(seed, w, source)`` into one sample of size M N."""
    entries = list(entries)
    if not entries:
        raise DomainError("nothing to pool")
    m = len(entries)
    ref = entries[0][2]
    for _, w, src in entries:
        if isinstance(ref, PayoffMatrix):
            if not isinstance(src, PayoffMatrix) or src.labels != ref.labels:
                raise DomainError("replications do not share the same instrument set")
        elif isinstance(ref, PathSet):
            if not isinstance(src, PathSet) or src.times.shape != ref.times.shape \
                    or np.any(src.times != ref.times):
                raise DomainError("replications do not share the same fixing grid")
        n = src.shape[0] if isinstance(src, PayoffMatrix) else src.n_paths
        if np.shape(w) != (n,):
            raise DomainError("weight vector does not match its replication")
    weights = np.concatenate([np.asarray(w, dtype=float) / m for _, w, _ in entries])
    return PooledSample(weights, [s for s, _, _ in entries], [len(w) for _, w, _ in entries],
                        [src for _, _, src in entries])


def permuted_data(data: CalibrationData, perm) -> CalibrationData:
    """The same calibration problem with its paths reordered as ``perm``.

    Payoff rows and the weight columns of any extra blocks move together, so
    the optimum of the copy is the permuted optimum of the original.
    """
    perm = np.asarray(perm, dtype=int)
    n = data.n_paths
    if perm.shape != (n,) or np.any(np.sort(perm) != np.arange(n)):
        raise DomainError("perm must be a permutation of the path indices")
    X = data.X
    Xp = PayoffMatrix(np.asfortranarray(X.X[perm]), X.instruments, X.discounts, X.times)
    blocks = []
    for b in data.extra_blocks:
        coef = dict(b.coef)
        if "w" in coef:
            coef["w"] = coef["w"][:, perm]
        blocks.append(type(b)(b.name, b.kinds, b.rhs, b.labels, coef))
    return replace(data, X=Xp, extra_blocks=blocks)


def stability_report(model_a: CalibratedModel, model_b: CalibratedModel, perm=None,
                     threshold: float = 1e-8) -> DiagnosticReport:
    """Max-norm gap between two calibrations, optionally aligning rows by ``perm``."""
    wb = model_b.w if perm is None else model_b.w[np.argsort(perm)]
    gap = max(float(np.max(np.abs(model_a.w - wb))),
              float(np.nanmax(np.abs(model_a.sigma - model_b.sigma))) if model_a.sigma.size else 0.0)
    return DiagnosticReport("stability", digest(model_a.w, model_b.w), gap, threshold, gap <= threshold)
