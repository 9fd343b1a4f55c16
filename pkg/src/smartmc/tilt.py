"""Joint Heston-parameter tilt and path reweighting as one second-order cone program."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .errors import DomainError, SolverError
from .paths import HESTON, ModelSpec, generate_paths

PARAMS = ("v0", "kappa", "theta", "rho", "eta")
ETA_CAP = 0.95
_FLOOR = 1e-6


def _vec(spec: ModelSpec) -> np.ndarray:
    return np.array([getattr(spec, k) for k in PARAMS], dtype=float)


def _spec(vec) -> ModelSpec:
    return ModelSpec.heston(*map(float, vec))


def admissible(vec, tol: float = 0.0) -> bool:
    v0, kappa, theta, rho, eta = vec
    return (v0 >= _FLOOR - tol and kappa >= _FLOOR - tol and theta >= _FLOOR - tol and eta >= -tol
            and -1 - tol <= rho <= 1 + tol
            and eta ** 2 <= ETA_CAP ** 2 * 2 * kappa * theta * (1 + tol) + tol)


@dataclass
class TiltResult:
    theta: ModelSpec
    delta: np.ndarray
    w: np.ndarray
    z: np.ndarray
    residual: float
    T: np.ndarray | None
    bumps: np.ndarray | None
    status: str


def tilt_socp(T, theta0, X=None, targets=None, *, tol: float = 1e-9) -> TiltResult:
    """min ||z - T d||  s.t.  1'z = 0, z >= -1, theta0 + d admissible,
    and (optionally) X'(1 + z)/N = targets.

    The admissible set is the positivity box with rho in [-1, 1] plus the
    vol-of-vol cap eta^2 <= 0.95^2 * 2 kappa theta, written as a rotated cone.
    """
    T = np.asarray(T, dtype=float)
    n = T.shape[0]
    th0 = _vec(theta0) if isinstance(theta0, ModelSpec) else np.asarray(theta0, dtype=float)
    if not admissible(th0, 1e-12):
        raise DomainError(f"starting parameters {th0} are not admissible")
    z = cp.Variable(n)
    d = cp.Variable(T.shape[1])
    th = th0 + d
    c = ETA_CAP ** 2 * 2
    cons = [cp.sum(z) == 0, z >= -1,
            th[0] >= _FLOOR, th[1] >= _FLOOR, th[2] >= _FLOOR, th[3] >= -1, th[3] <= 1, th[4] >= 0,
            cp.SOC(c * th[1] + th[2], cp.hstack([2 * th[4], c * th[1] - th[2]]))]
    if X is not None:
        X = np.asarray(X, dtype=float)
        cons.append(X.T @ (1 + z) / n == np.asarray(targets, dtype=float))
    prob = cp.Problem(cp.Minimize(cp.norm(z - T @ d, 2)), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise SolverError(f"tilt problem ended with status {prob.status}")
    dz = np.asarray(z.value)
    dd = np.asarray(d.value)
    return TiltResult(_spec(th0 + dd), dd, (1 + dz) / n, dz, float(prob.value), T, None, prob.status)


def tilt_matrix(theta0: ModelSpec, h, payoff, times, n_paths: int, seed: int, *, s0: float = 100.0,
                heston_dt: float = 1.0 / 365.0):
    """One-sided bump tilts with common random numbers.

    Returns ``(T, bumps, p0)``. A bump that leaves the admissible domain is
    halved until it fits, with a warning.
    """
    th0 = _vec(theta0)
    h = np.broadcast_to(np.asarray(h, dtype=float), (5,)).copy()
    if np.any(h <= 0):
        raise DomainError("bump sizes must be positive")
    base = generate_paths(theta0, times, n_paths, seed, s0=s0, heston_dt=heston_dt)
    p0 = np.asarray(payoff(base), dtype=float)
    T = np.empty((n_paths, 5))
    for q in range(5):
        hq = h[q]
        for _ in range(60):
            th = th0.copy()
            th[q] += hq
            if admissible(th):
                break
            hq *= 0.5
        else:
            raise DomainError(f"cannot find an admissible bump for {PARAMS[q]}")
        if hq != h[q]:
            warnings.warn(f"bump for {PARAMS[q]} shrunk from {h[q]:.3g} to {hq:.3g}", RuntimeWarning,
                          stacklevel=2)
            h[q] = hq
        bumped = generate_paths(_spec(th), times, n_paths, seed, s0=s0, heston_dt=heston_dt)
        T[:, q] = (np.asarray(payoff(bumped), dtype=float) - p0) / hq
    return T, h, p0


def heston_tilt_socp(theta0: ModelSpec, h, payoff, times, n_paths: int, seed: int, *,
                     X=None, targets=None, s0: float = 100.0) -> TiltResult:
    """Tilt matrix from bumped Heston simulations, then :func:`tilt_socp`."""
    if theta0.variant != HESTON:
        raise DomainError("heston_tilt_socp needs Heston parameters")
    theta0.validate()
    T, bumps, _ = tilt_matrix(theta0, h, payoff, times, n_paths, seed, s0=s0)
    res = tilt_socp(T, theta0, X, targets)
    res.bumps = bumps
    return res
