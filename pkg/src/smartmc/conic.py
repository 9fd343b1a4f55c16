"""Conic assembly and solve for the calibration regimes and min/max pricing.

Problems are kept in a small intermediate form (linear term, squared-norm
terms, optional log barrier on w, stacked linear blocks) and lowered to the
standard conic form ``min 1/2 x'Px + q'x  s.t.  b - Ax in K`` on demand.
Backends:

* ``clarabel``: interior point, exponential cones for the barrier.
* ``highs``: dual simplex for pure linear programs (vertex solutions).
* ``dense``: a small primal-dual interior-point method written against numpy,
  handling the barrier directly through damped Newton steps. Intended for test
  sized instances and for running without compiled solvers.
"""

from __future__ import annotations

import math
import os
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .constraints import EQ, LAMBDA, Layout, LinearBlock, stack
from .errors import DomainError, InfeasibleError, SolverError


class Regime(str, Enum):
    MIN_MAX_ONLY = "MIN_MAX_ONLY"
    MIN_VAR_VOL = "MIN_VAR_VOL"
    MIN_ALL_VARIANCES = "MIN_ALL_VARIANCES"

    @classmethod
    def parse(cls, value) -> "Regime":
        if isinstance(value, cls):
            return value
        aliases = {"minmax": cls.MIN_MAX_ONLY, "raw": cls.MIN_MAX_ONLY,
                   "minvarvol": cls.MIN_VAR_VOL, "joint": cls.MIN_ALL_VARIANCES}
        key = str(value).strip()
        if key.lower() in aliases:
            return aliases[key.lower()]
        try:
            return cls(key.upper())
        except ValueError:
            raise DomainError(f"unknown regime {value!r}") from None


@dataclass
class CalibrationSpec:
    """Regime, penalty weights, barrier, tolerances and loop controls.

    Dispersion terms are normalised so the coefficients do not scale with the
    problem size: the weight term is ``alpha * mean((N w - 1)^2)``, the
    proximal term ``beta * mean((sigma - sigma_prev)^2)`` and the smile term
    ``lambda_sigma * Var(sigma - reference)`` where the reference is
    ``sigma_prev`` (``vol_reference="prev"``) or zero (``"flat"``). With
    ``"static"`` the smile term becomes ``lambda_sigma * mean((sigma - s)^2)``
    for market static forward vols ``s``, which fixes the level as well.
    """

    regime: Regime = Regime.MIN_ALL_VARIANCES
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    lambda_sigma: float = 1.0
    mu: float = 0.0
    q: float = 10.0
    vol_reference: str = "prev"
    replication: str = "hard"           # "hard" or "slack"
    anchor_slack_se: float = 3.0
    conserve_forward_variance: bool = False
    shape_rows_under_hard: bool = False
    barrier_impl: str = "exp_cone"      # "exp_cone" or "newton"
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    eps_price: float = 1e-6
    eps_sigma: float = 1e-5
    max_sweeps: int = 20
    damping: float = 1.0
    vega_floor: float = 1e-6
    backend: str | None = None

    def __post_init__(self):
        self.regime = Regime.parse(self.regime)
        for name in ("alpha", "beta", "gamma", "lambda_sigma", "mu"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise DomainError(f"{name} must be finite and non-negative, got {v}")
        if not self.q > 1:
            raise DomainError(f"barrier width q must exceed 1, got {self.q}")
        if self.vol_reference not in ("prev", "flat", "static"):
            raise DomainError("vol_reference must be 'prev', 'flat' or 'static'")
        if self.replication not in ("hard", "slack"):
            raise DomainError("replication must be 'hard' or 'slack'")
        if self.barrier_impl not in ("exp_cone", "newton"):
            raise DomainError("barrier_impl must be 'exp_cone' or 'newton'")
        if not 0 < self.damping <= 1:
            raise DomainError("damping must lie in (0, 1]")

    @property
    def barrier_on(self) -> bool:
        return self.regime != Regime.MIN_ALL_VARIANCES and self.mu > 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["regime"] = self.regime.value
        return d


@dataclass
class QuadTerm:
    """weight * ||D x - d||^2 over the layout coordinates."""

    name: str
    D: sp.csr_matrix
    d: np.ndarray
    weight: float

    def value(self, x) -> float:
        r = self.D @ x - self.d
        return float(self.weight * np.dot(r, r))


@dataclass
class ConicProblem:
    layout: Layout
    blocks: list
    c: np.ndarray
    quad: list = field(default_factory=list)
    barrier: tuple | None = None        # (mu, q)
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    barrier_impl: str = "exp_cone"

    def __post_init__(self):
        n = self.layout.size
        if self.c.shape != (n,):
            raise DomainError(f"linear objective has length {self.c.shape}, layout has {n}")
        for t in self.quad:
            if t.D.shape[1] != n:
                raise DomainError(f"objective term {t.name} does not match the layout")
        for b in self.blocks:
            b.matrix(self.layout)          # raises on inconsistent groups

    @property
    def is_lp(self) -> bool:
        return not self.quad and self.barrier is None

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        val = float(self.c @ x) + sum(t.value(x) for t in self.quad)
        if self.barrier is not None:
            mu, q = self.barrier
            n = self.layout.n_w
            w = x[: n]
            with np.errstate(divide="ignore", invalid="ignore"):
                val += -mu / n * float(np.sum(np.log(w) + np.log(q / n - w)))
        return val

    def linear_system(self):
        return stack(self.blocks, self.layout)

    def labels(self) -> list[str]:
        return [lab for b in self.blocks for lab in b.labels]

    def standard_form(self) -> "StandardForm":
        return _lower(self)


@dataclass
class Solution:
    status: str                      # optimal, infeasible, unbounded, max_iter, numerical
    x: np.ndarray
    layout: Layout
    objective: float
    primal_residual: float
    dual_residual: float
    solve_time: float
    iterations: int = 0
    backend: str = ""

    @property
    def w(self) -> np.ndarray:
        return self.x[self.layout.slice("w")]

    @property
    def sigma(self) -> np.ndarray:
        return self.x[self.layout.slice("sigma")] if self.layout.n_nodes else np.zeros(0)

    @property
    def v(self) -> np.ndarray:
        return self.x[self.layout.slice("v")] if self.layout.n_nodes else np.zeros(0)

    def extra(self, name: str) -> float:
        return float(self.x[self.layout.offset(name)])

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


# --- assembly -------------------------------------------------------------

def _selector(layout: Layout, group: str, rows=None) -> sp.csr_matrix:
    n = layout.group_size(group)
    idx = np.arange(n) if rows is None else np.asarray(rows)
    off = layout.offset(group)
    return sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), off + idx)),
                         shape=(idx.size, layout.size))


def assemble(spec: CalibrationSpec, blocks, layout: Layout, *, linear: dict | None = None,
             lin=None, market=None, w_ref=None, vol_target=None) -> ConicProblem:
    """Build the conic problem for ``spec.regime``.

    ``linear`` maps coordinate groups to linear objective coefficients (for
    instance ``{"w": F}``). ``lin`` is the current forward-vol linearisation
    (needed for the proximal and smile terms). ``market`` is ``(X_cols, targets)``
    feeding the market-fit term in slack mode. ``w_ref`` overrides the
    barycentre 1/N of the weight-dispersion term. ``vol_target`` holds the
    static forward vols of the retained nodes for ``vol_reference="static"``.
    """
    n = layout.n_w
    c = np.zeros(layout.size)
    for g, vec in (linear or {}).items():
        c[layout.slice(g)] += np.asarray(vec, dtype=float)
    quad = []
    regime = spec.regime
    if regime == Regime.MIN_ALL_VARIANCES and spec.alpha > 0:
        ref = np.full(n, 1.0 / n) if w_ref is None else np.asarray(w_ref, dtype=float)
        # alpha * mean((N w - 1)^2) == alpha * N * ||w - 1/N||^2
        quad.append(QuadTerm("weights", math.sqrt(n) * _selector(layout, "w"), math.sqrt(n) * ref,
                             spec.alpha))
    if regime != Regime.MIN_MAX_ONLY and layout.n_nodes:
        q = layout.n_nodes
        if lin is None:
            raise DomainError("forward-vol penalty terms need the current linearisation")
        s_prev = lin.sigma_prev[lin.slots()]
        if spec.beta > 0:
            quad.append(QuadTerm("proximal", _selector(layout, "sigma") / math.sqrt(q),
                                 s_prev / math.sqrt(q), spec.beta))
        if spec.lambda_sigma > 0 and spec.vol_reference == "static":
            if vol_target is None or np.shape(vol_target) != (q,):
                raise DomainError("static vol reference needs one target per retained node")
            quad.append(QuadTerm("smile", _selector(layout, "sigma") / math.sqrt(q),
                                 np.asarray(vol_target, dtype=float) / math.sqrt(q), spec.lambda_sigma))
        elif spec.lambda_sigma > 0 and q > 1:
            ref = s_prev if spec.vol_reference == "prev" else np.zeros(q)
            B = (np.eye(q) - np.full((q, q), 1.0 / q)) / math.sqrt(q)
            D = sp.csr_matrix(B) @ _selector(layout, "sigma")
            quad.append(QuadTerm("smile", sp.csr_matrix(D), B @ ref, spec.lambda_sigma))
    if spec.replication == "slack" and spec.gamma > 0 and market is not None:
        Xc, targets = market
        D = sp.hstack([sp.csr_matrix(np.asarray(Xc).T),
                       sp.csr_matrix((np.shape(Xc)[1], layout.size - n))], format="csr")
        quad.append(QuadTerm("market_fit", D, np.asarray(targets, dtype=float), spec.gamma))
    barrier = (spec.mu, spec.q) if spec.barrier_on else None
    return ConicProblem(layout, list(blocks), c, quad, barrier, spec.feas_tol, spec.gap_tol,
                        spec.max_iter, spec.barrier_impl)


# --- standard conic form --------------------------------------------------

@dataclass
class StandardForm:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: list                       # [("zero", k), ("nonneg", k), ("exp", 3) ...]
    n_layout: int
    const: float = 0.0

    def dump(self) -> str:
        """Plain-text dump: objective, cone list, triplet matrices."""
        out = [f"n {self.P.shape[0]}", f"m {self.A.shape[0]}", f"const {self.const!r}",
               "cones " + " ".join(f"{k}:{d}" for k, d in _merge_cones(self.cones))]
        P = sp.triu(self.P).tocoo()
        out.append(f"P {P.nnz}")
        out += [f"{i} {j} {v!r}" for i, j, v in zip(P.row, P.col, P.data)]
        qn = np.flatnonzero(self.q)
        out.append(f"q {qn.size}")
        out += [f"{i} {self.q[i]!r}" for i in qn]
        A = self.A.tocoo()
        out.append(f"A {A.nnz}")
        out += [f"{i} {j} {v!r}" for i, j, v in zip(A.row, A.col, A.data)]
        bn = np.flatnonzero(self.b)
        out.append(f"b {bn.size}")
        out += [f"{i} {self.b[i]!r}" for i in bn]
        return "\n".join(out) + "\n"


def _merge_cones(cones):
    out = []
    for k, d in cones:
        if out and out[-1][0] == k and k in ("zero", "nonneg"):
            out[-1] = (k, out[-1][1] + d)
        else:
            out.append((k, d))
    return out


def _diag_term(t: QuadTerm):
    """(cols, coef) if every row of D has one entry and columns are distinct."""
    D = t.D.tocsr()
    if np.any(np.diff(D.indptr) != 1):
        return None
    cols = D.indices
    if np.unique(cols).size != cols.size:
        return None
    return cols, D.data


def _lower(p: ConicProblem) -> StandardForm:
    n0 = p.layout.size
    A_eq, b_eq, _, A_ge, b_ge, _ = p.linear_system()
    Pd = np.zeros(n0)
    qv = p.c.copy()
    const = 0.0
    aux_rows, aux_rhs, aux_w = [], [], []
    n_aux = 0
    for t in p.quad:
        dg = _diag_term(t)
        if dg is not None:
            cols, a = dg
            Pd[cols] += 2 * t.weight * a * a
            qv[cols] += -2 * t.weight * a * t.d
            const += t.weight * float(t.d @ t.d)
        else:
            k = t.D.shape[0]
            aux_rows.append((t.D, n_aux, k))
            aux_rhs.append(t.d)
            aux_w.append(np.full(k, 2 * t.weight))
            n_aux += k
    n_bar = 2 * p.layout.n_w if p.barrier is not None else 0
    n = n0 + n_aux + n_bar
    P = sp.diags(np.r_[Pd, np.concatenate(aux_w) if aux_w else np.zeros(0), np.zeros(n_bar)],
                 format="csc")
    q = np.r_[qv, np.zeros(n_aux + n_bar)]

    def widen(M):
        return sp.hstack([M, sp.csr_matrix((M.shape[0], n - n0))], format="csr")

    rows, rhs, cones = [], [], []
    eq_blocks = [widen(A_eq)] if A_eq.shape[0] else []
    eq_rhs = [b_eq] if A_eq.shape[0] else []
    for (D, off, k), d in zip(aux_rows, aux_rhs):
        R = sp.hstack([D, sp.csr_matrix((k, n - n0))], format="lil")
        R[:, n0 + off: n0 + off + k] = -sp.identity(k)
        eq_blocks.append(R.tocsr())
        eq_rhs.append(d)
    if eq_blocks:
        E = sp.vstack(eq_blocks, format="csr")
        rows.append(E)
        rhs.append(np.concatenate(eq_rhs))
        cones.append(("zero", E.shape[0]))
    if A_ge.shape[0]:
        rows.append(-widen(A_ge))
        rhs.append(-b_ge)
        cones.append(("nonneg", A_ge.shape[0]))
    if p.barrier is not None:
        mu, qw = p.barrier
        nw = p.layout.n_w
        ub = qw / nw
        t0 = n0 + n_aux
        q[t0: t0 + 2 * nw] = -mu / nw
        # (t_i, 1, w_i) and (u_i, 1, ub - w_i) in the exponential cone
        r_idx, c_idx, vals, bb = [], [], [], []
        r = 0
        for i in range(nw):
            r_idx += [r, r + 2]; c_idx += [t0 + i, i]; vals += [-1.0, -1.0]
            bb += [0.0, 1.0, 0.0]
            r += 3
            r_idx += [r, r + 2]; c_idx += [t0 + nw + i, i]; vals += [-1.0, 1.0]
            bb += [0.0, 1.0, ub]
            r += 3
        rows.append(sp.csr_matrix((vals, (r_idx, c_idx)), shape=(r, n)))
        rhs.append(np.array(bb))
        cones += [("exp", 3)] * (2 * nw)
    A = sp.vstack(rows, format="csc") if rows else sp.csc_matrix((0, n))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    return StandardForm(P, q, A, b, cones, n0, const)


# --- backends -------------------------------------------------------------

BACKENDS = ("auto", "clarabel", "highs", "dense")


def resolve_backend(problem: ConicProblem, name: str | None = None) -> str:
    name = (name or os.environ.get("SMARTMC_SOLVER") or "auto").lower()
    if name not in BACKENDS:
        raise DomainError(f"unknown solver backend {name!r}; choose from {BACKENDS}")
    if name == "auto":
        if problem.barrier is not None and problem.barrier_impl == "newton":
            return "dense"
        return "highs" if problem.is_lp else "clarabel"
    if name == "highs" and not problem.is_lp:
        return "clarabel"
    if name == "clarabel" and problem.barrier is not None and problem.barrier_impl == "newton":
        return "dense"
    return name


def _residuals(problem: ConicProblem, x):
    A_eq, b_eq, _, A_ge, b_ge, _ = problem.linear_system()
    eq = float(np.max(np.abs(A_eq @ x - b_eq))) if A_eq.shape[0] else 0.0
    ge = float(np.max(np.maximum(b_ge - A_ge @ x, 0.0))) if A_ge.shape[0] else 0.0
    return eq, ge


def _polish(problem: ConicProblem, x, rounds: int = 6):
    """Tighten equality residuals by least-norm projection, keeping w >= 0.

    Interior-point iterates satisfy the equalities only to the relative
    solver tolerance; a couple of projection/clipping rounds bring the
    absolute residual down to rounding level whenever that is possible.
    """
    A_eq, b_eq, _, A_ge, b_ge, _ = problem.linear_system()
    if A_eq.shape[0] == 0:
        return x
    Ad = A_eq.toarray()
    pinv = np.linalg.pinv(Ad @ Ad.T, rcond=1e-13)
    nw = problem.layout.n_w
    ub = problem.barrier[1] / nw if problem.barrier is not None else np.inf
    best = x
    best_res = max(_residuals(problem, x))
    y = x.copy()
    for _ in range(rounds):
        r = Ad @ y - b_eq
        y = y - Ad.T @ (pinv @ r)
        w = y[:nw]
        if problem.barrier is not None:
            if np.any(w <= 0) or np.any(w >= ub):
                break
        else:
            np.clip(w, 0.0, None, out=w)
        res = max(_residuals(problem, y))
        if res < best_res:
            best, best_res = y.copy(), res
        if res < 1e-15:
            break
    return best


def _finish(problem, x, status, t0, iters, backend, dual_res=math.nan):
    x = np.asarray(x, dtype=float)[: problem.layout.size]
    if status == "optimal":
        x = _polish(problem, x)
    eq, ge = _residuals(problem, x)
    A_eq, b_eq, _, A_ge, b_ge, _ = problem.linear_system()
    scale = 1.0 + max(float(np.max(np.abs(b_eq))) if b_eq.size else 0.0,
                      float(np.max(np.abs(b_ge))) if b_ge.size else 0.0)
    pres = max(eq, ge)
    if status == "optimal" and pres > 10 * problem.feas_tol * scale:
        status = "numerical"
    return Solution(status, x, problem.layout, problem.objective(x),
                    pres, dual_res, time.perf_counter() - t0, iters, backend)


def _solve_clarabel(problem: ConicProblem, t0) -> Solution:
    import clarabel

    sf = problem.standard_form()
    cones = []
    for kind, dim in sf.cones:
        if kind == "zero":
            cones.append(clarabel.ZeroConeT(dim))
        elif kind == "nonneg":
            cones.append(clarabel.NonnegativeConeT(dim))
        else:
            cones.append(clarabel.ExponentialConeT())
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_feas = problem.feas_tol
    settings.tol_gap_abs = problem.gap_tol
    settings.tol_gap_rel = problem.gap_tol
    settings.max_iter = problem.max_iter
    settings.presolve_enable = True
    solver = clarabel.DefaultSolver(sp.triu(sf.P, format="csc"), sf.q, sf.A, sf.b, cones, settings)
    sol = solver.solve()
    st = str(sol.status)
    x = np.array(sol.x)
    if st in ("Solved", "AlmostSolved"):
        status = "optimal"
    elif "PrimalInfeasible" in st:
        status = "infeasible"
    elif "DualInfeasible" in st:
        status = "unbounded"
    elif "MaxIterations" in st or "MaxTime" in st:
        status = "max_iter"
    else:
        status = "numerical"
    dres = math.nan
    if status == "optimal":
        z = np.array(sol.z)
        dres = float(np.max(np.abs(sf.P @ x + sf.q + sf.A.T @ z))) if x.size else 0.0
    return _finish(problem, x, status, t0, int(sol.iterations), "clarabel", dres)


def _solve_highs(problem: ConicProblem, t0) -> Solution:
    from scipy.optimize import linprog

    A_eq, b_eq, _, A_ge, b_ge, _ = problem.linear_system()
    n = problem.layout.size
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    keep = np.ones(A_ge.shape[0], bool)
    G = A_ge.tocsr()
    counts = np.diff(G.indptr)
    for i in np.flatnonzero(counts == 1):
        j, a = G.indices[G.indptr[i]], G.data[G.indptr[i]]
        if a > 0:
            lo[j] = max(lo[j], b_ge[i] / a)
        else:
            hi[j] = min(hi[j], b_ge[i] / a)
        keep[i] = False
    kw = {}
    if keep.any():
        kw["A_ub"] = -G[keep]
        kw["b_ub"] = -b_ge[keep]
    if A_eq.shape[0]:
        kw["A_eq"] = A_eq
        kw["b_eq"] = b_eq
    res = linprog(problem.c, bounds=np.c_[lo, hi], method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10}, **kw)
    status = {0: "optimal", 1: "max_iter", 2: "infeasible", 3: "unbounded"}.get(res.status, "numerical")
    x = res.x if res.x is not None else np.full(n, np.nan)
    return _finish(problem, x, status, t0, int(getattr(res, "nit", 0)), "highs")


def _dense_ipm(problem: ConicProblem, t0, max_iter: int | None = None) -> Solution:
    """Primal-dual interior point for  min 1/2 x'Px + c'x + barrier  s.t.  Ex = e, Gx >= g.

    The optional log barrier on w enters the Newton system through its exact
    gradient and Hessian; steps are damped to keep w strictly inside (0, q/N).
    """
    layout = problem.layout
    n = layout.size
    nw = layout.n_w
    A_eq, e, _, A_ge, g, _ = problem.linear_system()
    E = A_eq.toarray()
    G = A_ge.toarray()
    # squared-norm terms expand to a dense quadratic; fine at test sizes
    P = np.zeros((n, n))
    c = problem.c.copy()
    for t in problem.quad:
        D = t.D.toarray()
        P += 2 * t.weight * D.T @ D
        c -= 2 * t.weight * D.T @ t.d
    tol = min(problem.feas_tol, problem.gap_tol)
    max_iter = max_iter or max(problem.max_iter, 100)
    if E.shape[0]:
        x_ls, *_ = np.linalg.lstsq(E, e, rcond=None)
        if np.max(np.abs(E @ x_ls - e)) > 1e-7 * (1 + np.max(np.abs(e))):
            return _finish(problem, np.full(n, np.nan), "infeasible", t0, 0, "dense")
    bar = problem.barrier
    mu_b = bar[0] / nw if bar else 0.0
    ub = bar[1] / nw if bar else np.inf

    x = np.zeros(n)
    x[:nw] = 1.0 / nw
    if E.shape[0]:
        x = x + np.linalg.lstsq(E, e - E @ x, rcond=None)[0]
        if bar:
            x[:nw] = np.clip(x[:nw], 0.05 * ub, 0.95 * ub)
    mg = G.shape[0]
    s = np.maximum(G @ x - g, 1.0) if mg else np.zeros(0)
    z = np.ones(mg)
    y = np.zeros(E.shape[0])

    def bar_grad_hess(w):
        return -1.0 / w + 1.0 / (ub - w), 1.0 / w ** 2 + 1.0 / (ub - w) ** 2

    def max_step(v, dv):
        neg = dv < 0
        return float(np.min(-v[neg] / dv[neg])) if np.any(neg) else np.inf

    scale_c = 1.0 + np.max(np.abs(c))
    scale_e = 1.0 + (np.max(np.abs(e)) if e.size else 0.0)
    scale_g = 1.0 + (np.max(np.abs(g)) if g.size else 0.0)
    status = "max_iter"
    it = 0
    reg = 1e-11
    for it in range(1, max_iter + 1):
        grad = P @ x + c
        H = P.copy()
        if bar:
            gb, hb = bar_grad_hess(x[:nw])
            grad[:nw] += mu_b * gb
            H[np.arange(nw), np.arange(nw)] += mu_b * hb
        r_d = grad - E.T @ y - G.T @ z
        r_e = E @ x - e
        r_g = G @ x - s - g
        mu = float(s @ z / mg) if mg else 0.0
        # complementarity is held tighter than the residuals so near-active weights land within ~1e-8 of 0
        if (np.max(np.abs(r_d), initial=0) <= tol * scale_c and np.max(np.abs(r_e), initial=0) <= tol * scale_e
                and np.max(np.abs(r_g), initial=0) <= tol * scale_g and mu <= 1e-3 * tol):
            status = "optimal"
            break
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e12:
            status = "unbounded" if np.max(np.abs(r_e), initial=0) < 1e-6 else "infeasible"
            break
        d = z / s if mg else np.zeros(0)
        K = H + G.T @ (d[:, None] * G) + reg * np.eye(n)
        k_e = E.shape[0]
        M = np.block([[K, E.T], [E, -reg * np.eye(k_e)]]) if k_e else K

        def newton(r_c):
            rhs1 = -r_d - G.T @ ((r_c + z * r_g) / s) if mg else -r_d
            rhs = np.r_[rhs1, -r_e] if k_e else rhs1
            try:
                sol = np.linalg.solve(M, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
            dx = sol[:n]
            dy = -sol[n:] if k_e else np.zeros(0)
            if mg:
                ds = G @ dx + r_g
                dz = -(r_c + z * ds) / s
            else:
                ds = dz = np.zeros(0)
            return dx, dy, ds, dz

        def step_len(dx, ds, dz):
            a = min(1.0, max_step(s, ds), max_step(z, dz)) if mg else 1.0
            if bar:
                w = x[:nw]
                a = min(a, max_step(w, dx[:nw]), max_step(ub - w, -dx[:nw]))
            return a

        if mg:
            dx, dy, ds, dz = newton(s * z)
            a_aff = step_len(dx, ds, dz)
            mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz) / mg)
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dx, dy, ds, dz = newton(s * z + ds * dz - sigma * mu)
        else:
            dx, dy, ds, dz = newton(np.zeros(0))
        a = step_len(dx, ds, dz)
        a = min(1.0, 0.99 * a) if a < np.inf else 1.0
        x = x + a * dx
        y = y + a * dy
        if mg:
            s = s + a * ds
            z = z + a * dz
    if status == "max_iter":
        r_e = E @ x - e if E.shape[0] else np.zeros(0)
        r_g = np.minimum(G @ x - g, 0) if mg else np.zeros(0)
        if max(np.max(np.abs(r_e), initial=0), np.max(np.abs(r_g), initial=0)) > 1e-6 * scale_e:
            status = "infeasible"
    grad = P @ x + c
    if bar:
        grad[:nw] += mu_b * bar_grad_hess(x[:nw])[0]
    dres = float(np.max(np.abs(grad - E.T @ y - G.T @ z), initial=0))
    return _finish(problem, x, status, t0, it, "dense", dres)


def solve(problem: ConicProblem, backend: str | None = None) -> Solution:
    """Solve ``problem``; statuses are reported on the Solution, never raised."""
    t0 = time.perf_counter()
    name = resolve_backend(problem, backend)
    try:
        if name == "highs":
            return _solve_highs(problem, t0)
        if name == "dense":
            return _dense_ipm(problem, t0)
        return _solve_clarabel(problem, t0)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        warnings.warn(f"{name} backend failed: {exc}", RuntimeWarning, stacklevel=2)
        n = problem.layout.size
        return Solution("numerical", np.full(n, np.nan), problem.layout, math.nan, math.inf, math.inf,
                        time.perf_counter() - t0, 0, name)


def require_optimal(sol: Solution, problem: ConicProblem) -> Solution:
    if sol.status == "infeasible":
        raise InfeasibleError("constraint system is infeasible; blocks: "
                              + ", ".join(sorted({b.name for b in problem.blocks})),
                              tuple(problem.labels()))
    if sol.status != "optimal":
        raise SolverError(f"solver ended with status {sol.status!r}")
    return sol


# --- min / max pricing -----------------------------------------------------

def _layout_for(blocks, n_w: int) -> Layout:
    extras = []
    for b in blocks:
        for g in b.coef:
            if g not in ("w", "sigma", "v") and g not in extras:
                extras.append(g)
    return Layout(n_w, 0, tuple(extras))


def minmax_price(blocks, F, direction: str = "min", *, spec: CalibrationSpec | None = None,
                 tie_break: bool = True, backend: str | None = None, layout: Layout | None = None):
    """Extremal value of sum_i w_i F_i over the weights allowed by ``blocks``.

    Returns ``(D, w, solution)``. Without a barrier the problem is a linear
    program; with ``tie_break`` a second solve picks, among all optimal
    weights, the one closest to the barycentre (``D`` keeps the first-stage
    optimum).
    """
    if direction not in ("min", "max"):
        raise DomainError("direction must be 'min' or 'max'")
    F = np.asarray(F, dtype=float)
    spec = spec or CalibrationSpec(regime=Regime.MIN_MAX_ONLY)
    layout = layout or _layout_for(blocks, F.size)
    sign = 1.0 if direction == "min" else -1.0
    mm = CalibrationSpec(**{**spec.__dict__, "regime": Regime.MIN_MAX_ONLY})
    prob = assemble(mm, blocks, layout, linear={"w": sign * F})
    sol = require_optimal(solve(prob, backend), prob)
    D = float(F @ sol.w)
    if tie_break and prob.barrier is None:
        tol = 1e-9 * (1.0 + abs(D))
        cap = LinearBlock("optimal_face", ["ge"], [-sign * D - tol], ["optimal_face"],
                          {"w": sp.csr_matrix(-sign * F[None, :])})
        tb = CalibrationSpec(regime=Regime.MIN_ALL_VARIANCES, alpha=1.0, beta=0.0, lambda_sigma=0.0,
                             feas_tol=spec.feas_tol, gap_tol=spec.gap_tol, max_iter=spec.max_iter)
        prob2 = assemble(tb, list(blocks) + [cap], layout)
        be = backend if resolve_backend(prob2, backend) != "highs" else "clarabel"
        sol2 = solve(prob2, be)
        if sol2.ok and abs(float(F @ sol2.w) - D) <= 10 * tol:
            sol = sol2
    return D, sol.w.copy(), sol
