"""Outer fixed-point loop for forward-volatility calibration.

Each sweep linearises the forward-start Black prices around the current
volatilities, solves one conic problem in (w, sigma, v) and moves the
linearisation point. The loop stops when both the price gap
max |P(w) - P_prev| and the volatility gap max |sigma - sigma_prev| fall below
their tolerances.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .black import implied_vol
from .conic import CalibrationSpec, Solution, assemble, require_optimal, solve
from .constraints import (Layout, affine_fwdvol_block, conservation_block, initial_vols, linearize,
                          no_arbitrage_block, replication_block, simplex_block, variance_anchor_block,
                          vanilla_groups)
from .errors import ConvergenceError, DomainError, NoSolutionError
from .payoffs import PayoffMatrix
from .surface import MfivAnchor


@dataclass
class CalibrationData:
    """Everything the loop needs besides the CalibrationSpec.

    ``replication`` and ``targets`` select the market columns of ``X``;
    ``fwd_nodes`` lists the forward-start columns carrying volatility nodes.
    ``no_arb_groups=None`` derives strike groups from the vanilla columns, an
    empty list disables the shape rows. ``static_vols`` (one per forward
    node) feeds the ``"static"`` volatility reference.
    """

    X: PayoffMatrix
    replication: np.ndarray
    targets: np.ndarray
    fwd_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    no_arb_groups: list | None = None
    anchor: MfivAnchor | None = None
    log_columns: np.ndarray | None = None
    extra_blocks: list = field(default_factory=list)
    extras: tuple = ()
    static_vols: np.ndarray | None = None

    def __post_init__(self):
        self.replication = np.asarray(self.replication, dtype=int)
        self.targets = np.asarray(self.targets, dtype=float)
        self.fwd_nodes = np.asarray(self.fwd_nodes, dtype=int)
        if self.targets.size != self.replication.size:
            raise DomainError("targets and replication columns differ in length")

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]


def base_blocks(data: CalibrationData, spec: CalibrationSpec) -> list:
    """Weight-only blocks: simplex, replication, shape rows, anchors, extras."""
    X = data.X
    blocks = [simplex_block(data.n_paths)]
    if spec.replication == "hard" and data.replication.size:
        blocks.append(replication_block(X, data.targets, data.replication))
    groups = vanilla_groups(X) if data.no_arb_groups is None else data.no_arb_groups
    groups = [g for g in groups if len(g) >= 3]
    if spec.replication == "hard" and not spec.shape_rows_under_hard:
        # rows on exactly replicated columns are constants; keep only the others
        pinned = set(data.replication.tolist())
        groups = [g for g in groups if not set(np.asarray(g).tolist()) <= pinned]
    if groups:
        blocks.append(no_arbitrage_block(X, groups))
    if data.anchor is not None:
        blocks.append(variance_anchor_block(X, data.anchor, data.log_columns, spec.anchor_slack_se))
    return blocks + list(data.extra_blocks)


@dataclass
class LoopState:
    w: np.ndarray
    lin: object                        # FwdLinearization or None
    sweep: int = 0
    damping: float = 1.0
    history: list = field(default_factory=list)
    solution: Solution | None = None
    sigma: np.ndarray | None = None
    v: np.ndarray | None = None
    d_price: float = math.inf
    d_sigma: float = math.inf


@dataclass
class CalibratedModel:
    w: np.ndarray
    sigma: np.ndarray                  # per node, NaN where dropped
    v: np.ndarray
    node_labels: list
    retained: np.ndarray
    iterations: int
    residual_price: float
    residual_sigma: float
    converged: bool
    history: list
    solution: Solution
    data: CalibrationData

    def forward_prices(self) -> np.ndarray:
        return self.data.X.prices(self.w)[self.data.fwd_nodes]

    def implied_vols(self) -> np.ndarray:
        """Implied vols of the reweighted forward-start prices (NaN where not invertible)."""
        X = self.data.X
        p = self.forward_prices()
        out = np.full(p.size, np.nan)
        for i, j in enumerate(self.data.fwd_nodes):
            try:
                out[i] = implied_vol(p[i], 1.0, X.instruments[j].strike, X.tau(j), X.discounts[j])
            except NoSolutionError:
                pass
        return out

    def replication_residual(self) -> float:
        d = self.data
        if d.replication.size == 0:
            return 0.0
        return float(np.max(np.abs(d.X.prices(self.w)[d.replication] - d.targets)))

    def trace_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sweep", "d_price", "d_sigma", "objective", "solve_time"])
            for h in self.history:
                wr.writerow([h["sweep"], repr(h["d_price"]), repr(h["d_sigma"]), repr(h["objective"]),
                             repr(h["solve_time"])])


def initialize(data: CalibrationData, spec: CalibrationSpec, w0=None) -> LoopState:
    """Linearisation point from the forward-start prices under ``w0`` (default uniform)."""
    n = data.n_paths
    w = np.full(n, 1.0 / n) if w0 is None else np.asarray(w0, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
        raise DomainError("starting weights must lie on the simplex")
    if data.fwd_nodes.size == 0:
        return LoopState(w, None, damping=spec.damping)
    sig = initial_vols(data.X, data.fwd_nodes, w)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lin = linearize(data.X, data.fwd_nodes, sig, spec.vega_floor)
    bad = [lab for lab, keep in zip(lin.labels, lin.retained) if not keep]
    if bad:
        warnings.warn(f"forward-start nodes dropped at start: {bad}", RuntimeWarning, stacklevel=2)
    return LoopState(w, lin, damping=spec.damping)


def _problem(state: LoopState, data: CalibrationData, spec: CalibrationSpec, linear, blocks):
    lin = state.lin
    n_nodes = lin.n_retained if lin is not None else 0
    layout = Layout(data.n_paths, n_nodes, tuple(data.extras))
    blocks = list(blocks)
    if n_nodes:
        blocks.append(affine_fwdvol_block(lin, data.X))
        if spec.conserve_forward_variance:
            blocks.append(conservation_block(lin))
    market = None
    if spec.replication == "slack":
        market = (data.X.X[:, data.replication], data.targets)
    lin_for_obj = lin if n_nodes else None
    target = None
    if n_nodes and spec.vol_reference == "static":
        if data.static_vols is None:
            raise DomainError("vol_reference='static' needs static forward vols in the data")
        target = np.asarray(data.static_vols, dtype=float)[lin.slots()]
    return assemble(spec, blocks, layout, linear=linear, lin=lin_for_obj, market=market, vol_target=target)


def sweep(state: LoopState, data: CalibrationData, spec: CalibrationSpec, *, linear=None,
          blocks=None, backend=None) -> LoopState:
    """One linearise-solve-update cycle."""
    blocks = base_blocks(data, spec) if blocks is None else blocks
    prob = _problem(state, data, spec, linear, blocks)
    sol = require_optimal(solve(prob, backend or spec.backend), prob)
    w = sol.w.copy()
    lin = state.lin
    hist = list(state.history)
    if lin is None or lin.n_retained == 0:
        row = {"sweep": state.sweep + 1, "d_price": 0.0, "d_sigma": 0.0,
               "objective": sol.objective, "solve_time": sol.solve_time}
        return LoopState(w, lin, state.sweep + 1, state.damping, hist + [row], sol,
                         np.zeros(0), np.zeros(0), 0.0, 0.0)
    idx = lin.slots()
    p_new = data.X.prices(w)[lin.columns[idx]]
    d_price = float(np.max(np.abs(p_new - lin.price_prev[idx])))
    d_sigma = float(np.max(np.abs(sol.sigma - lin.sigma_prev[idx])))
    damping = state.damping
    if hist and d_sigma > hist[-1]["d_sigma"]:
        damping = max(damping / 2, 1.0 / 16)
    sig_full = lin.sigma_prev.copy()
    sig_full[idx] = lin.sigma_prev[idx] + damping * (sol.sigma - lin.sigma_prev[idx])
    new_lin = linearize(data.X, lin.columns, sig_full, spec.vega_floor, retained=lin.retained)
    row = {"sweep": state.sweep + 1, "d_price": d_price, "d_sigma": d_sigma,
           "objective": sol.objective, "solve_time": sol.solve_time}
    sigma = np.full(lin.columns.size, np.nan)
    v = np.full(lin.columns.size, np.nan)
    sigma[idx] = sol.sigma
    v[idx] = sol.v
    return LoopState(w, new_lin, state.sweep + 1, damping, hist + [row], sol, sigma, v, d_price, d_sigma)


def calibrate(data: CalibrationData, spec: CalibrationSpec, *, linear=None, w0=None, backend=None,
              strict: bool = False) -> CalibratedModel:
    """Run sweeps until the price and volatility gaps meet the tolerances.

    A run that exhausts ``spec.max_sweeps`` returns an unconverged model with
    its residual history and a warning; with ``strict`` it raises
    :class:`ConvergenceError` carrying that model instead.
    """
    state = initialize(data, spec, w0)
    blocks = base_blocks(data, spec)
    converged = False
    for _ in range(max(1, spec.max_sweeps)):
        state = sweep(state, data, spec, linear=linear, blocks=blocks, backend=backend)
        if state.d_price <= spec.eps_price and state.d_sigma <= spec.eps_sigma:
            converged = True
            break
    labels = state.lin.labels if state.lin is not None else []
    retained = state.solution is not None and state.lin is not None
    model = CalibratedModel(
        w=state.w, sigma=state.sigma, v=state.v, node_labels=labels,
        retained=state.lin.retained.copy() if retained else np.zeros(0, bool),
        iterations=state.sweep, residual_price=state.d_price, residual_sigma=state.d_sigma,
        converged=converged, history=state.history, solution=state.solution, data=data)
    if not converged:
        msg = (f"fixed-point loop stopped after {state.sweep} sweeps with price gap "
               f"{state.d_price:.3g} and vol gap {state.d_sigma:.3g}")
        if strict:
            raise ConvergenceError(msg, model)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return model
