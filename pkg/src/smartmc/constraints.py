"""Linear constraint blocks over the decision vector (w, sigma, v, extras)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .black import forward_start_black_price, forward_start_vega, implied_vol
from .errors import DomainError, NoSolutionError, PreconditionError
from .payoffs import FORWARD_START, LOG_CONTRACT, VANILLA, PayoffMatrix
from .surface import MfivAnchor

EQ, GE = "eq", "ge"
VEGA_FLOOR = 1e-6


@dataclass(frozen=True)
class Layout:
    """Decision vector layout: w (n_w), sigma and v (n_nodes each), then scalar extras."""

    n_w: int
    n_nodes: int = 0
    extras: tuple = ()

    @property
    def size(self) -> int:
        return self.n_w + 2 * self.n_nodes + len(self.extras)

    def group_size(self, group: str) -> int:
        if group == "w":
            return self.n_w
        if group in ("sigma", "v"):
            return self.n_nodes
        if group in self.extras:
            return 1
        raise DomainError(f"coordinate group {group!r} is not declared in the layout")

    def offset(self, group: str) -> int:
        if group == "w":
            return 0
        if group == "sigma":
            return self.n_w
        if group == "v":
            return self.n_w + self.n_nodes
        if group in self.extras:
            return self.n_w + 2 * self.n_nodes + self.extras.index(group)
        raise DomainError(f"coordinate group {group!r} is not declared in the layout")

    def slice(self, group: str) -> slice:
        o = self.offset(group)
        return slice(o, o + self.group_size(group))

    def groups(self):
        out = ["w"]
        if self.n_nodes:
            out += ["sigma", "v"]
        return out + list(self.extras)


@dataclass
class LinearBlock:
    """Rows ``A x (= or >=) rhs`` with coefficients stored per coordinate group."""

    name: str
    kinds: np.ndarray
    rhs: np.ndarray
    labels: tuple
    coef: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kinds = np.asarray(self.kinds, dtype="<U2")
        self.rhs = np.asarray(self.rhs, dtype=float)
        self.labels = tuple(self.labels)
        n = len(self.labels)
        if len(set(self.labels)) != n:
            raise DomainError(f"block {self.name}: row labels are not unique")
        if self.kinds.shape != (n,) or self.rhs.shape != (n,):
            raise DomainError(f"block {self.name}: kinds/rhs/labels length mismatch")
        if not set(self.kinds.tolist()) <= {EQ, GE}:
            raise DomainError(f"block {self.name}: row kinds must be 'eq' or 'ge'")
        self.coef = {g: sp.csr_matrix(m) for g, m in self.coef.items()}
        for g, m in self.coef.items():
            if m.shape[0] != n:
                raise DomainError(f"block {self.name}: group {g} has {m.shape[0]} rows, expected {n}")

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    @property
    def kind(self) -> str:
        u = set(self.kinds.tolist())
        return u.pop() if len(u) == 1 else "mixed"

    def matrix(self, layout: Layout) -> sp.csr_matrix:
        parts = []
        for g in layout.groups():
            m = self.coef.get(g)
            size = layout.group_size(g)
            if m is None:
                parts.append(sp.csr_matrix((self.n_rows, size)))
                continue
            if m.shape[1] != size:
                raise DomainError(f"block {self.name}: group {g} has {m.shape[1]} columns, "
                                  f"layout declares {size}")
            parts.append(m)
        extra = set(self.coef) - set(layout.groups())
        if extra:
            raise DomainError(f"block {self.name} references undeclared coordinates {sorted(extra)}")
        return sp.hstack(parts, format="csr")

    @classmethod
    def from_matrix(cls, name, A, rhs, kinds, labels, layout: Layout) -> "LinearBlock":
        A = sp.csr_matrix(A)
        if A.shape[1] != layout.size:
            raise DomainError("matrix width does not match the layout")
        coef = {}
        for g in layout.groups():
            sub = A[:, layout.slice(g)]
            if sub.nnz:
                coef[g] = sub
        return cls(name, kinds, rhs, labels, coef)

    def residual(self, x, layout: Layout) -> np.ndarray:
        return self.matrix(layout) @ np.asarray(x, dtype=float) - self.rhs

    def violations(self, x, layout: Layout, tol: float = 1e-9) -> list[str]:
        r = self.residual(x, layout)
        bad = np.where(self.kinds == EQ, np.abs(r) > tol, r < -tol)
        return [self.labels[i] for i in np.flatnonzero(bad)]

    def dump(self, layout: Layout) -> str:
        """Human-readable rows ``label | kind | coord=value ... | rhs``."""
        A = self.matrix(layout).tocsr()
        names = []
        for g in layout.groups():
            names += [f"{g}[{i}]" for i in range(layout.group_size(g))] if g in ("w", "sigma", "v") else [g]
        lines = []
        for i, lab in enumerate(self.labels):
            lo, hi = A.indptr[i], A.indptr[i + 1]
            terms = " ".join(f"{names[c]}={v!r}" for c, v in zip(A.indices[lo:hi], A.data[lo:hi]))
            op = "=" if self.kinds[i] == EQ else ">="
            lines.append(f"{lab} | {op} | {terms} | {self.rhs[i]!r}")
        return "\n".join(lines)


def stack(blocks, layout: Layout):
    """Concatenate blocks into (A_eq, b_eq, eq_labels, A_ge, b_ge, ge_labels)."""
    eqA, eqb, eql, geA, geb, gel = [], [], [], [], [], []
    for b in blocks:
        A = b.matrix(layout)
        e = b.kinds == EQ
        if e.any():
            eqA.append(A[e]); eqb.append(b.rhs[e]); eql += [l for l, k in zip(b.labels, e) if k]
        if (~e).any():
            geA.append(A[~e]); geb.append(b.rhs[~e]); gel += [l for l, k in zip(b.labels, e) if not k]
    empty = sp.csr_matrix((0, layout.size))
    return (sp.vstack(eqA, format="csr") if eqA else empty, np.concatenate(eqb) if eqb else np.zeros(0), eql,
            sp.vstack(geA, format="csr") if geA else empty, np.concatenate(geb) if geb else np.zeros(0), gel)


# --- blocks ---------------------------------------------------------------

def simplex_block(n: int) -> LinearBlock:
    if n < 1:
        raise DomainError("need at least one path")
    w = sp.vstack([sp.csr_matrix(np.ones((1, n))), sp.identity(n, format="csr")], format="csr")
    labels = ["simplex.sum"] + [f"simplex.w{i}>=0" for i in range(n)]
    return LinearBlock("simplex", [EQ] + [GE] * n, np.r_[1.0, np.zeros(n)], labels, {"w": w})


def replication_block(X: PayoffMatrix, targets, columns=None, name: str = "replication") -> LinearBlock:
    """Equality rows sum_i w_i X[i, l] = target_l for the selected columns."""
    cols = np.arange(X.shape[1]) if columns is None else np.asarray(columns, dtype=int)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if targets.size != cols.size:
        raise DomainError(f"{targets.size} targets for {cols.size} replication columns")
    labels = [f"{name}.{X.instruments[j].label}" for j in cols]
    return LinearBlock(name, [EQ] * cols.size, targets, labels,
                       {"w": sp.csr_matrix(X.X[:, cols].T)})


def vanilla_groups(X: PayoffMatrix) -> list[np.ndarray]:
    """Vanilla columns grouped by maturity index, in column order."""
    groups: dict[int, list] = {}
    for j, ins in enumerate(X.instruments):
        if ins.kind == VANILLA:
            groups.setdefault(ins.index, []).append(j)
    return [np.array(groups[k]) for k in sorted(groups)]


def no_arbitrage_block(X: PayoffMatrix, groups=None) -> LinearBlock:
    """Monotonicity and butterfly rows on reweighted vanilla prices.

    Each group lists the vanilla columns of one maturity in ascending strike
    order. Uneven grids use the convexity-weighted butterfly.
    """
    groups = vanilla_groups(X) if groups is None else [np.asarray(g, dtype=int) for g in groups]
    rows, labels = [], []
    for g in groups:
        ks = np.array([X.instruments[j].strike for j in g])
        if ks.size < 3:
            raise PreconditionError(f"no-arbitrage rows need at least 3 strikes, got {ks.size}")
        if np.any(np.diff(ks) <= 0):
            raise DomainError(f"strikes not strictly ascending: {ks.tolist()}")
        t = X.instruments[g[0]].index
        cols = X.X[:, g]
        for j in range(ks.size - 1):
            rows.append(cols[:, j] - cols[:, j + 1])
            labels.append(f"mono[t{t},K={ks[j]:.6g}]")
        for j in range(1, ks.size - 1):
            k1, k2, k3 = ks[j - 1], ks[j], ks[j + 1]
            s = 0.5 * (k3 - k1)
            rows.append(((k3 - k2) * cols[:, j - 1] - (k3 - k1) * cols[:, j]
                         + (k2 - k1) * cols[:, j + 1]) / s)
            labels.append(f"fly[t{t},K={k2:.6g}]")
    A = np.vstack(rows) if rows else np.zeros((0, X.shape[0]))
    return LinearBlock("no_arbitrage", [GE] * len(labels), np.zeros(len(labels)), labels,
                       {"w": sp.csr_matrix(A)})


@dataclass
class FwdLinearization:
    """Linearisation point of the forward-start nodes.

    One entry per node; ``columns`` index the forward-start columns of the
    payoff matrix. ``retained`` marks the nodes entering the current solve.
    """

    columns: np.ndarray
    sigma_prev: np.ndarray
    price_prev: np.ndarray
    vega_prev: np.ndarray
    tau: np.ndarray
    ratio: np.ndarray
    interval: np.ndarray          # reset fixing index of each node
    labels: list
    retained: np.ndarray

    @property
    def n_retained(self) -> int:
        return int(self.retained.sum())

    def slots(self) -> np.ndarray:
        """Node index of each sigma/v slot in the layout."""
        return np.flatnonzero(self.retained)


def linearize(X: PayoffMatrix, columns, sigma_prev, vega_floor: float = VEGA_FLOOR,
              retained=None) -> FwdLinearization:
    """Black price and vega at ``sigma_prev`` for each forward-start node.

    Nodes with vega at or below ``vega_floor`` (unit forward) or a non-positive
    volatility are dropped with a warning; ``retained`` only ever shrinks.
    """
    cols = np.asarray(columns, dtype=int)
    sig = np.asarray(sigma_prev, dtype=float).copy()
    n = cols.size
    keep = np.ones(n, bool) if retained is None else np.asarray(retained, bool).copy()
    price = np.full(n, np.nan)
    vega = np.full(n, np.nan)
    tau = np.array([X.tau(j) for j in cols])
    ratio = np.array([X.instruments[j].strike for j in cols])
    dfs = X.discounts[cols]
    for i in range(n):
        if not keep[i]:
            continue
        if not (np.isfinite(sig[i]) and sig[i] > 0):
            keep[i] = False
            continue
        t1 = 0.0
        price[i] = forward_start_black_price(ratio[i], sig[i], t1, tau[i], dfs[i])
        vega[i] = forward_start_vega(ratio[i], sig[i], t1, tau[i], dfs[i])
        if not vega[i] > vega_floor:
            keep[i] = False
    labels = [X.instruments[j].label for j in cols]
    dropped = [labels[i] for i in range(n) if not keep[i] and (retained is None or retained[i])]
    if dropped:
        warnings.warn(f"forward-start nodes excluded from linearisation: {dropped}", RuntimeWarning,
                      stacklevel=2)
    return FwdLinearization(cols, sig, price, vega, tau, ratio,
                            np.array([X.instruments[j].start for j in cols]), labels, keep)


def initial_vols(X: PayoffMatrix, columns, w=None) -> np.ndarray:
    """Implied vols of the forward-start prices under ``w`` (NaN where inversion fails)."""
    cols = np.asarray(columns, dtype=int)
    p = X.prices(w)[cols]
    out = np.full(cols.size, np.nan)
    for i, j in enumerate(cols):
        try:
            out[i] = implied_vol(p[i], 1.0, X.instruments[j].strike, X.tau(j), X.discounts[j])
        except NoSolutionError:
            pass
    return out


def affine_fwdvol_block(lin: FwdLinearization, X: PayoffMatrix, sparse_v: bool = True) -> LinearBlock:
    """Two rows per retained node tying sigma and v to the w-linear forward price:

    sigma = sigma_prev + (P(w) - P_prev) / vega
    v     = sigma_prev^2 + 2 sigma_prev (P(w) - P_prev) / vega

    With ``sparse_v`` the second row is written through the first as
    v - 2 sigma_prev sigma = -sigma_prev^2, which has the same solution set
    but no dense path coefficients.
    """
    idx = lin.slots()
    q = idx.size
    H = X.X[:, lin.columns[idx]].T                      # (q, N)
    inv = 1.0 / lin.vega_prev[idx]
    s0 = lin.sigma_prev[idx]
    p0 = lin.price_prev[idx]
    eye = sp.identity(q, format="csr")
    zero = sp.csr_matrix((q, q))
    sig_w = sp.csr_matrix(-inv[:, None] * H)
    if sparse_v:
        w_rows = sp.vstack([sig_w, sp.csr_matrix((q, H.shape[1]))], format="csr")
        sig_rows = sp.vstack([eye, sp.diags(-2 * s0, format="csr")], format="csr")
        rhs = np.r_[s0 - p0 * inv, -s0 ** 2]
    else:
        w_rows = sp.vstack([sig_w, sp.csr_matrix(-(2 * s0 * inv)[:, None] * H)], format="csr")
        sig_rows = sp.vstack([eye, zero], format="csr")
        rhs = np.r_[s0 - p0 * inv, s0 ** 2 - 2 * s0 * p0 * inv]
    v_rows = sp.vstack([zero, eye], format="csr")
    labels = [f"affine.sigma.{lin.labels[i]}" for i in idx] + [f"affine.v.{lin.labels[i]}" for i in idx]
    return LinearBlock("affine_fwdvol", [EQ] * (2 * q), rhs, labels,
                       {"w": w_rows, "sigma": sig_rows, "v": v_rows})


def conservation_block(lin: FwdLinearization) -> LinearBlock:
    """Per reset date: sum_j dK_j (v_j - sigma_prev_j^2) = 0 over the retained nodes."""
    idx = lin.slots()
    rows, rhs, labels = [], [], []
    for t in np.unique(lin.interval[idx]):
        sel = np.flatnonzero(lin.interval[idx] == t)
        if sel.size == 0:
            continue
        k = lin.ratio[idx[sel]]
        order = np.argsort(k)
        dk = np.ones(sel.size) if sel.size == 1 else np.gradient(k[order])
        row = np.zeros(idx.size)
        row[sel[order]] = dk
        rows.append(row)
        rhs.append(float(np.dot(dk, lin.sigma_prev[idx[sel[order]]] ** 2)))
        labels.append(f"conserve.t{t}")
    A = np.vstack(rows) if rows else np.zeros((0, idx.size))
    return LinearBlock("conservation", [EQ] * len(labels), rhs, labels, {"v": sp.csr_matrix(A)})


def log_contract_se(X: PayoffMatrix, column: int) -> float:
    col = X.X[:, column]
    return float(col.std(ddof=1) / math.sqrt(col.size))


def variance_anchor_block(X: PayoffMatrix, anchor: MfivAnchor, columns=None, slack_se: float = 3.0,
                          lin: FwdLinearization | None = None) -> LinearBlock:
    """Weighted log contracts matched to the MFIV anchors.

    With ``slack_se > 0`` each anchor becomes a pair of inequalities allowing a
    symmetric deviation of ``slack_se`` standard errors of the column; with
    ``lin`` the forward-variance conservation rows are appended.
    """
    cols = X.columns(LOG_CONTRACT) if columns is None else np.asarray(columns, dtype=int)
    rows, rhs, kinds, labels = [], [], [], []
    for j in cols:
        a = anchor.at(X.maturity(j))
        col = X.X[:, j]
        lab = X.instruments[j].label
        s = slack_se * log_contract_se(X, j) if slack_se > 0 else 0.0
        if s > 0:
            rows += [col, -col]
            rhs += [a - s, -(a + s)]
            kinds += [GE, GE]
            labels += [f"anchor.lo.{lab}", f"anchor.hi.{lab}"]
        else:
            rows.append(col)
            rhs.append(a)
            kinds.append(EQ)
            labels.append(f"anchor.{lab}")
    A = np.vstack(rows) if rows else np.zeros((0, X.shape[0]))
    block = LinearBlock("variance_anchor", kinds, rhs, labels, {"w": sp.csr_matrix(A)})
    if lin is None:
        return block
    cons = conservation_block(lin)
    n_nodes = lin.n_retained
    return LinearBlock("variance_anchor", np.r_[block.kinds, cons.kinds], np.r_[block.rhs, cons.rhs],
                       block.labels + cons.labels,
                       {"w": sp.vstack([block.coef["w"], sp.csr_matrix((cons.n_rows, X.shape[0]))]),
                        "v": sp.vstack([sp.csr_matrix((block.n_rows, n_nodes)), cons.coef["v"]])})


def martingale_block(paths, rhs=None) -> LinearBlock:
    """One row per fixing period: sum_i w_i S_{t_k}/S_{t_k-1} = growth over the period.

    Reweighting can tilt the mean of the period returns, which no vanilla or
    digital pins down; these rows keep the forward drift risk-neutral.
    ``rhs=None`` uses exp((r - q) dt).
    """
    lv = paths.levels
    if lv.shape[1] < 2:
        raise DomainError("martingale rows need at least one fixing period")
    R = lv[:, 1:] / lv[:, :-1]
    dt = np.diff(paths.times)
    if rhs is None:
        rhs = np.exp((paths.rate - paths.dividend) * dt)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (R.shape[1],):
        raise DomainError(f"expected {R.shape[1]} martingale targets, got {rhs.shape}")
    labels = [f"mart[t{k}->t{k + 1}]" for k in range(R.shape[1])]
    return LinearBlock("martingale", [EQ] * len(labels), rhs, labels, {"w": sp.csr_matrix(R.T)})


LAMBDA = "lambda"


def mass_split_block(n: int, subset, pin: float | None = None) -> LinearBlock:
    """Reporter lambda = sum_{i in A} w_i with 0 <= lambda <= 1, optionally pinned.

    Requires ``"lambda"`` among the layout extras.
    """
    a = np.unique(np.asarray(subset, dtype=int))
    if a.size == 0 or a.size >= n:
        raise DomainError("subset must be a nonempty proper subset of the paths")
    if a[0] < 0 or a[-1] >= n:
        raise DomainError("subset index out of range")
    row = np.zeros(n)
    row[a] = 1.0
    w = [row, np.zeros(n), np.zeros(n)]
    lam = [-1.0, 1.0, -1.0]
    kinds, rhs = [EQ, GE, GE], [0.0, 0.0, -1.0]
    labels = ["split.lambda", "split.lambda>=0", "split.lambda<=1"]
    if pin is not None:
        if not 0.0 <= pin <= 1.0:
            raise DomainError("pinned lambda must lie in [0, 1]")
        w.append(np.zeros(n)); lam.append(1.0); kinds.append(EQ); rhs.append(pin)
        labels.append("split.pin")
    return LinearBlock("mass_split", kinds, rhs, labels,
                       {"w": sp.csr_matrix(np.vstack(w)), LAMBDA: sp.csr_matrix(np.array(lam)[:, None])})
