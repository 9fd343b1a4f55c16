"""Command-line front end.

    smartmc <command> [--config run.json] [--seed S] [--threads T] [--out DIR] [--regime R]

Commands: gen-surface, calibrate, band, fwd-surface, diagnose, bench.
Every artifact is named ``<command>-<digest>`` where the digest hashes the
command and the fully resolved configuration, seed included.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConvergenceError, DomainError, InfeasibleError, PreconditionError, SolverError

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_CONVERGENCE, EXIT_SOLVER = 0, 2, 3, 4, 5
COMMANDS = ("gen-surface", "calibrate", "band", "fwd-surface", "diagnose", "bench")
REGIMES = {"raw": "raw", "minmax": "raw", "minvarvol": "min_var_vol", "joint": "joint"}

DEFAULTS = {
    "schema": SCHEMA_VERSION,
    "generator": "heston2",
    "market": {"source": "synthetic", "generator": "merton2", "n_paths": 2 ** 17, "seed": 987654321},
    "grid": {},
    "calibration": {},
    "exotic": {"type": "reverse-cliquet", "cap": 0.5},
    "n_paths": 2048,
    "seed": 5,
    "band": {"regimes": ["raw", "min_var_vol", "joint"], "eps": 1.0,
             "min_var_vol": {"lambda_sigma": 100.0, "beta": 0.0, "mu": 1e-3, "vol_reference": "flat"}},
    "diagnose": {"generator_b": "merton2", "t1": None, "t2": None},
    "bench": {"study": "scaling", "axis": "N", "grid": [512, 1024, 2048, 4096, 8192], "repeats": 3,
              "seeds": 32, "n_grid": [256, 512, 1024, 2048, 4096]},
    "out": "smartmc-out",
}


class ConfigError(DomainError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, **overrides) -> dict:
    """Defaults, then the JSON file, then command-line overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object")
        if doc.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"{p}: unsupported schema {doc.get('schema')!r}, expected {SCHEMA_VERSION}")
        cfg = _merge(cfg, doc)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    from .conic import CalibrationSpec
    from .pipeline import GridConfig, generator_spec

    unknown = set(cfg) - set(DEFAULTS) - {"threads"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    generator_spec(cfg["generator"]).validate()
    mk = cfg["market"]
    if mk.get("source") == "file":
        if not Path(mk.get("path", "")).exists():
            raise ConfigError(f"surface file not found: {mk.get('path')}")
    elif mk.get("source") == "synthetic":
        generator_spec(mk["generator"]).validate()
    elif mk.get("source") != "native":
        raise ConfigError("market.source must be 'synthetic', 'file' or 'native'")
    gf = {f.name for f in fields(GridConfig)}
    if set(cfg["grid"]) - gf:
        raise ConfigError(f"unknown grid keys {sorted(set(cfg['grid']) - gf)}")
    g = GridConfig(**cfg["grid"])
    if g.n_fixings < 1 or g.n_strikes < 2 or g.dt <= 0:
        raise ConfigError("grid needs n_fixings >= 1, n_strikes >= 2 and dt > 0")
    cf = {f.name for f in fields(CalibrationSpec)}
    if set(cfg["calibration"]) - cf:
        raise ConfigError(f"unknown calibration keys {sorted(set(cfg['calibration']) - cf)}")
    CalibrationSpec(**cfg["calibration"])
    if not isinstance(cfg["n_paths"], int) or cfg["n_paths"] < 2:
        raise ConfigError("n_paths must be an integer >= 2")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    ex = cfg["exotic"]
    if ex.get("type") != "reverse-cliquet" or not float(ex.get("cap", -1)) >= 0:
        raise ConfigError("exotic must be a reverse-cliquet with a non-negative cap")
    for r in cfg["band"]["regimes"]:
        if r not in ("raw", "min_var_vol", "joint"):
            raise ConfigError(f"unknown band regime {r!r}")


def config_digest(command: str, cfg: dict) -> str:
    doc = {k: v for k, v in cfg.items() if k not in ("out", "threads")}
    blob = json.dumps({"command": command, "config": doc}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class Run:
    """Resolved configuration plus artifact helpers for one command."""

    def __init__(self, command: str, cfg: dict):
        from .pipeline import GridConfig
        self.command = command
        self.cfg = cfg
        self.digest = config_digest(command, cfg)
        self.out = Path(cfg["out"])
        self.grid = GridConfig(**cfg["grid"])
        self.threads = int(cfg.get("threads") or 1)
        self.written: list[Path] = []

    def path(self, suffix: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / f"{self.command}-{self.digest}{suffix}"

    def header(self) -> dict:
        return {"command": self.command, "config_digest": self.digest, "version": __version__,
                "schema": SCHEMA_VERSION}

    def write_json(self, suffix: str, payload: dict) -> Path:
        p = self.path(suffix)
        doc = {**self.header(), "config": {k: v for k, v in self.cfg.items() if k not in ("threads", "out")}, **payload}
        p.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
        self.written.append(p)
        return p

    def write_csv(self, suffix: str, header, rows) -> Path:
        p = self.path(suffix)
        with open(p, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {self.command} digest={self.digest} version={__version__}\n")
            wr = csv.writer(fh)
            wr.writerow(header)
            for r in rows:
                wr.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
        self.written.append(p)
        return p

    # pipeline pieces
    def spec(self, **over):
        from .conic import CalibrationSpec
        return CalibrationSpec(**{**self.cfg["calibration"], **over})

    def paths(self, generator=None):
        from .pipeline import generator_spec, simulate
        gen = generator_spec(generator or self.cfg["generator"])
        return simulate(self.grid, gen, self.cfg["n_paths"], self.cfg["seed"], threads=self.threads)

    def surface(self):
        from .pipeline import generator_spec, market_surface
        from .surface import load_surface
        mk = self.cfg["market"]
        if mk["source"] == "native":
            return None
        if mk["source"] == "file":
            return load_surface(mk["path"], mk.get("spot", self.grid.s0), mk.get("rate", 0.0),
                                mk.get("dividend", 0.0))
        return market_surface(self.grid, generator_spec(mk["generator"]), n_paths=int(mk["n_paths"]),
                              seed=int(mk["seed"]))

    def data(self, paths, surface):
        from .pipeline import build_data
        return build_data(paths, self.grid, surface)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if hasattr(x, "value"):
        return x.value
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _finite(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


# --- commands ---------------------------------------------------------------

def cmd_gen_surface(run: Run) -> int:
    from .surface import mfiv_anchor
    surf = run.surface()
    if surf is None:
        raise ConfigError("gen-surface needs a synthetic or file market")
    run.write_csv(".surface.csv", ["maturity", "strike", "call_price"], surf.rows())
    anchor = mfiv_anchor(surf)
    run.write_csv(".mfiv.csv", ["maturity", "total_variance"],
                  zip(anchor.maturities.tolist(), anchor.total_variance.tolist()))
    run.write_json(".json", {"maturities": surf.maturities, "mfiv": anchor.variance,
                             "calendar_ok": anchor.calendar_ok})
    return EXIT_OK


def _calibrated(run: Run):
    from .calibrator import calibrate
    paths = run.paths()
    data = run.data(paths, run.surface())
    model = calibrate(data, run.spec(), strict=True)
    return paths, data, model


def cmd_calibrate(run: Run) -> int:
    _, data, model = _calibrated(run)
    n = data.n_paths
    run.write_csv(".weights.csv", ["path", "w"], ((i, float(w)) for i, w in enumerate(model.w)))
    run.write_csv(".trace.csv", ["sweep", "d_price", "d_sigma", "objective"],
                  ((h["sweep"], h["d_price"], h["d_sigma"], h["objective"]) for h in model.history))
    run.write_json(".json", {
        "n_paths": n, "max_weight_deviation": float(np.max(np.abs(model.w - 1.0 / n))),
        "replication_residual": model.replication_residual(), "sweeps": model.iterations,
        "converged": model.converged, "price_gap": model.residual_price, "vol_gap": model.residual_sigma,
        "objective": model.solution.objective})
    return EXIT_OK


def cmd_band(run: Run, regimes) -> int:
    from .bands import JOINT, MIN_VAR_VOL, RAW, price_band, spread_metrics
    from .pipeline import atm_strip, rc_payoff
    paths = run.paths()
    data = run.data(paths, run.surface())
    F = rc_payoff(paths, float(run.cfg["exotic"]["cap"]))
    bc = run.cfg["band"]
    gen = run.cfg["generator"] if isinstance(run.cfg["generator"], str) else "custom"
    rows, out = [], []
    for r in regimes:
        if r == RAW:
            b = price_band(data, F, RAW, spec=run.spec())
        elif r == MIN_VAR_VOL:
            b = price_band(data, F, MIN_VAR_VOL, spec=run.spec(**bc["min_var_vol"]))
        else:
            b = price_band(data, F, JOINT, spec=run.spec(), reference=atm_strip(data), eps=float(bc["eps"]))
        b.generator, b.fixings = gen, run.grid.n_fixings
        m = spread_metrics(b)
        rows.append([gen, b.fixings, r, b.d_min, b.d_max, m.mid, m.spread_rel])
        out.append({"regime": r, "d_min": b.d_min, "d_max": b.d_max, "mid": m.mid,
                    "spread_rel": _finite(m.spread_rel)})
    run.write_csv(".bands.csv", ["generator", "l", "regime", "D_min", "D_max", "mid", "S_intra_rel"], rows)
    run.write_json(".json", {"bands": out})
    return EXIT_OK


def cmd_fwd_surface(run: Run) -> int:
    _, data, model = _calibrated(run)
    X = data.X
    ivs = model.implied_vols()
    prices = model.forward_prices()
    rows = []
    for i, j in enumerate(data.fwd_nodes):
        ins = X.instruments[j]
        rows.append([X.times[ins.start], X.times[ins.index], ins.strike, prices[i], ivs[i]])
    run.write_csv(".fwd.csv", ["t1", "t2", "ratio", "price", "implied_vol"], rows)
    run.write_json(".json", {"converged": model.converged, "sweeps": model.iterations,
                             "nodes": len(rows)})
    return EXIT_OK


def cmd_diagnose(run: Run) -> int:
    from .diagnostics import count_inversions, projector_distance, span_projector, spot_limit_check
    dc = run.cfg["diagnose"]
    pa = run.paths()
    pb = run.paths(dc["generator_b"])
    surf = run.surface()
    da, db = run.data(pa, surf), run.data(pb, surf)
    cols = da.replication
    d, verdict = projector_distance(span_projector(da.X.X[:, cols]), span_projector(db.X.X[:, cols]))
    times = run.grid.times
    t2 = float(dc["t2"]) if dc.get("t2") is not None else float(times[-1])
    t1s = dc["t1"] if dc.get("t1") is not None else [float(t) for t in times[1:] if t < t2][::-1]
    table = spot_limit_check(pa, t1s, t2, run.grid.fwd_ratios())
    run.write_csv(".spot_limit.csv", ["t1", "max_error"], ((r.t1, r.max_error) for r in table))
    run.write_json(".json", {
        "projector": {"test": "span_projector", "statistic": d, "threshold": 0.05, "verdict": verdict},
        "spot_limit": {"test": "spot_limit", "errors": [r.max_error for r in table],
                       "inversions": count_inversions([r.max_error for r in table[::-1]])}})
    return EXIT_OK


def cmd_bench(run: Run) -> int:
    from .bench import ScalingConfig, rmse_study, run_scaling
    bc = run.cfg["bench"]
    if bc["study"] == "scaling":
        base = ScalingConfig(run.cfg["n_paths"], run.grid.n_strikes, run.grid.n_fixings, run.cfg["seed"],
                             int(bc["repeats"]),
                             run.cfg["generator"] if isinstance(run.cfg["generator"], str) else "heston2")
        res = run_scaling(bc["axis"], bc["grid"], base)
        c, p = res.fit or (math.nan, math.nan)
        run.write_csv(".scaling.csv", ["axis", "value", "t_median_s", "c", "p", "R2"],
                      ((res.axis, v, t, c, p, res.r2 if res.r2 is not None else math.nan)
                       for v, t in zip(res.grid, res.times)))
        run.write_json(".json", json.loads(res.to_json()))
        return EXIT_SOLVER if res.error else EXIT_OK
    if bc["study"] == "rmse":
        from .black import bs_call_price
        from .pipeline import generator_spec
        from .paths import generate_paths
        gen = generator_spec("black")
        t = float(run.grid.times[-1])
        ref = bs_call_price(forward=run.grid.s0, strike=run.grid.s0, vol=gen.sigma, tau=t)

        def est(seed, n):
            ps = generate_paths(gen, run.grid.times, n, seed, s0=run.grid.s0)
            return float(np.mean(np.maximum(ps.levels[:, -1] - run.grid.s0, 0.0)))

        tab = rmse_study(est, range(run.cfg["seed"], run.cfg["seed"] + int(bc["seeds"])), bc["n_grid"], ref)
        run.write_csv(".rmse.csv", ["N", "rmse", "seeds", "slope"],
                      ((n, r, tab.n_seeds, tab.slope) for n, r in zip(tab.n_grid, tab.rmse)))
        run.write_json(".json", {"n_grid": tab.n_grid, "rmse": tab.rmse, "slope": tab.slope,
                                 "reference": ref})
        return EXIT_OK
    raise ConfigError("bench.study must be 'scaling' or 'rmse'")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smartmc", description="Weighted Monte Carlo calibration and price bands.")
    ap.add_argument("--version", action="version", version=f"smartmc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--regime", choices=sorted(REGIMES), help="band regime (band command)")
        p.add_argument("--fixings", type=int, help="override grid.n_fixings")
        p.add_argument("--exotic", choices=["reverse-cliquet"], help="exotic payoff (band command)")
        p.add_argument("--surface", help="market surface file (CSV or JSON)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, threads=args.threads)
        if args.fixings is not None:
            cfg["grid"] = {**cfg["grid"], "n_fixings": args.fixings}
        if args.surface is not None:
            cfg["market"] = {**cfg["market"], "source": "file", "path": args.surface}
        validate_config(cfg)
        run = Run(args.command, cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if args.command == "gen-surface":
                code = cmd_gen_surface(run)
            elif args.command == "calibrate":
                code = cmd_calibrate(run)
            elif args.command == "band":
                regimes = [REGIMES[args.regime]] if args.regime else cfg["band"]["regimes"]
                code = cmd_band(run, regimes)
            elif args.command == "fwd-surface":
                code = cmd_fwd_surface(run)
            elif args.command == "diagnose":
                code = cmd_diagnose(run)
            else:
                code = cmd_bench(run)
    except InfeasibleError as exc:
        print(f"smartmc: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConvergenceError as exc:
        print(f"smartmc: not converged: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except SolverError as exc:
        print(f"smartmc: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except FileNotFoundError as exc:
        print(f"smartmc: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DomainError, PreconditionError, TypeError, KeyError) as exc:
        print(f"smartmc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in run.written:
        print(p)
    return code


if __name__ == "__main__":
    sys.exit(main())
