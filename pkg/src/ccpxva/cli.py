"""Command-line scenario runner.

``xva run --config cfg.json`` sweeps table axes and writes one CSV per table
plus a JSON summary; ``xva calibrate --config cfg.json`` writes calibrated
parameter files.  Exit codes: 0 ok, 2 config error, 3 calibration error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .credit import VARIANTS, CreditConfig
from .exposure_margin import (MarginConfig, TradeSpec, exposure_profile_paths, im_stddev_on_paths,
                              initial_margin, resolve_trade)
from .marketdata import MarketDataError, bootstrap_hazard, load_market_data
from .models.cir import CirParams, fit_cir_shift, save_cir_params
from .models.correlation import CorrelationError, solve_driver_correlations
from .models.g2 import calibrate_g2, load_g2_params, save_g2_params
from .pricer import BP, FundingConfig, PricingConfig, bid_ask, build_cube, decompose
from .simulation import build_grid, generate_paths

log = logging.getLogger("ccpxva")

EXIT_OK, EXIT_CONFIG, EXIT_CALIBRATION = 0, 2, 3
CREDIT_SCENARIOS = {"H/M": ("high", "mid"), "M/H": ("mid", "high")}
AXES = ("rho", "beta_plus", "beta_minus", "alpha", "q", "delta_days", "vol_multiplier", "R_C", "R_I")
OUTPUTS = ("total", "components", "bid_ask")
COMPONENT_COLUMNS = ("mtm", "cva", "dva", "mva", "fva", "total")
BASE_DEFAULTS = {
    "direction": "receiver", "rho": 0.0, "beta_plus": 1.0, "beta_minus": "sym", "alpha": 1.0,
    "q": 0.99, "delta_days": 0.0, "mode": "uncollateralized", "perspective": "investor",
    "R_C": 0.4, "R_I": 0.4, "R_C_prime": None, "R_I_prime": None, "rehypothecation": True,
    "vol_multiplier": 1.0, "closeout": None,
}
BOUNDS = {"rho": (-1.0, 1.0), "beta_plus": (0.0, 1.0), "beta_minus": (0.0, 1.0), "alpha": (0.0, 1.0),
          "q": (0.0, 1.0), "delta_days": (0.0, 365.0), "vol_multiplier": (0.0, 10.0),
          "R_C": (0.0, 1.0), "R_I": (0.0, 1.0)}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class CalibrationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TableSpec:
    name: str
    rows: tuple
    columns: tuple | None
    output: str
    base: dict


@dataclass
class ScenarioConfig:
    market_data: str
    g2_params: str
    credit_scenario: str
    trade: TradeSpec
    paths: int
    dt: float
    seed: int
    batches: int
    base: dict
    tables: list
    exposure_profile: dict | None
    correlation_method: str
    max_rmse: float | None
    root: Path


def _number(value, field, lo=None, hi=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{field}: expected a number, got {value!r}")
    if lo is not None and not lo <= value <= hi:
        raise ConfigError(f"{field}: {value} outside [{lo}, {hi}]")
    return float(value)


def _check_base(base: dict, field: str) -> dict:
    out = dict(base)
    for key, val in base.items():
        f = f"{field}.{key}"
        if key not in BASE_DEFAULTS:
            raise ConfigError(f"{f}: unknown setting")
        if key == "beta_minus" and val == "sym":
            continue
        if key in BOUNDS:
            out[key] = _number(val, f, *BOUNDS[key])
        elif key in ("R_C_prime", "R_I_prime") and val is not None:
            out[key] = _number(val, f, 0.0, 1.0)
        elif key == "direction" and val not in ("receiver", "payer"):
            raise ConfigError(f"{f}: must be 'receiver' or 'payer'")
        elif key == "perspective" and val not in ("investor", "counterparty"):
            raise ConfigError(f"{f}: must be 'investor' or 'counterparty'")
        elif key == "mode" and val not in ("uncollateralized", "csa_vm_only", "csa_vm_im", "ccp"):
            raise ConfigError(f"{f}: unknown margin mode {val!r}")
        elif key == "closeout" and val not in (None, *VARIANTS):
            raise ConfigError(f"{f}: expected one of {VARIANTS}")
        elif key == "rehypothecation" and not isinstance(val, bool):
            raise ConfigError(f"{f}: expected true or false")
    return out


def _axis(spec, field):
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ConfigError(f"{field}: expected a single {{axis: [values]}} mapping")
    (name, values), = spec.items()
    if name not in AXES:
        raise ConfigError(f"{field}: unknown axis {name!r}")
    if not isinstance(values, list) or not values:
        raise ConfigError(f"{field}.{name}: expected a non-empty list")
    return name, tuple(_number(v, f"{field}.{name}", *BOUNDS[name]) for v in values)


def parse_config(doc: dict, root: Path | None = None, seed: int | None = None) -> ScenarioConfig:
    """Validate a config document; raises :class:`ConfigError` naming the bad field."""
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    root = root or Path.cwd()
    scen = doc.get("credit_scenario", "H/M")
    if scen not in CREDIT_SCENARIOS:
        raise ConfigError(f"credit_scenario: expected one of {sorted(CREDIT_SCENARIOS)}")
    tr = doc.get("trade", {})
    if not isinstance(tr, dict):
        raise ConfigError("trade: expected an object")
    try:
        trade = TradeSpec(direction=tr.get("direction", "receiver"), maturity=float(tr.get("maturity", 10.0)),
                          fixed_rate=tr.get("fixed_rate"), notional=float(tr.get("notional", 1.0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"trade: {exc}") from exc
    mc = doc.get("mc", {} if seed is not None else None)
    if not isinstance(mc, dict):
        raise ConfigError("mc: missing Monte Carlo settings")
    if seed is None:
        if "seed" not in mc:
            raise ConfigError("mc.seed: a seed is mandatory")
        seed = mc["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 63:
        raise ConfigError("mc.seed: expected a non-negative integer")
    paths = mc.get("paths", 10000)
    if isinstance(paths, bool) or not isinstance(paths, int) or paths < 2:
        raise ConfigError("mc.paths: expected an integer >= 2")
    dt = _number(mc.get("dt", 1.0 / 12.0), "mc.dt", 1e-4, 1.0)
    batches = mc.get("batches", 20)
    if isinstance(batches, bool) or not isinstance(batches, int) or batches < 2:
        raise ConfigError("mc.batches: expected an integer >= 2")
    base = _check_base(doc.get("base", {}), "base")
    base.setdefault("direction", trade.direction)
    tables = []
    for k, t in enumerate(doc.get("tables", [])):
        f = f"tables[{k}]"
        if not isinstance(t, dict) or "name" not in t:
            raise ConfigError(f"{f}.name: missing")
        output = t.get("output", "total")
        if output not in OUTPUTS:
            raise ConfigError(f"{f}.output: expected one of {OUTPUTS}")
        rows = _axis(t.get("rows"), f"{f}.rows")
        cols = None
        if output != "components":
            cols = _axis(t.get("columns"), f"{f}.columns")
        elif "columns" in t:
            raise ConfigError(f"{f}.columns: component tables use the components as columns")
        tables.append(TableSpec(str(t["name"]), rows, cols, output, _check_base(t.get("base", {}), f"{f}.base")))
    prof = doc.get("exposure_profile")
    if prof is not None:
        if not isinstance(prof, dict):
            raise ConfigError("exposure_profile: expected an object")
        prof = {"q": _number(prof.get("q", 0.997), "exposure_profile.q", 1e-9, 1 - 1e-9),
                "delta_days": [_number(d, "exposure_profile.delta_days", 0.0, 365.0)
                               for d in prof.get("delta_days", [1.0, 5.0, 10.0])]}
    method = doc.get("correlation_method", "projection")
    if method not in ("projection", "equal"):
        raise ConfigError("correlation_method: expected 'projection' or 'equal'")
    max_rmse = doc.get("max_rmse")
    if max_rmse is not None:
        max_rmse = _number(max_rmse, "max_rmse", 0.0, 100.0)
    return ScenarioConfig(str(doc.get("market_data", "builtin")), str(doc.get("g2_params", "builtin")), scen,
                          trade, paths, dt, seed, batches, base, tables, prof, method, max_rmse, root)


def load_config(path, seed: int | None = None) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from exc
    return parse_config(doc, path.parent, seed)


# ---------------------------------------------------------------------------
# Model set-up
# ---------------------------------------------------------------------------

def _resolve(cfg: ScenarioConfig, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else cfg.root / p


def credit_models(md, scenario: str = "H/M") -> dict:
    """CIR++ models for counterparty ``C`` and investor ``I`` fitted to the CDS curves."""
    names = dict(zip(("C", "I"), CREDIT_SCENARIOS[scenario]))
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for k, name in names.items():
            hazard = bootstrap_hazard(md.cds[name], md.curve)
            out[k] = fit_cir_shift(CirParams(**md.cir_sets[name]), hazard)
    return out


def default_g2():
    return load_g2_params(resources.files("ccpxva.data").joinpath("g2_params.json"))


def _calibrate(md, max_rmse):
    res = calibrate_g2(md.swaptions, md.curve)
    if not np.isfinite(res.rmse_vol_points):
        raise CalibrationError("calibration produced a non-finite fit")
    if max_rmse is not None and res.rmse_vol_points > max_rmse:
        raise CalibrationError(f"calibration RMSE {res.rmse_vol_points:.4f} exceeds max_rmse {max_rmse}")
    return res


def load_models(cfg: ScenarioConfig):
    try:
        md = load_market_data(None if cfg.market_data == "builtin" else _resolve(cfg, cfg.market_data))
    except (OSError, MarketDataError) as exc:
        raise ConfigError(f"market_data: {exc}") from exc
    if cfg.g2_params == "builtin":
        g2 = default_g2()
    elif cfg.g2_params == "calibrate":
        try:
            g2 = _calibrate(md, cfg.max_rmse).params
        except CalibrationError as exc:
            log.warning("calibration failed (%s); continuing with the bundled parameters", exc)
            g2 = default_g2()
    else:
        try:
            g2 = load_g2_params(_resolve(cfg, cfg.g2_params))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"g2_params: {exc}") from exc
    return md, g2, credit_models(md, cfg.credit_scenario)


# ---------------------------------------------------------------------------
# Scenario evaluation
# ---------------------------------------------------------------------------

def point_settings(base: dict, overrides: dict) -> dict:
    s = dict(BASE_DEFAULTS)
    s.update(base)
    s.update(overrides)
    if s["beta_minus"] == "sym":
        s["beta_minus"] = s["beta_plus"]
    return s


def pricing_config(s: dict) -> PricingConfig:
    try:
        return PricingConfig(
            MarginConfig(s["mode"], s["alpha"], s["q"], s["delta_days"]),
            CreditConfig(s["R_C"], s["R_I"], s["R_C_prime"], s["R_I_prime"], s["rehypothecation"]),
            FundingConfig(s["beta_plus"], s["beta_minus"], s["perspective"]),
            s["closeout"])
    except ValueError as exc:
        raise ConfigError(f"scenario point {s}: {exc}") from exc


class Engine:
    """Caches one path set (per correlation and vol multiplier) and its cubes."""

    def __init__(self, cfg: ScenarioConfig, md, g2, credit, threads: int = 1):
        self.cfg, self.md, self.g2, self.credit, self.threads = cfg, md, g2, credit, threads
        self.trade = resolve_trade(cfg.trade, md.curve, g2)
        self.grid = build_grid(self.trade.maturity, cfg.dt, self.trade.event_times)
        self._key = None
        self._paths = None
        self._cubes: dict = {}

    def paths(self, rho: float, vol_mult: float):
        key = (rho, vol_mult)
        if key != self._key:
            g2 = self.g2.with_vol_multiplier(vol_mult) if vol_mult != 1.0 else self.g2
            try:
                corr = solve_driver_correlations(rho, rho, g2, self.cfg.correlation_method)
            except CorrelationError as exc:
                raise ConfigError(f"rho: {exc}") from exc
            self._paths = generate_paths(g2, self.md.curve, self.credit, corr, self.grid, self.cfg.paths,
                                         self.cfg.seed, threads=self.threads)
            self._key = key
            self._cubes = {}
        return self._paths

    def cube(self, s: dict):
        paths = self.paths(s["rho"], s["vol_multiplier"])
        trade = self.trade if s["direction"] == self.trade.direction else self.trade.flipped()
        if s["perspective"] == "counterparty":
            trade = trade.flipped()
        if trade.direction not in self._cubes:
            self._cubes[trade.direction] = build_cube(paths, trade)
        return self._cubes[trade.direction]

    def evaluate(self, s: dict, output: str) -> dict:
        cube = self.cube(s)
        cfg = pricing_config(s)
        if output == "bid_ask":
            ba = bid_ask(cube, cfg, self.cfg.batches)
            return {"value": ba.spread * BP, "se": ba.se * BP, "long": ba.long.in_bp(), "short": ba.short.in_bp()}
        res = decompose(cube, cfg, self.cfg.batches).in_bp()
        return {"value": res["total"], "se": float(np.sqrt(res["se_v0"] ** 2 + res["se_fva"] ** 2)), **res}


def _points(table: TableSpec):
    rname, rvals = table.rows
    if table.columns is None:
        return [({rname: r}, r, None) for r in rvals]
    cname, cvals = table.columns
    return [({rname: r, cname: c}, r, c) for r, c in itertools.product(rvals, cvals)]


def _path_key(base, t: TableSpec, ov: dict):
    s = point_settings({**base, **t.base}, ov)
    return (s["rho"], s["vol_multiplier"])


def run_tables(engine: Engine) -> dict:
    """Evaluate every table point, grouping points that share a path set."""
    cfg = engine.cfg
    jobs = []
    for ti, t in enumerate(cfg.tables):
        for pi, (ov, r, c) in enumerate(_points(t)):
            jobs.append((_path_key(cfg.base, t, ov), ti, pi, ov, r, c))
    jobs.sort(key=lambda j: (j[0], j[1], j[2]))
    results: dict = {t.name: {} for t in cfg.tables}
    for key, ti, pi, ov, r, c in jobs:
        t = cfg.tables[ti]
        s = point_settings({**cfg.base, **t.base}, ov)
        results[t.name][(r, c)] = {"settings": s, **engine.evaluate(s, t.output)}
    return results


def _fmt(x) -> str:
    return f"{round(float(x), 4) + 0.0:.4f}"   # no "-0.0000"


def _label(v) -> str:
    return f"{v:g}"


def write_table(path: Path, t: TableSpec, res: dict, field: str = "value") -> None:
    rname, rvals = t.rows
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if t.columns is None:
            cols = COMPONENT_COLUMNS if field == "value" else tuple(f"se_{k}" for k in COMPONENT_COLUMNS[:-1])
            w.writerow([rname, *cols])
            for r in rvals:
                rec = res[(r, None)]
                w.writerow([_label(r), *(_fmt(rec[k]) for k in cols)])
        else:
            cname, cvals = t.columns
            w.writerow([rname, *(f"{cname}={_label(c)}" for c in cvals)])
            for r in rvals:
                w.writerow([_label(r), *(_fmt(res[(r, c)][field]) for c in cvals)])


def emit_exposure_profile(engine: Engine, out_dir: Path) -> dict:
    """Write positive/negative exposure and IM statistics per grid time, in bp."""
    prof = engine.cfg.exposure_profile
    s = point_settings(engine.cfg.base, {})
    paths = engine.paths(s["rho"], s["vol_multiplier"])
    trade = engine.trade if s["direction"] == engine.trade.direction else engine.trade.flipped()
    eps = exposure_profile_paths(trade, paths)
    epe = np.maximum(eps, 0.0).mean(axis=1) * BP
    ene = np.minimum(eps, 0.0).mean(axis=1) * BP
    with open(out_dir / "exposure_profile.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "epe", "ene"])
        for t, a, b in zip(paths.times, epe, ene):
            w.writerow([_fmt(t), _fmt(a), _fmt(b)])
    rows = []
    for d in prof["delta_days"]:
        margin = MarginConfig("csa_vm_im", 1.0, prof["q"], d)
        for i, t in enumerate(paths.times):
            nc, _ = initial_margin(margin, im_stddev_on_paths(trade, paths, i, margin.delta))
            nc = nc * BP
            rows.append([_fmt(t), _label(d), _fmt(nc.mean()), *(_fmt(v) for v in np.quantile(nc, [0.05, 0.5, 0.95]))])
    with open(out_dir / "im_profile.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "delta_days", "im_mean", "im_p05", "im_p50", "im_p95"])
        w.writerows(rows)
    return {"epe_bp": epe.tolist(), "ene_bp": ene.tolist(), "times": paths.times.tolist()}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def run_scenario(cfg: ScenarioConfig, out_dir, threads: int = 1) -> dict:
    """Run every table of ``cfg`` and write CSVs plus ``summary.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md, g2, credit = load_models(cfg)
    engine = Engine(cfg, md, g2, credit, threads)
    results = run_tables(engine)
    summary = {"seed": cfg.seed, "paths": cfg.paths, "dt": cfg.dt, "credit_scenario": cfg.credit_scenario,
               "fixed_rate": engine.trade.fixed_rate, "g2_params": g2.to_dict(), "tables": {}}
    for t in cfg.tables:
        write_table(out_dir / f"{t.name}.csv", t, results[t.name])
        write_table(out_dir / f"{t.name}_se.csv", t, results[t.name], "se")
        summary["tables"][t.name] = [
            {"row": r, "column": c, **{k: v for k, v in rec.items()}}
            for (r, c), rec in results[t.name].items()]
    if cfg.exposure_profile is not None:
        summary["exposure_profile"] = emit_exposure_profile(engine, out_dir)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
    return summary


def calibrate(cfg: ScenarioConfig, out_dir) -> dict:
    """Calibrate G2++ and fit the CIR++ shifts; write ``g2_params.json`` and ``cir_params.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        md = load_market_data(None if cfg.market_data == "builtin" else _resolve(cfg, cfg.market_data))
    except (OSError, MarketDataError) as exc:
        raise ConfigError(f"market_data: {exc}") from exc
    res = _calibrate(md, cfg.max_rmse)
    save_g2_params(res.params, md.curve, out_dir / "g2_params.json", res.rmse_vol_points)
    models = {name: fit_cir_shift(CirParams(**md.cir_sets[name]), bootstrap_hazard(md.cds[name], md.curve))
              for name in sorted(md.cir_sets)}
    save_cir_params(models, out_dir / "cir_params.json", np.linspace(0.0, 10.0, 41))
    return {"rmse_vol_points": res.rmse_vol_points, "params": res.params.to_dict()}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xva", description="CCP / bilateral XVA scenario runner")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="price the configured scenario tables")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir", default="xva_out")
    run.add_argument("--threads", type=int, default=1)
    cal = sub.add_parser("calibrate", help="calibrate model parameters to the market data")
    cal.add_argument("--config", required=True)
    cal.add_argument("--out-dir", default=".")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            if args.threads < 1:
                raise ConfigError("--threads: expected a positive integer")
            cfg = load_config(args.config, args.seed)
            run_scenario(cfg, args.out_dir, args.threads)
        else:
            cfg = load_config(args.config, seed=0)
            info = calibrate(cfg, args.out_dir)
            log.info("G2++ calibration RMSE %.4f vol points", info["rmse_vol_points"])
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except CalibrationError as exc:
        log.error("calibration error: %s", exc)
        return EXIT_CALIBRATION
    return EXIT_OK


if __name__ == "__main__":   # pragma: no cover
    sys.exit(main())
