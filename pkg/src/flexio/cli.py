"""Command-line pipeline: simulate, fit, forecast, evaluate, gridsearch.

Every command reads a YAML run configuration (``--config``) and writes its
artefacts into ``--out``.  A minimal configuration::

    seed: 0
    data:
      synthetic: {T: 24, S: 45, noise_sigma: 0.04}
    tariff: {flat: 22.0}
    fit: {mode: alternating, t_max: 8}
    evaluation: {train_days: 40, horizon_days: 5}
"""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import data as D
from .fit import FitConfig, SolverMode, fit
from .forecast import forecasts_to_csv, point_forecast, quantile_forecast, training_residuals
from .metrics import DEFAULT_LEVELS, evaluate, seasonal_naive
from .model import Hyperparams, build_comfort_costs, build_tou_prices

log = logging.getLogger("flexio")

DEFAULT_GRID = {
    "t_max": [4, 8, 12, 24],
    "alpha": [0.0, 1.0, 2.0],
    "gamma_sf_plus": [0.1, 1.0, 10.0],
    "gamma_sf_minus": [0.1, 1.0, 10.0],
    "gamma_sd": [0.1, 1.0, 10.0],
}
_FIT_KEYS = {"mode", "t_max", "alpha", "gamma_sf_plus", "gamma_sf_minus", "gamma_sd", "max_iters", "tol_obj",
             "max_nodes", "day_max_nodes", "feature_scaling"}
_TOP_KEYS = {"seed", "data", "tariff", "fit", "evaluation", "grid"}


@dataclass
class RunConfig:
    seed: int = 0
    synthetic: Optional[dict] = None
    csv_path: Optional[str] = None
    schema: dict = field(default_factory=dict)
    flat: Optional[float] = None
    tou: Optional[list] = None
    fit: dict = field(default_factory=dict)
    train_days: Optional[int] = None
    horizon_days: int = 5
    lookback: int = 5
    validation_days: int = 5
    grid: dict = field(default_factory=lambda: dict(DEFAULT_GRID))


def parse_config(raw: dict, seed: Optional[int] = None, mode: Optional[str] = None) -> RunConfig:
    """Validate a configuration mapping, reporting every problem at once."""
    errors = []
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ValueError("configuration must be a mapping")
    for key in set(raw) - _TOP_KEYS:
        errors.append(f"unknown top-level key {key!r}")
    cfg = RunConfig(seed=int(raw.get("seed", 0)) if seed is None else int(seed))
    data = raw.get("data") or {}
    if "synthetic" in data and "csv" in data:
        errors.append("data: give either 'synthetic' or 'csv', not both")
    if "synthetic" in data:
        cfg.synthetic = dict(data["synthetic"] or {})
    elif "csv" in data:
        cfg.csv_path = str(data["csv"])
        cfg.schema = dict(data.get("schema") or {})
    else:
        cfg.synthetic = {}
    tariff = raw.get("tariff") or {}
    cfg.flat = tariff.get("flat")
    cfg.tou = tariff.get("tou")
    if cfg.flat is not None and not float(cfg.flat) > 0:
        errors.append("tariff.flat must be positive")
    if cfg.csv_path is not None and (cfg.flat is None or cfg.tou is None):
        errors.append("tariff.flat and tariff.tou are required with CSV data")
    cfg.fit = dict(raw.get("fit") or {})
    for key in set(cfg.fit) - _FIT_KEYS:
        errors.append(f"fit: unknown key {key!r}")
    if mode is not None:
        cfg.fit["mode"] = mode
    try:
        SolverMode.parse(cfg.fit.get("mode", "alternating"))
    except ValueError as exc:
        errors.append(f"fit.mode: {exc}")
    ev = raw.get("evaluation") or {}
    cfg.train_days = ev.get("train_days")
    cfg.horizon_days = int(ev.get("horizon_days", 5))
    cfg.lookback = int(ev.get("lookback", 5))
    if cfg.horizon_days < 1:
        errors.append("evaluation.horizon_days must be >= 1")
    if cfg.lookback < 1:
        errors.append("evaluation.lookback must be >= 1")
    if "grid" in raw:
        grid = dict(raw["grid"] or {})
        cfg.validation_days = int(grid.pop("validation_days", 5))
        for key, values in grid.items():
            if key not in DEFAULT_GRID:
                errors.append(f"grid: unknown parameter {key!r}")
            elif not isinstance(values, list) or not values:
                errors.append(f"grid.{key} must be a nonempty list")
        cfg.grid = {**DEFAULT_GRID, **{k: v for k, v in grid.items() if k in DEFAULT_GRID}}
    if errors:
        raise ValueError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def _synthetic_spec(cfg: RunConfig) -> D.SyntheticSpec:
    kw = dict(cfg.synthetic or {})
    if cfg.flat is not None:
        kw.setdefault("flat_price", float(cfg.flat))
    if cfg.tou is not None:
        kw.setdefault("tou", tuple(cfg.tou))
    kw.setdefault("seed", cfg.seed)
    return D.SyntheticSpec(**kw)


def _tariff(cfg: RunConfig, T: int):
    if cfg.csv_path is None:
        spec = _synthetic_spec(cfg)
        if spec.T == T:
            return spec.tariff()
    flat = float(cfg.flat if cfg.flat is not None else 22.0)
    tou = np.asarray(cfg.tou if cfg.tou is not None else D.SyntheticSpec(T=T).tou_schedule(), dtype=float)
    prices = build_tou_prices(flat, tou)
    return prices, build_comfort_costs(prices, flat, tou)


def _fit_config(cfg: RunConfig, T: int, overrides: Optional[dict] = None) -> FitConfig:
    f = {**cfg.fit, **(overrides or {})}
    hyper = Hyperparams(int(f.get("t_max", min(8, T))), float(f.get("alpha", 0.0)),
                        float(f.get("gamma_sf_plus", 1.0)), float(f.get("gamma_sf_minus", 1.0)),
                        float(f.get("gamma_sd", 1.0)))
    kw = {k: f[k] for k in ("max_iters", "tol_obj", "max_nodes", "day_max_nodes", "feature_scaling") if k in f}
    kw.setdefault("day_max_nodes", 100)
    return FitConfig(hyper=hyper, solver_mode=f.get("mode", "alternating"), seed=cfg.seed, **kw)


def _dataset(cfg: RunConfig, out: Path) -> D.Dataset:
    stored = out / "dataset.json"
    if stored.exists():
        return D.load(stored)
    if cfg.csv_path is not None:
        return D.load_csv(cfg.csv_path, cfg.schema)
    raise FileNotFoundError(f"{stored} not found; run 'simulate' first or configure data.csv")


def _train_days(cfg: RunConfig, ds: D.Dataset) -> int:
    n = cfg.train_days if cfg.train_days is not None else ds.S - cfg.horizon_days
    if not 1 <= n <= ds.S:
        raise ValueError(f"train_days={n} does not fit a dataset of {ds.S} days")
    return int(n)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


def _fit_on(cfg: RunConfig, days, overrides=None):
    T = days[0].T
    prices, costs = _tariff(cfg, T)
    S = len(days)
    bounds = D.default_bounds(days)
    return fit(list(days), bounds, [prices] * S, [costs] * S, _fit_config(cfg, T, overrides))


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, out: Path) -> D.Dataset:
    spec = _synthetic_spec(cfg)
    ds, truth, decisions = D.generate_synthetic(spec)
    D.save(ds, out / "dataset.json")
    D.save({"spec": spec, "truth": list(truth), "decisions": list(decisions)}, out / "truth.json")
    buf = [["day", "hour", "net_demand_kwh", "generation_kwh", *ds.feature_names]]
    for d in ds.days:
        for t in range(d.T):
            buf.append([d.day_index, t, repr(float(d.demand_hat[t])), repr(float(d.gen_hat[t])),
                        *[repr(float(v)) for v in d.features[t]]])
    with (out / "dataset.csv").open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(buf)
    log.info("simulated %d days of %d hours", ds.S, ds.T)
    return ds


def cmd_fit(cfg: RunConfig, out: Path):
    ds = _dataset(cfg, out)
    n = _train_days(cfg, ds)
    result = _fit_on(cfg, ds.days[:n])
    D.save(result, out / "fit.json")
    rows = ["day,hour,observed,baseload_net,flexible,reconstructed"]
    for s, (day, sol) in enumerate(zip(ds.days[:n], result.per_day)):
        base = result.d_bl - day.gen_hat
        for t in range(day.T):
            rows.append(f"{s},{t},{day.demand_hat[t]!r},{base[t]!r},{(sol.d_sf + sol.d_sd)[t]!r},"
                        f"{(base + sol.d_sf + sol.d_sd)[t]!r}")
    _write(out / "decomposition.csv", "\n".join(rows) + "\n")
    print(f"training loss {result.training_loss:.6g}, max KKT residual {result.kkt_max_residual:.3g}, "
          f"iterations {result.iterations}, converged {result.converged}")
    return result


def cmd_forecast(cfg: RunConfig, out: Path, quantiles: bool = False):
    ds = _dataset(cfg, out)
    n = _train_days(cfg, ds)
    result = D.load(out / "fit.json")
    horizon = ds.days[n:n + cfg.horizon_days]
    if not horizon:
        raise ValueError("no held-out days to forecast")
    prices, costs = _tariff(cfg, ds.T)
    t_max = int(_fit_config(cfg, ds.T).hyper.t_max)
    residuals = training_residuals(result, ds.days[:n]) if quantiles else None
    fcs = []
    for day in horizon:
        fc = point_forecast(result, prices, costs, day.gen_hat, day.features, None, t_max)
        if quantiles:
            fc = fc.with_quantiles(residuals, DEFAULT_LEVELS)
        fcs.append(fc)
    _write(out / "forecast.csv", forecasts_to_csv(fcs, first_day=n))
    return fcs


def _read_forecast(path: Path):
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    days = sorted({int(r["day"]) for r in rows})
    T = max(int(r["hour"]) for r in rows) + 1
    qcols = [k for k in rows[0] if k.startswith("q_")]
    net = np.zeros((len(days), T))
    qv = np.zeros((len(days), len(qcols), T))
    pos = {d: i for i, d in enumerate(days)}
    for r in rows:
        i, t = pos[int(r["day"])], int(r["hour"])
        net[i, t] = float(r["net"])
        for j, k in enumerate(qcols):
            qv[i, j, t] = float(r[k]) if r[k] != "" else np.nan
    levels = np.array([int(k[2:]) / 100 for k in qcols])
    return days, net, (qv if qcols and np.all(np.isfinite(qv)) else None), levels


def cmd_evaluate(cfg: RunConfig, out: Path, baseline: Optional[str] = None, truth: Optional[Path] = None):
    days, net, qv, levels = _read_forecast(out / "forecast.csv")
    if truth is not None:
        _, observed, _, _ = _read_forecast(truth)
    else:
        ds = _dataset(cfg, out)
        observed = np.array([ds.days[d].demand_hat for d in days])
    report = evaluate(observed, net, qv, levels if qv is not None else DEFAULT_LEVELS)
    lines = ["IO", report.table()]
    _write(out / "evaluation.csv", report.to_csv())
    if baseline == "seasonal-naive":
        ds = _dataset(cfg, out)
        base = np.array([seasonal_naive(ds.demand()[:d], min(cfg.lookback, d)) for d in days])
        rep_b = evaluate(observed, base)
        _write(out / "evaluation_seasonal_naive.csv", rep_b.to_csv())
        lines += ["", "seasonal-naive", rep_b.table()]
    print("\n".join(lines))
    return report


def _grid_points(grid: dict) -> list[dict]:
    keys = sorted(grid)
    combos = itertools.product(*[sorted(grid[k]) for k in keys])
    return [dict(zip(keys, c)) for c in combos]


def cmd_gridsearch(cfg: RunConfig, out: Path):
    """Rank grid points by MAE on the last ``validation_days`` of the training window."""
    ds = _dataset(cfg, out)
    n = _train_days(cfg, ds)
    v = cfg.validation_days
    if not 1 <= v < n:
        raise ValueError(f"validation_days={v} needs more than {v} training days")
    points = [p for p in _grid_points(cfg.grid) if p["t_max"] <= ds.T]
    if not points:
        raise ValueError("empty grid")
    fit_days, val_days = ds.days[:n - v], ds.days[n - v:n]
    prices, costs = _tariff(cfg, ds.T)

    def job(point):
        try:
            result = _fit_on(cfg, fit_days, point)
            pred = [point_forecast(result, prices, costs, d.gen_hat, d.features, None, int(point["t_max"])).net
                    for d in val_days]
            return float(np.mean([np.abs(p - d.demand_hat).mean() for p, d in zip(pred, val_days)]))
        except Exception as exc:  # a failing grid point ranks last
            log.warning("grid point %s failed: %s", point, exc)
            return float("inf")

    workers = max(1, int(os.environ.get("FLEXIO_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        scores = list(pool.map(job, points))
    keys = sorted(points[0])
    # stable sort over grid order gives lexicographic tie-breaking
    ranked = sorted(range(len(points)), key=lambda i: scores[i])
    rows = [",".join(["rank", *keys, "mae"])]
    for r, i in enumerate(ranked, start=1):
        rows.append(",".join([str(r), *[repr(points[i][k]) for k in keys], repr(scores[i])]))
    _write(out / "gridsearch.csv", "\n".join(rows) + "\n")
    best = points[ranked[0]]
    result = _fit_on(cfg, ds.days[:n], best)
    D.save(result, out / "fit.json")
    print("best", ", ".join(f"{k}={best[k]}" for k in keys), f"validation MAE {scores[ranked[0]]:.6g}")
    return best, [(points[i], scores[i]) for i in ranked]


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexio", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=["simulate", "fit", "forecast", "evaluate", "gridsearch"])
    parser.add_argument("--config", type=Path, help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--mode", choices=["exact", "alternating"], help="fit solver mode")
    parser.add_argument("--out", type=Path, default=Path("flexio_out"), help="artefact directory")
    parser.add_argument("--quantiles", action="store_true", help="emit quantile forecasts")
    parser.add_argument("--baseline", choices=["seasonal-naive"], help="also score a benchmark")
    parser.add_argument("--truth", type=Path, help="evaluate against this forecast-format CSV")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = yaml.safe_load(args.config.read_text(encoding="utf-8")) if args.config else {}
        cfg = parse_config(raw, args.seed, args.mode)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            cmd_simulate(cfg, args.out)
        elif args.command == "fit":
            cmd_fit(cfg, args.out)
        elif args.command == "forecast":
            cmd_forecast(cfg, args.out, args.quantiles)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.out, args.baseline, args.truth)
        else:
            cmd_gridsearch(cfg, args.out)
    except (ValueError, FileNotFoundError, OSError, yaml.YAMLError) as exc:
        print(f"flexio {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
