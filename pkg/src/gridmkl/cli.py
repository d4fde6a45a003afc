"""Command-line front end: fit, tune, predict, simulate, report.

Configs are strict JSON (unknown keys are fatal) so experiments stay
reproducible. Exit codes: 0 success, 1 numerical failure (non-convergence),
2 usage or input error; errors are emitted as a single JSON line on stderr.
The GRIDMKL_THREADS environment variable caps BLAS thread counts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Bad run configuration (exit code 2)."""


def _set_thread_env() -> None:
    threads = os.environ.get("GRIDMKL_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_TOP_KEYS = {"paths", "node_kernels", "time_kernels", "rank", "mu", "mu_grid",
             "eps_bcd", "window_days", "tune_days", "period", "seed", "restarts",
             "ridge_kernel", "ridge_mu_grid", "simulate"}
_PATH_KEYS = {"prices", "node_features", "time_features", "graph", "output_dir"}
_SIM_KEYS = {"n_nodes", "n_days", "rank_true", "active_node_kernels",
             "active_time_kernels", "noise_sigma", "noise_relative", "seed",
             "daily_profile_amplitude", "signal_rms", "start", "feature_margin_hours"}


@dataclass
class RunConfig:
    prices: str | None
    node_features: str | None
    time_features: str | None
    graph: str | None
    output_dir: str
    node_recipes: list
    time_recipes: list
    rank: int
    mu: float | None = None
    mu_grid: list | None = None
    eps_bcd: float = 1e-3
    window_days: int = 7
    tune_days: int | None = None
    period: int = 24
    seed: int = 0
    restarts: int = 1
    ridge_kernel: str | None = None
    ridge_mu_grid: list | None = None
    simulate: dict | None = None
    raw: dict = field(default_factory=dict)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _positive_list(values, what) -> list:
    _require(isinstance(values, list) and values, f"{what} must be a nonempty list")
    out = []
    for v in values:
        _require(isinstance(v, (int, float)) and v > 0, f"{what} entries must be positive numbers")
        out.append(float(v))
    return out


def parse_config(path) -> RunConfig:
    """Strictly validated run configuration (unknown keys are errors)."""
    from .kernels import KernelRecipe

    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    _require(isinstance(data, dict), "config must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    _require(not unknown, f"unknown config keys {sorted(unknown)}")
    for key in ("paths", "node_kernels", "time_kernels", "rank"):
        _require(key in data, f"config is missing required key {key!r}")

    paths = data["paths"]
    _require(isinstance(paths, dict), "'paths' must be an object")
    unknown = set(paths) - _PATH_KEYS
    _require(not unknown, f"unknown path keys {sorted(unknown)}")
    _require("output_dir" in paths and isinstance(paths["output_dir"], str),
             "'paths.output_dir' is required")

    def recipes(key, family):
        entries = data[key]
        _require(isinstance(entries, list) and entries, f"{key!r} must be a nonempty list")
        try:
            return [KernelRecipe.from_dict(e, family) for e in entries]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    node_recipes = recipes("node_kernels", "node")
    time_recipes = recipes("time_kernels", "time")
    labels = [r.label for r in node_recipes] + [r.label for r in time_recipes]
    dupes = sorted({lab for lab in labels if labels.count(lab) > 1})
    _require(not dupes, f"duplicate kernel labels {dupes}")

    rank = data["rank"]
    _require(isinstance(rank, int) and rank >= 1, "'rank' must be an integer >= 1")

    mu = data.get("mu")
    if mu is not None:
        _require(isinstance(mu, (int, float)) and mu > 0, "'mu' must be positive")
        mu = float(mu)
    mu_grid = data.get("mu_grid")
    if mu_grid is not None:
        mu_grid = _positive_list(mu_grid, "'mu_grid'")
    ridge_grid = data.get("ridge_mu_grid")
    if ridge_grid is not None:
        ridge_grid = _positive_list(ridge_grid, "'ridge_mu_grid'")

    eps_bcd = float(data.get("eps_bcd", 1e-3))
    _require(eps_bcd > 0, "'eps_bcd' must be positive")
    window_days = data.get("window_days", 7)
    _require(isinstance(window_days, int) and window_days >= 1, "'window_days' must be >= 1")
    tune_days = data.get("tune_days")
    if tune_days is not None:
        _require(isinstance(tune_days, int) and tune_days > window_days,
                 "'tune_days' must exceed 'window_days'")
    period = data.get("period", 24)
    _require(isinstance(period, int) and period >= 1, "'period' must be >= 1")
    seed = data.get("seed", 0)
    _require(isinstance(seed, int), "'seed' must be an integer")
    restarts = data.get("restarts", 1)
    _require(isinstance(restarts, int) and restarts >= 1, "'restarts' must be >= 1")
    ridge_kernel = data.get("ridge_kernel")
    if ridge_kernel is not None:
        _require(ridge_kernel in [r.label for r in time_recipes],
                 f"'ridge_kernel' {ridge_kernel!r} is not a time kernel label")

    sim = data.get("simulate")
    if sim is not None:
        _require(isinstance(sim, dict), "'simulate' must be an object")
        unknown = set(sim) - _SIM_KEYS
        _require(not unknown, f"unknown simulate keys {sorted(unknown)}")

    return RunConfig(
        prices=paths.get("prices"), node_features=paths.get("node_features"),
        time_features=paths.get("time_features"), graph=paths.get("graph"),
        output_dir=paths["output_dir"],
        node_recipes=node_recipes, time_recipes=time_recipes,
        rank=rank, mu=mu, mu_grid=mu_grid, eps_bcd=eps_bcd,
        window_days=window_days, tune_days=tune_days, period=period,
        seed=seed, restarts=restarts, ridge_kernel=ridge_kernel,
        ridge_mu_grid=ridge_grid, simulate=sim, raw=data,
    )


def _load_dataset(cfg: RunConfig):
    from . import dataio
    from .forecast import PricePanel
    from .pipeline import MarketDataset

    _require(cfg.prices is not None, "config 'paths.prices' is required for this command")
    for key in ("prices", "node_features", "time_features", "graph"):
        p = getattr(cfg, key)
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"input file does not exist: {p}")
    node_ids, timestamps, prices = dataio.read_price_csv(cfg.prices)
    panel = PricePanel(prices=prices, node_ids=node_ids, timestamps=timestamps,
                       period=cfg.period)
    node_features = (dataio.read_features_csv(cfg.node_features)
                     if cfg.node_features else None)
    time_features = (dataio.read_features_csv(cfg.time_features)
                     if cfg.time_features else None)
    graph = dataio.read_graph_csv(cfg.graph, node_ids) if cfg.graph else None
    return MarketDataset(panel, cfg.node_recipes, cfg.time_recipes,
                         node_features=node_features, time_features=time_features,
                         graph=graph)


def _echo_config(cfg: RunConfig) -> None:
    from . import dataio

    dataio.ensure_dir(cfg.output_dir)
    dataio.write_json(os.path.join(cfg.output_dir, "config.json"), cfg.raw)


def _tuned_mu(cfg: RunConfig) -> float | None:
    tune_path = os.path.join(cfg.output_dir, "tune.json")
    if os.path.exists(tune_path):
        from . import dataio
        return float(dataio.read_json(tune_path)["best_mu"])
    return None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_simulate(cfg: RunConfig) -> dict:
    from . import dataio
    from .simulate import SyntheticSpec, generate_synthetic_market, write_market_files

    _require(cfg.simulate is not None, "config needs a 'simulate' block for this command")
    sim = cfg.simulate
    spec = SyntheticSpec(
        n_nodes=int(sim.get("n_nodes", 40)),
        n_hours=24 * int(sim.get("n_days", 8)),
        rank_true=int(sim.get("rank_true", 4)),
        active_node_kernels=tuple(sim.get("active_node_kernels",
                                          [cfg.node_recipes[0].label])),
        active_time_kernels=tuple(sim.get("active_time_kernels",
                                          [cfg.time_recipes[0].label])),
        noise_sigma=float(sim.get("noise_sigma", 0.0)),
        noise_relative=bool(sim.get("noise_relative", False)),
        seed=int(sim.get("seed", cfg.seed)),
        daily_profile_amplitude=float(sim.get("daily_profile_amplitude", 0.0)),
        signal_rms=float(sim.get("signal_rms", 1.0)),
        feature_margin_hours=int(sim.get("feature_margin_hours", 24)),
        start_iso=str(sim.get("start", "2012-06-01T00:00:00")),
    )
    try:
        market = generate_synthetic_market(spec, cfg.node_recipes, cfg.time_recipes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    paths = write_market_files(market, cfg.output_dir)
    echo = dict(cfg.raw)
    echo["paths"] = {
        "prices": paths["prices"], "node_features": paths["node_features"],
        "time_features": paths["time_features"], "graph": paths["graph"],
        "output_dir": cfg.output_dir,
    }
    dataio.write_json(os.path.join(cfg.output_dir, "config.json"), echo)
    return {"command": "simulate", "paths": paths,
            "signal_rms": market.signal_rms,
            "config": os.path.join(cfg.output_dir, "config.json")}


def _cmd_fit(cfg: RunConfig) -> dict:
    from . import bcd, dataio
    from .forecast import center_prices
    from .pipeline import resolved_manifest

    mu = cfg.mu if cfg.mu is not None else _tuned_mu(cfg)
    _require(mu is not None, "no 'mu' in config and no tune.json in the output dir")
    dataset = _load_dataset(cfg)
    t1 = dataset.panel.n_hours
    node_kernels, time_kernels, _ = dataset.window_kernels(0, t1)
    centered, means = center_prices(dataset.panel)
    state = bcd.fit(centered.prices, node_kernels, time_kernels, cfg.rank, mu,
                    eps_bcd=cfg.eps_bcd, seed=cfg.seed, restarts=cfg.restarts)
    _echo_config(cfg)
    extras = {
        "config": cfg.raw,
        "hourly_means": [float(v) for v in means],
        "period": cfg.period,
        "train_start": dataset.panel.timestamps[0].isoformat(),
        "train_hours": t1,
        "node_ids": list(dataset.panel.node_ids),
        "seed": cfg.seed,
        "kernels": resolved_manifest(dataset.last_fitted),
    }
    model_dir = os.path.join(cfg.output_dir, "model")
    bcd.save_model(state, model_dir, extras=extras)
    with open(os.path.join(cfg.output_dir, "cost_trace.csv"), "w") as fh:
        for v in state.cost_trace:
            fh.write(dataio.format_float(v) + "\n")
    sel_node, sel_time = bcd.selected_kernels(state)
    summary = {
        "command": "fit", "model_dir": model_dir, "mu": mu,
        "cost": state.cost_trace[-1], "sweeps": state.sweeps,
        "converged": state.converged,
        "selected_node_kernels": sorted(sel_node),
        "selected_time_kernels": sorted(sel_time),
    }
    if not state.converged:
        raise _NumericalFailure("BCD did not converge within the sweep cap", summary)
    return summary


def _cmd_tune(cfg: RunConfig) -> dict:
    from . import bcd, dataio
    from .forecast import center_prices, rolling_tune

    _require(cfg.mu_grid is not None, "config needs 'mu_grid' for tuning")
    dataset = _load_dataset(cfg)
    last_target = None
    if cfg.tune_days is not None:
        last_target = min(cfg.tune_days * 24, dataset.panel.n_hours)
    try:
        result = rolling_tune(dataset, cfg.mu_grid, cfg.rank,
                              window_days=cfg.window_days, eps_bcd=cfg.eps_bcd,
                              seed=cfg.seed, restarts=cfg.restarts,
                              last_target=last_target)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    window = cfg.window_days * 24
    nk, tk, _ = dataset.window_kernels(0, window)
    centered, _ = center_prices(dataset.panel.slice_hours(0, window))
    diag_mu_max = bcd.mu_max(centered.prices, nk, tk, cfg.rank, seed=cfg.seed)
    _echo_config(cfg)
    payload = {
        "best_mu": result.best_mu,
        "mu_grid": result.mu_grid,
        "mean_rmse": {dataio.format_float(m): v for m, v in result.mean_rmse.items()},
        "fold_rmses": {dataio.format_float(m): v for m, v in result.fold_rmses.items()},
        "folds": result.folds,
        "mu_max": diag_mu_max,
        "n_unconverged": result.n_unconverged,
    }
    dataio.write_json(os.path.join(cfg.output_dir, "tune.json"), payload)
    return {"command": "tune", "best_mu": result.best_mu,
            "mean_rmse": result.mean_rmse[result.best_mu],
            "mu_max": diag_mu_max,
            "tune_json": os.path.join(cfg.output_dir, "tune.json")}


def _cmd_predict(model_dir: str, horizon: int, out_dir: str | None) -> dict:
    from . import bcd, dataio
    from .forecast import decenter_forecast, predict

    _require(horizon >= 1, "horizon must be a positive number of hours")
    if not os.path.isdir(model_dir):
        raise ConfigError(f"model directory does not exist: {model_dir}")
    try:
        state, manifest = bcd.load_model(model_dir)
    except dataio.InputDataError as exc:
        raise ConfigError(f"not a trained model bundle: {exc}") from None
    extras = manifest.get("extras") or {}
    for key in ("config", "hourly_means", "train_hours"):
        _require(key in extras, f"model bundle is missing {key!r}; re-run fit")
    cfg = _config_from_echo(extras["config"])
    dataset = _load_dataset(cfg)
    t1 = int(extras["train_hours"])
    _require(dataset.panel.n_hours == t1,
             "price panel length changed since fit; refit before predicting")
    _, _, cross = dataset.window_kernels(0, t1, t1 + horizon)
    centered_fc = predict(state, cross)
    import numpy as np

    means = np.asarray(extras["hourly_means"], dtype=float)
    target_ts = dataset.target_timestamps(t1, t1 + horizon)
    raw_fc = decenter_forecast(centered_fc, means, target_ts, int(extras["period"]))
    out_dir = out_dir or os.path.dirname(os.path.abspath(model_dir))
    dataio.ensure_dir(out_dir)
    centered_path = os.path.join(out_dir, "forecast.csv")
    raw_path = os.path.join(out_dir, "forecast_decentered.csv")
    dataio.write_price_csv(centered_path, dataset.panel.node_ids, target_ts, centered_fc)
    dataio.write_price_csv(raw_path, dataset.panel.node_ids, target_ts, raw_fc)
    return {"command": "predict", "horizon": horizon,
            "forecast": centered_path, "forecast_decentered": raw_path}


def _config_from_echo(raw: dict) -> RunConfig:
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(raw, fh)
        tmp = fh.name
    try:
        return parse_config(tmp)
    finally:
        os.unlink(tmp)


def _cmd_report(run_dir: str) -> dict:
    from . import dataio
    from .forecast import evaluation_report, rolling_evaluate, tune_ridge

    config_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(config_path):
        raise ConfigError(f"no config.json in run directory {run_dir}")
    cfg = parse_config(config_path)
    tune_path = os.path.join(run_dir, "tune.json")
    if os.path.exists(tune_path):
        mu = float(dataio.read_json(tune_path)["best_mu"])
    elif cfg.mu is not None:
        mu = cfg.mu
    else:
        raise ConfigError("no tuned mu (tune.json) and no 'mu' in config")
    dataset = _load_dataset(cfg)
    ridge_index = 0
    if cfg.ridge_kernel is not None:
        ridge_index = [r.label for r in cfg.time_recipes].index(cfg.ridge_kernel)
    ridge_grid = cfg.ridge_mu_grid or cfg.mu_grid or [mu]
    last_tune_target = None
    if cfg.tune_days is not None:
        last_tune_target = min(cfg.tune_days * 24, dataset.panel.n_hours)
    try:
        ridge_mu = tune_ridge(dataset, ridge_grid, kernel_index=ridge_index,
                              window_days=cfg.window_days, last_target=last_tune_target)
        records = rolling_evaluate(dataset, mu, cfg.rank, ridge_mu,
                                   window_days=cfg.window_days, eps_bcd=cfg.eps_bcd,
                                   seed=cfg.seed, restarts=cfg.restarts,
                                   ridge_kernel_index=ridge_index)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report = evaluation_report(records, [r.label for r in cfg.node_recipes],
                               [r.label for r in cfg.time_recipes], mu, ridge_mu)
    report_path = os.path.join(run_dir, "report.json")
    dataio.write_json(report_path, report)
    return {"command": "report", "report": report_path,
            "mean_rmse": report["mean_rmse"], "days": len(report["days"])}


class _NumericalFailure(RuntimeError):
    def __init__(self, message, summary=None):
        super().__init__(message)
        self.summary = summary


def run_command(cmd: str, cfg: RunConfig | None = None, *, model_dir: str | None = None,
                horizon: int = 24, run_dir: str | None = None,
                out_dir: str | None = None) -> dict:
    """Dispatch a CLI command; returns the summary printed on stdout."""
    if cmd == "fit":
        return _cmd_fit(cfg)
    if cmd == "tune":
        return _cmd_tune(cfg)
    if cmd == "simulate":
        return _cmd_simulate(cfg)
    if cmd == "predict":
        return _cmd_predict(model_dir, horizon, out_dir)
    if cmd == "report":
        return _cmd_report(run_dir)
    raise ConfigError(f"unknown command {cmd!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": message, "exit_code": 2}), file=sys.stderr)
        raise SystemExit(2)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gridmkl",
                     description="Low-rank multi-kernel electricity price forecasting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("fit", "tune", "simulate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
    p = sub.add_parser("predict")
    p.add_argument("--model", required=True)
    p.add_argument("--horizon", type=int, default=24)
    p.add_argument("--out", default=None)
    p = sub.add_parser("report")
    p.add_argument("--run", required=True)
    return parser


def main(argv=None) -> int:
    _set_thread_env()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command in ("fit", "tune", "simulate"):
            cfg = parse_config(args.config)
            summary = run_command(args.command, cfg)
        elif args.command == "predict":
            summary = run_command("predict", model_dir=args.model,
                                  horizon=args.horizon, out_dir=args.out)
        else:
            summary = run_command("report", run_dir=args.run)
    except _NumericalFailure as exc:
        print(json.dumps({"error": str(exc), "exit_code": 1}), file=sys.stderr)
        if exc.summary is not None:
            print(json.dumps(exc.summary, sort_keys=True))
        return 1
    except (ConfigError,) as exc:
        print(json.dumps({"error": str(exc), "exit_code": 2}), file=sys.stderr)
        return 2
    except Exception as exc:  # input and numerical errors from the engine
        from .canonical import ConvergenceError
        from .dataio import InputDataError

        if isinstance(exc, ConvergenceError):
            print(json.dumps({"error": str(exc), "exit_code": 1}), file=sys.stderr)
            return 1
        if isinstance(exc, (InputDataError, ValueError, OSError)):
            print(json.dumps({"error": str(exc), "exit_code": 2}), file=sys.stderr)
            return 2
        raise
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
