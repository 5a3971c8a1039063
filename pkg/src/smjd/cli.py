"""Command line interface.

One JSON configuration file drives every subcommand; ``--seed``,
``--out``, and ``--threads`` override the corresponding config entries.
All artifacts are deterministic for a fixed seed: floats are written
with round-trip precision, JSON keys are sorted, and Monte Carlo
estimators reduce in path order (the engine itself runs single-threaded,
so ``--threads`` never changes results).

Subcommands
-----------
check
    Validate the rate spec and the positivity of the tilted jump
    intensity; write ``check.json``.
integrals
    Jump-measure integrals and per-regime tilt coefficients;
    write ``integrals.json``.
simulate
    Objective-measure paths as ``path_NNNN.csv`` plus ``simulate.json``.
price
    Price one claim with the configured method (``ie``, ``fd``, ``mc-q``,
    ``mc-p``); grid methods also write the full ``surface.csv``.
hedge-backtest
    Solve a surface, replay its hedge along simulated paths, and write
    ``backtest.json``.
xval
    Cross-validate the two grid solvers against each other and a Monte
    Carlo interval; write ``xval.json``.

Exit codes
----------
``0`` success; ``1`` validation failure (invalid model or config values,
inadmissible measure change, failed ``check``); ``2`` numerical failure
(grid resolution, cross-validation disagreement); ``3`` I/O failure
(unreadable config, malformed JSON, unusable output directory).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .fd import solve_price_fd
from .market import (
    check_no_arbitrage,
    market_model_from_dict,
    radon_nikodym_path,
    simulate_asset_path,
)
from .mc import backtest_hedge, price_mc_p_weighted, price_mc_q
from .payoffs import payoff_from_dict
from .pricing import GridResolutionError, build_grid, compute_betas, solve_price
from .regimes import validate_rates

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    # usage errors are config errors, not numerical ones
    def error(self, message):
        self.exit(EXIT_IO, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smjd", description="regime-switching jump-diffusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = [
        ("check", "validate rates and measure-change admissibility"),
        ("integrals", "report jump integrals and tilt coefficients"),
        ("simulate", "write objective-measure sample paths"),
        ("price", "price a claim with the configured method"),
        ("hedge-backtest", "replay the hedge along simulated paths"),
        ("xval", "cross-validate solvers against a Monte Carlo interval"),
    ]
    for name, help_text in specs:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="JSON run configuration")
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--seed", type=int, default=None, help="override config seed")
        cmd.add_argument("--threads", type=int, default=1, help="worker budget hint")
    return parser


# ---------------------------------------------------------------------------
# Config access
# ---------------------------------------------------------------------------


def _resolve_model_file(cfg: dict, cfg_path: Path) -> None:
    """Inline a model given as a file path, resolved against the config's directory."""
    ref = cfg.get("model", cfg.get("model_file"))
    if not isinstance(ref, str):
        return
    path = Path(ref)
    if not path.is_absolute():
        path = cfg_path.parent / path
    cfg["model"] = json.loads(path.read_bytes())


def _model_of(cfg: dict):
    if "model" not in cfg:
        raise ValueError("config requires a 'model' section")
    return market_model_from_dict(cfg["model"])


def _payoff_of(cfg: dict):
    if "payoff" not in cfg:
        raise ValueError("config requires a 'payoff' section")
    return payoff_from_dict(cfg["payoff"])


def _state_of(cfg: dict) -> tuple[float, int, float]:
    if "s0" not in cfg:
        raise ValueError("config requires 's0'")
    return float(cfg["s0"]), int(cfg.get("x0", 0)), float(cfg.get("y0", 0.0))


def _grid_of(cfg: dict, model):
    g = cfg.get("grid", {})
    s_ref = g.get("s_ref", cfg.get("s0"))
    if s_ref is None:
        raise ValueError("config requires 'grid.s_ref' or 's0'")
    n_age = g.get("n_age")
    return build_grid(
        model,
        s_ref=float(s_ref),
        n_time=int(g.get("n_time", 50)),
        n_space=int(g.get("n_space", 401)),
        n_age=None if n_age is None else int(n_age),
        width=float(g.get("width", 6.0)),
    )


def _child_rngs(seed: int, n: int) -> list[np.random.Generator]:
    seqs = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in seqs]


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands (each returns (exit_code, artifact names))
# ---------------------------------------------------------------------------


def _cmd_check(cfg: dict, out: Path) -> tuple[int, list[str]]:
    model = _model_of(cfg)
    y0 = float(cfg.get("y0", 0.0))
    opts = cfg.get("check", {})
    y_max = y0 + model.horizon
    rates_report = validate_rates(
        model.rates,
        y_max=y_max,
        # probe the hazard tail far past the visited ages unless overridden
        divergence_age=float(opts.get("divergence_age", 1000.0 * y_max)),
        divergence_threshold=float(opts.get("divergence_threshold", 30.0)),
    )
    arb_report = check_no_arbitrage(model)
    passed = rates_report.passed and arb_report.passed
    _write_json(
        out / "check.json",
        {
            "passed": passed,
            "rates": rates_report.to_dict(),
            "no_arbitrage": arb_report.to_dict(),
        },
    )
    return (EXIT_OK if passed else EXIT_VALIDATION), ["check.json"]


def _cmd_integrals(cfg: dict, out: Path) -> tuple[int, list[str]]:
    model = _model_of(cfg)
    ints = model.ints
    per_regime = []
    for i in range(model.n_states):
        betas = compute_betas(model, 0.0, i)
        tilt = betas.jump_tilt
        per_regime.append(
            {
                "state": i,
                "ratio": float(model.j_ratio(0.0, i)),
                "drift_tilt": betas.drift_tilt,
                "tilt_min": float(tilt.min()) if tilt.size else 1.0,
                "tilt_max": float(tilt.max()) if tilt.size else 1.0,
            }
        )
    _write_json(
        out / "integrals.json",
        {
            "int_eta": ints.int_eta,
            "int_eta_sq": ints.int_eta_sq,
            "mass": ints.mass,
            "quad_growth_rate": ints.quad_growth_rate,
            "per_regime": per_regime,
        },
    )
    return EXIT_OK, ["integrals.json"]


def _cmd_simulate(cfg: dict, out: Path) -> tuple[int, list[str]]:
    model = _model_of(cfg)
    s0, x0, y0 = _state_of(cfg)
    seed = int(cfg.get("seed", 0))
    sim = cfg.get("simulate", {})
    n_paths = int(sim.get("n_paths", 1))
    n_record = int(sim.get("n_record", 0))
    if n_paths < 1:
        raise ValueError("simulate.n_paths must be positive")
    record = np.linspace(0.0, model.horizon, n_record + 1) if n_record > 0 else None
    admissible = check_no_arbitrage(model).passed

    files = []
    terminal = np.empty(n_paths)
    weights = np.empty(n_paths) if admissible else None
    for p, rng in enumerate(_child_rngs(seed, n_paths)):
        path = simulate_asset_path(model, s0, x0, y0, rng, record_times=record)
        name = f"path_{p:04d}.csv"
        path.to_csv(out / name)
        files.append(name)
        terminal[p] = path.spot[-1]
        if admissible:
            weights[p] = radon_nikodym_path(model, path)
    _write_json(
        out / "simulate.json",
        {
            "n_paths": n_paths,
            "seed": seed,
            "files": files,
            "terminal": {
                "mean": float(terminal.mean()),
                "std": float(terminal.std(ddof=1)) if n_paths > 1 else 0.0,
                "min": float(terminal.min()),
                "max": float(terminal.max()),
            },
            "mean_weight": float(weights.mean()) if admissible else None,
        },
    )
    return EXIT_OK, files + ["simulate.json"]


def _solve_surface(cfg: dict, model, payoff, method: str):
    grid = _grid_of(cfg, model)
    if method == "ie":
        return solve_price(model, payoff, grid)
    if method == "fd":
        return solve_price_fd(model, payoff, grid)
    raise ValueError(f"method {method!r} does not produce a surface")


def _cmd_price(cfg: dict, out: Path) -> tuple[int, list[str]]:
    model = _model_of(cfg)
    payoff = _payoff_of(cfg)
    s0, x0, y0 = _state_of(cfg)
    seed = int(cfg.get("seed", 0))
    method = cfg.get("method", "ie")
    report: dict = {
        "method": method,
        "s0": s0,
        "x0": x0,
        "y0": y0,
        "payoff": payoff.to_dict(),
    }
    if method in ("ie", "fd"):
        surface = _solve_surface(cfg, model, payoff, method)
        surface.to_csv(out / "surface.csv")
        grid = surface.grid
        report.update(
            {
                "price": surface.price(0.0, s0, x0, y0),
                "hedge": float(surface.hedge_at(0.0, s0, x0, y0)),
                "grid": {
                    "n_time": grid.t.size - 1,
                    "n_space": grid.log_s.size,
                    "n_age": grid.y.size - 1,
                    "s_ref": grid.s_ref,
                },
            }
        )
        artifacts = ["price.json", "surface.csv"]
    elif method in ("mc-q", "mc-p", "mc", "mc-weighted"):
        opts = cfg.get("mc", {})
        n_paths = int(opts.get("n_paths", 10000))
        level = float(opts.get("level", 0.99))
        # "mc"/"mc-weighted" kept as aliases of the documented names.
        pricer = price_mc_q if method in ("mc-q", "mc") else price_mc_p_weighted
        est = pricer(model, payoff, s0, x0, y0, n_paths=n_paths, seed=seed, level=level)
        report.update({"price": est.value, "estimate": est.to_dict()})
        artifacts = ["price.json"]
    else:
        raise ValueError(f"unknown pricing method {method!r}")
    _write_json(out / "price.json", report)
    return EXIT_OK, artifacts


def _cmd_backtest(cfg: dict, out: Path) -> tuple[int, list[str]]:
    model = _model_of(cfg)
    payoff = _payoff_of(cfg)
    s0, x0, y0 = _state_of(cfg)
    seed = int(cfg.get("seed", 0))
    method = cfg.get("method", "ie")
    surface = _solve_surface(cfg, model, payoff, method)
    opts = cfg.get("hedge", {})
    report = backtest_hedge(
        model,
        surface,
        payoff,
        s0,
        x0,
        y0,
        n_paths=int(opts.get("n_paths", 1000)),
        n_rebalance=int(opts.get("n_rebalance", 250)),
        seed=seed,
    )
    body = report.to_dict()
    body.update({"method": method, "payoff": payoff.to_dict()})
    _write_json(out / "backtest.json", body)
    return EXIT_OK, ["backtest.json"]


def _cmd_xval(cfg: dict, out: Path) -> tuple[int, list[str]]:
    model = _model_of(cfg)
    payoff = _payoff_of(cfg)
    s0, x0, y0 = _state_of(cfg)
    seed = int(cfg.get("seed", 0))
    opts = cfg.get("xval", {})
    tolerance = float(opts.get("tolerance", 0.01))
    mc_paths = int(opts.get("mc_paths", 200000))
    level = float(opts.get("level", 0.99))

    grid = _grid_of(cfg, model)
    price_ie = solve_price(model, payoff, grid).price(0.0, s0, x0, y0)
    price_fd = solve_price_fd(model, payoff, grid).price(0.0, s0, x0, y0)
    est = price_mc_q(model, payoff, s0, x0, y0, n_paths=mc_paths, seed=seed, level=level)

    rel_gap = abs(price_ie - price_fd) / max(abs(price_ie), abs(price_fd), 1e-12)
    ie_in_ci = est.ci_low <= price_ie <= est.ci_high
    fd_in_ci = est.ci_low <= price_fd <= est.ci_high
    # Deterministic pair compared relatively; MC pairs against the CI half-width.
    half_width = 0.5 * (est.ci_high - est.ci_low)
    pairs = [
        {
            "pair": "ie/fd",
            "gap": rel_gap,
            "tolerance": tolerance,
            "passed": rel_gap <= tolerance,
        },
        {
            "pair": "ie/mc",
            "gap": abs(price_ie - est.value),
            "tolerance": half_width,
            "passed": ie_in_ci,
        },
        {
            "pair": "fd/mc",
            "gap": abs(price_fd - est.value),
            "tolerance": half_width,
            "passed": fd_in_ci,
        },
    ]
    passed = all(p["passed"] for p in pairs)
    _write_json(
        out / "xval.json",
        {
            "ie_price": price_ie,
            "fd_price": price_fd,
            "rel_gap": rel_gap,
            "tolerance": tolerance,
            "mc": est.to_dict(),
            "ie_in_ci": ie_in_ci,
            "fd_in_ci": fd_in_ci,
            "pairs": pairs,
            "passed": passed,
        },
    )
    return (EXIT_OK if passed else EXIT_NUMERICAL), ["xval.json"]


_COMMANDS = {
    "check": _cmd_check,
    "integrals": _cmd_integrals,
    "simulate": _cmd_simulate,
    "price": _cmd_price,
    "hedge-backtest": _cmd_backtest,
    "xval": _cmd_xval,
}


def _write_manifest(
    out: Path, args, cfg_bytes: bytes, cfg: dict, artifacts: list[str], wall: float
) -> None:
    _write_json(
        out / "manifest.json",
        {
            "command": args.command,
            "config": str(args.config),
            "config_sha256": hashlib.sha256(cfg_bytes).hexdigest(),
            "seed": int(cfg.get("seed", 0)),
            "threads": args.threads,
            "versions": {
                "smjd": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "artifacts": sorted(artifacts),
            "wall_time_s": wall,
        },
    )


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        if args.threads < 1:
            raise ValueError("--threads must be at least 1")
        cfg_path = Path(args.config)
        cfg_bytes = cfg_path.read_bytes()
        cfg = json.loads(cfg_bytes)
        if not isinstance(cfg, dict):
            raise ValueError("config must be a JSON object")
        _resolve_model_file(cfg, cfg_path)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = Path(args.out) if args.out else Path(cfg.get("out", "smjd_out"))
        out.mkdir(parents=True, exist_ok=True)
        code, artifacts = _COMMANDS[args.command](cfg, out)
        _write_manifest(out, args, cfg_bytes, cfg, artifacts, time.perf_counter() - start)
        return code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"smjd: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GridResolutionError as exc:
        print(f"smjd: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"smjd: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
