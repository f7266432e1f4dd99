"""Command-line driver: ``dragforge {simulate,gen-dataset,train,optimize,print-config}``.

Exit codes: 0 ok, 1 usage or config error, 2 non-convergence, 3 training
failure, 4 infeasible constraint.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import dataset as dset
from .active_loop import LoopSettings, fit_surrogate, minimize_drag, step_size_search
from .constraints import (
    RequiredRegion,
    SgldConfig,
    constrained_minimize,
    region_from_pgm,
    region_from_rects,
)
from .errors import (
    EmptyDatasetError,
    InfeasibleConstraintError,
    NoViableRunError,
    ParseError,
    ScheduleExhaustedError,
)
from .flow_sim import FlowConfig, evaluate_shape
from .geometry import GridSpec, ShapeParams, build_boundary
from .surrogate import fit_linear, linear_mse, train_test_split

log = logging.getLogger("dragforge")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_TRAIN, EXIT_INFEASIBLE = 0, 1, 2, 3, 4

DEFAULTS: dict[str, Any] = {
    "width": 0.18,
    "levels": 5,
    "viscosity": 0.2,
    "flow": {
        "inflow_speed": 0.08,
        "density": 1.0,
        "nx": 160,
        "ny": 80,
        "spacing": 0.01,
        "origin": [-0.25, -0.4],
        "max_steps": 40000,
        "drag_tolerance": 1e-4,
        "check_interval": 200,
    },
    "train": {
        "epochs": 10000,
        "checkpoint_interval": 1000,
        "test_fraction": 0.2,
        "seed": 0,
        "restarts": 4,
        "hidden_layers": 6,
    },
    "optimize": {
        "max_rounds": 25,
        "seed": 0,
        "epochs": 5000,
        "search_epochs": 5000,
        "checkpoint_interval": 500,
        "restarts": 4,
        "starts": 64,
        "iterations": 2000,
    },
    "constraint": None,
    "output_dir": "dragforge-out",
}

SGLD_KEYS = ("step_size", "noise_scale", "iterations", "seed", "max_resamples")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown field")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _number(cfg: dict, path: str, *, positive=False, integer=False, lo=None, hi=None):
    node: Any = cfg
    for part in path.split("."):
        node = node[part]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(path, "expected a number")
    if integer and not float(node).is_integer():
        raise ConfigError(path, "expected an integer")
    if not math.isfinite(node):
        raise ConfigError(path, "must be finite")
    if positive and not node > 0:
        raise ConfigError(path, "must be positive")
    if lo is not None and node < lo:
        raise ConfigError(path, f"must be >= {lo}")
    if hi is not None and node >= hi:
        raise ConfigError(path, f"must be < {hi}")
    return node


def validate(cfg: dict) -> dict:
    """Check every numeric field before any compute starts."""
    _number(cfg, "width", positive=True)
    _number(cfg, "levels", integer=True, lo=1)
    _number(cfg, "viscosity", positive=True)
    for key in ("inflow_speed", "density", "spacing", "drag_tolerance"):
        _number(cfg, f"flow.{key}", positive=True)
    _number(cfg, "flow.inflow_speed", hi=0.15)
    for key in ("nx", "ny"):
        _number(cfg, f"flow.{key}", integer=True, lo=8)
    _number(cfg, "flow.check_interval", integer=True, lo=1)
    _number(cfg, "flow.max_steps", integer=True, lo=cfg["flow"]["check_interval"])
    origin = cfg["flow"]["origin"]
    if not (isinstance(origin, list) and len(origin) == 2):
        raise ConfigError("flow.origin", "expected [x, y]")
    _number(cfg, "train.epochs", integer=True, lo=1)
    _number(cfg, "train.checkpoint_interval", integer=True, lo=1, hi=cfg["train"]["epochs"] + 1)
    _number(cfg, "train.test_fraction", lo=0, hi=1)
    _number(cfg, "train.seed", integer=True)
    _number(cfg, "train.restarts", integer=True, lo=0)
    _number(cfg, "train.hidden_layers", integer=True, lo=1)
    for key in ("max_rounds", "epochs", "search_epochs", "checkpoint_interval",
                "starts", "iterations"):
        _number(cfg, f"optimize.{key}", integer=True, lo=1)
    _number(cfg, "optimize.restarts", integer=True, lo=0)
    _number(cfg, "optimize.seed", integer=True)
    if cfg["optimize"]["starts"] < 2:
        raise ConfigError("optimize.starts", "must be >= 2")
    con = cfg["constraint"]
    if con is not None:
        if not isinstance(con, dict):
            raise ConfigError("constraint", "expected an object or null")
        unknown = set(con) - {"rects", "pgm", "sgld"}
        if unknown:
            raise ConfigError(f"constraint.{sorted(unknown)[0]}", "unknown field")
        if ("rects" in con) == ("pgm" in con):
            raise ConfigError("constraint", "give exactly one of 'rects' or 'pgm'")
        for key in con.get("sgld", {}) or {}:
            if key not in SGLD_KEYS:
                raise ConfigError(f"constraint.sgld.{key}", "unknown field")
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        raise ConfigError("output_dir", "expected a non-empty path")
    try:
        flow_config(cfg)
    except ValueError as exc:
        raise ConfigError("flow", str(exc)) from None
    return cfg


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config", "expected a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def flow_config(cfg: dict) -> FlowConfig:
    f = cfg["flow"]
    grid = GridSpec(int(f["nx"]), int(f["ny"]), float(f["spacing"]),
                    (float(f["origin"][0]), float(f["origin"][1])))
    return FlowConfig(viscosity=float(cfg["viscosity"]), inflow_speed=float(f["inflow_speed"]),
                      density=float(f["density"]), grid=grid, max_steps=int(f["max_steps"]),
                      drag_tolerance=float(f["drag_tolerance"]),
                      check_interval=int(f["check_interval"]))


def _params(theta: list[float], width: float) -> ShapeParams:
    for i, t in enumerate(theta):
        if not math.isfinite(t):
            raise ConfigError(f"theta[{i}]", "must be finite")
    p = ShapeParams(tuple(theta), width)
    bad = p.box_violation()
    if bad is not None:
        lo, hi = 0.25 * width, width
        raise ConfigError(f"theta[{bad}]", f"{theta[bad]} outside the sampling box [{lo}, {hi}]")
    return p


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


def _finite(v: float):
    return v if math.isfinite(v) else None


def _outdir(cfg: dict, override: str | None) -> Path:
    out = Path(override or cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError("output_dir", f"cannot write to {out}: {exc.strerror}") from None
    return out


def _load_dataset(path: str) -> dset.Dataset:
    try:
        return dset.load(path)
    except FileNotFoundError:
        raise ConfigError("dataset", f"no such file: {path}") from None
    except (ParseError, EmptyDatasetError) as exc:
        raise ConfigError("dataset", str(exc)) from None


def cmd_print_config(args, cfg: dict) -> int:
    sys.stdout.write(_dump(cfg))
    return EXIT_OK


def cmd_simulate(args, cfg: dict) -> int:
    p = _params(args.theta, float(cfg["width"]))
    sample = evaluate_shape(p, flow_config(cfg))
    sys.stdout.write(_dump({"theta": list(p.theta), "width": p.width,
                            "drag": _finite(sample.drag), "converged": sample.converged}))
    return EXIT_OK if sample.converged else EXIT_NONCONVERGED


def cmd_gen_dataset(args, cfg: dict) -> int:
    out = _outdir(cfg, args.out)
    jobs = args.jobs if args.jobs is not None else dset.default_jobs()
    t0 = time.time()
    ds = dset.generate(float(cfg["width"]), int(cfg["levels"]), flow_config(cfg), jobs=jobs)
    dset.save(ds, out / "dataset.csv")
    meta = {"config_hash": config_hash(cfg), "rows": len(ds),
            "converged": sum(s.converged for s in ds),
            "seconds": round(time.time() - t0, 3), "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out / "dataset.meta.json").write_text(_dump(meta), encoding="utf-8")
    log.info("wrote %d rows to %s", len(ds), out / "dataset.csv")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    out = _outdir(cfg, args.out)
    ds = dset.filter_outliers(_load_dataset(args.dataset))
    t = cfg["train"]
    jobs = args.jobs if args.jobs is not None else dset.default_jobs()
    ck = int(t["checkpoint_interval"])
    try:
        search = step_size_search(ds, int(t["seed"]), int(t["epochs"]), checkpoint_interval=ck,
                                  test_fraction=float(t["test_fraction"]),
                                  hidden_layers=int(t["hidden_layers"]), jobs=jobs)
        fit = fit_surrogate(ds, search.chosen, int(t["seed"]), int(t["epochs"]),
                            restarts=int(t["restarts"]), test_fraction=float(t["test_fraction"]),
                            checkpoint_interval=ck, hidden_layers=int(t["hidden_layers"]),
                            jobs=jobs)
    except (ScheduleExhaustedError, NoViableRunError) as exc:
        log.error("%s", exc)
        return EXIT_TRAIN
    X, y = ds.features(), ds.targets()
    tr, te = train_test_split(len(y), float(t["test_fraction"]), fit.trace.seed)
    if not len(te):
        te = tr
    lin = fit_linear(dset.Dataset(tuple(ds.samples[i] for i in tr), ds.width))
    # linear MSE is reported in the same standardized units as the MLP
    y_scale = fit.model.y_scale
    report = {
        "samples": len(ds),
        "step_size": {"chosen": search.chosen,
                      "candidates": [{"step_size": s, "score": _finite(sc)}
                                     for s, sc, _ in search.candidates]},
        "mlp": {"train_mse": fit.trace.final_train_mse, "test_mse": fit.trace.final_test_mse,
                "seed": fit.trace.seed, "verdict": fit.verdict.value,
                "hidden_layers": fit.model.hidden_layers},
        "linear": {"train_mse": linear_mse(lin, X[tr], y[tr]) / y_scale ** 2,
                   "test_mse": linear_mse(lin, X[te], y[te]) / y_scale ** 2},
    }
    (out / "model.json").write_text(fit.model.to_json(), encoding="utf-8")
    (out / "report.json").write_text(_dump(report), encoding="utf-8")
    rows = ["epoch,loss"] + [f"{e},{v:.17g}" for e, v in fit.trace.loss_checkpoints]
    (out / "trace.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return EXIT_OK


def _region(cfg: dict, grid: GridSpec) -> RequiredRegion:
    con = cfg["constraint"]
    try:
        if "rects" in con:
            return region_from_rects(con["rects"], grid)
        return region_from_pgm(Path(con["pgm"]).read_text(encoding="utf-8"), grid)
    except OSError as exc:
        raise ConfigError("constraint.pgm", f"cannot read: {exc.strerror}") from None
    except ValueError as exc:
        raise ConfigError("constraint", str(exc)) from None


def cmd_optimize(args, cfg: dict) -> int:
    out = _outdir(cfg, args.out)
    ds = dset.filter_outliers(_load_dataset(args.dataset))
    fcfg = flow_config(cfg)
    width = float(cfg["width"])
    if abs(ds.width - width) > 1e-12:
        raise ConfigError("width", f"config width {width} differs from dataset width {ds.width}")
    region = _region(cfg, fcfg.grid) if cfg["constraint"] is not None else None
    o = cfg["optimize"]
    jobs = args.jobs if args.jobs is not None else dset.default_jobs()
    settings = LoopSettings(epochs=int(o["epochs"]), search_epochs=int(o["search_epochs"]),
                            checkpoint_interval=int(o["checkpoint_interval"]),
                            restarts=int(o["restarts"]),
                            hidden_layers=int(cfg["train"]["hidden_layers"]),
                            starts=int(o["starts"]), iterations=int(o["iterations"]), jobs=jobs)
    rounds_path = out / "rounds.jsonl"
    rounds_path.write_text("", encoding="utf-8")

    def on_round(rec):
        with rounds_path.open("a", encoding="utf-8") as fh:
            fh.write(rec.to_json() + "\n")

    try:
        res = minimize_drag(ds, fcfg, int(o["seed"]), int(o["max_rounds"]), settings=settings,
                            on_round=on_round)
    except (ScheduleExhaustedError, NoViableRunError) as exc:
        log.error("%s", exc)
        return EXIT_TRAIN
    result = {
        "verified": res.verified, "rounds": res.rounds,
        "best_theta": list(res.best_params.theta), "width": width,
        "best_drag": res.best_drag, "initial_min_drag": ds.min_drag(),
        "step_size": res.step_size,
    }
    (out / "best_shape.csv").write_text(build_boundary(res.best_params).to_csv(),
                                        encoding="utf-8")
    (out / "model.json").write_text(res.model.to_json(), encoding="utf-8")
    code = EXIT_OK
    if region is not None:
        sg = dict(SgldConfig.for_width(width).__dict__)
        sg.update(cfg["constraint"].get("sgld") or {})
        try:
            cres = constrained_minimize(res.model, region, width, SgldConfig(**sg), fcfg.grid)
        except InfeasibleConstraintError as exc:
            log.error("%s", exc)
            result["constrained"] = None
            code = EXIT_INFEASIBLE
        else:
            result["constrained"] = {"theta": list(cres.params.theta),
                                     "predicted_drag": cres.predicted_drag}
            (out / "constrained_shape.csv").write_text(build_boundary(cres.params).to_csv(),
                                                       encoding="utf-8")
    (out / "result.json").write_text(_dump(result), encoding="utf-8")
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dragforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False, jobs=False):
        p.add_argument("--config", help="JSON run configuration (defaults: print-config)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset CSV")
        if jobs:
            p.add_argument("--jobs", type=int, default=None,
                           help="worker processes (default: $DRAGFORGE_JOBS or 1)")
        return p

    common(sub.add_parser("print-config", help="show the effective configuration"))
    p = common(sub.add_parser("simulate", help="simulate one shape"))
    p.add_argument("--theta", type=float, nargs=4, required=True, metavar="T")
    common(sub.add_parser("gen-dataset", help="simulate the sampling grid"), jobs=True)
    common(sub.add_parser("train", help="fit the surrogate"), dataset=True, jobs=True)
    common(sub.add_parser("optimize", help="run the verified minimization loop"),
           dataset=True, jobs=True)
    return parser


COMMANDS = {
    "print-config": cmd_print_config,
    "simulate": cmd_simulate,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "optimize": cmd_optimize,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        print("error: --jobs: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
