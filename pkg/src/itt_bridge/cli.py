"""Command-line entry point: ``itt-bridge {estimate, bounds, simulate}``.

The commands only parse flags, call the library and serialize what it
returns. Reports are JSON with a ``manifest`` block; failures print a JSON
error object on stderr and exit 2 (usage/config), 3 (data) or 4 (numerical).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import BALKE_PEARL, MANSKI_PEPPER, OutcomeBounds, bounds_from_data, partial_id_itt
from .data import HIST1, SAME_AS_H1, TARGET, RoleConfig, _read_config, load_dataset
from .errors import ConfigError, IttBridgeError, MissingRole, UsageError
from .estimators import (EIF_DESIGN, EIF_POSTHOC, REG_DESIGN, REG_POSTHOC, PlanEntry, estimate_plan)
from .inference import BootstrapConfig, CrossfitPlan, resolve_threads
from .nuisance import AssignmentModel, NuisanceSpecs
from .sensitivity import cate_scale, cc_p_sweep, lambda_grid, lambda_sweep
from .simulation import ScenarioConfig, run_monte_carlo

METHODS = {("design", "reg"): REG_DESIGN, ("design", "eif"): EIF_DESIGN,
           ("posthoc", "reg"): REG_POSTHOC, ("posthoc", "eif"): EIF_POSTHOC}
TIMING_KEYS = ("wall_time_seconds", "started_at", "runtime_seconds")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance of one CLI run; everything but the timing fields is reproducible."""

    command: str
    config_paths: dict
    input_hashes: dict
    seed: int | None
    arguments: dict = field(default_factory=dict)
    library_version: str = __version__
    wall_time_seconds: float = 0.0
    started_at: float = field(default_factory=time.time)

    @classmethod
    def start(cls, command: str, args: argparse.Namespace, files: dict, seed=None) -> "RunManifest":
        present = {k: str(v) for k, v in files.items() if v is not None}
        hashes = {k: _sha256(v) for k, v in present.items()}
        skip = {"func", "out", "out_dir", "csv", "threads"}
        arguments = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
        return cls(command, present, hashes, seed, arguments)

    def finish(self) -> "RunManifest":
        self.wall_time_seconds = time.time() - self.started_at
        return self

    def to_dict(self) -> dict:
        return {"command": self.command, "config_paths": self.config_paths, "input_hashes": self.input_hashes,
                "seed": self.seed, "arguments": self.arguments, "library_version": self.library_version,
                "wall_time_seconds": self.wall_time_seconds, "started_at": self.started_at}


def strip_timing(report):
    """Copy of a report without wall-clock fields, for reproducibility checks."""
    if isinstance(report, dict):
        return {k: strip_timing(v) for k, v in report.items() if k not in TIMING_KEYS}
    if isinstance(report, list):
        return [strip_timing(v) for v in report]
    return report


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# estimate


def _roles(path, mode: str) -> RoleConfig:
    raw = _read_config(path)
    if mode == "design" and raw.get("historical2") is None:
        raise MissingRole("design mode needs a second historical trial (historical2, or same-as-historical1)")
    return RoleConfig.from_dict({**raw, "stage": mode})


def _load(args, roles: RoleConfig, check: bool = True):
    # load with minimal column requirements so role problems surface as MissingRole
    loose = RoleConfig(roles.target, roles.historical1, SAME_AS_H1, "design")
    ds = load_dataset(args.data, loose, categorical=args.categorical or ()).with_config(roles)
    if roles.stage == "posthoc":
        t = ds.role_mask(TARGET)
        if t.any() and (np.isnan(ds.z[t]).any() or np.isnan(ds.d[t]).any()):
            raise MissingRole("posthoc mode needs assignment and uptake (z, d) on every target row")
    if check:
        ds.check_roles([TARGET, HIST1] if roles.stage == "posthoc" else None)
    return ds


def _parse_sens(spec: str | None, mode: str) -> dict:
    """``--sens``: a comma list of values or a TOML/JSON file with grid keys."""
    if not spec:
        return {}
    if Path(spec).suffix in (".toml", ".json") or Path(spec).is_file():
        raw = _read_config(spec)
        unknown = set(raw) - {"cc_p", "lambda1", "lambda2", "cate_scale"}
        if unknown:
            raise ConfigError(f"unknown sensitivity keys {sorted(unknown)}")
    else:
        try:
            values = [float(v) for v in spec.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--sens must be a comma-separated list of numbers or a config file: {spec!r}") from None
        raw = {"cc_p": values} if mode == "posthoc" else {"lambda1": values, "lambda2": values}
    if "cc_p" in raw and mode != "posthoc":
        raise ConfigError("cc_p sensitivity values apply to posthoc mode only")
    return {k: [float(x) for x in (v if isinstance(v, list) else [v])] for k, v in raw.items()}


def _specs(args) -> NuisanceSpecs:
    return NuisanceSpecs.spline(args.knots) if args.nuisance == "spline" else NuisanceSpecs.linear()


def cmd_estimate(args) -> dict:
    mode = args.mode
    method = METHODS[(mode, args.method)]
    sens = _parse_sens(args.sens, mode)
    manifest = RunManifest.start("estimate", args, {"data": args.data, "roles": args.roles,
                                                    "sens": args.sens if args.sens and Path(args.sens).is_file() else None},
                                 args.seed)
    ds = _load(args, _roles(args.roles, mode))
    specs = _specs(args)
    crossfit = args.crossfit if args.crossfit is not None else (5 if args.method == "eif" else 1)
    kw = {"crossfit": CrossfitPlan(crossfit, args.seed),
          "bootstrap": BootstrapConfig(args.bootstrap, args.seed) if args.bootstrap else None,
          "threads": resolve_threads(args.threads), "seed": args.seed,
          "assignment": AssignmentModel(args.assignment)}
    report: dict = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if "cc_p" in sens:
            grid = cc_p_sweep(ds, specs, sens["cc_p"], args.method, **kw)
            base = grid["base"]
            report["sensitivity"] = {"cc_p": grid.to_dict()}
        else:
            base = estimate_plan(ds, specs, [PlanEntry(method, method)], **kw)[method]
        if "lambda1" in sens or "lambda2" in sens:
            pairs = lambda_grid(sens.get("lambda1", [0.0]), sens.get("lambda2", [0.0]))
            report.setdefault("sensitivity", {})["lambda"] = lambda_sweep(base, pairs).to_dict()
        if "cate_scale" in sens:
            report.setdefault("sensitivity", {})["cate_scale"] = [
                {"scale": s, "estimate": cate_scale(base, s).to_dict()} for s in sens["cate_scale"]]
    report["estimate"] = base.to_dict()
    report["warnings"] = sorted({f"{type(w.message).__name__}: {w.message}" for w in caught})
    report["manifest"] = manifest.finish().to_dict()
    if args.csv:
        _estimate_csv(report, args.csv)
    return report


def _estimate_csv(report: dict, path) -> None:
    import csv
    rows = [("base", report["estimate"])]
    for kind, grid in report.get("sensitivity", {}).items():
        if isinstance(grid, dict):
            rows += [(f"{kind}:{s['label']}", s["estimate"]) for s in grid["scenarios"] if s["label"] != "base"]
        else:
            rows += [(f"{kind}:{g['scale']:g}", g["estimate"]) for g in grid]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "point", "se", "ci_lower", "ci_upper"])
        for label, est in rows:
            ci = est.get("ci") or [None, None]
            w.writerow([label, est["method"], repr(est["point"]), "" if est["se"] is None else repr(est["se"]),
                        "" if ci[0] is None else repr(ci[0]), "" if ci[1] is None else repr(ci[1])])


# ---------------------------------------------------------------------------
# bounds


def cmd_bounds(args) -> dict:
    k = OutcomeBounds(args.k0, args.k1)
    manifest = RunManifest.start("bounds", args, {"data": args.data, "roles": args.roles}, None)
    if args.method == "partial-id":
        ds = _load(args, _roles(args.roles, "design" if args.sens is None else "posthoc"))
    else:
        # CATE bounds only need the first historical trial and target covariates
        roles = RoleConfig.from_dict({**_read_config(args.roles), "stage": "posthoc"})
        ds = _load(args, roles, check=False)
        ds.check_roles([TARGET, HIST1])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.method == "partial-id":
            res = partial_id_itt(ds, _specs(args), sens=args.sens)
        else:
            res = bounds_from_data(ds, BALKE_PEARL if args.method == "balke-pearl" else MANSKI_PEPPER,
                                   _specs(args), k, AssignmentModel(args.assignment), saturated=args.saturated)
    return {"bounds": res.to_dict(detail=args.detail),
            "warnings": sorted({f"{type(w.message).__name__}: {w.message}" for w in caught}),
            "manifest": manifest.finish().to_dict()}


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> dict:
    raw = _read_config(args.scenario)
    if args.reps is not None:
        raw["replicates"] = args.reps
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.bootstrap is not None:
        raw["bootstrap"] = args.bootstrap
    cfg = ScenarioConfig.from_dict(raw)
    manifest = RunManifest.start("simulate", args, {"scenario": args.scenario}, cfg.seed)
    report = run_monte_carlo(cfg, threads=resolve_threads(args.threads))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "replicates.csv")
    full = {**json.loads(report.to_json()), "manifest": manifest.finish().to_dict()}
    _emit(full, str(out_dir / "report.json"))
    return full


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="itt-bridge", description="Bridge historical placebo-controlled trials to a target trial.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--data", required=True, help="participant-level CSV with columns s, z, d, y, covariates")
        sp.add_argument("--roles", required=True, help="TOML/JSON role config (target, historical1, historical2)")
        sp.add_argument("--categorical", action="append", help="treat this covariate column as categorical")
        sp.add_argument("--nuisance", choices=("linear", "spline"), default="linear")
        sp.add_argument("--knots", type=int, default=4, help="interior knots per covariate for --nuisance spline")
        sp.add_argument("--assignment", choices=("known", "constant", "logit"), default="known")
        sp.add_argument("--out", help="write the JSON report here instead of stdout")

    e = sub.add_parser("estimate", help="point estimate, interval and sensitivity analyses")
    common(e)
    e.add_argument("--mode", choices=("design", "posthoc"), default="design")
    e.add_argument("--method", choices=("reg", "eif"), default="reg")
    e.add_argument("--sens", help="comma list (cc_p in posthoc, lambda lattice in design) or TOML/JSON grid file")
    e.add_argument("--bootstrap", type=int, default=0, help="bootstrap replicates (0: EIF interval or none)")
    e.add_argument("--crossfit", type=int, help="cross-fitting folds (default 5 for eif, 1 for reg)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threads", type=int)
    e.add_argument("--csv", help="flat CSV mirror of the estimates")
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("bounds", help="partial identification bounds")
    common(b)
    b.add_argument("--method", choices=("balke-pearl", "manski-pepper", "partial-id"), default="balke-pearl")
    b.add_argument("--k0", type=float, default=0.0)
    b.add_argument("--k1", type=float, default=1.0)
    b.add_argument("--sens", type=float, help="partial-id only: placebo-arm uptake for post-hoc compliance")
    b.add_argument("--saturated", action="store_true", help="empirical cell frequencies per covariate pattern")
    b.add_argument("--detail", action="store_true", help="include per-stratum envelopes")
    b.set_defaults(func=cmd_bounds)

    s = sub.add_parser("simulate", help="Monte Carlo study")
    s.add_argument("--scenario", required=True, help="TOML/JSON scenario config")
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--bootstrap", type=int)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        report = args.func(args)
        if args.command != "simulate":
            _emit(report, args.out)
        return 0
    except IttBridgeError as exc:
        sys.stderr.write(json.dumps({**exc.to_dict(), "type": type(exc).__name__,
                                     "exit_status": exc.exit_status}, sort_keys=True) + "\n")
        return exc.exit_status
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "io_error", "message": str(exc), "type": type(exc).__name__,
                                     "exit_status": 3}, sort_keys=True) + "\n")
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
