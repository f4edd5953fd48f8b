"""Batch command line: phantom -> palpate -> estimate -> map -> scan / compare.

Exit codes: 0 success, 2 configuration or input error, 3 simulation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .controller import MODES, ConfigError, StrategyConfig
from .core import PalpationRecord, Phantom, default_phantom
from .estimation import (
    PalpationProtocol,
    beta_sweep,
    fit_hc,
    fit_kv,
    generate_load_unload,
    load_survey,
    save_survey,
    survey_grid,
)
from .gpr import BodyMap, build_body_map
from .sim import (
    LOG_COLUMNS,
    NO_DISTURBANCE,
    ScanPlan,
    SimulationBlowup,
    default_lift,
    run_scan,
    run_summary,
    save_summary,
)

EXIT_OK, EXIT_CONFIG, EXIT_SIM = 0, 2, 3
TABLE_BETAS = (1.1, 1.35, 1.5)


class InputError(Exception):
    """Bad or missing input; reported with exit code 2."""


# ------------------------------------------------------------------ helpers
def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed, inputs: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": _config_hash(config),
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_phantom(path) -> Phantom:
    if path is None:
        return default_phantom()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"phantom file not found: {p}")
    try:
        return Phantom.load(p)
    except (ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"{p}: {exc}") from None


def _load_map(path) -> BodyMap:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"body map not found: {p} (run the 'map' command first)")
    try:
        return BodyMap.load(p)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{p}: {exc}") from None


def _survey_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "survey.csv"
    if not p.is_file():
        raise InputError(f"survey not found: {p} (run the 'palpate' command first)")
    return p


def _strategy(args) -> StrategyConfig:
    overrides = {"mode": getattr(args, "mode", None)}
    if getattr(args, "config", None):
        return StrategyConfig.load(args.config, **overrides)
    return StrategyConfig.from_dict({}, **overrides)


def _protocol(args) -> PalpationProtocol:
    return PalpationProtocol(noise_sigma=args.noise, duration=args.duration)


def _plan(args) -> ScanPlan:
    return ScanPlan(duration=args.scan_duration)


def _disturbance(name: str):
    return default_lift() if name == "lift" else NO_DISTURBANCE


# ----------------------------------------------------------------- commands
def cmd_phantom(args) -> int:
    out = _out_dir(args.out)
    ph = _load_phantom(args.phantom)
    ph.save(out / "phantom.json")
    write_manifest(out, "phantom", ph.to_dict(), None, {"phantom": args.phantom}, ["phantom.json"])
    print(f"wrote {out / 'phantom.json'}")
    return EXIT_OK


def cmd_palpate(args) -> int:
    if args.spacing <= 0:
        raise ConfigError("spacing: must be > 0")
    ph = _load_phantom(args.phantom)
    proto = _protocol(args)
    beta = ph.beta if args.beta is None else args.beta
    out = _out_dir(args.out)
    est, recs = survey_grid(ph, args.spacing, proto, args.seed, beta=beta, workers=args.workers, keep_records=True)
    save_survey(est, out / "survey.csv")
    raw = out / "palpations"
    raw.mkdir(exist_ok=True)
    outputs = ["survey.csv"]
    for i, (e, rec) in enumerate(zip(est, recs)):
        if rec is not None:
            rec.to_csv(raw / f"node_{i:04d}.csv")
            outputs.append(f"palpations/node_{i:04d}.csv")
    cfg = {"spacing": args.spacing, "beta": beta, "protocol": asdict(proto), "phantom": ph.to_dict()}
    write_manifest(out, "palpate", cfg, args.seed, {"phantom": args.phantom}, outputs)
    n_bad = sum(not e.ok for e in est)
    print(f"surveyed {len(est)} nodes ({n_bad} flagged) -> {out / 'survey.csv'}")
    return EXIT_OK


def load_unload_table(ph: Phantom, noise: float, seed: int, betas=TABLE_BETAS) -> list[tuple[str, float]]:
    """Residual per model on load/unload data at the phantom's soft reference."""
    x, y = ph.soft_reference or ((ph.bounds[0] + ph.bounds[1]) / 2, (ph.bounds[2] + ph.bounds[3]) / 2)
    rec = generate_load_unload(ph.params_at(x, y), ph.indenter_mass, noise, seed)
    rows = [("KV", fit_kv(rec, 0.0, ph.indenter_mass).residual)]
    rows += [(f"HC beta={b:g}", fit_hc(rec, 0.0, b, ph.indenter_mass).residual) for b in betas]
    return rows


def cmd_estimate(args) -> int:
    survey = _survey_path(args.survey)
    ph = _load_phantom(args.phantom)
    out = _out_dir(args.out)
    est = load_survey(survey, ph.beta)
    raw = survey.parent / "palpations"
    if not raw.is_dir():
        raise InputError(f"raw palpations missing: {raw}")
    betas = [float(b) for b in args.betas.split(",")]
    sums = np.zeros(len(betas))
    wins = np.zeros(len(betas), dtype=int)
    n = 0
    for i, e in enumerate(est):
        f = raw / f"node_{i:04d}.csv"
        if not e.ok or not f.is_file():
            continue
        sweep = beta_sweep(PalpationRecord.from_csv(f), e.surface_z, ph.indenter_mass, betas)
        res = np.array([r.residual for _, r in sweep])
        sums += res
        wins[int(np.argmin(res))] += 1
        n += 1
    if n == 0:
        raise InputError("no usable survey nodes to refit")
    lines = ["beta,mean_residual,argmin_count"]
    lines += [f"{b:g},{s / n:.9g},{w}" for b, s, w in zip(betas, sums, wins)]
    (out / "beta_sweep.csv").write_text("\n".join(lines) + "\n")
    table = load_unload_table(ph, args.noise, args.seed)
    (out / "residual_table.csv").write_text(
        "model,relative_residual_N\n" + "".join(f"{m},{r:.9g}\n" for m, r in table))
    cfg = {"betas": betas, "noise": args.noise, "phantom": ph.to_dict()}
    write_manifest(out, "estimate", cfg, args.seed, {"survey": str(survey)}, ["beta_sweep.csv", "residual_table.csv"])
    best = betas[int(np.argmin(sums))]
    print("model             residual [N]")
    for m, r in table:
        print(f"{m:<17} {r:.4f}")
    print(f"beta sweep over {n} nodes: best mean residual at beta={best:g}")
    return EXIT_OK


def cmd_map(args) -> int:
    survey = _survey_path(args.survey)
    est = load_survey(survey, args.beta if args.beta is not None else 1.35)
    out = _out_dir(args.out)
    try:
        bm = build_body_map(est, grid_spacing=args.grid_spacing, smoothness=args.smoothness)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    bm.save(out / "bodymap.json")
    cfg = {"grid_spacing": args.grid_spacing, "smoothness": args.smoothness, "beta": bm.beta}
    write_manifest(out, "map", cfg, None, {"survey": str(survey)}, ["bodymap.json", "bodymap_grid.csv"])
    print(f"wrote {out / 'bodymap.json'}")
    return EXIT_OK


PLOT_SCRIPT = """# gnuplot script: force, stiffness and tank energy against time
set datafile separator ","
set key autotitle columnhead
set terminal pngcairo size 900,900
set output "{stem}.png"
set multiplot layout 3,1
set ylabel "F_z [N]"
plot "{log}" using {t}:{f} with lines title "tissue force", "" using {t}:{fd} with lines title "reference"
set ylabel "K_z [N/m]"
plot "{log}" using {t}:{k} with lines title "stiffness"
set ylabel "T [J]"
set xlabel "t [s]"
plot "{log}" using {t}:{T} with lines title "tank energy"
unset multiplot
"""


def _plot_script(log_name: str, stem: str) -> str:
    col = {c: i + 1 for i, c in enumerate(LOG_COLUMNS)}
    return PLOT_SCRIPT.format(stem=stem, log=log_name, t=col["t"], f=col["f_tissue"], fd=col["F_d"],
                              k=col["K_z"], T=col["T"])


def _run_one(cfg, ph, bm, plan, disturb, seed, out: Path, tag: str):
    log = run_scan(cfg, ph, bm, plan, _disturbance(disturb), seed)
    log.to_csv(out / f"{tag}.csv")
    (out / f"{tag}.gp").write_text(_plot_script(f"{tag}.csv", tag))
    return log


def cmd_scan(args) -> int:
    cfg = _strategy(args)
    ph = _load_phantom(args.phantom)
    bm = _load_map(args.map)
    plan = _plan(args)
    out = _out_dir(args.out)
    log = _run_one(cfg, ph, bm, plan, args.disturb, args.seed, out, "scanlog")
    summary = {"disturbance": args.disturb, **run_summary(log, cfg)}
    save_summary(summary, out / "summary.json")
    eff = {"strategy": cfg.to_dict(), "plan": asdict(plan), "disturb": args.disturb}
    write_manifest(out, "scan", eff, args.seed, {"phantom": args.phantom, "map": args.map},
                   ["scanlog.csv", "scanlog.gp", "summary.json"])
    safety = summary.get("safety", {})
    verdict = "" if not safety else (" safety: all-pass" if safety["all_pass"] else " safety: FAIL")
    print(f"{cfg.mode} scan, {len(log)} cycles, max force {summary['max_force']:.3f} N.{verdict}")
    return EXIT_OK


def compare_runs(cfg: StrategyConfig, ph: Phantom, bm: BodyMap, plan: ScanPlan, modes, disturbs, seed, out: Path,
                 workers: int | None = None):
    """Run every (mode, disturbance) pair on a thread pool; results keep submission order."""
    jobs = [(mode, disturb) for disturb in disturbs for mode in modes]

    def one(job):
        mode, disturb = job
        mcfg = replace(cfg, mode=mode)
        tag = f"{mode}_{disturb}"
        log = _run_one(mcfg, ph, bm, plan, disturb, seed, out, tag)
        return tag, {"disturbance": disturb, **run_summary(log, mcfg)}

    with ThreadPoolExecutor(workers or len(jobs)) as pool:
        results = list(pool.map(one, jobs))
    summary = dict(results)
    outputs = [f"{tag}.{ext}" for tag in summary for ext in ("csv", "gp")]
    return summary, outputs


def cmd_compare(args) -> int:
    cfg = _strategy(args)
    ph = _load_phantom(args.phantom)
    bm = _load_map(args.map)
    plan = _plan(args)
    out = _out_dir(args.out)
    modes = args.modes.split(",")
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"modes: unknown mode {m!r}")
    disturbs = ["none", "lift"] if args.disturb == "both" else [args.disturb]
    summary, outputs = compare_runs(cfg, ph, bm, plan, modes, disturbs, args.seed, out)
    save_summary(summary, out / "summary.json")
    eff = {"strategy": cfg.to_dict(), "plan": asdict(plan), "modes": modes, "disturb": disturbs}
    write_manifest(out, "compare", eff, args.seed, {"phantom": args.phantom, "map": args.map},
                   outputs + ["summary.json"])
    for tag, s in summary.items():
        safety = s.get("safety")
        flag = "" if safety is None else ("  safety all-pass" if safety["all_pass"] else "  safety FAIL")
        print(f"{tag:<14} max force {s['max_force']:7.3f} N  max eps {1000 * s['max_penetration']:6.2f} mm{flag}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """Survey, map and the full comparison in one go, one subdirectory per stage."""
    root = _out_dir(args.out)
    common = dict(phantom=args.phantom, seed=args.seed, noise=args.noise, duration=args.duration)
    steps = [
        (cmd_palpate, dict(common, spacing=args.spacing, beta=args.beta, out=str(root / "survey"), workers=None)),
        (cmd_map, dict(survey=str(root / "survey"), beta=args.beta, grid_spacing=0.005, smoothness=0.01,
                        out=str(root / "map"))),
        (cmd_compare, dict(common, map=str(root / "map" / "bodymap.json"), mode=None, config=args.config,
                           modes=",".join(MODES), disturb="both", scan_duration=args.scan_duration,
                           out=str(root / "compare"))),
    ]
    for fn, kw in steps:
        code = fn(argparse.Namespace(**kw))
        if code:
            return code
    return EXIT_OK


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="passivevic", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, phantom=True, seed=True, out=True):
        if phantom:
            p.add_argument("--phantom", help="phantom JSON (default: built-in phantom)")
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if out:
            p.add_argument("--out", required=True, help="output directory")

    def protocol(p):
        p.add_argument("--noise", type=float, default=0.05, help="force noise sigma [N]")
        p.add_argument("--duration", type=float, default=5.0, help="palpation duration [s]")

    def scan_opts(p):
        p.add_argument("--map", required=True, help="body map JSON")
        p.add_argument("--config", help="controller configuration JSON")
        p.add_argument("--scan-duration", type=float, default=30.0)

    p = sub.add_parser("phantom", help="write the phantom JSON")
    common(p, seed=False)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("palpate", help="palpation survey over a grid")
    common(p)
    protocol(p)
    p.add_argument("--spacing", type=float, default=0.01)
    p.add_argument("--beta", type=float)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_palpate)

    p = sub.add_parser("estimate", help="beta sweep and model residual table")
    common(p)
    p.add_argument("--survey", required=True, help="survey directory or CSV")
    p.add_argument("--betas", default="1.1,1.2,1.3,1.35,1.4,1.5")
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("map", help="fit the body map from a survey")
    common(p, phantom=False, seed=False)
    p.add_argument("--survey", required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--grid-spacing", type=float, default=0.005)
    p.add_argument("--smoothness", type=float, default=0.01)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("scan", help="simulate one scan")
    common(p)
    scan_opts(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--disturb", choices=("none", "lift"), default="none")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("compare", help="all modes with and without disturbance")
    common(p)
    scan_opts(p)
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--disturb", choices=("none", "lift", "both"), default="both")
    p.set_defaults(func=cmd_compare, mode=None)

    p = sub.add_parser("pipeline", help="survey, map and comparison end to end")
    common(p)
    protocol(p)
    p.add_argument("--spacing", type=float, default=0.01)
    p.add_argument("--beta", type=float)
    p.add_argument("--config")
    p.add_argument("--scan-duration", type=float, default=30.0)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationBlowup as exc:
        print(f"simulation error at cycle {exc.cycle}: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
