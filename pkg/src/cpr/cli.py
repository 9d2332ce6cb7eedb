"""Command-line entry point: ``cpr {fit-trace,plan,simulate,sweep,train,report}``."""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import tempfile
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import ALL_STRATEGIES, Strategy
from .cost_model import DomainError, choose_strategy, scalability_sweep
from .failure_model import FITTABLE, Family, fit_all, interarrival_gaps, read_trace_file
from .simulator import REPORT_COLUMNS, Mode, compare_strategies, fallback_grid, monte_carlo

log = logging.getLogger("cpr")


class CliError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# -- output helpers ----------------------------------------------------------


def write_atomic(path: Path, text: str):
    """Write via a temp file in the same directory and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def csv_text(rows: list[dict], columns: list[str] | None = None) -> str:
    if not rows:
        raise CliError("refusing to write an empty table")
    columns = columns or list(rows[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def emit(args, name: str, rows: list[dict], columns=None, manifest: cfgmod.RunManifest | None = None):
    if manifest is not None:
        rows = [dict(r, config_hash=manifest.config_hash) for r in rows]
        columns = (columns or list(rows[0].keys())) + ["config_hash"]
    text = csv_text(rows, columns)
    if args.out:
        out = Path(args.out)
        write_atomic(out / f"{name}.csv", text)
        if manifest is not None:
            write_atomic(out / f"{name}.manifest.json", json.dumps(manifest.as_dict(), indent=2, sort_keys=True) + "\n")
        log.info("wrote %s", out / f"{name}.csv")
    else:
        sys.stdout.write(text)


def _load_config(args) -> dict:
    raw = {}
    if args.config:
        try:
            raw = cfgmod.yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise cfgmod.ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except cfgmod.yaml.YAMLError as exc:
            raise cfgmod.ConfigError(f"cannot parse config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise cfgmod.ConfigError("config root must be a mapping")
    raw = copy.deepcopy(raw)
    policy = raw.setdefault("policy", {})
    if not isinstance(policy, dict):
        raise cfgmod.ConfigError("'policy' must be a mapping")
    if getattr(args, "target_pls", None) is not None:
        policy["target_pls"] = args.target_pls
        policy["t_save"] = None
    if getattr(args, "strategy", None) not in (None, "all"):
        policy["strategy"] = args.strategy
        policy["t_save"] = None
    if getattr(args, "seeds", None) is not None:
        raw["seeds"] = args.seeds
    raw = cfgmod.apply_seed_env(raw)
    return cfgmod.resolve(raw)


def _manifest(args, cfg: dict, seeds) -> cfgmod.RunManifest:
    return cfgmod.RunManifest(args.config, cfg, _version(), tuple(seeds))


# -- subcommands ---------------------------------------------------------------


def cmd_fit_trace(args) -> int:
    try:
        times = read_trace_file(args.trace)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read trace {args.trace}: {exc}") from None
    if times.size == 0:
        raise CliError(f"trace {args.trace} contains no failure times")
    gaps = interarrival_gaps(times, first_only=args.first_only) if args.timestamps else times
    fits, errors = fit_all(gaps, args.families)
    rows = [
        {
            "family": f.family.value,
            "params": " ".join(repr(p) for p in f.params),
            "mean": f.process().mean,
            "survival_rmse": f.survival_rmse,
            "log_likelihood": f.log_likelihood,
            "n": f.n,
            "error": "",
        }
        for f in fits
    ]
    rows += [
        {"family": fam.value, "params": "", "mean": "", "survival_rmse": "", "log_likelihood": "", "n": gaps.size,
         "error": exc.reason}
        for fam, exc in errors
    ]
    emit(args, "fit", rows)
    return 0


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    if args.print_config:
        sys.stdout.write(cfgmod.dump(cfg))
        return 0
    cost = cfgmod.cost_parameters(cfg)
    decision = choose_strategy(cost, cfg["policy"]["target_pls"], args.margin)
    row = decision.as_row()
    width = max(len(k) for k in row)
    for k, v in row.items():
        print(f"{k:<{width}}  {v}")
    print(f"{'config_hash':<{width}}  {cfgmod.fingerprint(cfg)}")
    return 0


def _simulate(args, mode: Mode | None) -> int:
    cfg = _load_config(args)
    if mode is not None:
        cfg["simulation"]["mode"] = mode.value
        cfg = cfgmod.resolve(cfg)
    sim = cfgmod.sim_config(cfg)
    n = cfg["seeds"]
    manifest = _manifest(args, cfg, range(n))
    if args.strategy == "all":
        table = compare_strategies(sim, ALL_STRATEGIES, n)
        reports = [r for reps, _ in table.values() for r in reps]
        summaries = {s: summ for s, (_, summ) in table.items()}
    else:
        reports, summ = monte_carlo(sim, n)
        summaries = {sim.policy.strategy: summ}
    emit(args, "runs", [r.row() for r in reports], REPORT_COLUMNS, manifest)
    text = summary_block(summaries, manifest)
    if args.out:
        write_atomic(Path(args.out) / "summary.txt", text)
    else:
        sys.stderr.write(text)
    return 0


def summary_block(summaries: dict, manifest: cfgmod.RunManifest) -> str:
    lines = [f"config_hash {manifest.config_hash}  seeds {len(manifest.seeds)}  version {manifest.version}"]
    lines.append(f"{'strategy':<14} {'overhead%':>10} {'+-':>8} {'p95%':>8} {'pls':>8} {'auc_drop':>9}")
    for s, m in summaries.items():
        deg = "" if m.mean_auc_degradation is None else f"{m.mean_auc_degradation:.5f}"
        lines.append(
            f"{s.value:<14} {100 * m.mean_overhead_fraction:>10.3f} {100 * m.stderr_overhead_fraction:>8.3f} "
            f"{100 * m.p95_overhead_fraction:>8.3f} {m.mean_final_pls:>8.4f} {deg:>9}"
        )
    return "\n".join(lines) + "\n"


def cmd_simulate(args) -> int:
    return _simulate(args, None)


def cmd_train(args) -> int:
    return _simulate(args, Mode.COUPLED)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest(args, cfg, range(cfg["seeds"]))
    if args.axis == "target-pls":
        rows = []
        for pls in args.values or [0.02, 0.1, 0.2]:
            c = copy.deepcopy(cfg)
            c["policy"].update(strategy=args.strategy or Strategy.CPR_VANILLA.value, target_pls=pls, t_save=None)
            c = cfgmod.resolve(c)
            _, summ = monte_carlo(cfgmod.sim_config(c), c["seeds"])
            rows.append(
                {
                    "target_pls": pls,
                    "interval": c["policy"]["t_save"],
                    "overhead_fraction": summ.mean_overhead_fraction,
                    "stderr": summ.stderr_overhead_fraction,
                    "final_pls": summ.mean_final_pls,
                    "auc_degradation": "" if summ.mean_auc_degradation is None else summ.mean_auc_degradation,
                }
            )
    elif args.axis == "failures":
        grid = fallback_grid(
            cfgmod.cost_parameters(cfg),
            n_shards=cfg["simulation"]["n_shards"],
            target_pls_values=args.values or (cfg["policy"]["target_pls"],),
            n_seeds=cfg["seeds"],
            root_seed=cfg["seed"],
        )
        rows = [p.row() for p in grid]
    else:
        nodes = [int(v) for v in args.values] if args.values else [2**k for k in range(0, 11)]
        process = cfgmod.failure_process(cfg)
        cost = cfgmod.cost_parameters(cfg)
        rows = [
            {
                "nodes": p.nodes,
                "t_fail": p.t_fail,
                "n_emb": p.n_emb,
                "overhead_full": p.overhead_full / cost.t_total,
                "overhead_partial": p.overhead_partial / cost.t_total,
            }
            for p in scalability_sweep(cost, process, nodes, cfg["policy"]["target_pls"])
        ]
    emit(args, f"sweep_{args.axis.replace('-', '_')}", rows, manifest=manifest)
    return 0


def cmd_report(args) -> int:
    d = Path(args.input)
    if not d.is_dir():
        raise CliError(f"{d} is not a directory")
    files = sorted(p for p in d.glob("*.csv") if p.name != "report.csv")
    rows = []
    for p in files:
        with open(p, newline="") as fh:
            rows += [r for r in csv.DictReader(fh) if "strategy" in r and "overhead_fraction" in r]
    if not rows:
        raise CliError(f"no run CSVs found in {d}")
    out = []
    for strategy in sorted({r["strategy"] for r in rows}):
        sel = [r for r in rows if r["strategy"] == strategy]
        of = np.array([float(r["overhead_fraction"]) for r in sel])
        pl = np.array([float(r["final_pls"]) for r in sel])
        paired = [(float(r["final_pls"]), float(r["auc_degradation"])) for r in sel if r.get("auc_degradation")]
        deg = [d for _, d in paired]
        pd = np.array(paired).reshape(-1, 2)
        out.append(
            {
                "strategy": strategy,
                "runs": len(sel),
                "overhead_fraction": float(of.mean()),
                "overhead_p95": float(np.percentile(of, 95)),
                "final_pls": float(pl.mean()),
                "auc_degradation": float(np.mean(deg)) if deg else "",
                "pls_degradation_corr": float(np.corrcoef(pd[:, 0], pd[:, 1])[0, 1])
                if len(pd) > 2 and pd[:, 0].std() > 0 and pd[:, 1].std() > 0
                else "",
            }
        )
    text = csv_text(out)
    if args.out:
        write_atomic(Path(args.out) / "report.csv", text)
    sys.stdout.write(text)
    return 0


# -- parser ------------------------------------------------------------------


def _positive_pls(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"target PLS must lie in (0, 1], got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpr", description="Partial-recovery checkpoint planning and simulation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True, strategy=True):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", help="directory for CSV and manifest artifacts (default: stdout)")
        p.add_argument("--target-pls", type=_positive_pls, dest="target_pls")
        if seeds:
            p.add_argument("--seeds", type=int, help="number of seeded runs")
        if strategy:
            p.add_argument("--strategy", choices=[s.value for s in Strategy] + ["all"])

    p = sub.add_parser("fit-trace", help="fit failure-time distributions to a trace file")
    p.add_argument("trace")
    p.add_argument("--families", nargs="+", default=[f.value for f in FITTABLE], choices=[f.value for f in Family])
    p.add_argument("--timestamps", action="store_true", help="the file holds failure timestamps of one job, not gaps")
    p.add_argument("--first-only", action="store_true", help="with --timestamps, keep only the first failure")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_trace)

    p = sub.add_parser("plan", help="choose full or partial recovery for a configuration")
    common(p, seeds=False, strategy=False)
    p.add_argument("--margin", type=float, help="hours partial recovery must win by (default 1%% of t_total)")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="Monte-Carlo runs in analytic mode")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="runs coupled to the toy trainer")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grids over target PLS, failure counts or node counts")
    common(p)
    p.add_argument("--axis", required=True, choices=["target-pls", "failures", "nodes"])
    p.add_argument("--values", type=float, nargs="+", help="grid values (PLS targets or node counts)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate run CSVs in a directory")
    p.add_argument("input")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, cfgmod.ConfigError, DomainError, ValueError) as exc:
        print(f"cpr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
