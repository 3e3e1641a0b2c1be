"""Command-line entry point: ``otat train | ablate | suite | ot solve | ot heatmap | episode gen | report``.

Run settings come from an optional ``key = value`` file plus ``key=value``
overrides on the command line. Outputs go to ``--out``, else to
``$OTAT_OUTPUT_DIR``, else ``./otat-out``. Failures print one line
``otat-error: {json}`` on stderr and exit nonzero.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from otat.blocks import ConfigError
from otat.episodes import EpisodeSpec, export_episode, generate_episode
from otat.estimator import TrainingDiverged
from otat.golden import read_matrix, write_matrix
from otat.harness import (
    METRICS_HEADER,
    RunConfig,
    csv_text,
    ensure_dir,
    write_text,
    ablation_suite,
    ablation_table_csv,
    acceptance_config,
    acceptance_suite,
    export_heatmaps,
    fit_seed,
    load_config,
    save_checkpoint,
    train,
    write_report,
)
from otat.numeric import NumericalError
from otat.svg import heatmap_svg
from otat.transport import Marginals, SinkhornConfig, exact_ot, heatmap_values, ot_distance, sinkhorn

ENV_OUTPUT = "OTAT_OUTPUT_DIR"
DEFAULT_OUTPUT = "otat-out"

EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
EXIT_OTHER = 1


class CliError(Exception):
    def __init__(self, kind, message, code, **detail):
        super().__init__(message)
        self.kind = kind
        self.code = code
        self.detail = detail


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("UsageError", message, EXIT_USAGE)


def _output_dir(args):
    return Path(args.out or os.environ.get(ENV_OUTPUT) or DEFAULT_OUTPUT)


def _split_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _run_config(args):
    cfg = acceptance_config() if args.preset == "acceptance" else RunConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    return cfg.with_overrides(_split_overrides(args.overrides))


def _emit(payload):
    print(json.dumps(payload, sort_keys=True))


# -- verbs -------------------------------------------------------------------------


def cmd_train(args):
    cfg = _run_config(args)
    out = ensure_dir(_output_dir(args))
    report = train(cfg, workers=args.workers)
    written = write_report(report, out)
    if args.heatmaps:
        written += export_heatmaps(cfg, out / "heatmaps")
    if args.checkpoint:
        clf, _ = fit_seed(cfg, cfg.seeds[0])
        written.append(save_checkpoint(clf, out / "checkpoint"))
    _emit({"run_id": report.run_id, **report.final, "files": [str(p) for p in written]})


def _parse_grid(items):
    sweep = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} is not key=v1,v2,...")
        key, values = item.split("=", 1)
        sweep[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    return sweep


def cmd_ablate(args):
    cfg = _run_config(args)
    out = ensure_dir(_output_dir(args))
    table = ablation_suite(cfg, _parse_grid(args.grid), workers=args.workers)
    write_text(out / "ablation.csv", ablation_table_csv(table))
    rows = [row for _, report in table for row in report.metric_rows()]
    write_text(out / "metrics.csv", csv_text(METRICS_HEADER, rows))
    _emit({
        "points": len(table),
        "files": [str(out / "ablation.csv"), str(out / "metrics.csv")],
        "results": [{"point": p, "run_id": r.run_id, **r.final} for p, r in table],
    })


def cmd_suite(args):
    cfg = _run_config(args)
    result = acceptance_suite(_output_dir(args), cfg, workers=args.workers)
    _emit({
        "out": str(result["out"]),
        "arms": [{"point": p, "run_id": r.run_id, **r.final} for p, r in result["arms"]],
        "costs": [{"point": p, "run_id": r.run_id, **r.final} for p, r in result["costs"]],
        "timing": result["timing"],
    })


def _marginals(args, shape):
    if args.a is None and args.b is None:
        return Marginals.uniform(*shape)
    if args.a is None or args.b is None:
        raise ConfigError("give both --a and --b, or neither")
    return Marginals(read_matrix(args.a).ravel(), read_matrix(args.b).ravel())


def _solver(args):
    return SinkhornConfig(lam=args.lam, max_iters=args.max_iters, tol=args.tol, stabilized=not args.direct)


def cmd_ot_solve(args):
    cost = read_matrix(args.cost)
    marg = _marginals(args, cost.shape)
    result = sinkhorn(cost, marg, _solver(args))
    out = ensure_dir(_output_dir(args))
    write_matrix(out / "plan.mat", result.plan)
    write_text(out / "plan.csv", csv_text([f"col_{j}" for j in range(cost.shape[1])], result.plan.tolist()))
    diag = {
        "iterations": result.iterations,
        "converged": result.converged,
        "residual": result.final_residual,
        "distance": float(ot_distance(result.plan, cost)),
    }
    if args.exact:
        _, value = exact_ot(cost, marg)
        diag["exact_value"] = float(value)
    write_text(out / "diagnostics.csv", csv_text(list(diag), [list(diag.values())]))
    _emit({**diag, "files": [str(out / n) for n in ("plan.mat", "plan.csv", "diagnostics.csv")]})


def cmd_ot_heatmap(args):
    out = ensure_dir(_output_dir(args))
    if args.cost is None:
        cfg = _run_config(args)
        written = export_heatmaps(cfg, out, seed=args.seed, trained=not args.fresh)
        _emit({"files": [str(p) for p in written[:2]], "svgs": len(written) - 2})
        return
    if args.overrides or args.config or args.preset:
        raise ConfigError("--cost mode takes no run configuration")
    cost = read_matrix(args.cost)
    plan = read_matrix(args.plan) if args.plan else sinkhorn(cost, _marginals(args, cost.shape), _solver(args)).plan
    h = heatmap_values(plan, cost)
    write_text(out / "heatmap.csv", csv_text(["patch", "h"], [[i, float(v)] for i, v in enumerate(h)]))
    side = int(np.ceil(np.sqrt(h.size)))
    padded = np.full(side * side, np.nan)
    padded[:h.size] = h
    write_text(out / "heatmap.svg", heatmap_svg([("h", padded.reshape(side, side))], title=Path(args.cost).name))
    _emit({"distance": float(ot_distance(plan, cost)), "files": [str(out / "heatmap.csv"), str(out / "heatmap.svg")]})


def cmd_episode_gen(args):
    fields = {}
    for key, value in _split_overrides(args.overrides).items():
        key = key.removeprefix("episode.")
        if key not in EpisodeSpec.__dataclass_fields__:
            raise ConfigError(f"unknown episode field {key!r}")
        kind = type(getattr(EpisodeSpec(), key))
        try:
            fields[key] = kind(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    try:
        spec = EpisodeSpec(**fields)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _output_dir(args)
    manifest = export_episode(generate_episode(spec, args.seed), out)
    _emit({"seed": args.seed, "spec": asdict(spec), "manifest": str(manifest)})


def cmd_report(args):
    rows = []
    for path in args.metrics:
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                if rec["seed"] == "all":
                    rows.append(rec)
    if not rows:
        raise ConfigError("no aggregate rows (seed=all) found in the given metrics files")
    table = {}
    for rec in rows:
        table.setdefault(rec["run_id"], {})[rec["metric"]] = float(rec["value"])
    if args.format == "json":
        _emit(table)
        return
    print(f"{'run_id':32s} {'accuracy':>17s} {'mnn':>17s}")
    for run_id, m in table.items():
        acc = f"{m.get('accuracy_mean', float('nan')):.4f} ± {m.get('accuracy_std', float('nan')):.4f}"
        mnn = f"{m.get('mnn_mean', float('nan')):.4f} ± {m.get('mnn_std', float('nan')):.4f}"
        print(f"{run_id:32s} {acc:>17s} {mnn:>17s}")


# -- parser ------------------------------------------------------------------------


def _run_args(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--preset", choices=["acceptance"], help="start from a pinned configuration")
    p.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT} or ./{DEFAULT_OUTPUT})")
    p.add_argument("overrides", nargs="*", metavar="key=value")


def _solver_args(p):
    p.add_argument("--a", help="row marginal matrix file (1 x n)")
    p.add_argument("--b", help="column marginal matrix file (1 x m)")
    p.add_argument("--lam", type=float, default=10.0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--direct", action="store_true", help="plain scaling updates instead of log-domain")


def build_parser():
    parser = _Parser(prog="otat", description="Optimal-transport adapter experiments at desk scale.")
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = verbs.add_parser("train", help="train one configuration over its seeds")
    _run_args(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--heatmaps", action="store_true", help="also export query heatmaps for the first seed")
    p.add_argument("--checkpoint", action="store_true", help="also save the first seed's parameters")
    p.set_defaults(func=cmd_train)

    p = verbs.add_parser("ablate", help="train every point of a parameter grid")
    _run_args(p)
    p.add_argument("--grid", action="append", metavar="key=v1,v2", help="sweep axis; repeat for a product grid")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = verbs.add_parser("suite", help="arm and cost-kind ablations plus heatmaps (acceptance config by default)")
    _run_args(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_suite, preset="acceptance")

    ot = verbs.add_parser("ot", help="transport utilities").add_subparsers(
        dest="ot_verb", required=True, parser_class=_Parser
    )
    p = ot.add_parser("solve", help="Sinkhorn plan for a cost matrix file")
    p.add_argument("--cost", required=True)
    _solver_args(p)
    p.add_argument("--exact", action="store_true", help="also report the unregularized optimum")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ot_solve)

    p = ot.add_parser("heatmap", help="per-patch heatmap for a cost file, or for a trained run's queries")
    p.add_argument("--cost")
    p.add_argument("--plan", help="use this plan instead of solving")
    _solver_args(p)
    _run_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--fresh", action="store_true", help="skip training, use initial parameters")
    p.set_defaults(func=cmd_ot_heatmap)

    ep = verbs.add_parser("episode", help="synthetic episodes").add_subparsers(
        dest="episode_verb", required=True, parser_class=_Parser
    )
    p = ep.add_parser("gen", help="generate and export one episode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("overrides", nargs="*", metavar="field=value")
    p.set_defaults(func=cmd_episode_gen)

    p = verbs.add_parser("report", help="summarize metrics CSV files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=cmd_report)
    return parser


def _classify(exc):
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, TrainingDiverged):
        return CliError("TrainingDiverged", str(exc), EXIT_NUMERIC, step=exc.step, terms=exc.terms)
    if isinstance(exc, NumericalError):
        return CliError(type(exc).__name__, str(exc), EXIT_NUMERIC)
    if isinstance(exc, OSError):
        return CliError("IOError", str(exc), EXIT_IO)
    if isinstance(exc, (ValueError, KeyError)):
        return CliError(type(exc).__name__, str(exc), EXIT_USAGE)
    return CliError(type(exc).__name__, str(exc), EXIT_OTHER)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except Exception as exc:  # every failure becomes one machine-readable line
        err = _classify(exc)
        payload = {"error": err.kind, "message": str(err), "exit_code": err.code, **err.detail}
        print("otat-error: " + json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
        return err.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
