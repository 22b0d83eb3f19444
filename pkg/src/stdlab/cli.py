"""Command-line entry point: ``stdlab <subcommand> [options]``.

Every invocation writes into its own run directory (``--out``, or a fresh
directory under ``$STDLAB_RUNS``, default ``./runs``) and finishes by
writing ``manifest.json`` there.

Exit codes: 0 success, 1 usage, 2 a check failed, 3 I/O problem.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .config import config_from_text, parse_config, render_config
from .data import gen_data, write_dataset
from .distill import DistillConfig, DistillState, load_state, run
from .eval import (ABLATION_HEADER, GRADCHECK_HEADER, ablate, bank_bench, bench_spec,
                   compare_std_cd, consistency_gap, endpoint_eval, eval_omega, gradcheck_suite,
                   noised_inputs, snapshot_metrics, student_sample, teacher_sample,
                   verify_theorem, write_rows)
from .plotting import KINDS, plot_csv
from .schedule import build_schedule

log = logging.getLogger("stdlab")

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3
RUNS_ENV = "STDLAB_RUNS"


class UsageError(Exception):
    pass


class RunDir:
    """Per-run output directory that records what it produced."""

    def __init__(self, path: Path, command: str, argv: list[str]):
        self.path = path
        self.command = command
        self.argv = argv
        self.artifacts: list[str] = []
        self.config_text = ""
        self.seed = None
        self.started = dt.datetime.now(dt.timezone.utc).isoformat()
        path.mkdir(parents=True, exist_ok=True)

    def file(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.path / name

    def finish(self, status: int, extra: dict | None = None):
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "tool_version": __version__,
            "seed": self.seed,
            "config": self.config_text,
            "started": self.started,
            "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
            "status": status,
            "artifacts": sorted(set(self.artifacts)),
            **(extra or {}),
        }
        tmp = self.path / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.path / "manifest.json")


def _make_run_dir(args, command: str, argv) -> RunDir:
    if args.out:
        path = Path(args.out)
    else:
        root = Path(os.environ.get(RUNS_ENV, "runs"))
        stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = root / f"{command}-{stamp}"
    return RunDir(path, command, list(argv))


# -- option plumbing --------------------------------------------------------

def _overrides(args) -> dict:
    out = {}
    for f in fields(DistillConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            out[f.name] = value
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_configs(args):
    return parse_config(args.config, _overrides(args))


def _add_common(p: argparse.ArgumentParser, skip=()):
    p.add_argument("--out", help="run directory (default: fresh dir under $%s)" % RUNS_ENV)
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, e.g. eval.n_samples=2048 (repeatable)")
    for f in fields(DistillConfig):
        if f.name not in skip:
            flag = "--" + f.name.replace("_", "-")
            p.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar="V",
                           help=argparse.SUPPRESS)


def _checkpoint_state(path):
    entries = checkpoint.load(path)
    config, spec, ecfg = config_from_text(checkpoint.entry_text(entries["meta/config"]))
    return load_state(path, spec, config), ecfg


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args, rd: RunDir) -> int:
    config, spec, ecfg = _load_configs(args)
    rd.seed = args.seed
    rd.config_text = render_config(config, spec, ecfg)
    path = rd.file("data.csv")
    gen_data(spec, args.n, args.seed, path)
    if args.n > 0 and spec.dim >= 2 and not args.no_plot:
        plot_csv(path, rd.file("data.svg"), "scatter", group="label")
    print(f"wrote {args.n} samples to {path}")
    return EXIT_OK


def cmd_distill(args, rd: RunDir) -> int:
    config, spec, ecfg = _load_configs(args)
    rd.seed = config.seed
    rd.config_text = render_config(config, spec, ecfg)
    rd.file("config.ini").write_text(rd.config_text)
    hook = None if args.no_eval else snapshot_metrics(ecfg)
    report, state = run(config, spec, rd.path, config_text=rd.config_text, snapshot=hook,
                        log_every=args.log_every)
    rd.artifacts += ["warmup.ckpt", "final.ckpt", "metrics.csv"]
    if report.snapshots:
        keys = sorted({k for snap in report.snapshots for k in snap} - {"label"})
        write_rows(rd.file("snapshots.csv"), ["label", *keys],
                   [[snap["label"], *(snap.get(k, "") for k in keys)] for snap in report.snapshots])
        for snap in report.snapshots:
            print("  ".join([snap["label"]] + [f"{k}={snap[k]:.4f}" for k in keys if k in snap]))
    if config.iterations > 0 and not args.no_plot:
        plot_csv(rd.path / "metrics.csv", rd.file("loss_std.svg"), "line",
                 x="iteration", y="loss_std")
    print(f"run directory: {rd.path}")
    return EXIT_OK


def _sample_inputs(state, n: int, seed: int):
    return noised_inputs(state, n, np.random.default_rng(seed))


def cmd_sample(args, rd: RunDir) -> int:
    state, ecfg = _checkpoint_state(args.checkpoint)
    rd.seed = args.seed
    rd.config_text = render_config(state.config, state.spec, ecfg)
    x_tau, cond = _sample_inputs(state, args.n, args.seed)
    ends = student_sample(state, x_tau, cond, args.nfe)
    path = rd.file("endpoints.csv")
    write_dataset(path, ends, cond)
    if state.spec.dim >= 2 and not args.no_plot:
        plot_csv(path, rd.file("endpoints.svg"), "scatter", group="label")
    print(f"wrote {args.n} student endpoints (NFE={args.nfe}) to {path}")
    return EXIT_OK


def cmd_teacher_sample(args, rd: RunDir) -> int:
    config, spec, ecfg = _load_configs(args)
    rd.seed = args.seed
    rd.config_text = render_config(config, spec, ecfg)
    state = DistillState(config, spec)
    x_tau, cond = _sample_inputs(state, args.n, args.seed)
    ends = teacher_sample(state, x_tau, cond, eval_omega(state, ecfg))
    path = rd.file("endpoints.csv")
    write_dataset(path, ends, cond)
    if spec.dim >= 2 and not args.no_plot:
        plot_csv(path, rd.file("endpoints.svg"), "scatter", group="label")
    print(f"wrote {args.n} teacher endpoints ({config.ode_steps} steps) to {path}")
    return EXIT_OK


def cmd_verify_theorem(args, rd: RunDir) -> int:
    config, spec, ecfg = _load_configs(args)
    rd.seed = args.seed
    rd.config_text = render_config(config, spec, ecfg)
    schedule = build_schedule(config.schedule, config.total_steps)
    report = verify_theorem(_floats(args.deltas), schedule, spec, trials=args.trials,
                            grid_steps=config.ode_steps, seed=args.seed, tolerance=args.tolerance)
    report.to_csv(rd.file("theorem.csv"))
    failures = report.failures()
    print(f"{len(report.rows)} rows, max identity error {report.max_identity_error:.3e}")
    for line in failures[:20]:
        print("FAIL", line)
    print("PASS" if not failures else f"FAIL ({len(failures)} violations)")
    return EXIT_OK if not failures else EXIT_CHECK


def cmd_eval(args, rd: RunDir) -> int:
    state, ecfg = _checkpoint_state(args.checkpoint)
    if args.nfe:
        ecfg = replace(ecfg, nfe=tuple(_ints(args.nfe)))
    rd.seed = ecfg.seed
    rd.config_text = render_config(state.config, state.spec, ecfg)
    rows = endpoint_eval(state, ecfg)
    gap = consistency_gap(state, ecfg)
    write_rows(rd.file("eval.csv"), ("nfe", "distance", "floor", "consistency_gap"),
               [[r["nfe"], r["distance"], r["floor"], gap] for r in rows])
    for r in rows:
        print(f"NFE={r['nfe']:<3d} distance={r['distance']:.4f} floor={r['floor']:.4f}")
    print(f"consistency gap {gap:.4f}")
    return EXIT_OK


def cmd_compare(args, rd: RunDir) -> int:
    config, spec, ecfg = _load_configs(args)
    seeds = _ints(args.seeds)
    rd.seed = seeds
    rd.config_text = render_config(config, spec, ecfg)
    table = compare_std_cd(config, spec, seeds, args.delta, ecfg, control=not args.no_control,
                           nfe=args.nfe)
    table.to_csv(rd.file("comparison.csv"))
    print(table.format())
    wins, total = table.seed_wins(args.delta)
    ok = 2 * wins > total if total else False
    print(f"STD <= baseline in {wins}/{total} seeds; medians std={table.median('std', args.delta):.4f}"
          f" baseline={table.median('baseline-cd', args.delta):.4f}")
    if not args.no_control and args.delta != 0:
        p = table.mode_difference_pvalue(0.0)
        print(f"delta=0 control: Mann-Whitney p={p:.3f}")
        ok = ok and p >= 0.05
    print("expected direction holds" if ok else "expected direction VIOLATED")
    return EXIT_CHECK if (args.strict and not ok) else EXIT_OK


def cmd_ablate(args, rd: RunDir) -> int:
    config, spec, ecfg = _load_configs(args)
    seeds = _ints(args.seeds)
    rd.seed = seeds
    rd.config_text = render_config(config, spec, ecfg)
    grids = tuple(g.strip() for g in args.grids.split(","))
    rows = ablate(config, spec, seeds, rhos=_floats(args.rhos), lambdas=_floats(args.lambdas),
                  ecfg=ecfg, nfe=args.nfe, grids=grids)
    path = rd.file("ablation.csv")
    write_rows(path, ABLATION_HEADER, [[r[k] for k in ABLATION_HEADER] for r in rows])
    for r in rows:
        print(f"{r['grid']:>10} r_rule={r['r_rule']:<8} rho={r['rho']:<4} "
              f"lambda={r['lambda_adv']:<4} seed={r['seed']} dist={r['endpoint_distance']:.4f}")
    return EXIT_OK


def cmd_bank_bench(args, rd: RunDir) -> int:
    config, spec, ecfg = _load_configs(args)
    if args.wide:
        spec = bench_spec()
    rd.seed = config.seed
    rd.config_text = render_config(config, spec, ecfg)
    out = bank_bench(config, spec, args.iterations)
    write_rows(rd.file("bank_bench.csv"), list(out), [list(out.values())])
    for k, v in out.items():
        print(f"{k:>24}: {v:.4g}")
    ok = out["bank_steps_per_iter"] <= 2 and out["wall_clock_ratio"] >= 5
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_gradcheck(args, rd: RunDir) -> int:
    rd.seed = args.seed
    rows = gradcheck_suite(args.configs, args.seed, args.h)
    write_rows(rd.file("gradcheck.csv"), GRADCHECK_HEADER,
               [[r[k] for k in GRADCHECK_HEADER] for r in rows])
    worst = max(r["max_rel_error"] for r in rows)
    print(f"worst relative error {worst:.3e} over {len(rows)} checks")
    ok = worst < args.tolerance
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_plot(args, rd: RunDir) -> int:
    name = args.output or Path(args.input).with_suffix(".svg").name
    out = rd.file(name)
    plot_csv(args.input, out, args.kind, x=args.x, y=args.y, group=args.group, title=args.title)
    print(f"wrote {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stdlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    p = sub.add_parser("gen-data", help="sample a labelled mixture dataset to CSV")
    _add_common(p, skip={"seed"})
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("distill", help="warm up and train a student")
    _add_common(p)
    p.add_argument("--no-eval", action="store_true", help="skip warmup/final snapshots")
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--log-every", type=int, default=500)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sample", help="few-step student endpoints from a checkpoint")
    p.add_argument("--out")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nfe", type=int, default=4)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("teacher-sample", help="reference teacher rollouts")
    _add_common(p, skip={"seed"})
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_teacher_sample)

    p = sub.add_parser("verify-theorem", help="sweep the one-step residual identity")
    _add_common(p, skip={"seed"})
    p.add_argument("--deltas", default="0 0.1 0.3 1.0")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("eval", help="endpoint distances and consistency gap of a checkpoint")
    p.add_argument("--out")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nfe", help="comma-separated NFE list")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="STD vs forward-noised baseline over seeds")
    _add_common(p)
    p.add_argument("--seeds", default="0 1 2 3 4")
    p.add_argument("--delta", type=float, default=0.3)
    p.add_argument("--nfe", type=int, default=4)
    p.add_argument("--no-control", action="store_true")
    p.add_argument("--strict", action="store_true", help="exit 2 if the expected direction fails")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", help="r_rule and rho x lambda ablation grids")
    _add_common(p)
    p.add_argument("--seeds", default="0")
    p.add_argument("--rhos", default="0 0.5 1")
    p.add_argument("--lambdas", default="0 0.1 0.5")
    p.add_argument("--grids", default="r_rule,rho_lambda")
    p.add_argument("--nfe", type=int, default=4)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bank-bench", help="teacher cost with and without the trajectory bank")
    _add_common(p, skip={"iterations"})
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--wide", action="store_true",
                   help="use the 256-component 8-D mixture so teacher calls dominate")
    p.set_defaults(func=cmd_bank_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--out")
    p.add_argument("--configs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="render a CSV as an SVG scatter or line plot")
    p.add_argument("--out")
    p.add_argument("input")
    p.add_argument("--output", help="file name inside the run directory")
    p.add_argument("--kind", choices=KINDS, default="scatter")
    p.add_argument("--x")
    p.add_argument("--y")
    p.add_argument("--group")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rd = _make_run_dir(args, args.command, argv)
    except OSError as exc:
        print(f"stdlab: cannot create run directory: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        status = args.func(args, rd)
    except (OSError, checkpoint.CheckpointError) as exc:
        print(f"stdlab {args.command}: {exc}", file=sys.stderr)
        status = EXIT_IO
    except (UsageError, ValueError) as exc:
        print(f"stdlab {args.command}: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        status = EXIT_USAGE
    try:
        rd.finish(status)
    except OSError as exc:
        print(f"stdlab: cannot write manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    return status


if __name__ == "__main__":
    sys.exit(main())
