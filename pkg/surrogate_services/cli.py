"""Command line entry point: ``python surrogate.py <command> ...``."""

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from config import settings
from surrogate_services.discretization.mesh_fem import DiffusionField, build_mesh, exact_solution_oracle, solve_reference
from surrogate_services.errors import SurrogateError, UsageError
from surrogate_services.experiments import reporting, studies
from surrogate_services.experiments.runner import run_many
from surrogate_services.experiments.schemas import PRESETS, load_config
from surrogate_services.networks.schemas import ArchitectureKind

logger = logging.getLogger("surrogate")


def _parse_y(text: str) -> tuple:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError as e:
        raise UsageError(f"--y expects four comma separated numbers, got {text!r}") from e
    if len(values) != 4:
        raise UsageError(f"--y expects four values, got {len(values)}")
    return values


def _output(path: Optional[str], default_name: str) -> str:
    return path or os.path.join(settings.OUTPUT_DIR, default_name)


def cmd_train(args) -> int:
    configs = [load_config(path, preset=args.preset) for path in args.configs]
    reports = run_many(configs, workers=args.workers, output_root=args.output_root)
    for report in reports:
        final = report.final
        print(f"{report.config.run.name}: {report.status}, test loss {final.test_loss:.3e}, "
              f"MRE {final.mre:.3e}, MSE {final.mse:.3e} -> {os.path.dirname(report.metrics_csv)}")
    return 0 if all(not r.diverged for r in reports) else 3


def cmd_reference(args) -> int:
    field = DiffusionField(_parse_y(args.y))
    mesh = build_mesh(args.J)
    u, sigma = solve_reference(field, args.J, args.f)
    exact = exact_solution_oracle(field, args.f)
    frame = pd.DataFrame({"x": mesh.nodes, "u": np.pad(u, 1), "sigma": sigma,
                          "u_exact": exact.u(mesh.nodes), "sigma_exact": exact.sigma(mesh.nodes)})
    if args.out:
        reporting.write_frame(frame, args.out)
    else:
        frame.to_csv(sys.stdout, index=False, float_format=reporting.FLOAT_FORMAT, lineterminator="\n")
    return 0


def cmd_cond(args) -> int:
    frame = studies.cond_report(args.jmin, args.jmax, args.samples, seed=args.seed, formulation=args.formulation)
    reporting.write_frame(frame, _output(args.out, "cond_report.csv"))
    print(frame.groupby("J")[["cond_A", "cond_HAH", "cond_DCD", "cond_D", "cond_C"]].max().to_string())
    return 0


def cmd_precision(args) -> int:
    frame = studies.precision_experiment(args.J, args.trials, seed=args.seed, formulation=args.formulation)
    reporting.write_frame(frame, _output(args.out, "precision_experiment.csv"))
    print(studies.summarize_precision(frame).to_string(index=False))
    return 0


def cmd_init_demo(args) -> int:
    fields, norms = studies.init_demo(args.arch, args.count, seed=args.seed, J=args.J)
    path = _output(args.out, "init_demo.csv")
    reporting.write_frame(fields, path)
    reporting.write_frame(norms, os.path.splitext(path)[0] + "_norms.csv")
    print(f"median H1 norm: frame {norms['h1_frame'].median():.3e}, raw {norms['h1_raw'].median():.3e}")
    return 0


def cmd_equivalence(args) -> int:
    frame = studies.error_equivalence(args.J, args.perturbations, seed=args.seed)
    reporting.write_frame(frame, _output(args.out, "error_equivalence.csv"))
    print(f"loss / error^2 in [{frame['ratio'].min():.3e}, {frame['ratio'].max():.3e}]")
    return 0


def cmd_report(args) -> int:
    print(reporting.render_report(args.directory), end="")
    return 0


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surrogate",
                                     description="Frame-preconditioned neural surrogates for a 1D parametric PDE.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one or more configurations")
    p.add_argument("configs", nargs="+", help="INI experiment files")
    p.add_argument("--preset", choices=sorted(PRESETS), help="overlay a preset on every config")
    p.add_argument("--workers", type=int, default=settings.WORKERS, help="parallel runs")
    p.add_argument("--output-root", help="write run directories below this path")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("reference", help="binary64 finite element reference solution")
    p.add_argument("--y", required=True, help="four coefficient values a,b,c,d")
    p.add_argument("--J", type=int, required=True)
    p.add_argument("--f", type=float, default=1.0)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(handler=cmd_reference)

    p = sub.add_parser("cond", help="condition numbers over levels")
    p.add_argument("--jmin", type=int, default=2)
    p.add_argument("--jmax", type=int, default=8)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    p.add_argument("--formulation", choices=["fosls", "energy"], default="fosls")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_cond)

    p = sub.add_parser("precision", help="stable vs synthesized quadratic form in low precision")
    p.add_argument("--J", type=int, default=10)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    p.add_argument("--formulation", choices=["fosls", "energy"], default="fosls")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_precision)

    p = sub.add_parser("init-demo", help="initial network fields with and without frames")
    p.add_argument("--arch", choices=[k.value for k in ArchitectureKind], default="full")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--J", type=int, default=10)
    p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_init_demo)

    p = sub.add_parser("equivalence", help="loss vs squared solution error of perturbed references")
    p.add_argument("--J", type=int, default=8)
    p.add_argument("--perturbations", type=int, default=30)
    p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_equivalence)

    p = sub.add_parser("report", help="markdown table and loss curves of finished runs")
    p.add_argument("directory")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL, format=settings.LOG_FORMAT)
    args = build_arg_parser().parse_args(argv)
    try:
        return args.handler(args)
    except SurrogateError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception("unexpected failure in %s", args.command)
        return 1
