"""Command line entry point: ``submhe {gains,verify,simulate,compare}``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from typing import Optional, Sequence

import yaml

from . import analysis
from .errors import SubMHEError
from .harness import MetricsTable, RunConfig, emit, monte_carlo
from .model import get_model, reactor_observer_domain
from .observer import contraction_check, eioss_slacks, reactor_observer


def _parse_T(text: str):
    return None if text.lower() in ("t", "none", "inf") else int(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _int_list(text: str):
    return [int(p) for p in text.split(",") if p.strip()]


def _str_list(text: str):
    return [p.strip() for p in text.split(",") if p.strip()]


def load_config(path: Optional[str]) -> dict:
    """Read a YAML or JSON mapping whose keys are RunConfig field names."""
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise SubMHEError(f"{path}: expected a mapping of RunConfig fields")
    RunConfig.from_mapping(data)  # rejects unknown keys early
    return data


# flag dest -> RunConfig field
_RUN_FLAGS = {
    "model": "model",
    "x0": "x0",
    "x_bar0": "x_bar0",
    "sim_length": "sim_length",
    "N": "N",
    "T": "T",
    "cost": "cost_kind",
    "candidate": "candidate_kind",
    "project": "project",
    "iters": "budget",
    "warm_start": "warm_start",
    "seed": "master_seed",
    "runs": "n_runs",
    "constrain_w": "constrain_w",
    "timing": "record_timing",
}


def build_run_config(args) -> RunConfig:
    data = load_config(args.config)
    for dest, name in _RUN_FLAGS.items():
        val = getattr(args, dest, None)
        if val is not None:
            data[name] = val
    return RunConfig.from_mapping(data)


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML/JSON file with RunConfig fields; flags override it")
    p.add_argument("--model")
    p.add_argument("--x0", type=lambda s: [float(v) for v in s.split(",")])
    p.add_argument("--x-bar0", dest="x_bar0", type=lambda s: [float(v) for v in s.split(",")])
    p.add_argument("--sim-length", dest="sim_length", type=int)
    p.add_argument("-N", dest="N", type=int)
    p.add_argument("-T", dest="T", type=_parse_T, help="re-initialization horizon, or 't' for never")
    p.add_argument("--cost", choices=analysis.COSTS)
    p.add_argument("--candidate", choices=("nominal", "observer", "luenberger"))
    p.add_argument("--project", type=_bool, nargs="?", const=True)
    p.add_argument("--iters", type=int, help="solver iteration budget i")
    p.add_argument("--warm-start", dest="warm_start", choices=("candidate", "shifted"))
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--constrain-w", dest="constrain_w", type=_bool, nargs="?", const=True)
    p.add_argument("--timing", type=_bool, nargs="?", const=True, help="record wall time per step")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--executor", choices=("thread", "process"), default="thread")


def _fmt_cell(v, width=9):
    if v is None:
        return "-".rjust(width)
    if isinstance(v, int):
        return str(v).rjust(width)
    return f"{v:{width}.2f}"


def cmd_gains(args) -> int:
    params = analysis.reactor_theory_params(H=args.H, F=args.F, kappa=args.kappa)
    variants = [args.variant] if args.variant else list(analysis.VARIANTS)
    costs = [args.cost] if args.cost else list(analysis.COSTS)
    reports = [analysis.aggregate_gains(params, args.N, args.T, v, c, args.project) for v in variants for c in costs]
    print(f"F={params.F:.5f}  H={params.H:.5f}  kappa={params.kappa:.5f}  rho={params.rho}  N={args.N}")
    print(f"{'candidate':<10}{'cost':<12}" + "".join(h.rjust(9) for h in ("C1", "C2", "C3", "C_eps", "T_min", "T", "lambda")))
    for r in reports:
        cells = "".join(_fmt_cell(v) for v in (r.C1, r.C2, r.C3, r.C_eps, r.T_min, r.T))
        print(f"{r.variant:<10}{r.cost:<12}{cells}{r.lam:9.5f}" + ("" if r.certified else "  (not certified)"))
    if args.json:
        payload = reports[0].to_dict() if len(reports) == 1 else [r.to_dict() for r in reports]
        try:
            with open(args.json, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=2)
        except OSError as exc:
            raise SubMHEError(f"cannot write {args.json}: {exc}") from exc
    return 0


def cmd_verify(args) -> int:
    sys_ = get_model(args.model)
    obs = reactor_observer()
    cert = contraction_check(obs, sys_)
    slack = eioss_slacks(obs, sys_, reactor_observer_domain(), n_samples=args.samples, seed=args.seed)
    print(f"contraction: {'valid' if cert.valid else 'INVALID'}  max vertex norm {cert.max_vertex_norm:.6f} <= rho {cert.rho}")
    if cert.offending_vertex is not None:
        print(f"offending vertex: {cert.offending_vertex}")
    print(f"C_p={cert.C_p:.4f}  C_w={cert.C_w:.4f}  C_v={cert.C_v:.4f}  kappa={cert.kappa:.5f}")
    e = cert.eioss
    print(f"e-IOSS: c_p={e.c_p:.4f} c_w={e.c_w:.4f} c_v={e.c_v:.4f} c_y={e.c_y:.4f} eta={e.eta}")
    ok = bool(slack.min() >= -1e-9)
    print(f"P-norm inequality over {args.samples} samples: min slack {slack.min():.3e} ({'ok' if ok else 'VIOLATED'})")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"certificate": cert.to_dict(), "min_slack": float(slack.min()), "ok": ok}, fh, indent=2)
    return 0 if cert.valid and ok else 1


def cmd_simulate(args) -> int:
    cfg = build_run_config(args)
    table, records = monte_carlo(cfg, workers=args.workers, executor=args.executor)
    if args.out:
        emit(records, args.format, args.out)
    if args.metrics:
        emit(table, "csv" if args.metrics.endswith(".csv") else "json", args.metrics)
    _print_table(table)
    return 0


def cmd_compare(args) -> int:
    base = build_run_config(args)
    table = MetricsTable()
    if args.baseline:
        monte_carlo(replace(base, candidate_kind="luenberger", budget=0, T=None), args.workers, args.executor, table=table)
    candidates = args.candidates or [base.candidate_kind]
    costs = args.costs or [base.cost_kind]
    budgets = args.budgets if args.budgets else [base.budget]
    for cand in candidates:
        for cost in costs:
            for i in budgets:
                monte_carlo(replace(base, candidate_kind=cand, cost_kind=cost, budget=i), args.workers, args.executor,
                            table=table)
    if args.out:
        emit(table, "json" if args.out.endswith(".json") else "csv", args.out)
    _print_table(table)
    return 0


def _print_table(table: MetricsTable):
    print(f"{'configuration':<44}{'SSE':>10}{'SNE':>10}{'tau_a[ms]':>11}")
    for row in table.rows:
        tau = "-" if math.isnan(row.tau_a) else f"{row.tau_a:.3f}"
        print(f"{row.label:<44}{row.SSE:10.3f}{row.SNE:10.3f}{tau:>11}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="submhe", description="Suboptimal moving horizon estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gains", help="robust stability gains and T_min")
    g.add_argument("--model", default="reactor", choices=("reactor",))
    g.add_argument("--variant", choices=analysis.VARIANTS)
    g.add_argument("--cost", choices=analysis.COSTS)
    g.add_argument("--project", dest="project", action="store_true", default=True)
    g.add_argument("--no-project", dest="project", action="store_false")
    g.add_argument("-N", dest="N", type=int, default=3)
    g.add_argument("-T", dest="T", type=int, default=None, help="defaults to T_min")
    g.add_argument("--H", type=float, default=None, help="output Lipschitz constant (default from the output map)")
    g.add_argument("--F", type=float, default=None, help="dynamics Lipschitz constant (default from vertex analysis)")
    g.add_argument("--kappa", type=float, default=None, help="observer gain bound (default |K|_2)")
    g.add_argument("--json")
    g.set_defaults(func=cmd_gains)

    v = sub.add_parser("verify", help="observer certificate and e-IOSS check")
    v.add_argument("--model", default="reactor", choices=("reactor",))
    v.add_argument("--samples", type=int, default=10_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--json")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("simulate", help="Monte-Carlo runs of one configuration")
    _add_run_flags(s)
    s.add_argument("--out", help="per-step records")
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--metrics", help="write the metrics table (.csv or .json)")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="metrics table over budgets, candidates and costs")
    _add_run_flags(c)
    c.add_argument("--budgets", type=_int_list)
    c.add_argument("--candidates", type=_str_list)
    c.add_argument("--costs", type=_str_list)
    c.add_argument("--baseline", action="store_true", help="prepend the observer-only row")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SubMHEError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
