"""Command-line front end.

Subcommands: ``validate``, ``solve``, ``estimate``, ``variance``,
``select`` and ``bench``. Single results are JSON; sweeps stream CSV rows
(fixed header) with the resolved run configuration echoed in leading
``#`` comment lines and in every JSON output. Exit codes: 0 success,
2 validation error, 3 runtime estimator error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import __version__, benchmarks
from .covariance import (
    Subgraph,
    sigma_mc,
    sigma_subgraph,
    sigma_subgraph_transient,
    sigma_td,
)
from .errors import (
    MrpError,
    NotAbsorbing,
    ParameterMismatch,
    RewardOutOfBounds,
    RowSumExceedsOne,
)
from .estimators import mc_estimate, subgraph_estimate, td_estimate
from .mrp_core import Mrp, exact_occupancy, exact_value, horizon_profile, load_mrp, one_step_variance, validate
from .rootsa import RootSaConfig, root_sa_with_restarts
from .sampling import sample_dataset
from .subgraph_select import exact_variance_fn, greedy_select, multistage_variance_fn
from .variance_estimation import variance_estimate, variance_estimate_plugin

_VALIDATION_ERRORS = (RowSumExceedsOne, RewardOutOfBounds, NotAbsorbing, ParameterMismatch,
                      ValueError, KeyError, json.JSONDecodeError, FileNotFoundError)


def _emit_error(exc: Exception, code: int) -> int:
    body = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(body), file=sys.stderr)
    return code


def _seed_from(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("SB_SEED")
    return int(env) if env else 0


def _resolved_config(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _wrap_output(args, result: dict) -> dict:
    return {"config": _resolved_config(args), "version": __version__, "result": result}


def _write_json(args, result: dict) -> None:
    payload = json.dumps(_wrap_output(args, result), indent=2, sort_keys=True)
    if getattr(args, "out", None):
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
    else:
        print(payload)


def _build_mrp(args):
    """Returns (mrp_or_lazy, family_or_none)."""
    if getattr(args, "mrp", None):
        return load_mrp(args.mrp), None
    family = getattr(args, "family", None)
    if family == "layered":
        fam = benchmarks.layered_mrp(args.k, args.T)
    elif family == "td-failure":
        fam = benchmarks.td_failure_mrp(args.N, args.gamma)
    elif family == "lower-bound":
        fam = benchmarks.lower_bound_mrp(args.m, args.N, args.q, args.epsilon)
    else:
        raise ValueError("provide --mrp FILE or --family {layered,td-failure,lower-bound}")
    return fam.build(), fam


def _parse_subgraph(args, mrp, family) -> Subgraph:
    spec = getattr(args, "subgraph", None) or "all"
    if spec == "all":
        if not isinstance(mrp, Mrp):
            raise ValueError("--subgraph all needs a materialized MRP")
        return Subgraph(tuple(int(s) for s in mrp.reachable_states()))
    if spec == "pooling":
        if family is None or "pooling_subgraph" not in family.analytic_facts:
            raise ValueError("--subgraph pooling needs a family with a pooling subgraph")
        return Subgraph(family.analytic_facts["pooling_subgraph"])
    if spec == "sources":
        if family is None or "sources" not in family.analytic_facts:
            raise ValueError("--subgraph sources needs a family with source states")
        return Subgraph(family.analytic_facts["sources"])
    return Subgraph(tuple(int(x) for x in spec.split(",")))


def _add_mrp_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mrp", help="path to an MRP spec JSON")
    p.add_argument("--family", choices=["layered", "td-failure", "lower-bound"])
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--T", type=int, default=6)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=0.1)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_validate(args) -> int:
    mrp = load_mrp(args.mrp) if args.mrp else _build_mrp(args)[0]
    if not isinstance(mrp, Mrp):
        raise ValueError("validation needs a materialized MRP "
                         "(this family is sampling-only at the given size)")
    report = validate(mrp)
    _write_json(args, report.to_json())
    return 0 if report.ok else 2


def _cmd_solve(args) -> int:
    mrp, family = _build_mrp(args)
    if not isinstance(mrp, Mrp):
        raise ValueError("exact solvers need a materialized MRP")
    result: dict = {}
    V = exact_value(mrp)
    nu = exact_occupancy(mrp)
    result["value"] = V.tolist()
    result["occupancy"] = nu.tolist()
    result["one_step_variance"] = one_step_variance(mrp, V).tolist()
    result["horizon"] = horizon_profile(mrp, p_max=args.p_max).to_json()
    state = args.state
    if args.variance:
        if args.variance == "td":
            rep = sigma_td(mrp)
        elif args.variance == "mc":
            rep = sigma_mc(mrp)
        elif args.variance == "subgraph":
            rep = sigma_subgraph(mrp, _parse_subgraph(args, mrp, family))
        elif args.variance == "transient":
            rep = sigma_subgraph_transient(mrp, _parse_subgraph(args, mrp, family))
        else:
            raise ValueError(f"unknown variance kind {args.variance!r}")
        result["covariance"] = rep.to_json()
        value = rep.variance_at(state)
        result["variance_at_state"] = value
        print(f"{value:g}")
    _write_json(args, result)
    return 0


def _cmd_estimate(args) -> int:
    mrp, family = _build_mrp(args)
    seed = _seed_from(args)
    dataset = sample_dataset(mrp, args.n, seed)
    if args.estimator == "td":
        est = td_estimate(dataset)
    elif args.estimator == "mc":
        est = mc_estimate(dataset)
    elif args.estimator == "subgraph":
        est = subgraph_estimate(dataset, _parse_subgraph(args, mrp, family))
    elif args.estimator == "rootsa":
        config = RootSaConfig(trace=bool(args.trace))
        est = root_sa_with_restarts(dataset, _parse_subgraph(args, mrp, family),
                                    config, seed=seed)
        if args.trace:
            trace = est.solver_info.pop("trace", [])
            with open(args.trace, "w") as fh:
                fh.write("step," + ",".join(str(s) for s in sorted(est.values)) + "\n")
                for step, row in enumerate(trace):
                    fh.write(f"{step}," + ",".join(f"{x:.12g}" for x in row) + "\n")
    else:
        raise ValueError(f"unknown estimator {args.estimator!r}")
    out = est.to_json()
    out["seed"] = seed
    out["n"] = args.n
    _write_json(args, out)
    return 0


def _cmd_variance(args) -> int:
    mrp, family = _build_mrp(args)
    G = _parse_subgraph(args, mrp, family)
    s0 = args.s0
    if args.kind == "exact":
        rep = sigma_subgraph(mrp, G)
        result = {"value": rep.variance_at(s0), "report": rep.to_json()}
    else:
        seed = _seed_from(args)
        dataset = sample_dataset(mrp, args.n0, seed)
        if args.kind == "multistage":
            est = variance_estimate(dataset, G, s0)
        else:
            est = variance_estimate_plugin(dataset, G, s0)
        result = est.to_json()
    print(f"{result['value']:g}")
    _write_json(args, result)
    return 0


def _cmd_select(args) -> int:
    mrp, family = _build_mrp(args)
    seed = _seed_from(args)
    dataset = sample_dataset(mrp, args.n, seed)
    s0 = args.s0
    if args.oracle:
        if not isinstance(mrp, Mrp):
            raise ValueError("--oracle needs a materialized MRP")
        fn = exact_variance_fn(mrp, s0)
    else:
        fn = multistage_variance_fn(dataset, s0)
    G, trace = greedy_select(dataset, s0, args.n, fn, budget=args.budget,
                             c1=args.c1, h=args.h)
    result = {"subgraph": list(G.members), "trace": trace.to_json()}
    _write_json(args, result)
    return 0


def _cmd_bench(args) -> int:
    seed = _seed_from(args)
    if args.family == "sweep":
        # generic multi-n sweep over a named family
        args.family = args.sweep_family
    if args.family == "layered":
        fam = benchmarks.layered_mrp(args.k, args.T)
        targets = {"mc": fam.analytic_facts["sigma_mc_source"],
                   "subgraph": fam.analytic_facts["pooling_variance"],
                   "td": fam.analytic_facts["sigma_td_source"]}
    elif args.family == "td-failure":
        N = args.N if args.N else 40 * args.n_grid[-1] ** 2
        fam = benchmarks.td_failure_mrp(N, args.gamma)
        targets = {}
    elif args.family == "lower-bound":
        fam = benchmarks.lower_bound_mrp(args.m, args.N, args.q, args.epsilon)
        targets = {}
    else:
        raise ValueError(f"unknown family {args.family!r}")

    records = []
    for name in args.estimators.split(","):
        spec = {"name": name.strip()}
        if spec["name"] == "subgraph":
            spec["subgraph"] = args.subgraph or "pooling"
        if spec["name"] == "td" and args.family == "td-failure":
            spec["discount"] = args.gamma  # the variant the family stresses
        records.extend(benchmarks.run_replicates(
            fam, spec, args.n_grid, args.replicates, seed, jobs=max(1, args.jobs)))

    config_line = json.dumps(_resolved_config(args), sort_keys=True)
    lines = [f"# config={config_line}", f"# version={__version__}",
             benchmarks.ExperimentRecord.CSV_HEADER]
    lines.extend(r.csv_row() for r in records)
    payload = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload)
    else:
        sys.stdout.write(payload)
    if args.summary:
        summary = benchmarks.summarize(records)
        with open(args.summary, "w") as fh:
            json.dump(_wrap_output(args, {"summary": summary}), fh, indent=2, sort_keys=True)
    if args.plot:
        from .report import plot_sweep

        plot_sweep(records, args.plot, title=f"{fam.name} ({fam.params_str()})",
                   targets=targets if targets else None)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list:
    return [int(float(x)) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrpeval",
                                     description="Tabular MRP policy-evaluation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check an MRP spec")
    _add_mrp_args(p)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("solve", help="exact value/occupancy/variances")
    _add_mrp_args(p)
    p.add_argument("--variance", choices=["td", "mc", "subgraph", "transient"])
    p.add_argument("--subgraph", help="comma list of states, or 'all'/'pooling'/'sources'")
    p.add_argument("--state", type=int, default=0)
    p.add_argument("--p-max", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("estimate", help="run a batch or online estimator")
    p.add_argument("estimator", choices=["td", "mc", "subgraph", "rootsa"])
    _add_mrp_args(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--subgraph")
    p.add_argument("--trace", help="CSV path for the online iterate trace")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("variance", help="estimate the asymptotic variance")
    p.add_argument("kind", choices=["exact", "multistage", "plugin"])
    _add_mrp_args(p)
    p.add_argument("--subgraph")
    p.add_argument("--s0", type=int, default=0)
    p.add_argument("--n0", type=int, default=4000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_variance)

    p = sub.add_parser("select", help="greedy subgraph selection")
    _add_mrp_args(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s0", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--oracle", action="store_true", help="use the exact variance oracle")
    p.add_argument("--budget", type=int)
    p.add_argument("--c1", type=float, default=1.0)
    p.add_argument("--h", type=float)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("bench", help="replicate sweeps over benchmark families")
    p.add_argument("family", choices=["layered", "td-failure", "lower-bound", "sweep"])
    p.add_argument("--sweep-family", default="layered",
                   choices=["layered", "td-failure", "lower-bound"],
                   help="family used by the generic 'sweep' mode")
    p.add_argument("--estimators", default="td,mc,subgraph")
    p.add_argument("--n-grid", type=_int_list, default=[1000])
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--subgraph")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--T", type=int, default=6)
    p.add_argument("--N", type=int, default=0)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--out", help="CSV path")
    p.add_argument("--summary", help="summary JSON path")
    p.add_argument("--plot", help="figure path rendered next to the CSV")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_bench)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        return _emit_error(exc, 2)
    except MrpError as exc:
        return _emit_error(exc, 3)


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
