"""Command line entry point: ``tokenbal run | oracle run | metrics ... | matchings``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from .graph import parse_family, read_edge_list, spectral
from .harness import Scenario, load_scenario, run_scenario
from .metrics import potentials, psi2_upsilon2_diffusion, psi_p_matching, smoothing_time
from .oracle import run_manifest
from .schedule import MatchingSchedule, matchings_to_jsonl
from .diffusion import gamma_preset


def default_manifest() -> Path:
    return Path(str(resources.files("tokenbal") / "data" / "oracle_manifest.toml"))


def _graph(args):
    if getattr(args, "graph_file", None):
        return read_edge_list(args.graph_file)
    return parse_family(args.graph, seed=args.seed)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(type(obj))


def _dump(obj) -> str:
    return json.dumps(obj, default=_jsonable, indent=2, sort_keys=True)


def _scenario_from_args(args) -> Scenario:
    sc = load_scenario(args.scenario) if args.scenario else Scenario(id=args.id or "cli", graph={})
    if args.graph_file:
        sc.graph = {"file": args.graph_file}
    elif args.graph:
        name, _, rest = args.graph.partition("(")
        sc.graph = {"family": name.strip(), "params": [int(a) for a in rest.rstrip(")").split(",") if a.strip()]}
    if not sc.graph:
        raise SystemExit("give a scenario file or --graph/--graph-file")
    model = dict(sc.model)
    if args.model:
        model["kind"] = args.model
    if args.schedule:
        model["schedule"] = args.schedule
    if args.orientation:
        model["orientation"] = args.orientation
    if args.tokens:
        model["tokens"] = args.tokens == "on"
    if args.variant:
        model["variant"] = args.variant
    if args.gamma:
        model["gamma"] = args.gamma if args.gamma == "auto" else float(args.gamma)
    sc.model = model
    for key in ("seed", "rounds", "replicas", "workers"):
        if getattr(args, key) is not None:
            setattr(sc, key, getattr(args, key))
    if args.log_stride is not None:
        sc.stride = args.log_stride
    if args.K is not None:
        sc.init = {**sc.init, "K": args.K}
    if args.init:
        sc.init = {**sc.init, "kind": args.init}
    return sc


def cmd_run(args) -> int:
    sc = _scenario_from_args(args)
    out = args.out or f"out/{sc.id}"
    row = run_scenario(sc, out)
    print(_dump(asdict(row)))
    return 0 if row.passed else 1


def cmd_oracle(args) -> int:
    report = run_manifest(args.manifest or default_manifest())
    text = _dump(report)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0 if report["pass"] else 1


def cmd_metrics(args) -> int:
    if args.which == "potentials":
        if args.loads_file:
            loads = [int(v) for v in Path(args.loads_file).read_text().split()]
        else:
            loads = [int(v) for v in args.loads.split(",")]
        print(_dump(asdict(potentials(loads, eps=args.eps))))
        return 0
    g = _graph(args)
    if args.which == "psi2":
        if args.model == "diffusion":
            rep = psi2_upsilon2_diffusion(g, gamma_preset(g, args.gamma or 2))
        else:
            sched = MatchingSchedule(g, args.schedule or "circuit", seed=args.seed)
            rep = psi_p_matching(sched.take(args.rounds or 64), g.n, p=args.p)
        print(_dump(asdict(rep)))
        return 0
    sched = MatchingSchedule(g, args.schedule or "circuit", seed=args.seed)
    est = smoothing_time(sched, args.K if args.K is not None else g.n, args.smooth_eps)
    result = asdict(est)
    if sched.mode == "circuit":
        result["lambda_M"] = spectral(g, round_matrix=sched.round_matrix()).lambda_M
    print(_dump(result))
    return 0


def cmd_matchings(args) -> int:
    g = _graph(args)
    sched = MatchingSchedule(g, args.schedule or "circuit", seed=args.seed)
    sys.stdout.write(matchings_to_jsonl(sched.take(args.rounds or 10)))
    return 0


def _graph_args(p, with_seed=True):
    p.add_argument("--graph", help='family descriptor such as "torus(2,16)"')
    p.add_argument("--graph-file", help='edge list: "n m" then one "u v" per line')
    if with_seed:
        p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tokenbal", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run a scenario file (flags override its fields)")
    run.add_argument("scenario", nargs="?")
    run.add_argument("--id")
    _graph_args(run, with_seed=False)
    run.add_argument("--seed", type=int)
    run.add_argument("--rounds", type=int)
    run.add_argument("--replicas", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--log-stride", type=int)
    run.add_argument("--model", choices=["matching", "diffusion"])
    run.add_argument("--schedule", choices=["circuit", "random"])
    run.add_argument("--orientation", choices=["random", "deterministic"])
    run.add_argument("--tokens", choices=["on", "off"])
    run.add_argument("--variant", choices=["vertex", "edge"])
    run.add_argument("--gamma", help='a number or "auto" for 1+1/Δ')
    run.add_argument("--K", type=int)
    run.add_argument("--init", choices=["spike", "uniform", "two_level", "zero"])
    run.add_argument("--out")
    run.set_defaults(func=cmd_run)

    orc = sub.add_parser("oracle", help="exact enumeration checks")
    orc_sub = orc.add_subparsers(dest="oracle_cmd", required=True)
    orc_run = orc_sub.add_parser("run")
    orc_run.add_argument("--manifest")
    orc_run.add_argument("--out")
    orc_run.set_defaults(func=cmd_oracle)

    met = sub.add_parser("metrics", help="analytic quantities")
    met.add_argument("which", choices=["psi2", "smoothing", "potentials"])
    _graph_args(met)
    met.add_argument("--schedule", choices=["circuit", "random"])
    met.add_argument("--model", choices=["matching", "diffusion"], default="matching")
    met.add_argument("--gamma")
    met.add_argument("--rounds", type=int)
    met.add_argument("--p", type=float, default=2.0)
    met.add_argument("--K", type=float)
    met.add_argument("--smooth-eps", type=float, default=1.0)
    met.add_argument("--loads", help="comma separated loads")
    met.add_argument("--loads-file")
    met.add_argument("--eps", type=float, default=0.25, help="parameter of the exponential potential")
    met.set_defaults(func=cmd_metrics)

    mt = sub.add_parser("matchings", help="print a schedule's matchings as JSONL")
    _graph_args(mt)
    mt.add_argument("--schedule", choices=["circuit", "random"])
    mt.add_argument("--rounds", type=int)
    mt.set_defaults(func=cmd_matchings)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
