"""Command line entry point: generate, run, churn, check, report.

Exit codes: 0 success, 1 configuration or usage error, 2 invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .graph import degree_histogram, write_edge_list
from .harness import (TOPOLOGIES, ConfigError, ExperimentConfig, build_topology, churn_experiment,
                      emit_report, load_config, load_report, make_catalog, parse_int_list,
                      run_experiment)
from .overlay import check_snapshot
from .search import ALGORITHMS

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mposim", description="Overlay topology and search simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="single seed (overrides config seeds)")
        sp.add_argument("--out", default="results", help="output directory")
        sp.add_argument("--topology", choices=TOPOLOGIES, help="restrict to one topology")
        sp.add_argument("--n", type=int, help="network size")

    g = sub.add_parser("generate", help="build one topology; write its edge list and degrees")
    common(g)
    for name in ("run", "churn"):
        sp = sub.add_parser(name, help="full experiment" if name == "run" else "churn sweep only")
        common(sp)
        sp.add_argument("--ttl", help="ttl list, e.g. 0-6 or 1,2,4")
        sp.add_argument("--algorithm", choices=ALGORITHMS, help="restrict to one algorithm")
    c = sub.add_parser("check", help="verify MPO degree and height bounds on a snapshot")
    c.add_argument("snapshot", help="overlay snapshot JSON")
    r = sub.add_parser("report", help="re-emit CSVs from a saved report.json")
    r.add_argument("report", help="report.json written by run or churn")
    r.add_argument("--out", default=None, help="output directory (default: next to the report)")
    return p


def _config(args) -> ExperimentConfig:
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seeds"] = [args.seed]
    if getattr(args, "topology", None):
        over["topologies"] = [args.topology]
    if getattr(args, "n", None) is not None:
        over["n"] = args.n
    if getattr(args, "algorithm", None):
        over["algorithms"] = [args.algorithm]
    if getattr(args, "ttl", None):
        try:
            over["ttls"] = parse_int_list(args.ttl)
        except ValueError:
            raise ConfigError(f"--ttl: cannot parse {args.ttl!r}") from None
    if args.config:
        return load_config(args.config, over)
    return ExperimentConfig(**over).validate()


def _generate(args) -> int:
    cfg = _config(args)
    name = args.topology or "mpo"
    seed = cfg.seeds[0]
    g, ov = build_topology(name, cfg, seed, make_catalog(cfg, seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_edge_list(g, out / f"{name}_edges.txt")
    with (out / f"{name}_degrees.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "node", "degree"])
        w.writerows([i, u, dg] for i, (u, dg) in enumerate(degree_histogram(g), 1))
    if ov is not None:
        (out / "mpo_snapshot.json").write_text(json.dumps(ov.snapshot(), sort_keys=True) + "\n",
                                              encoding="utf-8")
        if not ov.check_structure().ok:
            return EXIT_INVARIANT
    return EXIT_OK


def _violations(report: dict) -> list[str]:
    out = []
    for name, t in report.get("topologies", {}).items():
        for seed, s in t.get("structure", {}).items():
            out += [f"{name} seed {seed}: {v}" for v in s.get("violations", [])]
    for name, by_f in report.get("churn", {}).items():
        for f, row in by_f.items():
            if row.get("violations"):
                out.append(f"{name} churn {f}: {row['violations']} structure violations")
    return out


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "generate":
            return _generate(args)
        if args.command in ("run", "churn"):
            cfg = _config(args)
            report = run_experiment(cfg) if args.command == "run" else churn_experiment(cfg)
            for p in emit_report(report, args.out):
                print(p)
            bad = _violations(report)
            for v in bad:
                print(v, file=sys.stderr)
            return EXIT_INVARIANT if bad else EXIT_OK
        if args.command == "check":
            try:
                snap = json.loads(Path(args.snapshot).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                print(f"cannot read snapshot {args.snapshot}: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            rep = check_snapshot(snap)
            print(f"max degree {rep.max_degree} (bound {snap['params']['d'] + 4}), "
                  f"{rep.as_count} ASs, {rep.layers} layers, levels {rep.levels_per_layer}")
            for v in rep.violations:
                print(v, file=sys.stderr)
            return EXIT_OK if rep.ok else EXIT_INVARIANT
        if args.command == "report":
            try:
                report = load_report(args.report)
            except (OSError, json.JSONDecodeError) as exc:
                print(f"cannot read report {args.report}: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            out = args.out or str(Path(args.report).parent)
            for p in emit_report(report, out, formats=("csv",)):
                print(p)
            return EXIT_OK
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
