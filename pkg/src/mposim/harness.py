"""Experiment driver: config parsing, topology construction, search sweeps, churn, reports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .graph import Graph, degree_histogram
from .kernel import (FileCatalog, build_catalog, make_churn, make_rng, place_nodes,
                     sample_query_files)
from .overlay import MPOParams, Overlay, bootstrap_overlay, make_peers, warmup
from .search import ALGORITHMS, batch_search
from .topologies import (SquareRootParams, SupernodeParams, gen_rtpl, gen_squareroot,
                         gen_supernode)

TOPOLOGIES = ("mpo", "rtpl", "supernode", "squareroot")
REPORT_SCHEMA = "mposim.report/1"

# calibration anchors (network size -> value); other sizes interpolate linearly
MPO_D_ANCHORS = {500: 7, 2000: 14}
RTPL_OMEGA_ANCHORS = {500: 18.0, 2000: 36.0}


class ConfigError(ValueError):
    pass


def _interp(anchors: dict, n: int) -> float:
    xs = sorted(anchors)
    if n <= xs[0]:
        x0, x1 = xs[0], xs[1]
    elif n >= xs[-1]:
        x0, x1 = xs[-2], xs[-1]
    else:
        x1 = next(x for x in xs if x >= n)
        x0 = max(x for x in xs if x < n)
    y0, y1 = anchors[x0], anchors[x1]
    return y0 + (y1 - y0) * (n - x0) / (x1 - x0)


@dataclass
class ExperimentConfig:
    topologies: list = field(default_factory=lambda: list(TOPOLOGIES))
    n: int = 500
    seeds: list = field(default_factory=lambda: list(range(1, 11)))
    ttls: list = field(default_factory=lambda: list(range(0, 7)))
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    n_queries: int = 12000
    walks: int = 4
    forward_on_hit: bool = False
    disturbance_ttl: int = 4
    churn_fractions: list = field(default_factory=list)
    churn_ttl: int = 4
    churn_queries: int = 4000
    # workload
    m: int = 300
    zipf_alpha: float = 0.726
    replicas: int = 4162
    # MPO
    d: int | None = None
    levels_per_layer: int = 4
    min_as_size: int | None = None
    mpo_warmup_exchanges: int | None = None
    # baselines
    rtpl_omega: float | None = None
    rtpl_alpha: float = 0.5
    supernode_c_min: int = 5
    supernode_c_max: int = 15
    supernode_inter_degree: int = 10
    sqrt_d_max: int | None = None
    sqrt_d_min: int = 3
    sqrt_d0: int = 4
    sqrt_warmup_queries: int = 10000
    sqrt_warmup_ttl: int = 256
    sqrt_batch: int = 100

    # resolved values for the size-dependent knobs
    @property
    def mpo_d(self) -> int:
        return self.d if self.d is not None else int(round(_interp(MPO_D_ANCHORS, self.n)))

    @property
    def mpo_min_as_size(self) -> int:
        return self.min_as_size if self.min_as_size is not None else (self.mpo_d + 3) // 2

    @property
    def omega(self) -> float:
        return self.rtpl_omega if self.rtpl_omega is not None else _interp(RTPL_OMEGA_ANCHORS, self.n)

    def validate(self) -> "ExperimentConfig":
        def bad(path, msg):
            raise ConfigError(f"config.{path}: {msg}")
        if not self.topologies:
            bad("topologies", "must name at least one topology")
        for t in self.topologies:
            if t not in TOPOLOGIES:
                bad("topologies", f"unknown topology {t!r} (choose from {', '.join(TOPOLOGIES)})")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                bad("algorithms", f"unknown algorithm {a!r}")
        if self.n < 15:
            bad("n", "must be >= 15")
        if not self.seeds:
            bad("seeds", "must be non-empty")
        for s in self.seeds:
            if not 0 <= s < 2**64:
                bad("seeds", f"seed {s} is not a 64-bit unsigned integer")
        if not self.ttls or min(self.ttls) < 0:
            bad("ttls", "must be non-empty and non-negative")
        if self.n_queries < 1:
            bad("n_queries", "must be >= 1")
        if self.walks < 1:
            bad("walks", "must be >= 1")
        for f in self.churn_fractions:
            if not 0.0 <= f <= 1.0:
                bad("churn_fractions", f"fraction {f} outside [0, 1]")
        if self.m < 1:
            bad("m", "must be >= 1")
        if self.replicas < self.m:
            bad("replicas", "must be >= m so every file has a copy")
        if self.mpo_d < 2:
            bad("d", "must be >= 2")
        if not 1 <= self.mpo_min_as_size <= self.mpo_d + 3:
            bad("min_as_size", "must lie in [1, d+3]")
        if self.levels_per_layer < 1:
            bad("levels_per_layer", "must be >= 1")
        if self.omega <= 0 or self.omega > self.n - 1:
            bad("rtpl_omega", "must lie in (0, n-1]")
        if not 2 <= self.supernode_c_min <= self.supernode_c_max:
            bad("supernode_c_min", "need 2 <= c_min <= c_max")
        if not self.sqrt_d_min <= self.sqrt_d0 <= self.sqrt_params().d_max:
            bad("sqrt_d0", "need d_min <= d0 <= d_max")
        return self

    def sqrt_params(self) -> SquareRootParams:
        base = SquareRootParams.for_size(self.n)
        return SquareRootParams(d_max=self.sqrt_d_max or base.d_max, d_min=self.sqrt_d_min,
                                d0=self.sqrt_d0, batch=self.sqrt_batch, walks=self.walks,
                                warmup_ttl=self.sqrt_warmup_ttl)

    def mpo_params(self) -> MPOParams:
        return MPOParams(d=self.mpo_d, levels_per_layer=self.levels_per_layer,
                         min_as_size=self.mpo_min_as_size)

    def resolved(self) -> dict:
        out = asdict(self)
        out.update(d=self.mpo_d, min_as_size=self.mpo_min_as_size, rtpl_omega=self.omega,
                   sqrt_d_max=self.sqrt_params().d_max,
                   mpo_warmup_exchanges=self._mpo_exchanges())
        return out

    def _mpo_exchanges(self) -> int:
        return self.mpo_warmup_exchanges if self.mpo_warmup_exchanges is not None else 10 * self.n


# ------------------------------------------------------------------ config file
_LIST_INT = {"seeds", "ttls"}
_LIST_FLOAT = {"churn_fractions"}
_LIST_STR = {"topologies", "algorithms"}
_ALIASES = {"topology": "topologies", "algorithm": "algorithms", "ttl": "ttls",
            "seed": "seeds", "N": "n"}


def parse_int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _coerce(key: str, raw: str, ftype):
    raw = raw.strip()
    if key in _LIST_INT:
        return parse_int_list(raw)
    if key in _LIST_FLOAT:
        return [float(x) for x in raw.split(",") if x.strip()]
    if key in _LIST_STR:
        return [x.strip() for x in raw.split(",") if x.strip()]
    if raw.lower() in ("auto", "none", ""):
        return None
    if "bool" in str(ftype):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if "float" in str(ftype):
        return float(raw)
    return int(raw)


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in types:
            raise ConfigError(f"config.{key}: unknown key (line {lineno})")
        try:
            values[key] = _coerce(key, val, types[key])
        except ValueError as exc:
            raise ConfigError(f"config.{key}: {exc} (line {lineno})") from None
    values.update(overrides or {})
    return ExperimentConfig(**values).validate()


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config_text(text, overrides)


# ------------------------------------------------------------------ trial pieces
def make_catalog(cfg: ExperimentConfig, seed: int) -> FileCatalog:
    return build_catalog(cfg.m, cfg.zipf_alpha, cfg.replicas, list(range(cfg.n)),
                         make_rng(seed, "catalog"))


def build_mpo(cfg: ExperimentConfig, seed: int, catalog: FileCatalog) -> Overlay:
    p = cfg.mpo_params()
    coords = place_nodes(cfg.n, make_rng(seed, "placement"), p.spread)
    ov = bootstrap_overlay(make_peers(coords, p, files=catalog.hosted_by()), p)
    warmup(ov, catalog.vectors, make_rng(seed, "warmup"), cfg._mpo_exchanges())
    return ov


def build_topology(name: str, cfg: ExperimentConfig, seed: int, catalog: FileCatalog):
    """Return (graph, overlay or None) for one topology and seed."""
    rng = make_rng(seed, f"topology:{name}")
    if name == "mpo":
        ov = build_mpo(cfg, seed, catalog)
        return ov.as_graph(), ov
    if name == "rtpl":
        return gen_rtpl(cfg.n, cfg.omega, cfg.rtpl_alpha, rng), None
    if name == "supernode":
        sp = SupernodeParams((cfg.supernode_c_min, cfg.supernode_c_max),
                             inter_degree=cfg.supernode_inter_degree)
        return gen_supernode(cfg.n, sp.c_size_range, rng, sp), None
    if name == "squareroot":
        return gen_squareroot(cfg.n, cfg.sqrt_params(), cfg.sqrt_warmup_queries, catalog, rng), None
    raise ConfigError(f"config.topologies: unknown topology {name!r}")


def workload(seed: int, live: list[int], catalog: FileCatalog, n: int, stream: str = "workload"):
    """Random live sources, Zipf-distributed files; identical across topologies."""
    rng = make_rng(seed, stream)
    live = sorted(live)
    srcs = np.asarray(live)[rng.integers(len(live), size=n)]
    return srcs, sample_query_files(catalog, rng, n)


def calibration_notes(g: Graph) -> dict:
    keep = ("kind", "omega", "alpha_pl", "rejected_stubs", "repair_edges", "clusters",
            "d_max", "d_min", "d0", "warmup_queries")
    return {k: g.notes[k] for k in keep if k in g.notes}


def _stats(values) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}


def _structure_dict(ov: Overlay) -> dict:
    r = ov.check_structure()
    return {"max_degree": r.max_degree, "as_count": r.as_count, "layers": r.layers,
            "levels_per_layer": {str(k): v for k, v in r.levels_per_layer.items()},
            "violations": list(r.violations), "d": ov.params.d,
            "degree_bound": ov.params.d + 4}


def _search_cells(g: Graph, catalog: FileCatalog, cfg: ExperimentConfig, seed: int,
                  srcs, files, algorithms, ttls) -> dict:
    out = {}
    for alg in algorithms:
        rng = make_rng(seed, f"walk:{alg}") if alg == "random_walk" else None
        ms = batch_search(g, catalog, srcs, files, ttls, alg, rng=rng, walks=cfg.walks,
                          forward_on_hit=cfg.forward_on_hit)
        out[alg] = ms
    return out


# ------------------------------------------------------------------ experiments
def empty_report() -> dict:
    return {"schema": REPORT_SCHEMA, "config": {}, "cost_definition": "messages per query",
            "topologies": {}, "churn": {}}


def run_experiment(cfg: ExperimentConfig, include_churn: bool = True) -> dict:
    """Build every topology per seed, sweep algorithms x ttl, optionally sweep churn."""
    cfg.validate()
    report = empty_report()
    report["config"] = cfg.resolved()
    ttls = sorted(set(cfg.ttls) | {cfg.disturbance_ttl})
    per_topo = {t: {"degrees": {}, "max_degree": [], "calibration": {}, "structure": {},
                    "cells": {}, "disturbance": []} for t in cfg.topologies}
    churn_raw = {t: {} for t in cfg.topologies}
    for seed in cfg.seeds:
        catalog = make_catalog(cfg, seed)
        srcs, files = workload(seed, list(range(cfg.n)), catalog, cfg.n_queries)
        for name in cfg.topologies:
            g, ov = build_topology(name, cfg, seed, catalog)
            acc = per_topo[name]
            hist = degree_histogram(g)
            acc["degrees"][str(seed)] = [[u, dg] for u, dg in hist]
            acc["max_degree"].append(hist[0][1] if hist else 0)
            acc["calibration"][str(seed)] = calibration_notes(g)
            if ov is not None:
                acc["structure"][str(seed)] = _structure_dict(ov)
            algs = sorted(set(cfg.algorithms) | {"flood_unrepeated"})
            cells = _search_cells(g, catalog, cfg, seed, srcs, files, algs, ttls)
            for alg, ms in cells.items():
                for t in ttls:
                    c = acc["cells"].setdefault(alg, {}).setdefault(str(t), {
                        "success_rate": [], "mean_messages": [], "mean_hops": []})
                    c["success_rate"].append(ms.success_rate[t])
                    c["mean_messages"].append(ms.mean_messages[t])
                    c["mean_hops"].append(ms.mean_hops[t])
            dist = cells["flood_unrepeated"].disturbance[cfg.disturbance_ttl]
            acc["disturbance"].append([dist.get(u, 0) for u in range(cfg.n)])
            if include_churn and cfg.churn_fractions:
                for f, row in _churn_points(name, g, ov, catalog, cfg, seed).items():
                    for k, v in row.items():
                        churn_raw[name].setdefault(f, {}).setdefault(k, []).append(v)
    for name, acc in per_topo.items():
        algs = {a: {t: {k: _stats(v) for k, v in c.items()} for t, c in by_t.items()}
                for a, by_t in acc["cells"].items()}
        dist = np.asarray(acc["disturbance"], dtype=float).mean(axis=0)
        report["topologies"][name] = {
            "degrees": acc["degrees"],
            "max_degree": {**_stats(acc["max_degree"]), "values": acc["max_degree"]},
            "calibration": acc["calibration"],
            "structure": acc["structure"],
            "search": algs,
            "disturbance": {"ttl": cfg.disturbance_ttl, "algorithm": "flood_unrepeated",
                            "per_node_mean": [float(x) for x in dist],
                            "max": float(dist.max()), "zeros": int((dist == 0).sum())},
        }
    report["churn"] = _churn_summary(churn_raw)
    return report


def _churn_points(name: str, g: Graph, ov: Overlay | None, catalog: FileCatalog,
                  cfg: ExperimentConfig, seed: int) -> dict:
    rows = {}
    for f in cfg.churn_fractions:
        sc = make_churn(range(cfg.n), f, "crash", make_rng(seed, f"churn:{f}"))
        gone = set(sc.leave_order)
        violations = []
        if ov is not None:
            live_ov = ov.clone()
            if gone:
                live_ov.crash(sorted(gone))
            violations = live_ov.check_structure().violations
            g2 = live_ov.as_graph()
        else:
            g2 = g.remove_nodes(gone)
        cat2 = catalog.without_hosts(gone)
        live = sorted(g2.adj)
        if not live:
            rows[f"{f:g}"] = {"success_rate": 0.0, "mean_hops": None, "mean_messages": 0.0,
                              "cost_per_success": None, "violations": len(violations)}
            continue
        srcs, files = workload(seed, live, cat2, cfg.churn_queries, stream="workload:churn")
        ms = batch_search(g2, cat2, srcs, files, [cfg.churn_ttl], "flood_unrepeated",
                          forward_on_hit=cfg.forward_on_hit)
        t = cfg.churn_ttl
        succ = ms.success_rate[t]
        rows[f"{f:g}"] = {"success_rate": succ, "mean_hops": ms.mean_hops[t],
                          "mean_messages": ms.mean_messages[t],
                          "cost_per_success": (ms.total_messages[t] / (succ * ms.n_queries)) if succ else None,
                          "violations": len(violations)}
    return rows


def _churn_summary(raw: dict) -> dict:
    out = {}
    for name, by_f in raw.items():
        if not by_f:
            continue
        out[name] = {f: {k: (_stats(v) if k != "violations" else int(sum(v))) for k, v in row.items()}
                     for f, row in by_f.items()}
    return out


def churn_experiment(cfg: ExperimentConfig) -> dict:
    """Only the churn sweep: build, crash a fraction, re-run flooding at ``churn_ttl``."""
    cfg.validate()
    if not cfg.churn_fractions:
        raise ConfigError("config.churn_fractions: churn sweep needs at least one fraction")
    report = empty_report()
    report["config"] = cfg.resolved()
    raw = {t: {} for t in cfg.topologies}
    for seed in cfg.seeds:
        catalog = make_catalog(cfg, seed)
        for name in cfg.topologies:
            g, ov = build_topology(name, cfg, seed, catalog)
            for f, row in _churn_points(name, g, ov, catalog, cfg, seed).items():
                for k, v in row.items():
                    raw[name].setdefault(f, {}).setdefault(k, []).append(v)
    report["churn"] = _churn_summary(raw)
    return report


# ------------------------------------------------------------------ output
def canonical_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1, allow_nan=False) + "\n"


CSV_HEADERS = {
    "fig4_degrees.csv": ["topology", "seed", "rank", "node", "degree"],
    "fig5_success.csv": ["topology", "algorithm", "ttl", "success_rate_mean", "success_rate_std", "n_seeds"],
    "fig6_success_by_topology.csv": ["topology", "ttl", "success_rate_mean", "success_rate_std"],
    "fig7_cost.csv": ["topology", "algorithm", "ttl", "mean_messages_mean", "mean_messages_std",
                      "mean_hops_mean"],
    "fig8_disturbance.csv": ["topology", "node", "disturbance_mean"],
    "fig9_churn.csv": ["topology", "fraction", "success_rate_mean", "success_rate_std",
                       "mean_hops_mean", "mean_messages_mean", "cost_per_success_mean",
                       "structure_violations"],
}


def _csv_rows(report: dict) -> dict:
    rows = {k: [] for k in CSV_HEADERS}
    for name in sorted(report.get("topologies", {})):
        t = report["topologies"][name]
        for seed in sorted(t.get("degrees", {}), key=int):
            for rank, (u, dg) in enumerate(t["degrees"][seed], 1):
                rows["fig4_degrees.csv"].append([name, seed, rank, u, dg])
        for alg in sorted(t.get("search", {})):
            for ttl in sorted(t["search"][alg], key=int):
                c = t["search"][alg][ttl]
                sr, mm, mh = c["success_rate"], c["mean_messages"], c["mean_hops"]
                rows["fig5_success.csv"].append([name, alg, ttl, sr["mean"], sr["std"], sr["n"]])
                rows["fig7_cost.csv"].append([name, alg, ttl, mm["mean"], mm["std"], mh["mean"]])
                if alg == "flood_unrepeated":
                    rows["fig6_success_by_topology.csv"].append([name, ttl, sr["mean"], sr["std"]])
        for u, v in enumerate(t.get("disturbance", {}).get("per_node_mean", [])):
            rows["fig8_disturbance.csv"].append([name, u, v])
    for name in sorted(report.get("churn", {})):
        for f in sorted(report["churn"][name], key=float):
            c = report["churn"][name][f]
            rows["fig9_churn.csv"].append([name, f, c["success_rate"]["mean"], c["success_rate"]["std"],
                                           c["mean_hops"]["mean"], c["mean_messages"]["mean"],
                                           c["cost_per_success"]["mean"], c["violations"]])
    return rows


def emit_report(report: dict, out_dir, formats=("json", "csv")) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(canonical_json(report), encoding="utf-8")
        written.append(p)
    if "csv" in formats:
        for fname, rows in _csv_rows(report).items():
            p = out / fname
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_HEADERS[fname])
                w.writerows(["" if v is None else v for v in r] for r in rows)
            written.append(p)
    return written


def load_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
