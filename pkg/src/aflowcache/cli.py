"""Command-line front end: generate, analyze, simulate, classify, bench.

Every JSON report carries a ``manifest`` block (subcommand, fully resolved
configuration, seeds, input digests, tool version).  CSV outputs carry the
same manifest as a leading ``#`` comment line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .cache import ALL_POLICIES, Policy, run_policy_comparison, simulate
from .classifier import (DEFAULT_NONCACHEABLE, AdapterConfig, ClassifierConfig, load_port_table,
                         load_signatures, make_engine, run_classification)
from .errors import AflowError, EmptyInput, InvalidConfig
from .flow import DEFAULT_WELL_KNOWN_PORTS
from .locality import DEFAULT_MIN_COUNT, scramble_compare
from .msfilter import FilterConfig
from .traceio import SyntheticConfig, connection_references, generate_synthetic, load_trace, save_trace

log = logging.getLogger("aflowcache")

DEFAULT_CAPACITIES = "5%,10%,15%,40%,100%"
SATURATION_LEVEL = 0.95


class ArgumentParser(argparse.ArgumentParser):
    """Reports usage problems as ``InvalidConfig`` so they share the error path."""

    def error(self, message):
        raise InvalidConfig(message)


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    tool: str = "aflowcache"
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, float):
        return None if math.isnan(obj) or math.isinf(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_jsonable(v) for v in obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), (str, int)):
        return obj.value
    return obj


def dump_json(payload: dict) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_text(path: str | os.PathLike, text: str) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(args, text: str, path: str | None = None) -> None:
    path = path or args.out
    if path:
        write_text(path, text)
    elif not args.quiet:
        sys.stdout.write(text)


def csv_text(rows: Sequence[dict], columns: Sequence[str], manifest: RunManifest) -> str:
    buf = io.StringIO()
    buf.write("# manifest: " + json.dumps(_jsonable(manifest.to_dict()), sort_keys=True) + "\n")
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _load(args) -> tuple[list, dict]:
    records, stats = load_trace(args.trace, args.format)
    if not records:
        raise EmptyInput(f"{args.trace}: no TCP/UDP packets")
    if stats.skipped:
        log.info("skipped packets: %s", dict(stats.skipped))
    return records, {str(args.trace): sha256_file(args.trace)}


def _filter_config(args) -> FilterConfig:
    return FilterConfig(d=args.filter_stages, b=args.filter_counters, T=args.filter_threshold,
                        reset_period=args.filter_reset, seed=args.seed)


def _capacity(args, default: str = "100%"):
    if args.cache_size is not None and args.cache_frac is not None:
        raise InvalidConfig("give --cache-size or --cache-frac, not both")
    if args.cache_size is not None:
        return args.cache_size
    if args.cache_frac is not None:
        frac = args.cache_frac.strip()
        if frac.endswith("%"):
            return frac
        try:
            return float(frac)
        except ValueError:
            raise InvalidConfig(f"bad --cache-frac {args.cache_frac!r}") from None
    return default


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# generate ------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = args.output or args.out
    if not out:
        raise InvalidConfig("generate needs an output path (-o)")
    cfg = SyntheticConfig(
        n_flows=args.flows, alpha=args.alpha, n_connections=args.connections,
        packets_per_connection=args.packets_per_connection, correlation_p=args.correlation,
        window=args.window, seed=args.seed, payload=not args.no_payload,
    )
    records = generate_synthetic(cfg)
    fmt = args.format or ("pcap" if str(out).endswith((".pcap", ".cap")) else "csv")
    n = save_trace(records, out, fmt)
    config = asdict(cfg)
    config["format"] = fmt
    manifest = RunManifest("generate", config, {"seed": args.seed})
    summary = {"manifest": manifest.to_dict(), "path": str(out), "packets": n,
               "connections": cfg.n_connections, "sha256": sha256_file(out)}
    write_text(f"{out}.manifest.json", dump_json(summary))
    if not args.quiet:
        sys.stdout.write(dump_json(summary))
    return 0


# analyze -------------------------------------------------------------------

def cmd_analyze(args) -> int:
    records, digests = _load(args)
    keys = connection_references(records, per_packet=args.per_packet)
    seed = args.seed if args.scramble_seed is None else args.scramble_seed
    report = scramble_compare(keys, seed=seed, min_count=args.min_count)
    config = {"trace": str(args.trace), "format": args.format, "per_packet": args.per_packet,
              "min_count": args.min_count}
    manifest = RunManifest("analyze", config, {"scramble": seed}, digests)
    if args.rank_csv:
        rows = [{"rank": i, "count": c} for i, c in enumerate(report.rank_counts, 1)]
        write_text(args.rank_csv, csv_text(rows, ("rank", "count"), manifest))
    if args.distance_csv:
        h, hs = report.distance_histogram, report.distance_histogram_scrambled
        rows = [{"distance": d, "probability": h.get(d, 0.0), "probability_scrambled": hs.get(d, 0.0)}
                for d in sorted(set(h) | set(hs))]
        write_text(args.distance_csv,
                   csv_text(rows, ("distance", "probability", "probability_scrambled"), manifest))
    emit(args, dump_json({"manifest": manifest.to_dict(), **report.to_dict()}))
    return 0


# simulate ------------------------------------------------------------------

def saturation_capacity(keys, policy: Policy, filter_config: FilterConfig, n_distinct: int,
                        level: float = SATURATION_LEVEL) -> dict:
    """Smallest capacity whose hit ratio reaches ``level`` of the full-size one (bisection)."""
    full = simulate(keys, n_distinct, policy, filter_config).hit_ratio
    target = level * full
    lo, hi = 1, n_distinct
    while lo < hi:
        mid = (lo + hi) // 2
        if simulate(keys, mid, policy, filter_config).hit_ratio >= target:
            hi = mid
        else:
            lo = mid + 1
    return {"asymptotic_hit_ratio": full, "level": level, "capacity": lo,
            "fraction": lo / n_distinct if n_distinct else 0.0}


def cmd_simulate(args) -> int:
    records, digests = _load(args)
    keys = connection_references(records, per_packet=args.per_packet)
    policies = [Policy.parse(p) for p in _split(args.policies)]
    capacities = _split(args.capacities)
    fcfg = _filter_config(args)
    results = run_policy_comparison(keys, capacities, policies, fcfg)
    n_distinct = len(set(keys))
    config = {"trace": str(args.trace), "format": args.format, "per_packet": args.per_packet,
              "policies": [p.value for p in policies], "capacities": capacities,
              "filter": asdict(fcfg)}
    manifest = RunManifest("simulate", config, {"filter": args.seed}, digests)
    columns = ("policy", "capacity", "capacity_spec", "lookups", "hits", "hit_ratio", "evictions")
    rows = [r.row() for r in results]
    summary = {"manifest": manifest.to_dict(), "n_references": len(keys), "n_distinct": n_distinct,
               "results": rows}
    if Policy.MS_HYBRID in policies:
        summary["ms_hybrid_saturation"] = saturation_capacity(keys, Policy.MS_HYBRID, fcfg, n_distinct)
    if args.out:
        emit(args, csv_text(rows, columns, manifest))
        write_text(args.summary or f"{args.out}.json", dump_json(summary))
    else:
        if args.summary:
            write_text(args.summary, dump_json(summary))
        emit(args, csv_text(rows, columns, manifest) if args.csv else dump_json(summary))
    return 0


# classify ------------------------------------------------------------------

def _engine(args, name: str | None = None):
    name = name or args.engine
    sigs = table = None
    if args.signatures:
        with open(args.signatures) as fh:
            sigs = load_signatures(fh)
    if args.port_table:
        with open(args.port_table) as fh:
            table = load_port_table(fh)
    kwargs = {}
    if name.startswith(("sig", "dpi")):
        kwargs = {"max_packets": args.max_packets, "scan_bytes": args.scan_bytes}
    return make_engine(name, signatures=sigs, port_table=table, **kwargs)


def _classifier_config(args, policy: Policy | None = None, use_cache: bool | None = None):
    noncacheable = DEFAULT_NONCACHEABLE
    if args.noncacheable is not None:
        noncacheable = frozenset(_split(args.noncacheable))
    return ClassifierConfig(
        capacity=_capacity(args),
        policy=policy or Policy.parse(args.policy),
        filter=_filter_config(args),
        adapter=AdapterConfig(sample_prob=args.sample_prob, noncacheable_labels=noncacheable,
                              conflict_blacklist_threshold=args.blacklist_threshold,
                              rng_seed=args.seed),
        use_cache=not args.no_cache if use_cache is None else use_cache,
        idle_timeout=args.idle_timeout,
        well_known_ports=DEFAULT_WELL_KNOWN_PORTS,
    )


def _config_dict(cfg: ClassifierConfig) -> dict:
    d = asdict(cfg)
    d["well_known_ports"] = sorted(cfg.well_known_ports)
    return d


def _input_digests(args, digests: dict) -> dict:
    for extra in (args.signatures, args.port_table):
        if extra:
            digests[str(extra)] = sha256_file(extra)
    return digests


def cmd_classify(args) -> int:
    records, digests = _load(args)
    engine = _engine(args)
    cfg = _classifier_config(args)
    report = run_classification(records, engine, cfg, baseline=not args.no_baseline,
                                workers=args.workers, record_connections=bool(args.connections_csv))
    config = {"trace": str(args.trace), "format": args.format, "engine": engine.name,
              "workers": args.workers, "classifier": _config_dict(cfg)}
    manifest = RunManifest("classify", config, {"filter": args.seed, "sampling": args.seed},
                           _input_digests(args, digests))
    if args.connections_csv:
        rows = [asdict(c) for c in report.connections]
        write_text(args.connections_csv,
                   csv_text(rows, ("tuple", "key", "label", "source", "packets"), manifest))
    emit(args, dump_json({"manifest": manifest.to_dict(), **report.to_dict()}))
    return 0


# bench ---------------------------------------------------------------------

def cmd_bench(args) -> int:
    records, digests = _load(args)
    has_payload = any(r.payload is not None for r in records)
    engines = _split(args.engines) if args.engines else (
        ["oracle", "ports", "signature"] if has_payload else ["oracle", "ports"])
    if any(r.truth_label is None for r in records) and "oracle" in engines and not args.engines:
        engines.remove("oracle")
    policies = [Policy.parse(p) for p in _split(args.policies)]
    runs = []
    for name in engines:
        base_cfg = _classifier_config(args, policies[0], use_cache=False)
        t0 = time.perf_counter()
        base = run_classification(records, _engine(args, name), base_cfg, baseline=False,
                                  workers=args.workers)
        base_s = time.perf_counter() - t0
        runs.append({"engine": name, "policy": "no-cache", "seconds": base_s,
                     "packets_per_second": len(records) / base_s if base_s else None,
                     "engine_work_units": base.engine_work_units, "speedup_estimate": 1.0,
                     "workload_reduction": base.workload_reduction})
        for policy in policies:
            cfg = _classifier_config(args, policy, use_cache=True)
            t0 = time.perf_counter()
            rep = run_classification(records, _engine(args, name), cfg, baseline=False,
                                     workers=args.workers)
            secs = time.perf_counter() - t0
            rep.baseline_work_units = base.engine_work_units
            runs.append({"engine": name, "policy": policy.value, "seconds": secs,
                         "packets_per_second": len(records) / secs if secs else None,
                         "engine_work_units": rep.engine_work_units,
                         "classifier_work_units": rep.classifier_work_units,
                         "speedup_estimate": rep.speedup_estimate,
                         "workload_reduction": rep.workload_reduction,
                         "counters": {k: v for k, v in rep.to_dict().items()
                                      if isinstance(v, int) and not isinstance(v, bool)}})
    config = {"trace": str(args.trace), "format": args.format, "engines": engines,
              "policies": [p.value for p in policies], "workers": args.workers,
              "classifier": _config_dict(_classifier_config(args, policies[0]))}
    manifest = RunManifest("bench", config, {"filter": args.seed, "sampling": args.seed},
                           _input_digests(args, digests))
    emit(args, dump_json({"manifest": manifest.to_dict(), "packets": len(records), "runs": runs}))
    return 0


# parser --------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="seed for generation, filter hashing and sampling")
    p.add_argument("--format", choices=("csv", "pcap"), default=d(None), help="trace format (default: by extension)")
    p.add_argument("--out", default=d(None), help="write the report here instead of stdout")
    p.add_argument("--quiet", action="store_true", default=d(False), help="no stdout output, warnings only")


def _filter_flags(p):
    g = p.add_argument_group("multistage filter")
    g.add_argument("--filter-stages", type=int, default=4)
    g.add_argument("--filter-counters", type=int, default=4096)
    g.add_argument("--filter-threshold", type=int, default=2)
    g.add_argument("--filter-reset", type=int, default=1_000_000, help="observations between resets (0 = never)")


def _classifier_flags(p):
    p.add_argument("--trace", required=True)
    p.add_argument("--policy", default="ms-hybrid", help="ms-hybrid, lru, lfu or optimal-lfu")
    p.add_argument("--cache-size", type=int, help="cache capacity in entries")
    p.add_argument("--cache-frac", help="capacity relative to distinct aggregate-flows, e.g. 0.15 or 15%%")
    p.add_argument("--sample-prob", type=float, default=0.0, help="revalidation probability per cache hit")
    p.add_argument("--noncacheable", help="comma-separated labels never cached")
    p.add_argument("--blacklist-threshold", type=int, default=3)
    p.add_argument("--idle-timeout", type=float, default=60.0)
    p.add_argument("--signatures", help="label<TAB>pattern file for the signature engine")
    p.add_argument("--port-table", help="proto,port,label,cacheable file for the port engine")
    p.add_argument("--max-packets", type=int, default=10)
    p.add_argument("--scan-bytes", type=int, default=256)
    p.add_argument("--workers", type=int, default=1, help="shard connections over N workers")
    _filter_flags(p)


def build_parser() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    parser = ArgumentParser(prog="aflowcache", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"aflowcache {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic trace")
    p.add_argument("-o", "--output", help="trace path (csv or pcap)")
    p.add_argument("--flows", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--connections", type=int, default=10_000)
    p.add_argument("--packets-per-connection", type=float, default=10.0)
    p.add_argument("--correlation", type=float, default=0.0, help="probability of reusing a recent flow")
    p.add_argument("--window", type=int, default=256)
    p.add_argument("--no-payload", action="store_true", help="header-only trace")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", parents=[common], help="locality analysis of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--min-count", type=int, default=DEFAULT_MIN_COUNT)
    p.add_argument("--per-packet", action="store_true", help="one reference per packet, not per connection")
    p.add_argument("--scramble-seed", type=int, help="permutation seed (default: --seed)")
    p.add_argument("--rank-csv", help="write rank,count here")
    p.add_argument("--distance-csv", help="write distance,probability,probability_scrambled here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", parents=[common], help="compare cache policies on a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--policies", default=",".join(pol.value for pol in ALL_POLICIES))
    p.add_argument("--capacities", default=DEFAULT_CAPACITIES)
    p.add_argument("--per-packet", action="store_true")
    p.add_argument("--summary", help="JSON summary path (default: <out>.json)")
    p.add_argument("--csv", action="store_true", help="print the CSV matrix instead of the JSON summary")
    _filter_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("classify", parents=[common], help="run the classification pipeline")
    _classifier_flags(p)
    p.add_argument("--engine", default="oracle", help="oracle, ports or signature")
    p.add_argument("--no-cache", action="store_true", help="send every connection to the engine")
    p.add_argument("--no-baseline", action="store_true", help="skip the no-cache reference run")
    p.add_argument("--connections-csv", help="per-connection CSV output path")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("bench", parents=[common], help="throughput and cost-model speedup")
    _classifier_flags(p)
    p.add_argument("--engines", help="comma-separated engines (default: all the trace supports)")
    p.add_argument("--policies", default="ms-hybrid")
    p.set_defaults(func=cmd_bench, no_cache=False)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(levelname)s: %(message)s", stream=sys.stderr)
        if getattr(args, "workers", 1) < 1:
            raise InvalidConfig("--workers must be >= 1")
        return args.func(args)
    except AflowError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: FileNotFoundError: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - last-resort mapping
        print(f"error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
