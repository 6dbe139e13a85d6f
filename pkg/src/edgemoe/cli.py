"""Command line entry point: ``edgemoe {trace,plan,run,compare,report}``.

Exit codes: 0 success, 2 invalid input, 3 infeasible deployment,
4 a ratio outside a requested band.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import Scenario, load_scenario
from .errors import ComparisonError, ConfigError, EdgeMoEError, InfeasibleError, StructuralError
from .model import RoutingTrace, estimate_coactivation, generate_trace
from .planner import Deployment, deployment_for_scenario

log = logging.getLogger("edgemoe")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_BAND = 0, 2, 3, 4


class OutputExists(EdgeMoEError):
    pass


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path("runs") / default
    if out.exists() and any(out.iterdir()) and not args.force:
        raise OutputExists(f"{out} exists and is not empty (use --force to overwrite)")
    return out


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    p = out / name
    p.write_text(text)
    return p


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _load(path: str, seed: int | None) -> Scenario:
    scenario = load_scenario(path)
    if seed is not None:
        scenario.seed = seed
    scenario.validate()
    return scenario


def _trace_for(scenario: Scenario, trace_path: str | None) -> RoutingTrace:
    if trace_path:
        trace = RoutingTrace.from_bytes(Path(trace_path).read_bytes())
        trace.validate(scenario.model)
        return trace
    return generate_trace(scenario.model, scenario.workload, scenario.seed)


def _plan(scenario: Scenario, trace: RoutingTrace, base_dir) -> Deployment:
    coact = estimate_coactivation(trace, scenario.model)
    return deployment_for_scenario(scenario, coact, base_dir=base_dir)


def _plan_files(out: Path, dep: Deployment) -> None:
    _write(out, "placement.json", _dump(dep.placement.to_json()))
    _write(out, "quant.json", _dump(dep.quant.to_json()))
    _write(out, "plan.json", _dump({"objective": dep.objective.as_dict(), "capacity_mode": dep.capacity_mode,
                                    "capacities": {str(k): v for k, v in sorted(dep.capacities.items())}}))


# --- commands ---------------------------------------------------------------


def cmd_trace(args) -> int:
    scenario = _load(args.scenario, args.seed)
    if args.dry_run:
        print(f"{args.scenario}: valid")
        return EXIT_OK
    out = _out_dir(args, scenario.name)
    trace = generate_trace(scenario.model, scenario.workload, scenario.seed)
    p = _write(out, "trace.json", trace.to_bytes().decode())
    print(f"wrote {p}: {len(trace.requests)} requests, {trace.num_tokens} tokens")
    return EXIT_OK


def cmd_plan(args) -> int:
    scenario = _load(args.scenario, args.seed)
    trace = _trace_for(scenario, args.trace)
    dep = _plan(scenario, trace, Path(args.scenario).parent)
    obj = dep.objective
    print(f"capacity mode {dep.capacity_mode}; expected latency {obj.expected_latency_s:.6g} s; "
          f"expected crossings {obj.expected_cross_transitions:.6g}; objective {obj.value:.6g}")
    if args.dry_run:
        return EXIT_OK
    out = _out_dir(args, scenario.name)
    _plan_files(out, dep)
    print(f"wrote {out}/placement.json, quant.json, plan.json")
    return EXIT_OK


def _run_one(path: str, seed: int | None, out: str, trace_path: str | None, dry_run: bool) -> str:
    from .sim import Simulator

    scenario = _load(path, seed)
    trace = _trace_for(scenario, trace_path)
    base = Path(path).parent
    dep = _plan(scenario, trace, base)
    out_p = Path(out)
    _plan_files(out_p, dep)
    if dry_run:
        return f"{scenario.name}: planned ({dep.capacity_mode}), simulation skipped"
    report = Simulator(scenario, trace=trace, deployment=dep, base_dir=base).run()
    _write(out_p, "report.json", report.to_json() + "\n")
    _write(out_p, "requests.csv", report.requests_csv())
    _write(out_p, "throughput.csv", report.throughput_csv())
    if scenario.report.record_events:
        _write(out_p, "events.jsonl", report.events_jsonl())
    s = report.data["summary"]
    return (f"{scenario.name}: {s['requests']} requests, avg latency {s['avg_latency_s']:.4f} s, "
            f"throughput {s['avg_generation_throughput']:.2f} tok/s -> {out_p}")


def cmd_run(args) -> int:
    if len(args.scenario) > 1 and args.trace:
        raise ConfigError("--trace applies to a single scenario", "--trace")
    jobs = []
    for path in args.scenario:
        scenario = _load(path, args.seed)
        out = _out_dir(args, scenario.name)
        if len(args.scenario) > 1:
            out = out / scenario.name
            if out.exists() and any(out.iterdir()) and not args.force:
                raise OutputExists(f"{out} exists and is not empty (use --force to overwrite)")
        jobs.append((path, args.seed, str(out), args.trace, args.dry_run))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            lines = list(pool.map(_run_one, *zip(*jobs)))
    else:
        lines = [_run_one(*j) for j in jobs]
    for line in lines:
        print(line)
    return EXIT_OK


def _read_report(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report: {exc}", path) from None
    if "buckets" not in data:
        raise ConfigError("not a simulation report", path)
    return data


def compare_reports(a: dict, b: dict, inputs=None, outputs=None) -> list[dict]:
    """Per-bucket ratios: latency B/A and throughput A/B."""

    def keyed(rep):
        return {(x["input_len"], x["output_len"]): x for x in rep["buckets"]}

    ka, kb = keyed(a), keyed(b)
    if set(ka) != set(kb):
        missing = sorted(set(ka) ^ set(kb))
        raise ComparisonError(f"bucket sets differ: {missing}")
    rows = []
    for key in sorted(ka):
        if inputs and key[0] not in inputs or outputs and key[1] not in outputs:
            continue
        x, y = ka[key], kb[key]
        rows.append({
            "input_len": key[0],
            "output_len": key[1],
            "latency_a_s": x["avg_latency_s"],
            "latency_b_s": y["avg_latency_s"],
            "latency_ratio": y["avg_latency_s"] / x["avg_latency_s"],
            "throughput_a": x["avg_generation_throughput"],
            "throughput_b": y["avg_generation_throughput"],
            "throughput_ratio": x["avg_generation_throughput"] / y["avg_generation_throughput"],
        })
    if not rows:
        raise ComparisonError("no buckets left after filtering")
    return rows


def _in_band(value: float, band) -> bool:
    return band is None or band[0] <= value <= band[1]


def cmd_compare(args) -> int:
    rows = compare_reports(_read_report(args.report_a), _read_report(args.report_b),
                           set(args.input_len or ()), set(args.output_len or ()))
    buf = io.StringIO()
    fields = list(rows[0]) + ["in_band"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    ok = True
    for r in rows:
        good = _in_band(r["latency_ratio"], args.latency_band) and _in_band(r["throughput_ratio"], args.throughput_band)
        ok &= good
        w.writerow({**{k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()}, "in_band": int(good)})
    text = buf.getvalue()
    if args.out:
        if Path(args.out).exists() and not args.force:
            raise OutputExists(f"{args.out} exists (use --force to overwrite)")
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if not ok:
        print("ratio outside band", file=sys.stderr)
        return EXIT_BAND
    return EXIT_OK


def cmd_report(args) -> int:
    data = _read_report(args.report)
    s = data["summary"]
    print(f"{data.get('scenario', '?')} seed={data.get('seed')}: {s['requests']} requests, "
          f"avg latency {s['avg_latency_s']:.4f} s, throughput {s['avg_generation_throughput']:.2f} tok/s")
    comp = data.get("latency_components_s", {})
    if comp:
        print("  " + ", ".join(f"{k} {v:.3f} s" for k, v in sorted(comp.items())))
    print(f"  {'input':>6} {'output':>6} {'n':>4} {'latency_s':>10} {'p95_s':>10} {'tok/s':>8}")
    for b in data["buckets"]:
        print(f"  {b['input_len']:>6} {b['output_len']:>6} {b['requests']:>4} {b['avg_latency_s']:>10.4f} "
              f"{b['p95_latency_s']:>10.4f} {b['avg_generation_throughput']:>8.2f}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("--out", default=None, help="output directory (compare: CSV file)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--dry-run", action="store_true", help="validate (and plan) without writing traces or simulating")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes for several scenarios")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="edgemoe", description="MoE edge placement planner and simulator")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("trace", parents=[common], help="generate a routing trace")
    t.add_argument("scenario")
    t.set_defaults(func=cmd_trace)

    pl = sub.add_parser("plan", parents=[common], help="plan placement and bit-widths")
    pl.add_argument("scenario")
    pl.add_argument("--trace", default=None, help="use this trace instead of generating one")
    pl.set_defaults(func=cmd_plan)

    r = sub.add_parser("run", parents=[common], help="plan and simulate")
    r.add_argument("scenario", nargs="+")
    r.add_argument("--trace", default=None)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", parents=[common], help="per-bucket ratios of two reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--latency-band", nargs=2, type=float, metavar=("LO", "HI"))
    c.add_argument("--throughput-band", nargs=2, type=float, metavar=("LO", "HI"))
    c.add_argument("--input-len", type=int, action="append", help="only these input lengths")
    c.add_argument("--output-len", type=int, action="append", help="only these output lengths")
    c.set_defaults(func=cmd_compare)

    rp = sub.add_parser("report", parents=[common], help="print a report summary")
    rp.add_argument("report")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, StructuralError, ComparisonError, OutputExists, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
