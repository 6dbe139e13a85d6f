"""Run the three calibration scenarios and print the ratio tables.

    python3 scripts/calibrate.py [--out runs/calibration] [--jobs 3]
"""

import argparse
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from edgemoe.cli import compare_reports
from edgemoe.config import load_scenario
from edgemoe.sim import simulate

ROOT = Path(__file__).resolve().parent.parent
NAMES = ("lan_single_server", "lan_two_servers", "lan_three_servers")


def run(name: str, out: Path) -> tuple[str, dict, float]:
    t0 = time.perf_counter()
    report = simulate(load_scenario(ROOT / "scenarios" / f"{name}.json"))
    elapsed = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(report.to_json() + "\n")
    return name, report.data, elapsed


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/calibration")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    out = Path(args.out)
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        results = {n: (d, t) for n, d, t in pool.map(run, NAMES, [out] * len(NAMES))}
    for name, (_, t) in results.items():
        print(f"{name}: {t:.1f} s")
    a, b, c = (results[n][0] for n in NAMES)

    print("\ninput 128: two-server vs single-server")
    print(f"{'output':>7} {'lat B/A':>8} {'tput A/B':>9} {'tput A':>8} {'tput B':>8}")
    for r in compare_reports(a, b, inputs={128}):
        print(f"{r['output_len']:>7} {r['latency_ratio']:>8.3f} {r['throughput_ratio']:>9.3f} "
              f"{r['throughput_a']:>8.1f} {r['throughput_b']:>8.1f}")

    print("\noutput 128: two-server vs three-server")
    print(f"{'input':>7} {'lat B/C':>8}")
    for r in compare_reports(c, b, outputs={128}):
        print(f"{r['input_len']:>7} {r['latency_ratio']:>8.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
