"""Hit rate and stall time of the expert cache over GPU budgets and prefetch depths."""

import argparse

import numpy as np

from edgemoe.model import MoEModelSpec, WorkloadParams, estimate_coactivation, generate_trace
from edgemoe.paging import replay_paging


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--requests", type=int, default=40)
    args = ap.parse_args()
    spec = MoEModelSpec(num_layers=8, experts_per_layer=16, expert_param_bytes=4_000_000,
                        shared_param_bytes=0, top_k=2, hidden_dim=512)
    wl = WorkloadParams(num_requests=args.requests, input_len_range=(16, 64), output_len_range=(16, 64), zipf_s=1.2)
    trace = generate_trace(spec, wl, args.seed)
    coact = estimate_coactivation(trace, spec)
    total = spec.num_experts * spec.expert_param_bytes
    print(f"{'budget_MB':>10} {'depth':>5} {'hit_rate':>9} {'mean_stall_us':>14}")
    for frac in np.linspace(0.2, 1.0, 5):
        for depth in (0, 1, 2):
            r = replay_paging(trace, spec, coact, gpu_budget_bytes=frac * total, bandwidth=16e9,
                              layer_compute_s=2e-4, depth=depth)
            print(f"{frac * total / 1e6:>10.0f} {depth:>5} {r.stats['hit_rate']:>9.4f} {r.stats['mean_stall_s'] * 1e6:>14.2f}")


if __name__ == "__main__":
    main()
