#!/usr/bin/env python3
"""Per-query latency of the B-spline, KNN and quadratic terrain models on one flight's lattice."""

import argparse

from terrafollow.bench import generate_inputs, query_latency, run_single, scenario_preset
from terrafollow.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--scenario", default="slope")
    ap.add_argument("--altitude", type=float, default=5.0)
    ap.add_argument("-n", type=int, default=100_000)
    args = ap.parse_args()
    cfg = load_config(args.config)
    inp = generate_inputs([scenario_preset(args.scenario, args.altitude)])[0]
    surface = run_single(inp, cfg, ("proposed",)).pipeline.surface
    for name, sec in query_latency(surface, cfg, args.n).items():
        print(f"{name:5s} {1e3 * sec:.5f} ms/query")


if __name__ == "__main__":
    main()
