#!/usr/bin/env python3
"""Benchmark every method on the 4 x 3 standard suite; writes CSV and prints the table."""

import argparse
import time

from terrafollow.bench import generate_inputs, run_benchmark, standard_suite
from terrafollow.config import load_config
from terrafollow.kvfile import atomic_write_text


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="bench_standard.csv")
    args = ap.parse_args()
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    inputs = generate_inputs(standard_suite(args.seed))
    report = run_benchmark(inputs, config=cfg)
    atomic_write_text(args.out, report.csv_text())
    print(report.table_text())
    print(f"wrote {args.out} in {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
