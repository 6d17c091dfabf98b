#!/usr/bin/env python3
"""Ablation (baseline, +TI, +TI+PSI, full) over the standard suite."""

import argparse

from terrafollow.bench import generate_inputs, run_ablation, standard_suite
from terrafollow.config import load_config
from terrafollow.kvfile import atomic_write_text


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()
    cfg = load_config(args.config)
    report = run_ablation(generate_inputs(standard_suite(args.seed)), cfg)
    atomic_write_text(args.out, "\n".join(cfg.comment_lines()) + "\n" + report.text())
    print(report.text())


if __name__ == "__main__":
    main()
