#!/usr/bin/env python3
"""Closed-loop terrain following on the slope scenario; writes the per-frame trace."""

import argparse

from terrafollow.bench import follow_terrain, scenario_preset
from terrafollow.config import load_config
from terrafollow.kvfile import atomic_write_text


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--scenario", default="slope")
    ap.add_argument("--h-ref", type=float, default=3.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="follow.txt")
    args = ap.parse_args()
    cfg = load_config(args.config)
    res = follow_terrain(scenario_preset(args.scenario, args.h_ref, args.seed), cfg, args.h_ref)
    lines = ["# t x y z_uav z_true z_cmd error"]
    for row in zip(res.times, res.xy[:, 0], res.xy[:, 1], res.z_uav, res.z_true, res.z_cmd, res.errors):
        lines.append(" ".join(f"{float(v)!r}" for v in row))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"mean error {res.mean_error:+.4f} m, RMSE {res.rmse:.4f} m over {len(res.errors)} frames")


if __name__ == "__main__":
    main()
