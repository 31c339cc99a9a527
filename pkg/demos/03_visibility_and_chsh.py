#!/usr/bin/env python3
"""Entanglement visibility, Bell-test statistic, and key rate (fiber arm).

Sweeps the receiving analyzer to trace the coincidence fringe, fits the
visibility, then runs the passive-basis Bell measurement at the standard
analyzer set (one run gives all four settings at once) and derives the bit
error rate and the secret key rate with a 0.56 extraction factor.
"""
import argparse
import csv
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from entnet.presets import preset_scenario
from entnet.runner import run_stages


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demos/out")
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    scan = run_stages(preset_scenario("cb_fiber_scan"), out / "scan", seed=args.seed)
    vis = scan.stages[-1].metrics["visibility"]
    print(f"fitted visibility: {vis:.4f}")

    # fringe plot from the exported scan
    curves = defaultdict(lambda: defaultdict(int))
    with open(out / "scan" / "scan.csv") as fh:
        for row in csv.DictReader(fh):
            delta = float(row["angle_a_deg"]) - float(row["angle_b_deg"])
            curves[row["combo"]][delta] += int(row["counts"])
    fig, ax = plt.subplots(figsize=(6, 4))
    for combo in ("HH", "VV", "HV", "VH"):
        pts = sorted(curves[combo].items())
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", ms=4, label=combo)
    ax.set_xlabel("analyzer angle difference (deg)")
    ax.set_ylabel("coincidences per point")
    ax.legend(ncol=2)
    ax.set_title(f"fringe visibility {vis:.3f}")
    fig.tight_layout()
    fig.savefig(out / "visibility_fringe.png", dpi=120)

    chsh = run_stages(preset_scenario("cb_fiber_chsh"), out / "chsh", seed=args.seed)
    m = chsh.stages[-1].metrics
    print(f"S               : {m['S']:.4f}  (classical bound 2, ideal 2*sqrt(2)*V "
          f"= {2 * math.sqrt(2) * 0.943:.4f})")
    print(f"QBER H/V, D/A   : {m['qber_hv']*100:.2f}%, {m['qber_da']*100:.2f}%")
    print(f"key-carrying combination rates: "
          f"{ {k: round(v, 1) for k, v in m['per_combo_rates_hz'].items()} }")
    print(f"secret key rate : {m['skr_bits_per_s']:.1f} bits/s "
          f"(extraction factor {m['extraction_eff']})")
    print(f"wrote {out/'visibility_fringe.png'}")


if __name__ == "__main__":
    main()
