"""Backbone MACs of window, hybrid and global stage 3 for UniFormer-S at detection resolution."""

import argparse
from dataclasses import replace

from uniformer_kit.analyzer import count_macs
from uniformer_kit.config import build_hybrid_stage3, preset


def variants(window=(14, 14)):
    base = preset("S")
    s3 = base.stages[2]
    yield "W-14", replace(base, stages=base.stages[:2] + (replace(s3, stage_type="W", window=window),) + base.stages[3:])
    yield "H-14", replace(base, stages=base.stages[:2] + (build_hybrid_stage3(s3, window),) + base.stages[3:])
    yield "G", base


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--height", type=int, default=800)
    p.add_argument("--width", type=int, default=1280)
    args = p.parse_args()
    totals = {}
    for name, cfg in variants():
        totals[name] = count_macs(cfg, (3, 1, args.height, args.width)).total_macs
        print(f"{name:>5} {totals[name] / 1e9:8.1f}G")
    print(f"G - W = {(totals['G'] - totals['W-14']) / 1e9:.1f}G, G - H = {(totals['G'] - totals['H-14']) / 1e9:.1f}G")


if __name__ == "__main__":
    main()
