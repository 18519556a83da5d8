"""MACs of UniFormer-S versus input resolution, split by stage and attention matmul."""

import argparse

from uniformer_kit.analyzer import resolution_sweep, sweep_table
from uniformer_kit.config import preset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--resolutions", default="224,384,512,640,768,896,1008")
    p.add_argument("--csv")
    args = p.parse_args()
    res = [int(r) for r in args.resolutions.split(",")]
    rows = sweep_table(resolution_sweep(preset("S"), res))
    print(f"{'res':>5} {'total G':>9} {'stage3 G':>9} {'s3 matmul G':>12} {'s3 matmul %':>12}")
    for r in rows:
        share = 100 * r["stage3_matmul_macs"] / r["total_macs"]
        print(f"{r['height']:>5} {r['total_macs'] / 1e9:>9.2f} {r['stage3_macs'] / 1e9:>9.2f} "
              f"{r['stage3_matmul_macs'] / 1e9:>12.2f} {share:>12.1f}")
    if args.csv:
        import csv
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
