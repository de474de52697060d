#!/usr/bin/env python3
"""Run (or refresh) the cached component and Zipf-tail suites and print medians."""
import argparse
import logging

from doslab import ablation, bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--refresh", action="store_true", help="ignore cached CSVs")
    ap.add_argument("--only", choices=("components", "zipf_tail"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name in ("components", "zipf_tail"):
        if args.only and args.only != name:
            continue
        rows = getattr(bench, name)(args.seeds, refresh=args.refresh)
        for rec in ablation.summarize(rows):
            print(f"{name:10s} {rec['variant']:32s} mIoU {rec['mIoU']:.4f} "
                  f"head {rec['head_mIoU']:.4f} tail {rec['tail_mIoU']:.4f} {rec['error']}")


if __name__ == "__main__":
    main()
