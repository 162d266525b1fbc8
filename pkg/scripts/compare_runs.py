"""Byte-compare every CSV under two experiment output directories; exit 1 on any difference."""

import argparse
import sys

from vsrt.experiments import csv_files


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("first")
    ap.add_argument("second")
    args = ap.parse_args()
    a, b = csv_files(args.first), csv_files(args.second)
    bad = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    for k in bad:
        print(f"differs: {k}" if k in a and k in b else f"missing: {k}")
    print(f"{len(set(a) | set(b))} CSVs, {len(bad)} differ")
    sys.exit(1 if bad else 0)


if __name__ == "__main__":
    main()
