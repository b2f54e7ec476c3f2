#!/usr/bin/env python3
"""Parameter/FLOP growth tables for deformable vs square kernels.

For each channel configuration, lists the deformable layer's parameter count
and FLOP estimate as the kernel size n grows one point at a time, next to the
k x k convolution that would cover the same reach (k = ceil(sqrt(n))).  The
deformable column climbs by a constant amount per point; the square column
jumps quadratically whenever k does.

    python3 scripts/growth_tables.py --configs 16:32,64:128 --n-max 16
"""

import argparse
import sys
from pathlib import Path

try:
    import ldconv  # noqa: F401
except ImportError:  # running from a checkout without an editable install
    sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ldconv.analysis import growth_audit, growth_csv


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--configs", default="16:32",
                    help="comma-separated c_in:c_out pairs")
    ap.add_argument("--n-max", type=int, default=16)
    ap.add_argument("--h", type=int, default=32, help="input height for FLOPs")
    ap.add_argument("--w", type=int, default=32, help="input width for FLOPs")
    ap.add_argument("--csv-dir", default=None,
                    help="also write one growth.csv per config here")
    args = ap.parse_args(argv)

    if args.n_max < 1:
        ap.error("--n-max must be >= 1")
    pairs = []
    for tok in args.configs.split(","):
        c_in, _, c_out = tok.strip().partition(":")
        try:
            pairs.append((int(c_in), int(c_out)))
        except ValueError:
            ap.error(f"bad config {tok!r}, expected c_in:c_out")

    for c_in, c_out in pairs:
        rows = growth_audit(c_in, c_out, range(1, args.n_max + 1),
                            h_in=args.h, w_in=args.w)
        print(f"# c_in={c_in} c_out={c_out} (FLOPs on {args.h}x{args.w} input)")
        print(f"{'n':>3} {'params':>10} {'delta':>7} {'mflops':>8} "
              f"{'k':>3} {'kxk params':>11}")
        for row in rows:
            delta = "" if row.delta_params is None else str(row.delta_params)
            print(f"{row.n:>3} {row.params:>10} {delta:>7} "
                  f"{row.flops / 1e6:>8.2f} {row.std_k:>3} {row.std_params:>11}")
        print()
        if args.csv_dir is not None:
            csv_dir = Path(args.csv_dir)
            csv_dir.mkdir(parents=True, exist_ok=True)
            path = csv_dir / f"growth_{c_in}x{c_out}.csv"
            path.write_text(growth_csv(rows))
            print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
