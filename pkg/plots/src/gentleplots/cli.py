"""Command-line entry: plot --kind {curves|scatter} --in <run dirs...> --out fig.png"""

from __future__ import annotations

import argparse
import sys

from .render import PlotError, PlotSpec, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plot", description="Render figures from gentle run directories.")
    parser.add_argument("--kind", required=True, choices=("curves", "scatter"))
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        help="run directories (curves accepts several for mean/std bands)")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--smoothing", type=int, default=1,
                        help="moving-average window over recorded epochs")
    parser.add_argument("--metric", default=None,
                        help="curves: draw only this metric")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = PlotSpec(inputs=list(args.inputs), output=args.out, kind=args.kind,
                        smoothing=args.smoothing, metric=args.metric)
        path = render(spec)
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
