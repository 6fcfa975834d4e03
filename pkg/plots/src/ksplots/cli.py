"""plot <kind> --in PATH [--in PATH2] --out PATH"""

import argparse
import sys

from .render import KINDS, FigureSpec, SchemaError, render


def build_parser():
    parser = argparse.ArgumentParser(
        prog="plot",
        description="render a figure from kscontrol CSV/JSON outputs",
    )
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="inputs", action="append", required=True,
                        metavar="PATH", help="input file (repeatable)")
    parser.add_argument("--out", required=True, metavar="PATH",
                        help="output raster image (PNG)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        spec = FigureSpec(kind=args.kind, inputs=args.inputs, output=args.out)
        result = render(spec)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {result.output} ({result.points} points)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
