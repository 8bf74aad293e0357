"""One command per figure kind: figkit <kind> --input ... --output ..."""

from __future__ import annotations

import argparse
import sys

from figkit.render import FIGURE_KINDS, FigureSpec, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="figkit",
        description="Regenerate figures from analysis CSV artifacts")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in FIGURE_KINDS:
        p = sub.add_parser(kind, help=f"render a {kind} figure")
        p.add_argument("--input", required=True, help="source CSV")
        p.add_argument("--output", required=True, help="image file to write")
        p.add_argument("--title", default="")
        p.add_argument("--sidecar", default="",
                       help="sidecar CSV path (default: <output>.data.csv)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = FigureSpec(kind=args.kind, input_path=args.input,
                      output_path=args.output, title=args.title,
                      sidecar_path=args.sidecar)
    path = render(spec)
    print(f"wrote {path} and {spec.sidecar_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
