"""Command-line wrapper: ``wecs-render --kind <k> --in <csv> --out <img>``."""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureSpec, SchemaError, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wecs-render",
        description="Render wecs sweep CSV files into publication-style figures.",
    )
    parser.add_argument("--kind", choices=KINDS, required=True)
    parser.add_argument("--in", dest="input_path", required=True, help="input CSV")
    parser.add_argument("--out", dest="output_path", required=True, help="output image")
    parser.add_argument("--format", choices=["png", "svg"], default=None,
                        help="image format (default: from the output suffix)")
    parser.add_argument("--xlabel", default=None)
    parser.add_argument("--ylabel", default=None)
    parser.add_argument("--title", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = FigureSpec(
            input_path=args.input_path,
            kind=args.kind,
            output_path=args.output_path,
            image_format=args.format,
            xlabel=args.xlabel,
            ylabel=args.ylabel,
            title=args.title,
        )
        out = render(spec)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
