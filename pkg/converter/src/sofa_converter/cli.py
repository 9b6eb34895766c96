"""Command line for the SOFA-to-bundle converter.

Two subcommands: ``convert`` turns a directory of SimpleFreeFieldHRIR
files into one bundle, ``inspect`` summarizes a file or directory.
Exit codes: 0 success, 1 usage error, 2 format/validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .convert import DEFAULT_EXCLUSIONS, ConvertOptions, convert
from .sofa import SofaFormatError, read_summary


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract wants 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _cmd_convert(args) -> int:
    if args.exclude is None:
        exclusions = DEFAULT_EXCLUSIONS
    else:
        exclusions = tuple(x for x in args.exclude.split(",") if x)
    options = ConvertOptions(
        exclusions=exclusions,
        compensated=not args.raw,
        pattern=args.pattern,
    )
    summary = convert(args.sofa_dir, args.out, options)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        files = sorted(path.glob(args.pattern))
        if not files:
            raise SofaFormatError(f"no files matching {args.pattern!r} in {path}")
        for file in files:
            print(f"{file.name}: {read_summary(file).describe()}")
    else:
        print(read_summary(path).describe())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sofa-converter", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="convert a directory of SOFA files into a bundle")
    p.add_argument("--sofa-dir", required=True, dest="sofa_dir")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--exclude",
        help=f"comma-separated subject ids to drop (default {','.join(DEFAULT_EXCLUSIONS)})",
    )
    p.add_argument(
        "--raw", action="store_true",
        help="record that the source is the uncompensated release variant",
    )
    p.add_argument("--pattern", default="*.sofa")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("inspect", help="summarize one SOFA file or a directory")
    p.add_argument("--path", required=True)
    p.add_argument("--pattern", default="*.sofa")
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SofaFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main_exit() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    sys.exit(main())
