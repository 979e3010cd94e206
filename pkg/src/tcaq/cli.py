"""`tcaq` command line."""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, add_flags, resolve
from .tensor import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

COMMANDS = {
    "train": (pipeline.cmd_train, "train the toy diffusion model on the synthetic dataset"),
    "quantize": (pipeline.cmd_quantize, "calibrate, initialize quantizers and reconstruct"),
    "sample": (pipeline.cmd_sample, "draw samples and write an archive plus a PNG grid"),
    "evaluate": (pipeline.cmd_evaluate, "fmd and per-layer error report for the quantized model"),
    "ablate": (pipeline.cmd_ablate, "score the eight toggle arms for every configured bit setting"),
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags already; route it through our message format
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tcaq", description="Post-training quantization of a toy diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="INI config file; flags override its values")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        add_flags(p)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args)
        out = COMMANDS[args.command][0](cfg)
    except ConfigError as e:
        print(f"tcaq: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"tcaq: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except pipeline.MissingArtifact as e:
        print(f"tcaq: {e}", file=sys.stderr)
        return EXIT_MISSING
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
