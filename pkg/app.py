#!/usr/bin/env python3
"""
kms-hodge command-line entry point

    python app.py charnum -i fixtures/two_divisor_bundle.json
    python app.py verify --seed 0
"""

import logging
import sys

from src.cli import build_parser, execute
from src.env_config import EnvConfig


def configure_logging(verbose: bool = False) -> None:
    """Configure root logging once; --verbose forces DEBUG"""
    level = logging.DEBUG if verbose else getattr(logging, EnvConfig.get_log_level(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    return execute(args)


if __name__ == "__main__":
    sys.exit(main())
