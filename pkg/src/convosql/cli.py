"""Console entry point; argument handling lives in evalharness."""

import sys

from .evalharness import cli_main


def main(argv=None) -> int:
    return cli_main(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
