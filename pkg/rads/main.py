import sys

from rads.cli import run_cli


def main():
    sys.exit(run_cli(sys.argv[1:]))
