#!/usr/bin/env python3
"""
Pre-training Toolkit Entry Script
Caps BLAS threads, then hands the command line to the toolkit CLI.
"""

import argparse
import os
import sys

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def apply_thread_limit(argv):
    """Export the --threads value (or PRETRAIN_THREADS) before numpy is imported.

    The reference path always runs on a single thread.
    """
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--reference", action=argparse.BooleanOptionalAction, default=True)
    known, _ = parser.parse_known_args(argv)

    threads = known.threads
    if threads is None:
        from config import DEFAULT_THREADS
        threads = DEFAULT_THREADS
    if threads < 1:
        print("❌ --threads must be at least 1", file=sys.stderr)
        sys.exit(2)
    if known.reference and threads != 1:
        print("⚠️  Reference mode runs on one thread; pass --no-reference to use more")
        threads = 1
    for name in THREAD_VARIABLES:
        os.environ[name] = str(threads)
    return threads


def main():
    """Main startup function."""
    argv = sys.argv[1:]
    apply_thread_limit(argv)

    from pretraining.cli import main as cli_main

    sys.exit(cli_main(argv))


if __name__ == "__main__":
    main()
