"""Command-line driver: ``nsk run <script.nsk> [flags]``.

Exit codes: 0 on success, 1 when the user program fails (lex, parse, or
runtime error), 2 on usage errors such as a missing script file.
"""

from __future__ import annotations

import argparse
import os
import sys

from nsk import __version__
from nsk.ast import dump_program
from nsk.errors import NskError
from nsk.interpreter import execute
from nsk.lexer import tokenize
from nsk.parser import parse
from nsk.runtime import Session
from nsk.tensor import Pool


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsk", description="Run .nsk scripts")
    parser.add_argument("--version", action="version", version=f"nsk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a script")
    run.add_argument("script", help="path to a .nsk file")
    run.add_argument("--entry", default=None, help="entry function (default: main)")
    run.add_argument("--seed", type=int, default=0, help="seed for all stochastic behavior")
    run.add_argument("--workers", type=int, default=3, help="prefetch workers (default 3)")
    run.add_argument("--strict-shared-writes", choices=("on", "off"), default="on",
                     help="lock cross-task attributions (default on)")
    run.add_argument("--no-pool", action="store_true",
                     help="disable buffer pooling (fresh allocation every acquire)")
    run.add_argument("--pool-stats", action="store_true",
                     help="print pool counters at exit")
    run.add_argument("--check-grads", action="store_true",
                     help="verify stdlib gradients against finite differences first")
    run.add_argument("--dump-ast", action="store_true",
                     help="print the parsed tree and exit without running")
    run.add_argument("--trace-calls", action="store_true",
                     help="log one line per function invocation")
    return parser


def main(argv: list[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout if stdout is not None else sys.stdout
    stderr = stderr if stderr is not None else sys.stderr
    parser = build_arg_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)

    path = args.script
    if not os.path.isfile(path):
        stderr.write(f"nsk: script not found: {path}\n")
        return 2
    try:
        source = open(path, encoding="utf-8").read()
    except OSError as exc:
        stderr.write(f"nsk: cannot read {path}: {exc.strerror or exc}\n")
        return 2

    try:
        program = parse(tokenize(source))
    except NskError as err:
        stderr.write(f"error: {err.render(path)}\n")
        return 1

    if args.dump_ast:
        stdout.write(dump_program(program))
        return 0

    if args.check_grads:
        from nsk.gradcheck import run_check_grads

        run_check_grads(stderr, seed=args.seed)

    pool = Pool(enabled=not args.no_pool)
    session = Session(
        seed=args.seed,
        workers=args.workers,
        strict_shared_writes=args.strict_shared_writes == "on",
        pool=pool,
        trace_calls=args.trace_calls,
        stdout=stdout,
        stderr=stderr,
    )
    session.script_dir = os.path.dirname(os.path.abspath(path))
    status = execute(program, session, entry=args.entry, source_name=path)
    if args.pool_stats:
        stats = pool.stats()
        stderr.write(f"pool: fresh={stats['fresh']} hits={stats['hits']} released={stats['released']}\n")
    return status


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
