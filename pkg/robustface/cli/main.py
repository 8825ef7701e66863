import os
import sys
from typing import List, Optional

from .parser import build_argparser
from .config import print_error, setup_logging
from ..errors import RobustFaceError

THREAD_VARIABLES = (
    'OMP_NUM_THREADS',
    'OPENBLAS_NUM_THREADS',
    'MKL_NUM_THREADS',
    'VECLIB_MAXIMUM_THREADS',
    'NUMEXPR_NUM_THREADS',
)


def pin_threads():
    """Single-threaded BLAS; only effective before numpy is first imported."""
    for name in THREAD_VARIABLES:
        os.environ[name] = '1'


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_argparser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help exits with 0, bad arguments with 1
        return e.code if isinstance(e.code, int) else 1

    if not args.subcommand:
        parser.print_help(sys.stderr)
        return 1

    if args.deterministic:
        pin_threads()
    setup_logging(quiet=args.quiet, verbose=args.verbose)

    from .commands import cmd_attack, cmd_evaluate, cmd_synth, cmd_train

    commands = {
        'synth': cmd_synth,
        'train': cmd_train,
        'evaluate': cmd_evaluate,
        'attack': cmd_attack,
    }
    try:
        return commands[args.subcommand](args)
    except RobustFaceError as e:
        print_error(str(e))
        return e.exit_code
    except OSError as e:
        print_error(str(e))
        return 2
    except KeyboardInterrupt:
        print_error("interrupted")
        return 130


if __name__ == '__main__':
    sys.exit(main())
