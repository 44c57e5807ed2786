import sys
from typing import Optional, Sequence

from hscrf.components.cli import dispatch, parse_args
from hscrf.utils.config import load_config
from hscrf.utils.errors import EXIT_RUNTIME, HscrfError
from hscrf.utils.logger import get_logger, setup_logger
from hscrf.utils.session import create_session

logger = get_logger(__name__)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one CLI command and return its exit code."""
    try:
        args = parse_args(argv)
    except HscrfError as e:
        setup_logger()
        logger.error(str(e))
        return e.exit_code
    except SystemExit as e:  # --help
        return int(e.code or 0)

    setup_logger(quiet=args.quiet)
    logger.info("=== hscrf starting ===")

    logger.info("Loading configuration")
    config = load_config()
    logger.debug(f"Configuration loaded: debug={config['app']['debug']}, run={config['run']}")

    logger.info("Creating run session")
    session = create_session(config, seed=args.seed, jobs=args.jobs, quiet=args.quiet)

    try:
        code = dispatch(args, session)
    except HscrfError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return EXIT_RUNTIME

    logger.info(f"=== '{args.command}' finished ===")
    return code


if __name__ == "__main__":
    sys.exit(main())
