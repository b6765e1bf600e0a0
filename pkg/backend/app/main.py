import logging
import sys

from rich.console import Console
from rich.logging import RichHandler

from app.cli import run_cli
from app.config import settings


def configure_logging(level: str = settings.LOG_LEVEL) -> None:
    """Route all log records to stderr through rich, once per process."""
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), rich_tracebacks=True)],
    )


def main() -> None:
    configure_logging()
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
