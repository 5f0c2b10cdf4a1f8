"""structlog setup shared by the CLI and the library."""

import logging
import sys

import structlog


def configure_logging(level: str = "info") -> None:
    """
    Configure structlog for JSON output on stderr.

    Args:
        level: Minimum level name (debug, info, warning, error)
    """
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.JSONRenderer(),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            logging.getLevelNamesMapping()[level.upper()]
        ),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )
