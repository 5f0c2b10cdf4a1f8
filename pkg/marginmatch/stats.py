"""
Statistics/metrics client for marginmatch runs.
"""
from typing import Optional

import structlog
from heare.stats.client import BaseStatsClient, HttpClient

from .config import StatsConfig
from .models import PassMetrics

logger = structlog.get_logger(__name__)


def get_stats_client(config: StatsConfig) -> Optional[BaseStatsClient]:
    """
    Build the stats client described by a run's ``stats`` section.

    Returns None if stats are disabled or not properly configured.
    """
    protocol = config.protocol.lower()

    # Only initialize if we have the required configuration
    if not (protocol and config.host and config.port):
        return None

    # Currently only HTTP is supported
    if protocol != 'http':
        logger.warning("stats_protocol_unsupported", protocol=protocol)
        return None

    return HttpClient(
        host=config.host,
        port=config.port,
        secret=config.secret,
        prefix='marginmatch'
    )


def emit_pass_metrics(client: Optional[BaseStatsClient], policy: str, metrics: PassMetrics) -> None:
    """Send one pass's gauges. Metric failures never affect the run."""
    if client is None:
        return
    try:
        with client.pipeline() as pipe:
            pipe.gauge(f'{policy}.mask_rate', metrics.mask_rate)
            pipe.gauge(f'{policy}.test_error', metrics.test_error)
            pipe.gauge(f'{policy}.selected', metrics.selected_count)
            if metrics.impurity is not None:
                pipe.gauge(f'{policy}.impurity', metrics.impurity)
            if metrics.gamma is not None:
                pipe.gauge(f'{policy}.gamma', metrics.gamma)
            pipe.incr(f'{policy}.passes')
    except Exception as e:
        logger.debug("stats_emit_failed", error=str(e))


def emit_run_event(client: Optional[BaseStatsClient], policy: str, event: str) -> None:
    """Count a run lifecycle event (started, completed, failed)."""
    if client is None:
        return
    try:
        with client.pipeline() as pipe:
            pipe.incr(f'{policy}.run.{event}')
    except Exception as e:
        logger.debug("stats_emit_failed", error=str(e))
