"""Optional OpenTelemetry spans around the long-running phases of HMFN.

Span names:
- ``synth.scene`` / ``synth.calibrate``
- ``train.epoch``
- ``infer.run`` / ``eval.run``

Attributes are namespaced with ``hmfn.``. When the SDK is missing every
helper here degrades to a no-op, so callers never check.
"""

import logging
import os
from contextlib import contextmanager
from typing import Any, Iterator

logger = logging.getLogger(__name__)

ATTRIBUTE_PREFIX = "hmfn."
SERVICE_NAME = "hmfn"
ENDPOINT_ENV = "OTEL_EXPORTER_OTLP_TRACES_ENDPOINT"
DEFAULT_ENDPOINT = "http://localhost:4318/v1/traces"

_tracing_enabled = False


def default_endpoint() -> str:
    return os.environ.get(ENDPOINT_ENV, DEFAULT_ENDPOINT)


def setup_tracing(console_output: bool = False, otlp_endpoint: str | None = "") -> bool:
    """Install a tracer provider exporting HMFN spans.

    Args:
        console_output: Also print finished spans (noisy; meant for ``--debug``).
        otlp_endpoint: OTLP/HTTP receiver. ``""`` resolves the endpoint from
            ``OTEL_EXPORTER_OTLP_TRACES_ENDPOINT`` or the local Jaeger default;
            None disables OTLP export.

    Returns:
        True if tracing is active, False if the SDK is not installed.
    """
    global _tracing_enabled

    if _tracing_enabled:
        return True

    try:
        from opentelemetry import trace
        from opentelemetry.sdk.resources import Resource
        from opentelemetry.sdk.trace import TracerProvider
        from opentelemetry.sdk.trace.export import BatchSpanProcessor, ConsoleSpanExporter
    except ImportError as e:
        logger.warning("Tracing dependencies not installed (%s); pip install hmfn[tracing]", e)
        return False

    provider = TracerProvider(resource=Resource.create({"service.name": SERVICE_NAME}))
    if console_output:
        provider.add_span_processor(BatchSpanProcessor(ConsoleSpanExporter()))

    endpoint = default_endpoint() if otlp_endpoint == "" else otlp_endpoint
    if endpoint:
        try:
            from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter
        except ImportError:
            logger.warning("OTLP exporter not installed; spans are not exported to %s", endpoint)
        else:
            provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter(endpoint=endpoint)))
            logger.info("Exporting spans to %s", endpoint)

    trace.set_tracer_provider(provider)
    _tracing_enabled = True
    return True


def is_tracing_enabled() -> bool:
    return _tracing_enabled


# ============================================================================
# Spans
# ============================================================================


class _NoOpSpan:
    def set_attribute(self, key: str, value: Any) -> None:
        pass


class NoOpTracer:
    """Stand-in used when opentelemetry is not installed."""

    @contextmanager
    def start_as_current_span(self, name: str, **kwargs) -> Iterator[_NoOpSpan]:
        yield _NoOpSpan()


def get_tracer(name: str = SERVICE_NAME):
    """Tracer from the global provider, or a ``NoOpTracer`` without the SDK."""
    try:
        from opentelemetry import trace
    except ImportError:
        return NoOpTracer()
    return trace.get_tracer(name)


def span_value(value: Any) -> Any:
    """Coerce a value to an OTEL attribute type; None means "skip".

    Tuples and numpy arrays become lists of primitives, numpy scalars become
    Python scalars. Anything else becomes its ``str``.
    """
    if value is None or isinstance(value, (bool, int, float, str)):
        return value
    if isinstance(value, (tuple, list)):
        items = [span_value(v) for v in value]
        if all(isinstance(v, (bool, int, float, str)) for v in items):
            return items
        return str(value)
    if hasattr(value, "tolist"):
        return span_value(value.tolist())
    return str(value)


def set_attributes(span: Any, **attributes: Any) -> None:
    """Set ``hmfn.<key>`` attributes on a span, skipping None values."""
    for key, value in attributes.items():
        value = span_value(value)
        if value is not None:
            span.set_attribute(ATTRIBUTE_PREFIX + key, value)


@contextmanager
def run_span(name: str, **attributes: Any) -> Iterator[Any]:
    """Open a span on the HMFN tracer with namespaced attributes.

    Example:
        with run_span("train.epoch", epoch=3) as span:
            set_attributes(span, val_map=0.41)
    """
    with get_tracer().start_as_current_span(name) as span:
        set_attributes(span, **attributes)
        yield span
