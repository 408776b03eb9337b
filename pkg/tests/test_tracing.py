"""Tests for the optional tracing module."""

import sys
from unittest.mock import MagicMock, patch

import numpy as np

from hmfn import tracing
from hmfn.tracing import (
    DEFAULT_ENDPOINT,
    ENDPOINT_ENV,
    NoOpTracer,
    default_endpoint,
    get_tracer,
    is_tracing_enabled,
    run_span,
    set_attributes,
    setup_tracing,
    span_value,
)


class TestSetup:
    """Tests for tracing setup."""

    def test_missing_sdk(self, monkeypatch):
        """Without opentelemetry, setup reports failure instead of raising."""
        monkeypatch.setattr(tracing, "_tracing_enabled", False)
        with patch.dict(sys.modules, {"opentelemetry": None}):
            assert setup_tracing(console_output=False, otlp_endpoint=None) is False
        assert not is_tracing_enabled()

    def test_already_enabled(self, monkeypatch):
        """A second setup call is a no-op that reports success."""
        monkeypatch.setattr(tracing, "_tracing_enabled", True)
        assert setup_tracing() is True

    def test_endpoint_from_environment(self, monkeypatch):
        """The standard OTLP environment variable overrides the Jaeger default."""
        monkeypatch.delenv(ENDPOINT_ENV, raising=False)
        assert default_endpoint() == DEFAULT_ENDPOINT
        monkeypatch.setenv(ENDPOINT_ENV, "http://collector:4318/v1/traces")
        assert default_endpoint() == "http://collector:4318/v1/traces"


class TestSpans:
    """Tests for span helpers and the no-op fallback."""

    def test_noop_tracer_when_missing(self):
        """get_tracer falls back to a tracer whose spans accept attributes."""
        with patch.dict(sys.modules, {"opentelemetry": None}):
            tracer = get_tracer()
        assert isinstance(tracer, NoOpTracer)
        with tracer.start_as_current_span("train.epoch") as span:
            span.set_attribute("hmfn.epoch", 1)

    def test_run_span_without_sdk(self):
        """run_span works with no SDK installed."""
        with patch.dict(sys.modules, {"opentelemetry": None}):
            with run_span("eval.run", frames=3, thresholds=(0.5, 1.0)) as span:
                set_attributes(span, val_map=0.5)

    def test_attributes_are_namespaced(self):
        """Keys get the hmfn. prefix and None values are skipped."""
        span = MagicMock()
        set_attributes(span, epoch=2, val_map=None, layout="courtyard")
        span.set_attribute.assert_any_call("hmfn.epoch", 2)
        span.set_attribute.assert_any_call("hmfn.layout", "courtyard")
        assert span.set_attribute.call_count == 2

    def test_span_values(self):
        """Values are coerced to OTEL attribute types."""
        assert span_value((0.05, 0.075)) == [0.05, 0.075]
        assert span_value(np.int64(7)) == 7
        assert isinstance(span_value(np.int64(7)), int)
        assert span_value(np.array([1, 2])) == [1, 2]
        assert span_value([(1, 2)]) == "[(1, 2)]"
        assert span_value(None) is None
