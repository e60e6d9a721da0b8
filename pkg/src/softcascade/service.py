"""HTTP service exposing the classification pipeline.

All shared state is immutable after startup except the arbitration cache
(which serializes its own writes) and the metrics counters (guarded by a
lock). Requests therefore parallelize freely.
"""

from __future__ import annotations

import threading
from collections import deque

import numpy as np
from fastapi import FastAPI, Request
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from . import __version__
from .backends import BackendSet, SampleRef
from .config import ServiceConfig, build_arbiter, build_backends
from .errors import BackendError, ConfigError, StructuralError
from .pipeline import ClassifyOutcome, classify_sample
from .schemas import (
    CandidateOut,
    ClassifyRequest,
    ClassifyResponse,
    HealthResponse,
    MetricsResponse,
    ModelWeightOut,
)

LATENCY_WINDOW = 10_000


class InlineBackend:
    """One request's supplied logits behind the regular backend protocol.

    Lets the service (and its tests) exercise the full fusion/routing/
    arbitration path without any model runtime.
    """

    latency_ms = 0.0

    def __init__(self, model_id: str, logits: list[float]):
        self.model_id = model_id
        self._logits = np.asarray(logits, dtype=np.float64)
        self.class_count = int(self._logits.shape[0])

    def fetch_logits(self, sample: SampleRef) -> np.ndarray:
        return self._logits


class ServiceMetrics:
    """Thread-safe request counters with a bounded latency window."""

    def __init__(self):
        self._lock = threading.Lock()
        self.requests = 0
        self.routed = 0
        self.cache_hits = 0
        self.fallbacks = 0
        self._latencies = deque(maxlen=LATENCY_WINDOW)

    def observe(self, response: ClassifyResponse) -> None:
        with self._lock:
            self.requests += 1
            self.routed += response.routed
            self.cache_hits += response.from_cache
            self.fallbacks += response.fell_back
            self._latencies.append(response.latencies_ms.get("total_ms", 0.0))

    def snapshot(self) -> MetricsResponse:
        with self._lock:
            latencies = list(self._latencies)
            requests, routed = self.requests, self.routed
            cache_hits, fallbacks = self.cache_hits, self.fallbacks
        p50 = float(np.percentile(latencies, 50)) if latencies else 0.0
        p95 = float(np.percentile(latencies, 95)) if latencies else 0.0
        return MetricsResponse(
            requests=requests,
            routed=routed,
            trigger_rate=routed / requests if requests else 0.0,
            arbitrations=routed,
            cache_hits=cache_hits,
            cache_hit_rate=cache_hits / routed if routed else 0.0,
            fallbacks=fallbacks,
            latency_p50_ms=p50,
            latency_p95_ms=p95,
        )


def outcome_to_response(sample_id: str, outcome: ClassifyOutcome,
                        class_names: list[str]) -> ClassifyResponse:
    """Flatten a pipeline outcome into the wire schema (CLI uses this too)."""
    pred = outcome.prediction
    arb = outcome.arbitration
    return ClassifyResponse(
        sample_id=sample_id,
        final_label_index=outcome.final_label,
        final_label_name=class_names[outcome.final_label],
        confidence=pred.confidence,
        gap=pred.gap,
        routed=pred.route,
        fell_back=arb.fell_back if arb else False,
        from_cache=arb.from_cache if arb else False,
        candidates=[
            CandidateOut(index=c, name=class_names[c],
                         probability=float(pred.fused[c]))
            for c in pred.candidates
        ],
        weights=[
            ModelWeightOut(model_id=m, weight=float(w))
            for m, w in zip(pred.model_ids, pred.weights)
        ],
        latencies_ms=outcome.latencies,
    )


def create_app(config: ServiceConfig, backends: BackendSet | None = None,
               arbiter=None, descriptors=None) -> FastAPI:
    """Assemble the service; components may be injected for testing."""
    if backends is None:
        backends = build_backends(config)
    if arbiter is None and config.mode != "no-arbiter":
        arbiter, descriptors = build_arbiter(config)
    elif descriptors is None and config.descriptor_path:
        _, descriptors = build_arbiter(config)

    class_names = config.class_names
    metrics = ServiceMetrics()
    app = FastAPI(title="softcascade", version=__version__)

    @app.exception_handler(RequestValidationError)
    def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"detail": jsonable_encoder(exc.errors())})

    @app.exception_handler(StructuralError)
    def bad_input(request: Request, exc: StructuralError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(BackendError)
    def backend_down(request: Request, exc: BackendError):
        return JSONResponse(status_code=502, content={"detail": str(exc)})

    @app.exception_handler(ConfigError)
    def misconfigured(request: Request, exc: ConfigError):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.post("/classify", response_model=ClassifyResponse)
    def classify(body: ClassifyRequest) -> ClassifyResponse:
        if body.logits is not None:
            request_backends = BackendSet(
                [InlineBackend(v.model_id, v.logits) for v in body.logits])
            if request_backends.backends[0].class_count != len(class_names):
                raise StructuralError(
                    f"inline logits cover {request_backends.backends[0].class_count} "
                    f"classes, expected {len(class_names)}")
            sample = SampleRef(sample_id=body.sample_id)
        else:
            request_backends = backends
            features = (np.asarray(body.features, dtype=np.float64)
                        if body.features is not None else None)
            sample = SampleRef(sample_id=body.sample_id, features=features,
                               image_path=body.image_path)
        outcome = classify_sample(
            request_backends, sample, config.fusion, config.router,
            arbiter=arbiter, descriptors=descriptors)
        response = outcome_to_response(body.sample_id, outcome, class_names)
        metrics.observe(response)
        return response

    @app.get("/healthz", response_model=HealthResponse)
    def healthz() -> HealthResponse:
        components = {
            "backends": ", ".join(b.model_id for b in backends.backends),
            "classes": str(len(class_names)),
            "arbiter": config.mode,
            "descriptors": (f"{len(descriptors)} classes"
                            if descriptors is not None else "absent"),
        }
        return HealthResponse(status="ok", mode=config.mode,
                              components=components)

    @app.get("/metrics", response_model=MetricsResponse)
    def metrics_endpoint() -> MetricsResponse:
        return metrics.snapshot()

    return app
