"""Wire schemas of the HTTP service (also reused by the CLI printer)."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field, model_validator


class InlineLogits(BaseModel):
    """Raw logits one model produced for the sample being classified."""

    model_config = ConfigDict(protected_namespaces=())

    model_id: str = Field(min_length=1)
    logits: list[float] = Field(min_length=2)


class ClassifyRequest(BaseModel):
    """A sample reference, or inline per-model logits to bypass the backends."""

    model_config = ConfigDict(extra="forbid")

    sample_id: str = Field(min_length=1)
    features: list[float] | None = None
    image_path: str | None = None
    logits: list[InlineLogits] | None = Field(default=None, min_length=1)

    @model_validator(mode="after")
    def _single_payload_form(self):
        provided = sum(x is not None
                       for x in (self.features, self.image_path, self.logits))
        if provided > 1:
            raise ValueError("give at most one of features, image_path, logits")
        return self


class CandidateOut(BaseModel):
    """One shortlisted class with its fused probability."""

    index: int
    name: str
    probability: float


class ModelWeightOut(BaseModel):
    """One ensemble member's entropy-derived fusion weight."""

    model_config = ConfigDict(protected_namespaces=())

    model_id: str
    weight: float


class ClassifyResponse(BaseModel):
    """Final decision plus everything the cascade derived on the way."""

    sample_id: str
    final_label_index: int
    final_label_name: str
    confidence: float
    gap: float
    routed: bool
    fell_back: bool
    from_cache: bool
    candidates: list[CandidateOut]
    weights: list[ModelWeightOut]
    latencies_ms: dict[str, float]


class HealthResponse(BaseModel):
    status: str
    mode: str
    components: dict[str, str]


class MetricsResponse(BaseModel):
    """Service counters; rates are exact ratios of the integer counters."""

    requests: int
    routed: int
    trigger_rate: float
    arbitrations: int
    cache_hits: int
    cache_hit_rate: float
    fallbacks: int
    latency_p50_ms: float
    latency_p95_ms: float
