"""The single-sample classification path shared by the evaluation harness,
the HTTP service, and the CLI.

Stages: concurrent backend fan-out, entropy-weighted fusion, candidate
extraction, confidence/margin routing, and — for routed samples — Top-K
constrained arbitration. Per-stage wall times are recorded in
milliseconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .arbiter import ArbitrationRequest, ArbitrationResult, DescriptorDB
from .backends import BackendSet, SampleRef, fan_out
from .errors import ConfigError
from .fusion import EnsemblePrediction, FusionConfig, RouterConfig, decide, fuse_opinions


@dataclass
class ClassifyOutcome:
    """Everything one sample produced on its way through the cascade."""

    prediction: EnsemblePrediction
    arbitration: ArbitrationResult | None
    final_label: int
    latencies: dict[str, float]        # fan_out_ms, fuse_ms, arbitrate_ms, total_ms


def classify_sample(backends: BackendSet, sample: SampleRef,
                    fusion: FusionConfig, router: RouterConfig,
                    arbiter=None, descriptors: DescriptorDB | None = None,
                    prompt_version: str = "v1", strict: bool = True,
                    omissions: list | None = None) -> ClassifyOutcome:
    """Run one sample through fan-out, fusion, routing, and arbitration.

    Without an arbiter the escalation path is disabled outright: the route
    flag is forced off and the top candidate is final. With one, routed
    samples are resolved through it (the descriptor database is then
    required) and the arbiter's closed-set guarantee keeps the final label
    inside the candidate list.
    """
    if arbiter is not None and descriptors is None:
        raise ConfigError("an arbiter requires a descriptor database")

    t_start = time.perf_counter()
    opinions = fan_out(backends, sample, strict=strict, omissions=omissions)
    t_fanned = time.perf_counter()

    prediction = fuse_opinions(opinions, fusion, router)
    if arbiter is None:
        prediction.route = False
    t_fused = time.perf_counter()

    arbitration = None
    if prediction.route:
        request = ArbitrationRequest(
            sample=sample,
            candidates=list(prediction.candidates),
            descriptors=descriptors.entries_for(prediction.candidates),
            prompt_version=prompt_version,
        )
        arbitration = arbiter.arbitrate(request)
    t_done = time.perf_counter()

    return ClassifyOutcome(
        prediction=prediction,
        arbitration=arbitration,
        final_label=decide(prediction, arbitration),
        latencies={
            "fan_out_ms": (t_fanned - t_start) * 1000.0,
            "fuse_ms": (t_fused - t_fanned) * 1000.0,
            "arbitrate_ms": (t_done - t_fused) * 1000.0,
            "total_ms": (t_done - t_start) * 1000.0,
        },
    )
