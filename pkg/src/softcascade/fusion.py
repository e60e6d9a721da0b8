"""Entropy-weighted probability fusion, top-k extraction, and routing.

Every function here is pure: no I/O, no shared state, safe to call
concurrently. Distributions are 1-D float64 numpy arrays that sum to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolationError, StructuralError

# Probabilities are clamped to this floor before any log.
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class FusionConfig:
    """Aggregation temperature and candidate-set size."""

    temperature: float = 1.0
    k: int = 3

    def __post_init__(self):
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class RouterConfig:
    """Thresholds of the dual-criterion escalation rule."""

    tau_conf: float = 0.60
    tau_gap: float = 0.10

    def __post_init__(self):
        for name in ("tau_conf", "tau_gap"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")


@dataclass
class ModelOpinion:
    """One backend's probability distribution plus its predictive entropy (nats)."""

    model_id: str
    probs: np.ndarray
    entropy: float

    @classmethod
    def from_probs(cls, model_id: str, probs: np.ndarray) -> "ModelOpinion":
        probs = np.asarray(probs, dtype=np.float64)
        validate_distribution(probs)
        return cls(model_id=model_id, probs=probs, entropy=entropy(probs))

    @classmethod
    def from_logits(cls, model_id: str, logits: np.ndarray) -> "ModelOpinion":
        return cls.from_probs(model_id, softmax(logits))


@dataclass
class EnsemblePrediction:
    """Fused distribution with candidates, confidence metrics, and route decision."""

    weights: np.ndarray           # one non-negative weight per model, sums to 1
    fused: np.ndarray             # weighted mixture of the model distributions
    candidates: list[int]         # class indices, most probable first
    confidence: float             # fused probability of the top candidate
    gap: float                    # margin between the top two candidates
    route: bool                   # True -> escalate to the arbitration path
    model_ids: list[str] = field(default_factory=list)


def validate_distribution(probs: np.ndarray, atol: float = 1e-9) -> None:
    """Raise StructuralError unless `probs` is a valid probability vector."""
    probs = np.asarray(probs)
    if probs.ndim != 1 or probs.shape[0] < 1:
        raise StructuralError(f"expected a 1-D probability vector, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise StructuralError("distribution contains non-finite entries")
    if np.any(probs < -atol) or np.any(probs > 1 + atol):
        raise StructuralError("distribution entries outside [0, 1]")
    total = float(probs.sum())
    if abs(total - 1.0) > atol:
        raise StructuralError(f"distribution sums to {total}, expected 1")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a logit vector (max-shifted)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise StructuralError(f"expected >= 2 logits, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise StructuralError("non-finite logit")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def entropy(probs: np.ndarray) -> float:
    """Shannon entropy in nats, with 0*ln(0) := 0 via clamping."""
    probs = np.asarray(probs, dtype=np.float64)
    p = np.maximum(probs, PROB_FLOOR)
    return float(-np.sum(np.where(probs > 0, probs * np.log(p), 0.0)))


def fusion_weights(entropies: np.ndarray, config: FusionConfig) -> np.ndarray:
    """Per-model weights: softmax of negated entropies at the configured temperature.

    Lower entropy (a more certain model) receives a larger weight. The
    exponent is max-shifted so extreme temperatures stay finite.
    """
    entropies = np.asarray(entropies, dtype=np.float64)
    if entropies.ndim != 1 or entropies.shape[0] < 1:
        raise StructuralError(f"expected a 1-D entropy vector, got shape {entropies.shape}")
    if not np.all(np.isfinite(entropies)) or np.any(entropies < 0):
        raise StructuralError("entropies must be finite and non-negative")
    scores = -entropies / config.temperature
    scores -= scores.max()
    e = np.exp(scores)
    return e / e.sum()


def aggregate(opinions: list[ModelOpinion], weights: np.ndarray) -> np.ndarray:
    """Weighted mixture of the model distributions."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(opinions) != weights.shape[0] or len(opinions) < 1:
        raise StructuralError(
            f"{len(opinions)} opinions but {weights.shape[0]} weights"
        )
    lengths = {op.probs.shape[0] for op in opinions}
    if len(lengths) != 1:
        raise StructuralError(f"opinions disagree on class count: {sorted(lengths)}")
    stacked = np.stack([op.probs for op in opinions])
    return weights @ stacked


def top_k(fused: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest probabilities, descending; ties go to the lower index."""
    fused = np.asarray(fused, dtype=np.float64)
    c = fused.shape[0]
    if not (1 <= k <= c):
        raise ConfigError(f"k={k} out of range for {c} classes")
    # Sorting on (-p, index) makes the tie-break explicit and platform-stable.
    order = sorted(range(c), key=lambda i: (-fused[i], i))
    return order[:k]


def confidence_and_gap(fused: np.ndarray, candidates: list[int]) -> tuple[float, float]:
    """Top fused probability and margin over the runner-up.

    With a single candidate the margin degenerates to the confidence itself,
    keeping the router total.
    """
    if not candidates:
        raise StructuralError("empty candidate list")
    confidence = float(fused[candidates[0]])
    if len(candidates) < 2:
        return confidence, confidence
    return confidence, confidence - float(fused[candidates[1]])


def route(confidence: float, gap: float, config: RouterConfig) -> bool:
    """True when the sample should be escalated: low confidence OR small margin.

    Both comparisons are strict, so values exactly at a threshold take the
    direct path.
    """
    return confidence < config.tau_conf or gap < config.tau_gap


def decide(prediction: EnsemblePrediction, arbitration=None) -> int:
    """Final class index: top candidate on the direct path, arbiter's label otherwise.

    The arbiter guarantees its label is one of the candidates (falling back
    to the top candidate on any failure), so the result is always a member
    of `prediction.candidates`.
    """
    if not prediction.route:
        return prediction.candidates[0]
    if arbitration is None:
        raise ContractViolationError("routed prediction requires an arbitration result")
    return arbitration.label


def fuse_opinions(opinions: list[ModelOpinion], fusion: FusionConfig,
                  router: RouterConfig) -> EnsemblePrediction:
    """Run the full fusion stage: weights, mixture, candidates, metrics, route."""
    entropies = np.array([op.entropy for op in opinions])
    weights = fusion_weights(entropies, fusion)
    fused = aggregate(opinions, weights)
    k = min(fusion.k, fused.shape[0])
    candidates = top_k(fused, k)
    confidence, gap = confidence_and_gap(fused, candidates)
    return EnsemblePrediction(
        weights=weights,
        fused=fused,
        candidates=candidates,
        confidence=confidence,
        gap=gap,
        route=route(confidence, gap, router),
        model_ids=[op.model_id for op in opinions],
    )
