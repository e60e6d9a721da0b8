"""Joint training objective: per-model focal terms, a focal term on the fused
distribution, and a pairwise-divergence reward on hard samples.

All gradients are computed analytically with respect to the raw logits, so
the toy trainer needs no autodiff framework. Shapes follow one convention:

    logits, probs   (n_models, batch, n_classes)
    labels          (batch,) integer class indices
    hard_flags      (batch,) booleans marking the samples that earn the
                    diversity reward

The entropy-weighted mixture inside the objective reuses the same math as
the fusion stage (softmax of negated entropies at a temperature).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StructuralError
from .fusion import PROB_FLOOR


@dataclass(frozen=True)
class LossConfig:
    """Knobs of the joint objective.

    ``class_weights`` rescales the focal term per class (mean 1 across
    classes); ``None`` means uniform. ``grad_through_weights`` toggles
    whether gradients flow through the entropy-derived mixture weights or
    treat them as constants. ``ordered_pairs`` counts each model pair twice
    in the diversity term (i->j and j->i), matching a sum over ordered
    pairs; disabling it halves the term.
    """

    gamma: float = 2.0
    class_weights: np.ndarray | None = None
    lambda_fused: float = 1.0
    lambda_diversity: float = 0.1
    temperature: float = 1.0
    grad_through_weights: bool = True
    ordered_pairs: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.lambda_fused < 0 or self.lambda_diversity < 0:
            raise ConfigError("loss multipliers must be non-negative")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.ndim != 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ConfigError("class_weights must be a non-negative 1-D vector")
            object.__setattr__(self, "class_weights", w)


@dataclass
class LossBreakdown:
    """Scalar terms of the objective plus the full logit gradient."""

    per_model: np.ndarray        # (n_models,) mean focal loss of each backbone
    fused_focal: float           # mean focal loss of the fused distribution
    diversity: float             # mean negated pairwise divergence over hard samples
    total: float                 # per_model.sum() + lf*fused_focal + ld*diversity
    grad_logits: np.ndarray      # (n_models, batch, n_classes)
    weights: np.ndarray          # (n_models, batch) mixture weights
    fused: np.ndarray            # (batch, n_classes) fused distributions
    hard_count: int


def class_weights_from_counts(counts: np.ndarray) -> np.ndarray:
    """Inverse-frequency class weights, normalized to mean 1.

    Zero counts are treated as 1 so unseen classes get the largest finite
    weight instead of an infinite one.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.shape[0] < 1 or np.any(counts < 0):
        raise StructuralError("counts must be a non-negative 1-D vector")
    inv = 1.0 / np.maximum(counts, 1.0)
    return inv * (inv.shape[0] / inv.sum())


def focal_loss(probs: np.ndarray, labels: np.ndarray, gamma: float,
               class_weights: np.ndarray | None = None) -> np.ndarray:
    """Per-sample focal loss ``-w_y * (1 - p_y)^gamma * ln(p_y)``.

    ``probs`` is (batch, n_classes); returns (batch,). At ``gamma = 0`` this
    is exactly weighted cross-entropy.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    p_t = np.clip(probs[np.arange(labels.shape[0]), labels], PROB_FLOOR, None)
    w = 1.0 if class_weights is None else np.asarray(class_weights)[labels]
    return -w * np.maximum(1.0 - p_t, 0.0) ** gamma * np.log(p_t)


def focal_loss_grad(probs: np.ndarray, labels: np.ndarray, gamma: float,
                    class_weights: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the per-sample focal loss with respect to ``probs``.

    Only the true-class column is non-zero:
        dL/dp_y = w_y * (gamma * (1-p_y)^(gamma-1) * ln(p_y) - (1-p_y)^gamma / p_y)
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    batch = labels.shape[0]
    p_t = np.clip(probs[np.arange(batch), labels], PROB_FLOOR, None)
    one_minus = np.maximum(1.0 - p_t, 0.0)
    w = np.ones(batch) if class_weights is None else np.asarray(class_weights)[labels]

    if gamma == 0.0:
        g_t = -w / p_t
    else:
        # The modulating term vanishes as p_y -> 1 for every gamma > 0.
        mod = np.where(one_minus > 0.0,
                       gamma * one_minus ** (gamma - 1.0) * np.log(p_t), 0.0)
        g_t = w * (mod - one_minus ** gamma / p_t)

    grad = np.zeros_like(probs)
    grad[np.arange(batch), labels] = g_t
    return grad


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats; symmetric and bounded by ln 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise StructuralError(f"shape mismatch: {p.shape} vs {q.shape}")
    m = np.clip((p + q) / 2.0, PROB_FLOOR, None)
    kl_pm = np.sum(np.where(p > 0, p * np.log(np.clip(p, PROB_FLOOR, None) / m), 0.0))
    kl_qm = np.sum(np.where(q > 0, q * np.log(np.clip(q, PROB_FLOOR, None) / m), 0.0))
    return float(0.5 * kl_pm + 0.5 * kl_qm)


def _pairwise_js_rows(probs: np.ndarray, ordered_pairs: bool) -> np.ndarray:
    """Per-sample pairwise Jensen-Shannon sums for (n_models, batch, n_classes)."""
    n_models = probs.shape[0]
    total = np.zeros(probs.shape[1])
    for i in range(n_models):
        for j in range(i + 1, n_models):
            p, q = probs[i], probs[j]
            m = np.clip((p + q) / 2.0, PROB_FLOOR, None)
            kl_pm = np.sum(np.where(p > 0, p * np.log(np.clip(p, PROB_FLOOR, None) / m), 0.0),
                           axis=-1)
            kl_qm = np.sum(np.where(q > 0, q * np.log(np.clip(q, PROB_FLOOR, None) / m), 0.0),
                           axis=-1)
            total += 0.5 * kl_pm + 0.5 * kl_qm
    return 2.0 * total if ordered_pairs else total


def pairwise_js_sum(probs: np.ndarray, ordered_pairs: bool = True) -> float:
    """Sum of Jensen-Shannon divergences over model pairs for one sample.

    ``probs`` is (n_models, n_classes). With ``ordered_pairs`` each pair is
    counted in both directions, doubling the unordered sum.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise StructuralError(f"expected (n_models, n_classes) probs, got {probs.shape}")
    return float(_pairwise_js_rows(probs[:, None, :], ordered_pairs)[0])


def softmax_batch(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis of an arbitrary-rank array."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_batch(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) along the last axis, with 0*ln(0) := 0."""
    logp = np.log(np.clip(probs, PROB_FLOOR, None))
    return -np.sum(np.where(probs > 0, probs * logp, 0.0), axis=-1)


def _fuse_probs(probs: np.ndarray, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    scores = -entropy_batch(probs) / temperature
    scores -= scores.max(axis=0, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=0, keepdims=True)
    fused = np.einsum("mb,mbc->bc", weights, probs)
    return weights, fused


def fused_from_logits(logits: np.ndarray, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Entropy-weighted mixture for a whole batch of model logits.

    ``logits`` is (n_models, batch, n_classes); returns the mixture weights
    (n_models, batch) and the fused distributions (batch, n_classes).
    """
    probs = softmax_batch(np.asarray(logits, dtype=np.float64))
    return _fuse_probs(probs, temperature)


def total_loss(logits: np.ndarray, labels: np.ndarray, config: LossConfig,
               hard_flags: np.ndarray | None = None) -> LossBreakdown:
    """Evaluate the joint objective and its gradient with respect to logits.

    The objective is::

        sum_i mean_b focal(P_i[b], y[b])
        + lambda_fused     * mean_b focal(fused[b], y[b])
        + lambda_diversity * mean_{hard b} ( -sum_{i != j} JS(P_i[b] || P_j[b]) )

    where ``fused`` is the entropy-weighted mixture of the per-model
    distributions. When no sample is hard the diversity term is zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 3:
        raise StructuralError(f"expected (n_models, batch, n_classes) logits, got {logits.shape}")
    n_models, batch, n_classes = logits.shape
    if n_models < 1 or batch < 1 or n_classes < 2:
        raise StructuralError(f"degenerate logits shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise StructuralError("non-finite logit")
    if labels.shape != (batch,) or labels.min() < 0 or labels.max() >= n_classes:
        raise StructuralError("labels out of range or wrong shape")
    if hard_flags is None:
        hard_flags = np.zeros(batch, dtype=bool)
    hard_flags = np.asarray(hard_flags, dtype=bool)
    if hard_flags.shape != (batch,):
        raise StructuralError("hard_flags shape mismatch")
    cw = config.class_weights
    if cw is not None and cw.shape[0] != n_classes:
        raise StructuralError(
            f"class_weights has {cw.shape[0]} entries for {n_classes} classes")

    # ---- forward -----------------------------------------------------
    probs = softmax_batch(logits)                        # (M, B, C)
    weights, fused = _fuse_probs(probs, config.temperature)
    tiled_labels = np.tile(labels, n_models)

    per_model = focal_loss(probs.reshape(-1, n_classes), tiled_labels,
                           config.gamma, cw).reshape(n_models, batch).mean(axis=1)
    fused_focal = float(focal_loss(fused, labels, config.gamma, cw).mean())

    hard_idx = np.flatnonzero(hard_flags)
    hard_count = int(hard_idx.shape[0])
    if hard_count:
        js_sums = _pairwise_js_rows(probs[:, hard_idx, :], config.ordered_pairs)
        diversity = float(np.mean(-js_sums))
    else:
        diversity = 0.0

    total = float(per_model.sum()
                  + config.lambda_fused * fused_focal
                  + config.lambda_diversity * diversity)

    # ---- backward: gradient with respect to probs --------------------
    grad_probs = focal_loss_grad(probs.reshape(-1, n_classes), tiled_labels,
                                 config.gamma, cw).reshape(probs.shape) / batch

    diversity_grad = hard_count and config.lambda_diversity > 0.0 and n_models > 1
    logp = (np.log(np.clip(probs, PROB_FLOOR, None))
            if config.grad_through_weights or diversity_grad else None)

    # Fused focal term: chain through the mixture and, optionally, through
    # the entropy-derived weights.
    g_fused = config.lambda_fused * focal_loss_grad(fused, labels, config.gamma, cw) / batch
    grad_probs += weights[:, :, None] * g_fused[None, :, :]
    if config.grad_through_weights:
        # d(weight_i)/d(score_j) is the softmax Jacobian; scores depend on
        # each model's entropy, whose gradient in probs is -(ln p + 1).
        b_vals = np.einsum("bc,mbc->mb", g_fused, probs)            # (M, B)
        mean_b = np.sum(weights * b_vals, axis=0, keepdims=True)    # (1, B)
        k_vals = (-weights / config.temperature) * (b_vals - mean_b)
        grad_probs += k_vals[:, :, None] * -(logp + 1.0)

    # Diversity term on hard samples. For a sum over ordered pairs the two
    # directions of each pair contribute ln(p_i / m_ij) together.
    if diversity_grad:
        scale = config.lambda_diversity / hard_count
        pair_factor = 1.0 if config.ordered_pairs else 0.5
        hp = probs[:, hard_idx, :]
        hlogp = logp[:, hard_idx, :]
        acc = np.zeros_like(hp)
        for i in range(n_models):
            for j in range(i + 1, n_models):
                log_m = np.log(np.clip((hp[i] + hp[j]) / 2.0, PROB_FLOOR, None))
                acc[i] += hlogp[i] - log_m
                acc[j] += hlogp[j] - log_m
        grad_probs[:, hard_idx, :] += -scale * pair_factor * acc

    # ---- softmax backprop to logits -----------------------------------
    dot = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    grad_logits = probs * (grad_probs - dot)

    return LossBreakdown(
        per_model=per_model,
        fused_focal=fused_focal,
        diversity=diversity,
        total=total,
        grad_logits=grad_logits,
        weights=weights,
        fused=fused,
        hard_count=hard_count,
    )
