"""Straight-line reference implementations for the acceptance gate.

Everything in this module is rewritten directly from the mathematical
definitions using plain numpy and Python loops — nothing is imported from
the package under test — so pipeline outputs can be compared against an
independent derivation.
"""

import math

import numpy as np


def ref_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def ref_entropy(probs):
    total = 0.0
    for p in np.asarray(probs, dtype=np.float64):
        if p > 0.0:
            total -= p * math.log(p)
    return total


def ref_weights(entropies, temperature):
    scores = [-h / temperature for h in entropies]
    shift = max(scores)
    exps = [math.exp(s - shift) for s in scores]
    norm = sum(exps)
    return np.array([e / norm for e in exps])


def ref_fused(prob_rows, weights):
    fused = np.zeros_like(prob_rows[0])
    for w, row in zip(weights, prob_rows):
        fused = fused + w * row
    return fused


def ref_top_k(fused, k):
    order = sorted(range(len(fused)), key=lambda i: (-fused[i], i))
    return order[:k]


def ref_confidence_gap(fused, candidates):
    confidence = float(fused[candidates[0]])
    if len(candidates) < 2:
        return confidence, confidence
    return confidence, confidence - float(fused[candidates[1]])


def ref_route(confidence, gap, tau_conf, tau_gap):
    return confidence < tau_conf or gap < tau_gap


def ref_mock_choice(attrs, candidates, supports, contradicts, lambda_pen):
    """Attribute-overlap arbitration: argmax of match − λ·conflict,
    ties keeping the earlier candidate."""
    attrs = set(attrs)
    best_label = candidates[0]
    best_score = None
    for label in candidates:
        support = set(supports[label])
        conflict = len(attrs & set(contradicts[label]))
        match = len(attrs & support) / max(1, len(support))
        score = match - lambda_pen * conflict
        if best_score is None or score > best_score:
            best_label = label
            best_score = score
    return best_label


def ref_pipeline_label(sample_logits, temperature, k, tau_conf, tau_gap,
                       attrs, supports, contradicts, lambda_pen):
    """Full single-sample chain: per-model softmax/entropy, entropy
    weighting, mixture, top-k, dual-threshold routing, and (for routed
    samples) attribute-overlap arbitration. Returns everything the
    pipeline is expected to report."""
    prob_rows = [ref_softmax(row) for row in sample_logits]
    entropies = [ref_entropy(p) for p in prob_rows]
    weights = ref_weights(entropies, temperature)
    fused = ref_fused(prob_rows, weights)
    candidates = ref_top_k(fused, k)
    confidence, gap = ref_confidence_gap(fused, candidates)
    routed = ref_route(confidence, gap, tau_conf, tau_gap)
    if routed:
        label = ref_mock_choice(attrs, candidates, supports, contradicts,
                                lambda_pen)
    else:
        label = candidates[0]
    return {
        "weights": weights,
        "fused": fused,
        "candidates": candidates,
        "confidence": confidence,
        "gap": gap,
        "routed": routed,
        "label": label,
    }
