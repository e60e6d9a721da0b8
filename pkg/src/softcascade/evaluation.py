"""Evaluation harness: pipeline runs, metrics, trigger sweeps, latency model.

Evaluation produces one :class:`EvalRecord` per sample, rich enough that
threshold sweeps can be re-applied offline without touching any backend.
Records serialize to versioned JSONL; metrics render to JSON and a plain
text table; sweeps render to CSV and an optional SVG plot.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .arbiter import ArbitrationRequest, DescriptorDB, mock_arbitrate
from .backends import BackendSet, SampleRef
from .datasets import DatasetManifest
from .errors import BackendError, ConfigError, StructuralError
from .fusion import EnsemblePrediction, FusionConfig, RouterConfig, top_k
from .pipeline import classify_sample

RECORD_SCHEMA_VERSION = 1


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------

@dataclass
class EvalRecord:
    """One evaluated sample: prediction, final decision, and ground truth."""

    sample_id: str
    prediction: EnsemblePrediction
    final_label: int
    arbitrated: bool
    true_label: int
    latencies: dict[str, float]

    def __post_init__(self):
        if self.arbitrated and not self.prediction.route:
            raise StructuralError(
                f"{self.sample_id}: arbitrated without being routed")


def write_records_jsonl(path, records: list[EvalRecord]) -> None:
    """Serialize records, one JSON object per line, schema-versioned."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "version": RECORD_SCHEMA_VERSION,
                "sample_id": r.sample_id,
                "true_label": r.true_label,
                "final_label": r.final_label,
                "arbitrated": r.arbitrated,
                "route": r.prediction.route,
                "confidence": r.prediction.confidence,
                "gap": r.prediction.gap,
                "candidates": list(r.prediction.candidates),
                "weights": r.prediction.weights.tolist(),
                "fused": r.prediction.fused.tolist(),
                "model_ids": list(r.prediction.model_ids),
                "latencies": r.latencies,
            }) + "\n")


def read_records_jsonl(path) -> list[EvalRecord]:
    """Read back a record log written by :func:`write_records_jsonl`."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StructuralError(f"{path}:{lineno}: bad record: {exc}") from exc
            if obj.get("version") != RECORD_SCHEMA_VERSION:
                raise StructuralError(
                    f"{path}:{lineno}: unsupported record version {obj.get('version')}")
            prediction = EnsemblePrediction(
                weights=np.asarray(obj["weights"], dtype=np.float64),
                fused=np.asarray(obj["fused"], dtype=np.float64),
                candidates=[int(c) for c in obj["candidates"]],
                confidence=float(obj["confidence"]),
                gap=float(obj["gap"]),
                route=bool(obj["route"]),
                model_ids=list(obj.get("model_ids", [])),
            )
            records.append(EvalRecord(
                sample_id=obj["sample_id"], prediction=prediction,
                final_label=int(obj["final_label"]),
                arbitrated=bool(obj["arbitrated"]),
                true_label=int(obj["true_label"]),
                latencies=dict(obj.get("latencies", {}))))
    return records


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Aggregate quality and routing measurements over a record set."""

    top1: float
    top5: float
    macro_f1: float
    trigger_rate: float
    per_class_f1: np.ndarray          # NaN marks classes excluded from the mean
    support: np.ndarray               # ground-truth count per class
    true_positives: np.ndarray
    false_positives: np.ndarray
    false_negatives: np.ndarray
    n_records: int

    def to_json_dict(self) -> dict:
        return {
            "top1": self.top1,
            "top5": self.top5,
            "macro_f1": self.macro_f1,
            "trigger_rate": self.trigger_rate,
            "n_records": self.n_records,
            "per_class_f1": [None if math.isnan(v) else v for v in self.per_class_f1],
            "support": self.support.tolist(),
        }

    def format_table(self) -> str:
        rows = [
            ("Samples", f"{self.n_records}"),
            ("Top-1 accuracy", f"{self.top1:.4f}"),
            ("Top-5 accuracy", f"{self.top5:.4f}"),
            ("Macro-F1", f"{self.macro_f1:.4f}"),
            ("Trigger rate", f"{self.trigger_rate:.4f}"),
        ]
        width = max(len(k) for k, _ in rows)
        lines = ["=" * (width + 12)]
        lines += [f"{k:<{width}}  {v:>10}" for k, v in rows]
        lines.append("=" * (width + 12))
        return "\n".join(lines)


def metrics(records: list[EvalRecord], n_classes: int) -> MetricsReport:
    """Top-1/Top-5/macro-F1 and trigger rate over evaluated records.

    Top-1 scores the final (possibly arbitrated) labels. Top-5 ranks the
    fused distribution only, so arbitration cannot change it. Macro-F1
    averages per-class F1 over classes that occur in the records (as truth
    or prediction); one-sided classes score 0.
    """
    if not records:
        raise ConfigError("metrics over an empty record list")
    n = len(records)
    k = min(5, n_classes)
    top1_hits = 0
    top5_hits = 0
    routed = 0
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    support = np.zeros(n_classes, dtype=np.int64)
    for r in records:
        if not (0 <= r.true_label < n_classes and 0 <= r.final_label < n_classes):
            raise StructuralError(f"{r.sample_id}: label outside class space")
        support[r.true_label] += 1
        routed += r.prediction.route
        if r.final_label == r.true_label:
            top1_hits += 1
            tp[r.true_label] += 1
        else:
            fp[r.final_label] += 1
            fn[r.true_label] += 1
        if r.true_label in top_k(r.prediction.fused, k):
            top5_hits += 1

    per_class = np.full(n_classes, np.nan)
    occurring = (tp + fp + fn) > 0
    per_class[occurring] = 2 * tp[occurring] / (2 * tp + fp + fn)[occurring]
    macro = float(np.nanmean(per_class)) if occurring.any() else 0.0

    return MetricsReport(
        top1=top1_hits / n,
        top5=top5_hits / n,
        macro_f1=macro,
        trigger_rate=routed / n,
        per_class_f1=per_class,
        support=support,
        true_positives=tp,
        false_positives=fp,
        false_negatives=fn,
        n_records=n,
    )


# --------------------------------------------------------------------------
# End-to-end pipeline evaluation
# --------------------------------------------------------------------------

def _sample_ref(entry) -> SampleRef:
    if entry.payload:
        return SampleRef(sample_id=entry.sample_id, image_path=entry.payload)
    return SampleRef(sample_id=entry.sample_id)


def run_pipeline(manifest: DatasetManifest, backends: BackendSet,
                 fusion: FusionConfig, router: RouterConfig, arbiter,
                 split: str, descriptors: DescriptorDB | None = None,
                 prompt_version: str = "v1", workers: int = 1,
                 strict: bool = True) -> list[EvalRecord]:
    """Classify every sample of a split and pair outcomes with ground truth.

    Samples may be processed concurrently; the output is sorted by
    sample_id so results are order-deterministic either way. In strict
    mode a backend failure aborts the run naming the offending sample.
    """
    entries = manifest.split_entries(split)

    def one(entry) -> EvalRecord:
        try:
            outcome = classify_sample(
                backends, _sample_ref(entry), fusion, router,
                arbiter=arbiter, descriptors=descriptors,
                prompt_version=prompt_version, strict=strict)
        except BackendError as exc:
            raise BackendError(f"sample {entry.sample_id!r}: {exc}") from exc
        return EvalRecord(
            sample_id=entry.sample_id,
            prediction=outcome.prediction,
            final_label=outcome.final_label,
            arbitrated=outcome.arbitration is not None,
            true_label=entry.label,
            latencies=outcome.latencies,
        )

    if workers <= 1:
        records = [one(e) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, entries))
    records.sort(key=lambda r: r.sample_id)
    return records


# --------------------------------------------------------------------------
# Offline trigger sweeps
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    tau_conf: float
    tau_gap: float
    trigger_rate: float
    top1: float


@dataclass
class SweepResult:
    points: list[SweepPoint]
    operating_point: SweepPoint


def make_mock_sweep_arbiter(descriptors: DescriptorDB, attributes_for,
                            lambda_pen: float = 0.5):
    """Adapt the deterministic overlap arbiter to the sweep interface."""

    def model(record: EvalRecord) -> int:
        request = ArbitrationRequest(
            sample=SampleRef(sample_id=record.sample_id),
            candidates=list(record.prediction.candidates),
            descriptors=descriptors.entries_for(record.prediction.candidates))
        return mock_arbitrate(attributes_for(record.sample_id), request, lambda_pen)

    return model


def sweep_trigger(records: list[EvalRecord], grid: list[RouterConfig],
                  arbiter_model="perfect", seed: int = 0) -> SweepResult:
    """Re-apply router thresholds offline and score each operating point.

    ``arbiter_model`` is one of:

    * ``"perfect"`` — a routed sample becomes correct iff its true label is
      among the candidates (upper bound of arbitration);
    * ``("fixed", p)`` — with probability ``p`` behaves like the perfect
      model, otherwise picks the first wrong candidate (each record's coin
      is drawn once, so the grid sees consistent behavior);
    * a callable ``record -> label`` for custom (e.g. overlap-mock) models.

    The operating point is the highest-top1 point, ties broken by lower
    trigger rate.
    """
    if not grid:
        raise ConfigError("empty threshold grid")
    if not records:
        raise ConfigError("sweep over an empty record list")

    coins = np.random.default_rng(seed).random(len(records))

    def routed_label(record: EvalRecord, coin: float) -> int:
        candidates = record.prediction.candidates
        if callable(arbiter_model):
            return arbiter_model(record)
        if arbiter_model == "perfect":
            return (record.true_label if record.true_label in candidates
                    else candidates[0])
        kind, p = arbiter_model
        if kind != "fixed":
            raise ConfigError(f"unknown arbiter model {arbiter_model!r}")
        if coin < p:
            return (record.true_label if record.true_label in candidates
                    else candidates[0])
        wrong = [c for c in candidates if c != record.true_label]
        return wrong[0] if wrong else candidates[0]

    points = []
    for cfg in grid:
        routed = 0
        correct = 0
        for record, coin in zip(records, coins):
            route = (record.prediction.confidence < cfg.tau_conf
                     or record.prediction.gap < cfg.tau_gap)
            if route:
                routed += 1
                label = routed_label(record, coin)
            else:
                label = record.prediction.candidates[0]
            correct += label == record.true_label
        points.append(SweepPoint(
            tau_conf=cfg.tau_conf, tau_gap=cfg.tau_gap,
            trigger_rate=routed / len(records), top1=correct / len(records)))

    best = min(points, key=lambda p: (-p.top1, p.trigger_rate, p.tau_conf, p.tau_gap))
    return SweepResult(points=points, operating_point=best)


def write_sweep_csv(path, result: SweepResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tau_conf,tau_gap,trigger_rate,top1\n")
        for p in result.points:
            fh.write(f"{p.tau_conf:.10g},{p.tau_gap:.10g},"
                     f"{p.trigger_rate:.10g},{p.top1:.10g}\n")


def write_sweep_svg(path, result: SweepResult) -> None:
    """Optional line plot of top-1 against trigger rate (needs matplotlib)."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ConfigError("SVG output requires matplotlib") from exc
    pts = sorted(result.points, key=lambda p: (p.trigger_rate, p.top1))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([p.trigger_rate for p in pts], [p.top1 for p in pts],
            marker="o", linewidth=1)
    op = result.operating_point
    ax.scatter([op.trigger_rate], [op.top1], color="red", zorder=3,
               label=f"operating point ({op.trigger_rate:.2f}, {op.top1:.4f})")
    ax.set_xlabel("trigger rate")
    ax.set_ylabel("top-1 accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# --------------------------------------------------------------------------
# Latency model
# --------------------------------------------------------------------------

def expected_latency(t_cnn: float, t_llm: float, trigger_rate: float) -> float:
    """Serial latency model: four backbone passes plus amortized arbitration."""
    if t_cnn < 0 or t_llm < 0:
        raise ConfigError("latencies must be non-negative")
    if not (0.0 <= trigger_rate <= 1.0):
        raise ConfigError(f"trigger_rate must be in [0, 1], got {trigger_rate}")
    return 4.0 * t_cnn + trigger_rate * t_llm


def expected_latency_parallel(t_cnn_each: list[float], t_llm: float,
                              trigger_rate: float) -> float:
    """Parallel variant: the slowest backbone gates the ensemble stage."""
    if not t_cnn_each:
        raise ConfigError("need at least one backbone latency")
    if min(t_cnn_each) < 0 or t_llm < 0:
        raise ConfigError("latencies must be non-negative")
    if not (0.0 <= trigger_rate <= 1.0):
        raise ConfigError(f"trigger_rate must be in [0, 1], got {trigger_rate}")
    return max(t_cnn_each) + trigger_rate * t_llm
