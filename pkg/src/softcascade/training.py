"""Desk-scale training loop over synthetic linear-softmax backbones.

Each backbone maps inputs through a fixed random projection (standing in
for a frozen feature extractor) followed by a trainable linear classifier.
The loop exercises the full robustness recipe: NaN-aware batch skipping,
tolerant gradient clipping, gradient accumulation, decoupled-weight-decay
Adam, per-step EMA shadows, and cosine-annealed learning rates with warm
restarts. Everything is deterministic given the config seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, StructuralError, TrainingCollapseError
from .fusion import RouterConfig
from .losses import LossConfig, fused_from_logits, total_loss

CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------

@dataclass
class ToyBackbone:
    """A frozen random feature map followed by a trainable linear classifier."""

    model_id: str
    projection: np.ndarray     # (d_in, d_feat), frozen by default
    weights: np.ndarray        # (d_feat, n_classes)
    bias: np.ndarray           # (n_classes,)
    freeze_mask: dict[str, bool] = field(default_factory=lambda: {
        "projection": True, "weights": False, "bias": False,
    })

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a batch of input rows."""
        return (x @ self.projection) @ self.weights + self.bias

    def param_groups(self) -> dict[str, np.ndarray]:
        return {"projection": self.projection, "weights": self.weights,
                "bias": self.bias}


@dataclass(frozen=True)
class SchedulerConfig:
    """Cosine-annealing schedule with warm restarts."""

    eta_max: float
    eta_min: float
    t0_epochs: int = 10
    t_mult: int = 2

    def __post_init__(self):
        if self.eta_min > self.eta_max:
            raise ConfigError(f"eta_min {self.eta_min} exceeds eta_max {self.eta_max}")
        if self.t0_epochs < 1 or self.t_mult < 1:
            raise ConfigError("t0_epochs and t_mult must be >= 1")


@dataclass
class TrainConfig:
    """Hyperparameters of the toy training loop.

    ``scheduler`` defaults to warm restarts between ``lr`` and ``0.01 * lr``
    over an initial cycle of 10 epochs, doubling each restart.
    """

    epochs: int
    lr: float = 5e-5
    weight_decay: float = 0.01
    batch_size: int = 8
    accum_steps: int = 1
    clip_max_norm: float = 1.0
    ema_decay: float = 0.999
    scheduler: SchedulerConfig | None = None
    seed: int = 0
    router: RouterConfig = RouterConfig()
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ConfigError("batch_size and accum_steps must be >= 1")
        if self.clip_max_norm <= 0:
            raise ConfigError(f"clip_max_norm must be > 0, got {self.clip_max_norm}")
        if not (0.0 < self.ema_decay < 1.0):
            raise ConfigError(f"ema_decay must be in (0, 1), got {self.ema_decay}")
        if self.scheduler is None:
            self.scheduler = SchedulerConfig(eta_max=self.lr, eta_min=0.01 * self.lr)


@dataclass
class ToyDataset:
    """Feature rows with integer labels."""

    features: np.ndarray   # (n_samples, d_in)
    labels: np.ndarray     # (n_samples,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise StructuralError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise StructuralError("feature/label row count mismatch")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class TrainReport:
    """Everything the loop measured, plus final/best parameter snapshots."""

    epoch_losses: list[dict]            # per epoch: total/per_model_sum/fused_focal/diversity
    lr_trace: list[float]               # learning rate used in each epoch
    skipped_per_epoch: list[int]
    skipped_batch_count: int
    optimizer_steps: int
    train_top1: float                   # fused top-1 on the training set, final params
    ema_shadows: dict[str, np.ndarray]
    final_params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray] | None = None
    best_epoch: int | None = None
    best_val_top1: float | None = None


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------

def make_toy_ensemble(seed: int, n_models: int = 4, d_in: int = 2,
                      d_feat: int = 16, n_classes: int = 5) -> list[ToyBackbone]:
    """Deterministic ensemble with a distinct random projection per model."""
    if min(n_models, d_in, d_feat, n_classes) < 1:
        raise ConfigError("all ensemble dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    ensemble = []
    for i in range(n_models):
        projection = rng.normal(scale=1.0 / math.sqrt(d_in), size=(d_in, d_feat))
        weights = rng.normal(scale=0.01, size=(d_feat, n_classes))
        bias = np.zeros(n_classes)
        ensemble.append(ToyBackbone(model_id=f"m{i}", projection=projection,
                                    weights=weights, bias=bias))
    return ensemble


def make_blobs(seed: int, n_samples: int = 500, n_classes: int = 5,
               d_in: int = 2, center_scale: float = 10.0,
               noise: float = 1.0) -> ToyDataset:
    """Gaussian class blobs with every class represented (round-robin labels)."""
    if n_samples < n_classes:
        raise ConfigError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=center_scale, size=(n_classes, d_in))
    labels = np.arange(n_samples) % n_classes
    labels = rng.permutation(labels)
    features = centers[labels] + rng.normal(scale=noise, size=(n_samples, d_in))
    return ToyDataset(features=features, labels=labels)


def ema_update(shadow: dict[str, np.ndarray], current: dict[str, np.ndarray],
               decay: float) -> dict[str, np.ndarray]:
    """Elementwise ``shadow <- decay * shadow + (1 - decay) * current``."""
    if not (0.0 < decay < 1.0):
        raise ConfigError(f"decay must be in (0, 1), got {decay}")
    if shadow.keys() != current.keys():
        raise StructuralError("shadow/current key sets differ")
    out = {}
    for name, s in shadow.items():
        c = current[name]
        if s.shape != c.shape:
            raise StructuralError(f"shape mismatch for {name}: {s.shape} vs {c.shape}")
        out[name] = decay * s + (1.0 - decay) * c
    return out


def clip_gradients_tolerant(grads, max_norm: float):
    """Zero non-finite entries, then rescale the global L2 norm to ``max_norm``.

    Accepts either a dict of named gradient arrays or a single array, and
    mutates in place. Returns ``(grads, clipped, nonfinite_zeroed)``.
    """
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be > 0, got {max_norm}")
    arrays = list(grads.values()) if isinstance(grads, dict) else [np.asarray(grads)]
    nonfinite = 0
    sq_sum = 0.0
    for a in arrays:
        bad = ~np.isfinite(a)
        if bad.any():
            nonfinite += int(bad.sum())
            a[bad] = 0.0
        sq_sum += float(np.sum(a * a))
    norm = math.sqrt(sq_sum)
    clipped = norm > max_norm
    if clipped:
        scale = max_norm / norm
        for a in arrays:
            a *= scale
    if not isinstance(grads, dict):
        grads = arrays[0]
    return grads, clipped, nonfinite


def cosine_warm_restarts(step_in_cycle: int, cycle_len: int,
                         eta_min: float, eta_max: float) -> float:
    """Closed-form annealed rate at a position inside one restart cycle."""
    if cycle_len < 1:
        raise ConfigError(f"cycle_len must be >= 1, got {cycle_len}")
    if not (0 <= step_in_cycle <= cycle_len):
        raise ConfigError(
            f"step_in_cycle {step_in_cycle} outside [0, {cycle_len}]")
    return eta_min + 0.5 * (eta_max - eta_min) * (
        1.0 + math.cos(math.pi * step_in_cycle / cycle_len))


def schedule_position(epoch: int, t0_epochs: int, t_mult: int) -> tuple[int, int]:
    """Map a global epoch index to (step_in_cycle, cycle_len) under restarts."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    cycle_len = t0_epochs
    remaining = epoch
    while remaining >= cycle_len:
        remaining -= cycle_len
        cycle_len *= t_mult
    return remaining, cycle_len


def epoch_lr(epoch: int, sched: SchedulerConfig) -> float:
    """Learning rate for a given epoch under the warm-restart schedule."""
    step, cycle_len = schedule_position(epoch, sched.t0_epochs, sched.t_mult)
    return cosine_warm_restarts(step, cycle_len, sched.eta_min, sched.eta_max)


class AdamW:
    """Adam with decoupled weight decay over a dict of named parameters.

    Parameters are held by reference and updated in place; the learning
    rate is supplied per step so a schedule can drive it.
    """

    def __init__(self, params: dict[str, np.ndarray], weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= lr * (update + self.weight_decay * p)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def _snapshot(ensemble: list[ToyBackbone]) -> dict[str, np.ndarray]:
    return {f"{bb.model_id}/{group}": arr.copy()
            for bb in ensemble for group, arr in bb.param_groups().items()}


def _trainable_params(ensemble: list[ToyBackbone]) -> dict[str, np.ndarray]:
    return {f"{bb.model_id}/{group}": arr
            for bb in ensemble for group, arr in bb.param_groups().items()
            if not bb.freeze_mask.get(group, False)}


def _ensemble_logits(ensemble: list[ToyBackbone], x: np.ndarray) -> np.ndarray:
    return np.stack([bb.forward(x) for bb in ensemble])


def fused_top1(ensemble: list[ToyBackbone], dataset: ToyDataset,
               temperature: float = 1.0) -> float:
    """Top-1 accuracy of the entropy-weighted fused prediction."""
    logits = _ensemble_logits(ensemble, dataset.features)
    _, fused = fused_from_logits(logits, temperature)
    return float(np.mean(fused.argmax(axis=1) == dataset.labels))


def train(dataset: ToyDataset, ensemble: list[ToyBackbone], config: TrainConfig,
          val_dataset: ToyDataset | None = None,
          fault_injector=None) -> TrainReport:
    """Run the full robust fine-tuning loop over the ensemble, in place.

    Per batch: forward all backbones, fuse, mark hard samples with the
    router, evaluate the joint objective, skip the batch if the loss is
    non-finite, otherwise accumulate gradients (pre-divided by
    ``accum_steps``). Every ``accum_steps`` accumulated batches: tolerant
    clip, AdamW step at the epoch's annealed rate, EMA update. A trailing
    partial accumulation at epoch end is flushed the same way.

    ``fault_injector(epoch, batch_idx) -> bool`` is a test seam that
    poisons a batch's loss with NaN before the finiteness check.

    The best checkpoint (by fused top-1 on ``val_dataset``) is tracked when
    a validation split is given; otherwise only the final state is reported.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if not ensemble:
        raise ConfigError("ensemble is empty")

    rng = np.random.default_rng(config.seed)
    sched = config.scheduler
    trainable = _trainable_params(ensemble)
    if not trainable and config.epochs > 0:
        raise ConfigError("no trainable parameter groups")
    optimizer = AdamW(trainable, weight_decay=config.weight_decay)
    shadows = {k: v.copy() for k, v in trainable.items()}

    n = len(dataset)
    epoch_losses: list[dict] = []
    lr_trace: list[float] = []
    skipped_per_epoch: list[int] = []
    skipped_total = 0
    steps = 0
    best_params = None
    best_epoch = None
    best_val = -1.0

    for epoch in range(config.epochs):
        lr = epoch_lr(epoch, sched)
        lr_trace.append(lr)
        order = rng.permutation(n)
        acc = {k: np.zeros_like(v) for k, v in trainable.items()}
        pending = 0
        skipped = 0
        term_sums = {"total": 0.0, "per_model_sum": 0.0,
                     "fused_focal": 0.0, "diversity": 0.0}
        kept = 0

        def apply_step():
            nonlocal pending, steps, shadows
            clip_gradients_tolerant(acc, config.clip_max_norm)
            optimizer.step(acc, lr)
            shadows = ema_update(shadows, trainable, config.ema_decay)
            for a in acc.values():
                a[:] = 0.0
            pending = 0
            steps += 1

        n_batches = math.ceil(n / config.batch_size)
        for batch_idx in range(n_batches):
            rows = order[batch_idx * config.batch_size:(batch_idx + 1) * config.batch_size]
            x, y = dataset.features[rows], dataset.labels[rows]
            logits = _ensemble_logits(ensemble, x)

            # Hard samples are the ones the router would escalate.
            _, fused = fused_from_logits(logits, config.loss.temperature)
            srt = np.sort(fused, axis=1)
            conf, gap = srt[:, -1], srt[:, -1] - srt[:, -2]
            hard = (conf < config.router.tau_conf) | (gap < config.router.tau_gap)

            out = total_loss(logits, y, config.loss, hard)
            batch_total = out.total
            if fault_injector is not None and fault_injector(epoch, batch_idx):
                batch_total = float("nan")
            if not math.isfinite(batch_total):
                skipped += 1
                continue

            kept += 1
            term_sums["total"] += out.total
            term_sums["per_model_sum"] += float(out.per_model.sum())
            term_sums["fused_focal"] += out.fused_focal
            term_sums["diversity"] += out.diversity

            scale = 1.0 / config.accum_steps
            for i, bb in enumerate(ensemble):
                g = out.grad_logits[i]
                feats = x @ bb.projection
                key = f"{bb.model_id}/weights"
                if key in acc:
                    acc[key] += scale * (feats.T @ g)
                key = f"{bb.model_id}/bias"
                if key in acc:
                    acc[key] += scale * g.sum(axis=0)
                key = f"{bb.model_id}/projection"
                if key in acc:
                    acc[key] += scale * (x.T @ (g @ bb.weights.T))
            pending += 1
            if pending == config.accum_steps:
                apply_step()

        if pending:
            apply_step()
        if kept == 0 and n_batches > 0:
            raise TrainingCollapseError(
                f"every batch in epoch {epoch} was skipped ({skipped} of {n_batches})")

        skipped_per_epoch.append(skipped)
        skipped_total += skipped
        epoch_losses.append({k: v / kept for k, v in term_sums.items()})

        if val_dataset is not None:
            val_top1 = fused_top1(ensemble, val_dataset, config.loss.temperature)
            if val_top1 > best_val:
                best_val = val_top1
                best_epoch = epoch
                best_params = _snapshot(ensemble)

    return TrainReport(
        epoch_losses=epoch_losses,
        lr_trace=lr_trace,
        skipped_per_epoch=skipped_per_epoch,
        skipped_batch_count=skipped_total,
        optimizer_steps=steps,
        train_top1=fused_top1(ensemble, dataset, config.loss.temperature),
        ema_shadows=shadows,
        final_params=_snapshot(ensemble),
        best_params=best_params,
        best_epoch=best_epoch,
        best_val_top1=None if val_dataset is None else best_val,
    )


# --------------------------------------------------------------------------
# Checkpoint and curve files
# --------------------------------------------------------------------------

def config_hash(config: TrainConfig) -> str:
    """Stable hash of a training config (arrays serialized as lists)."""

    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"unserializable {type(o)!r}")

    blob = json.dumps(asdict(config), sort_keys=True, default=default)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, params: dict[str, np.ndarray], model_ids: list[str],
                    config_digest: str = "") -> None:
    """Write parameters as a JSON header line plus raw little-endian float64 blocks."""
    names = sorted(params)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_ids": list(model_ids),
        "config_hash": config_digest,
        "arrays": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise StructuralError(f"bad checkpoint header: {exc}") from exc
        if header.get("version") != CHECKPOINT_VERSION:
            raise StructuralError(f"unsupported checkpoint version {header.get('version')}")
        params = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise StructuralError(f"truncated checkpoint block for {spec['name']}")
            params[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise StructuralError("trailing bytes after final checkpoint block")
    return params, header


def write_curves(path, report: TrainReport) -> None:
    """Emit per-epoch training curves as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "per_model_sum", "fused_focal",
                         "diversity", "lr", "skipped"])
        for epoch, terms in enumerate(report.epoch_losses):
            writer.writerow([
                epoch,
                f"{terms['total']:.10g}",
                f"{terms['per_model_sum']:.10g}",
                f"{terms['fused_focal']:.10g}",
                f"{terms['diversity']:.10g}",
                f"{report.lr_trace[epoch]:.10g}",
                report.skipped_per_epoch[epoch],
            ])


def load_params_into(ensemble: list[ToyBackbone], params: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays back into backbone parameter groups, by name."""
    for bb in ensemble:
        for group, arr in bb.param_groups().items():
            key = f"{bb.model_id}/{group}"
            if key not in params:
                raise StructuralError(f"checkpoint is missing {key}")
            if params[key].shape != arr.shape:
                raise StructuralError(f"shape mismatch for {key}")
            arr[:] = params[key]
