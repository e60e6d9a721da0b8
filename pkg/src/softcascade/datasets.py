"""Dataset manifests and long-tail statistics.

A manifest lists every sample with its label, split, and an optional
payload reference. It can be loaded from JSON or synthesized from an
ImageFolder-style directory tree (``split/class_name/file``), with class
indices assigned by lexicographic class-name order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StructuralError

VALID_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    label: int
    split: str
    payload: str | None = None


@dataclass
class DatasetManifest:
    """Validated sample listing plus per-class totals across all splits."""

    class_names: list[str]
    entries: list[ManifestEntry]
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.class_names:
            raise StructuralError("manifest declares no classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise StructuralError("duplicate class names")
        n_classes = len(self.class_names)
        seen_ids = set()
        counts = np.zeros(n_classes, dtype=np.int64)
        for entry in self.entries:
            if entry.split not in VALID_SPLITS:
                raise StructuralError(
                    f"{entry.sample_id}: unknown split {entry.split!r}")
            if not (0 <= entry.label < n_classes):
                raise StructuralError(
                    f"{entry.sample_id}: label {entry.label} outside [0, {n_classes})")
            if entry.sample_id in seen_ids:
                raise StructuralError(f"duplicate sample id {entry.sample_id!r}")
            seen_ids.add(entry.sample_id)
            counts[entry.label] += 1
        self.class_counts = counts

    def __len__(self) -> int:
        return len(self.entries)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in VALID_SPLITS:
            raise StructuralError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def split_sizes(self) -> dict[str, int]:
        sizes = {s: 0 for s in VALID_SPLITS}
        for entry in self.entries:
            sizes[entry.split] += 1
        return sizes


def load_manifest(path) -> DatasetManifest:
    """Read a JSON manifest: ``{"class_names": [...], "entries": [...]}``."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise StructuralError(f"{path}: bad manifest JSON: {exc}") from exc
    if not isinstance(raw, dict) or "class_names" not in raw or "entries" not in raw:
        raise StructuralError(f"{path}: manifest needs class_names and entries")
    entries = []
    for i, item in enumerate(raw["entries"]):
        try:
            entries.append(ManifestEntry(
                sample_id=item["sample_id"], label=int(item["label"]),
                split=item["split"], payload=item.get("payload")))
        except (KeyError, TypeError, ValueError) as exc:
            raise StructuralError(f"{path}: bad entry #{i}: {exc}") from exc
    return DatasetManifest(class_names=list(raw["class_names"]), entries=entries)


def save_manifest(path, manifest: DatasetManifest) -> None:
    """Write the JSON counterpart of :func:`load_manifest`."""
    payload = {
        "class_names": manifest.class_names,
        "entries": [
            {"sample_id": e.sample_id, "label": e.label, "split": e.split,
             **({"payload": e.payload} if e.payload is not None else {})}
            for e in manifest.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def scan_image_folder(root) -> DatasetManifest:
    """Build a manifest from a ``split/class_name/file`` directory tree.

    Class names are the union of class directories across splits, sorted
    lexicographically; that sort order assigns the label indices. Sample
    ids are ``split/class_name/filename`` and payloads are absolute paths.
    """
    root = Path(root)
    if not root.is_dir():
        raise StructuralError(f"{root}: not a directory")
    split_dirs = [root / s for s in VALID_SPLITS if (root / s).is_dir()]
    if not split_dirs:
        raise StructuralError(f"{root}: no train/val/test subdirectories")
    names = sorted({d.name for sd in split_dirs for d in sd.iterdir() if d.is_dir()})
    if not names:
        raise StructuralError(f"{root}: no class directories")
    index = {name: i for i, name in enumerate(names)}
    entries = []
    for split_dir in split_dirs:
        for class_dir in sorted(d for d in split_dir.iterdir() if d.is_dir()):
            for file in sorted(f for f in class_dir.iterdir() if f.is_file()):
                entries.append(ManifestEntry(
                    sample_id=f"{split_dir.name}/{class_dir.name}/{file.name}",
                    label=index[class_dir.name],
                    split=split_dir.name,
                    payload=str(file)))
    return DatasetManifest(class_names=names, entries=entries)


@dataclass
class DatasetStats:
    """Long-tail summary of a manifest."""

    total_samples: int
    split_sizes: dict[str, int]
    n_classes: int
    max_count: int
    max_class: str
    min_count: int
    min_class: str
    mean_count: float
    imbalance_ratio: float
    head: list[tuple[str, int]]          # 20 most populous classes, descending
    tail: list[tuple[str, int]]          # 20 least populous classes, ascending
    cumulative_share: np.ndarray         # share covered by the k largest classes


def dataset_stats(manifest: DatasetManifest, head_tail_size: int = 20) -> DatasetStats:
    """Compute count extremes, imbalance, and coverage curves for a manifest."""
    if len(manifest) == 0:
        raise StructuralError("manifest has no entries")
    counts = manifest.class_counts
    names = manifest.class_names
    nonzero = counts[counts > 0]
    # Deterministic ordering: by count, then by name for ties.
    by_count_desc = sorted(range(len(names)), key=lambda i: (-counts[i], names[i]))
    by_count_asc = sorted(range(len(names)), key=lambda i: (counts[i], names[i]))
    max_idx, min_idx = by_count_desc[0], by_count_asc[0]
    sorted_desc = counts[by_count_desc].astype(np.float64)
    return DatasetStats(
        total_samples=int(counts.sum()),
        split_sizes=manifest.split_sizes(),
        n_classes=len(names),
        max_count=int(counts[max_idx]),
        max_class=names[max_idx],
        min_count=int(counts[min_idx]),
        min_class=names[min_idx],
        mean_count=float(counts.sum() / len(names)),
        imbalance_ratio=float(counts.max() / nonzero.min()),
        head=[(names[i], int(counts[i])) for i in by_count_desc[:head_tail_size]],
        tail=[(names[i], int(counts[i])) for i in by_count_asc[:head_tail_size]],
        cumulative_share=np.cumsum(sorted_desc) / counts.sum(),
    )
