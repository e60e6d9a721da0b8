"""Probability sources and concurrent fan-out.

Three backend kinds produce logits for a sample: offline logit stores
(JSONL on disk), deterministic synthetic generators, and remote HTTP
services. Normalization happens centrally in :func:`query`, so every
backend only has to return raw logits.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import httpx
import numpy as np

from .errors import BackendError, MissingSampleError, StructuralError
from .fusion import ModelOpinion

REMOTE_TIMEOUT_S = 30.0
REMOTE_RETRIES = 1


@dataclass(frozen=True)
class SampleRef:
    """A sample identifier plus at most one payload form."""

    sample_id: str
    features: np.ndarray | None = None
    image_path: str | None = None
    raw_bytes: bytes | None = None

    def __post_init__(self):
        if not self.sample_id:
            raise StructuralError("sample_id must be non-empty")
        provided = sum(x is not None
                       for x in (self.features, self.image_path, self.raw_bytes))
        if provided > 1:
            raise StructuralError("a sample carries at most one payload form")

    def payload_bytes(self) -> bytes:
        """Serialize the payload for wire transfer (empty if id-only)."""
        if self.raw_bytes is not None:
            return self.raw_bytes
        if self.features is not None:
            return np.ascontiguousarray(self.features, dtype="<f8").tobytes()
        if self.image_path is not None:
            with open(self.image_path, "rb") as fh:
                return fh.read()
        return b""


class LogitStore:
    """Immutable in-memory map from sample id to a fixed-length logit vector."""

    def __init__(self, model_id: str, class_count: int,
                 table: dict[str, np.ndarray], latency_ms: float = 0.0):
        if class_count < 2:
            raise StructuralError(f"class_count must be >= 2, got {class_count}")
        self.model_id = model_id
        self.class_count = class_count
        self.latency_ms = latency_ms
        self._table = table

    def __len__(self) -> int:
        return len(self._table)

    def sample_ids(self) -> list[str]:
        return list(self._table)

    def fetch_logits(self, sample: SampleRef) -> np.ndarray:
        try:
            return self._table[sample.sample_id]
        except KeyError:
            raise MissingSampleError(
                f"{self.model_id}: unknown sample id {sample.sample_id!r}") from None


class SyntheticBackend:
    """Deterministic logits derived from (seed, model_id, sample_id).

    ``delay_s`` injects an artificial per-query latency, which the fan-out
    timing tests rely on. Repeated queries for the same sample are
    bit-identical.
    """

    def __init__(self, model_id: str, class_count: int, seed: int = 0,
                 scale: float = 2.0, delay_s: float = 0.0,
                 latency_ms: float = 0.0):
        if class_count < 2:
            raise StructuralError(f"class_count must be >= 2, got {class_count}")
        self.model_id = model_id
        self.class_count = class_count
        self.seed = seed
        self.scale = scale
        self.delay_s = delay_s
        self.latency_ms = latency_ms

    def fetch_logits(self, sample: SampleRef) -> np.ndarray:
        if self.delay_s:
            time.sleep(self.delay_s)
        digest = hashlib.sha256(
            f"{self.seed}:{self.model_id}:{sample.sample_id}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.normal(scale=self.scale, size=self.class_count)


class RemoteBackend:
    """HTTP probability service speaking POST {base_url}/predict.

    The request body is ``{"id": ..., "payload_b64": ...}`` and the reply
    must carry ``{"logits": [...]}`` with exactly ``class_count`` entries.
    Transport failures and non-2xx replies are retried once, then surface
    as a backend error.
    """

    def __init__(self, model_id: str, class_count: int, base_url: str,
                 timeout_s: float = REMOTE_TIMEOUT_S, retries: int = REMOTE_RETRIES,
                 latency_ms: float = 0.0, client: httpx.Client | None = None):
        if class_count < 2:
            raise StructuralError(f"class_count must be >= 2, got {class_count}")
        self.model_id = model_id
        self.class_count = class_count
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.retries = retries
        self.latency_ms = latency_ms
        self._client = client or httpx.Client(timeout=timeout_s)

    def fetch_logits(self, sample: SampleRef) -> np.ndarray:
        body = {
            "id": sample.sample_id,
            "payload_b64": base64.b64encode(sample.payload_bytes()).decode(),
        }
        last_error: Exception | None = None
        for _ in range(1 + self.retries):
            try:
                resp = self._client.post(f"{self.base_url}/predict", json=body,
                                         timeout=self.timeout_s)
                resp.raise_for_status()
                payload = resp.json()
                break
            except (httpx.HTTPError, json.JSONDecodeError) as exc:
                last_error = exc
        else:
            raise BackendError(
                f"{self.model_id}: remote backend unreachable: {last_error}")
        logits = np.asarray(payload.get("logits", []), dtype=np.float64)
        if logits.shape != (self.class_count,):
            raise StructuralError(
                f"{self.model_id}: remote returned {logits.shape} logits, "
                f"expected ({self.class_count},)")
        return logits


@dataclass
class BackendSet:
    """Ordered collection of backends with matching class counts."""

    backends: list = field(default_factory=list)

    def __post_init__(self):
        if not self.backends:
            raise StructuralError("backend set is empty")
        ids = [b.model_id for b in self.backends]
        if len(set(ids)) != len(ids):
            raise StructuralError(f"duplicate model ids in backend set: {ids}")
        counts = {b.class_count for b in self.backends}
        if len(counts) != 1:
            raise StructuralError(f"backends disagree on class count: {sorted(counts)}")

    @property
    def class_count(self) -> int:
        return self.backends[0].class_count

    @property
    def model_ids(self) -> list[str]:
        return [b.model_id for b in self.backends]

    def __len__(self) -> int:
        return len(self.backends)


def query(backend, sample: SampleRef) -> ModelOpinion:
    """Fetch one backend's logits and normalize them into an opinion."""
    logits = np.asarray(backend.fetch_logits(sample), dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise StructuralError(f"{backend.model_id}: non-finite logits for "
                              f"{sample.sample_id!r}")
    return ModelOpinion.from_logits(backend.model_id, logits)


def fan_out(backend_set: BackendSet, sample: SampleRef, strict: bool = True,
            omissions: list | None = None) -> list[ModelOpinion]:
    """Query every backend concurrently; results follow declaration order.

    With ``strict`` (the default) any member failure fails the whole
    sample. In lenient mode failed members are dropped — each omission is
    recorded as ``(model_id, reason)`` when a list is supplied — and at
    least one member must survive.
    """
    with ThreadPoolExecutor(max_workers=len(backend_set)) as pool:
        futures = [pool.submit(query, b, sample) for b in backend_set.backends]
        opinions: list[ModelOpinion] = []
        for backend, future in zip(backend_set.backends, futures):
            try:
                opinions.append(future.result())
            except Exception as exc:
                if strict:
                    raise BackendError(
                        f"fan-out failed at {backend.model_id}: {exc}") from exc
                if omissions is not None:
                    omissions.append((backend.model_id, str(exc)))
    if not opinions:
        raise BackendError(f"no backend produced an opinion for {sample.sample_id!r}")
    return opinions


# --------------------------------------------------------------------------
# JSONL logit-store format
# --------------------------------------------------------------------------

def load_logit_store(path, latency_ms: float = 0.0) -> LogitStore:
    """Parse a JSONL logit store: a header line, then one record per sample.

    Header: ``{"model_id": str, "classes": int}``. Records:
    ``{"id": str, "logits": [float, ...]}``. Errors carry 1-based line
    numbers.
    """
    table: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise StructuralError(f"{path}: missing header line")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise StructuralError(f"{path}:1: bad header: {exc}") from exc
        model_id = header.get("model_id")
        classes = header.get("classes")
        if not isinstance(model_id, str) or not isinstance(classes, int):
            raise StructuralError(f"{path}:1: header must carry model_id and classes")

        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StructuralError(f"{path}:{lineno}: bad record: {exc}") from exc
            sample_id = record.get("id")
            logits = record.get("logits")
            if not isinstance(sample_id, str) or not isinstance(logits, list):
                raise StructuralError(
                    f"{path}:{lineno}: record must carry id and logits")
            if len(logits) != classes:
                raise StructuralError(
                    f"{path}:{lineno}: {len(logits)} logits, expected {classes}")
            vec = np.asarray(logits, dtype=np.float64)
            if not np.all(np.isfinite(vec)):
                raise StructuralError(f"{path}:{lineno}: non-finite logit")
            if sample_id in table:
                raise StructuralError(f"{path}:{lineno}: duplicate id {sample_id!r}")
            table[sample_id] = vec
    return LogitStore(model_id=model_id, class_count=classes, table=table,
                      latency_ms=latency_ms)


def write_logit_store(path, model_id: str, class_count: int,
                      records: dict[str, np.ndarray]) -> None:
    """Write the JSONL counterpart of :func:`load_logit_store`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"model_id": model_id, "classes": class_count}) + "\n")
        for sample_id, logits in records.items():
            logits = np.asarray(logits, dtype=np.float64)
            if logits.shape != (class_count,):
                raise StructuralError(
                    f"{sample_id!r}: logit shape {logits.shape} does not match "
                    f"class count {class_count}")
            fh.write(json.dumps({"id": sample_id, "logits": logits.tolist()}) + "\n")
