"""Constrained arbitration over a short candidate list.

When the router escalates a sample, an arbiter chooses among the top-K
candidate classes only — never outside them. Two arbiters are provided:

* a live path that prompts a chat-completion service with curated
  botanical descriptions and parses a strict-JSON reply, with retries,
  fallback, and a content-addressed file cache;
* a deterministic mock that scores token overlap between extracted
  attributes and each candidate's support/contradict sets, for offline
  runs and tests.

Both guarantee the returned label is one of the request's candidates.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

from .backends import SampleRef
from .errors import BackendError, ConfigError, StructuralError

logger = logging.getLogger(__name__)

API_KEY_ENV = "SOFTCASCADE_LLM_API_KEY"


# --------------------------------------------------------------------------
# Descriptor database
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DescriptorEntry:
    """Curated text for one class plus machine-readable attribute sets."""

    class_name: str
    description: str
    support: frozenset = frozenset()
    contradict: frozenset = frozenset()


class DescriptorDB:
    """Per-class descriptor entries indexed by class position in the label space."""

    def __init__(self, entries: dict[int, DescriptorEntry]):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, class_index: int) -> DescriptorEntry:
        try:
            return self.entries[class_index]
        except KeyError:
            raise StructuralError(f"no descriptor for class index {class_index}") from None

    def entries_for(self, candidates: list[int]) -> list[DescriptorEntry]:
        return [self.entry(c) for c in candidates]

    @classmethod
    def load(cls, path, class_names: list[str]) -> "DescriptorDB":
        """Read a JSON map ``class_name -> {description, support, contradict}``.

        Every name in ``class_names`` must be present with a non-empty
        description; ``support``/``contradict`` token lists are optional.
        """
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise StructuralError(f"{path}: bad descriptor JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise StructuralError(f"{path}: expected a JSON object at top level")
        entries = {}
        for index, name in enumerate(class_names):
            spec = raw.get(name)
            if spec is None:
                raise StructuralError(f"{path}: missing descriptor for {name!r}")
            description = spec.get("description", "")
            if not description:
                raise StructuralError(f"{path}: empty description for {name!r}")
            entries[index] = DescriptorEntry(
                class_name=name,
                description=description,
                support=frozenset(spec.get("support", [])),
                contradict=frozenset(spec.get("contradict", [])),
            )
        return cls(entries)


def attribute_set(tokens) -> frozenset:
    """Validate and freeze a collection of attribute tokens."""
    out = frozenset(tokens)
    if any(not isinstance(t, str) or not t for t in out):
        raise StructuralError("attribute tokens must be non-empty strings")
    return out


# --------------------------------------------------------------------------
# Requests, results, configuration
# --------------------------------------------------------------------------

@dataclass
class ArbitrationRequest:
    """A routed sample, its candidate classes, and their descriptors."""

    sample: SampleRef
    candidates: list[int]
    descriptors: list[DescriptorEntry]
    prompt_version: str = "v1"

    def __post_init__(self):
        if not self.candidates:
            raise StructuralError("candidate list is empty")
        if len(self.candidates) != len(self.descriptors):
            raise StructuralError(
                f"{len(self.candidates)} candidates but "
                f"{len(self.descriptors)} descriptors")

    @property
    def candidate_names(self) -> list[str]:
        return [d.class_name for d in self.descriptors]


@dataclass
class ArbitrationResult:
    """Outcome of one arbitration; the label always lies in the candidates."""

    label: int
    raw_response: str
    valid: bool
    fell_back: bool
    latency_ms: float
    from_cache: bool


@dataclass(frozen=True)
class ArbiterConfig:
    """Generation, retry, penalty, and cache settings."""

    lambda_pen: float = 0.5
    max_tokens: int = 512
    gen_temperature: float = 0.7
    timeout_s: float = 30.0
    retries: int = 1
    cache_dir: str | None = None

    def __post_init__(self):
        if self.lambda_pen < 0:
            raise ConfigError(f"lambda_pen must be >= 0, got {self.lambda_pen}")
        if self.retries < 0:
            raise ConfigError(f"retries must be >= 0, got {self.retries}")
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")


# --------------------------------------------------------------------------
# Prompt construction and response parsing
# --------------------------------------------------------------------------

def build_prompt(request: ArbitrationRequest) -> str:
    """Deterministic instruction text for the constrained-choice task."""
    lines = [
        "You are an expert botanical arbiter for fruit classification. "
        f"[prompt {request.prompt_version}]",
        "",
        f"A vision ensemble narrowed sample {request.sample.sample_id!r} down to "
        f"{len(request.candidates)} candidate categories. Your job is to pick "
        "exactly one of them.",
        "",
        "Candidates:",
    ]
    for pos, entry in enumerate(request.descriptors, start=1):
        lines.append(f"{pos}. {entry.class_name}")
        lines.append(f"   Description: {entry.description}")
    name_list = ", ".join(json.dumps(e.class_name) for e in request.descriptors)
    lines += [
        "",
        "Work step by step: first identify the discriminative visual attributes "
        "of the sample, then match each attribute against every candidate's "
        "description, excluding candidates whose description contradicts an "
        "observed attribute, and finally choose the best-supported candidate.",
        "",
        "Respond with exactly one JSON object and nothing else, in the form:",
        '{"choice": <candidate name>, "reason": <short justification>}',
        f"The \"choice\" value must be one of: {name_list}.",
    ]
    return "\n".join(lines)


def _first_json_object(text: str) -> str | None:
    """Return the first brace-balanced JSON object in the text, if any.

    The scan is string-aware, so braces inside quoted values don't
    terminate the object early.
    """
    start = text.find("{")
    if start == -1:
        return None
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start:i + 1]
    return None


def parse_response(raw: str, candidate_names: list[str]) -> tuple[int | None, bool]:
    """Extract the arbiter's choice from a raw reply.

    Returns ``(position, True)`` where ``position`` indexes into
    ``candidate_names``, or ``(None, False)`` when there is no JSON object,
    it fails to parse, it has no string ``choice``, or the choice matches
    no candidate. Name matching is case-insensitive after trimming.
    """
    chunk = _first_json_object(raw or "")
    if chunk is None:
        return None, False
    try:
        obj = json.loads(chunk)
    except json.JSONDecodeError:
        return None, False
    if not isinstance(obj, dict):
        return None, False
    choice = obj.get("choice")
    if not isinstance(choice, str):
        return None, False
    wanted = choice.strip().lower()
    for pos, name in enumerate(candidate_names):
        if name.strip().lower() == wanted:
            return pos, True
    return None, False


# --------------------------------------------------------------------------
# Deterministic mock arbitration
# --------------------------------------------------------------------------

def mock_arbitrate(attributes, request: ArbitrationRequest,
                   lambda_pen: float = 0.5) -> int:
    """Score candidates by attribute overlap minus a conflict penalty.

    For each candidate: match = |A ∩ support| / max(1, |support|) and
    conflict = |A ∩ contradict|; the winner maximizes
    ``match - lambda_pen * conflict``, ties going to the candidate listed
    earlier.
    """
    attrs = attribute_set(attributes)
    best_label = request.candidates[0]
    best_score = -float("inf")
    for label, entry in zip(request.candidates, request.descriptors):
        match = len(attrs & entry.support) / max(1, len(entry.support))
        conflict = len(attrs & entry.contradict)
        score = match - lambda_pen * conflict
        if score > best_score:
            best_label = label
            best_score = score
    return best_label


class MockArbiter:
    """Arbiter that resolves requests with the deterministic overlap score.

    ``attributes_for`` maps a sample to its extracted attribute tokens;
    without it every request scores zero everywhere and the first
    candidate wins.
    """

    def __init__(self, lambda_pen: float = 0.5, attributes_for=None):
        self.lambda_pen = lambda_pen
        self.attributes_for = attributes_for

    def arbitrate(self, request: ArbitrationRequest) -> ArbitrationResult:
        start = time.perf_counter()
        attrs = self.attributes_for(request.sample) if self.attributes_for else ()
        label = mock_arbitrate(attrs, request, self.lambda_pen)
        name = request.descriptors[request.candidates.index(label)].class_name
        raw = json.dumps({"choice": name, "reason": "attribute overlap score"})
        return ArbitrationResult(
            label=label, raw_response=raw, valid=True, fell_back=False,
            latency_ms=(time.perf_counter() - start) * 1000.0, from_cache=False)


# --------------------------------------------------------------------------
# Cache
# --------------------------------------------------------------------------

def cache_key(request: ArbitrationRequest) -> str:
    """Content-addressed key: sample hash + sorted candidates + prompt version."""
    try:
        payload = request.sample.payload_bytes()
    except OSError as exc:
        raise StructuralError(f"unhashable sample payload: {exc}") from exc
    sample_hash = hashlib.sha256(
        request.sample.sample_id.encode() + b"\x00" + payload).hexdigest()
    blob = json.dumps({
        "sample": sample_hash,
        "candidates": sorted(request.candidates),
        "prompt_version": request.prompt_version,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _cache_path(cache_dir: str, key: str) -> Path:
    return Path(cache_dir) / key[:2] / f"{key}.json"


def _cache_read(path: Path) -> dict | None:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None
    except (OSError, json.JSONDecodeError) as exc:
        logger.warning("unreadable cache entry %s: %s", path, exc)
        return None


def _cache_write(path: Path, payload: dict) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)
    except OSError as exc:
        logger.warning("cache write failed for %s: %s", path, exc)


# --------------------------------------------------------------------------
# Live arbitration
# --------------------------------------------------------------------------

def arbitrate(request: ArbitrationRequest, config: ArbiterConfig,
              client) -> ArbitrationResult:
    """Resolve a request through a completion client, cache-first.

    On a cache hit the stored label is returned without a client call.
    Otherwise the client is attempted up to ``1 + config.retries`` times,
    retrying on both transport failures and unparseable replies; when all
    attempts fail the first candidate is returned with ``fell_back=True``.
    Only valid (non-fallback) results are cached.
    """
    start = time.perf_counter()
    key = cache_key(request)
    path = _cache_path(config.cache_dir, key) if config.cache_dir else None

    if path is not None:
        cached = _cache_read(path)
        if (cached is not None
                and cached.get("prompt_version") == request.prompt_version
                and cached.get("label") in request.candidates):
            return ArbitrationResult(
                label=cached["label"], raw_response=cached.get("raw_response", ""),
                valid=True, fell_back=False,
                latency_ms=(time.perf_counter() - start) * 1000.0, from_cache=True)

    prompt = build_prompt(request)
    raw = ""
    label = None
    valid = False
    for _ in range(1 + config.retries):
        try:
            raw = client.complete(prompt, max_tokens=config.max_tokens,
                                  temperature=config.gen_temperature,
                                  timeout_s=config.timeout_s)
        except BackendError as exc:
            logger.warning("arbiter transport failure: %s", exc)
            continue
        position, valid = parse_response(raw, request.candidate_names)
        if valid:
            label = request.candidates[position]
            break

    fell_back = not valid
    if fell_back:
        label = request.candidates[0]
    elif path is not None:
        _cache_write(path, {
            "key": key,
            "prompt_version": request.prompt_version,
            "label": label,
            "raw_response": raw,
        })

    return ArbitrationResult(
        label=label, raw_response=raw, valid=valid, fell_back=fell_back,
        latency_ms=(time.perf_counter() - start) * 1000.0, from_cache=False)


class LlmArbiter:
    """Arbiter bound to a completion client and a fixed configuration."""

    def __init__(self, config: ArbiterConfig, client):
        self.config = config
        self.client = client

    def arbitrate(self, request: ArbitrationRequest) -> ArbitrationResult:
        return arbitrate(request, self.config, self.client)


class CachingArbiter:
    """Wrap any arbiter with the shared content-addressed result cache.

    The live arbiter manages this cache internally; wrapping makes the
    same hit/miss semantics (and the ``from_cache`` flag) available to
    other arbiters, such as the deterministic mock.
    """

    def __init__(self, inner, cache_dir: str):
        if not cache_dir:
            raise ConfigError("CachingArbiter requires a cache directory")
        self.inner = inner
        self.cache_dir = cache_dir

    def arbitrate(self, request: ArbitrationRequest) -> ArbitrationResult:
        start = time.perf_counter()
        path = _cache_path(self.cache_dir, cache_key(request))
        cached = _cache_read(path)
        if (cached is not None
                and cached.get("prompt_version") == request.prompt_version
                and cached.get("label") in request.candidates):
            return ArbitrationResult(
                label=cached["label"], raw_response=cached.get("raw_response", ""),
                valid=True, fell_back=False,
                latency_ms=(time.perf_counter() - start) * 1000.0, from_cache=True)
        result = self.inner.arbitrate(request)
        if result.valid:
            _cache_write(path, {
                "key": cache_key(request),
                "prompt_version": request.prompt_version,
                "label": result.label,
                "raw_response": result.raw_response,
            })
        return result


class ChatCompletionClient:
    """Minimal chat-completion HTTP client with bounded concurrency.

    POSTs ``{model, messages, max_tokens, temperature}`` to
    ``{base_url}/v1/chat/completions`` and returns the first choice's
    message content. The API key comes from the constructor or the
    ``SOFTCASCADE_LLM_API_KEY`` environment variable.
    """

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 max_concurrent: int = 4, client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._semaphore = threading.BoundedSemaphore(max_concurrent)
        self._client = client or httpx.Client()

    def complete(self, prompt: str, max_tokens: int, temperature: float,
                 timeout_s: float) -> str:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": max_tokens,
            "temperature": temperature,
        }
        with self._semaphore:
            try:
                resp = self._client.post(f"{self.base_url}/v1/chat/completions",
                                         json=body, headers=headers,
                                         timeout=timeout_s)
                resp.raise_for_status()
                payload = resp.json()
            except (httpx.HTTPError, json.JSONDecodeError) as exc:
                raise BackendError(f"completion request failed: {exc}") from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc
