"""Unit tests for probability backends, the JSONL store format, and fan-out."""

import json
import time

import httpx
import numpy as np
import pytest

from softcascade.backends import (
    BackendSet,
    LogitStore,
    RemoteBackend,
    SampleRef,
    SyntheticBackend,
    fan_out,
    load_logit_store,
    query,
    write_logit_store,
)
from softcascade.errors import BackendError, MissingSampleError, StructuralError
from softcascade.fusion import softmax, validate_distribution


class TestSampleRef:
    def test_rejects_empty_id(self):
        with pytest.raises(StructuralError):
            SampleRef(sample_id="")

    def test_rejects_multiple_payloads(self):
        with pytest.raises(StructuralError):
            SampleRef(sample_id="s", features=np.ones(2), raw_bytes=b"x")

    def test_feature_payload_roundtrips(self):
        ref = SampleRef(sample_id="s", features=np.array([1.5, -2.0]))
        decoded = np.frombuffer(ref.payload_bytes(), dtype="<f8")
        np.testing.assert_array_equal(decoded, [1.5, -2.0])

    def test_id_only_payload_is_empty(self):
        assert SampleRef(sample_id="s").payload_bytes() == b""


class TestLogitStoreFormat:
    def _write(self, path, lines):
        path.write_text("\n".join(lines) + "\n")

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "store.jsonl"
        records = {"a": np.array([0.1, -0.2, 3.0]), "b": np.array([1.0, 2.0, -1.0])}
        write_logit_store(path, "cnn-0", 3, records)
        store = load_logit_store(path)
        assert store.model_id == "cnn-0"
        assert store.class_count == 3
        assert len(store) == 2
        np.testing.assert_array_equal(
            store.fetch_logits(SampleRef(sample_id="a")), records["a"])

    def test_empty_store_with_header(self, tmp_path):
        path = tmp_path / "store.jsonl"
        self._write(path, ['{"model_id": "m", "classes": 4}'])
        store = load_logit_store(path)
        assert len(store) == 0

    def test_wrong_logit_count_reports_line(self, tmp_path):
        path = tmp_path / "store.jsonl"
        self._write(path, [
            '{"model_id": "m", "classes": 3}',
            '{"id": "a", "logits": [0.1, 0.2, 0.3]}',
            '{"id": "b", "logits": [0.1, 0.2]}',
        ])
        with pytest.raises(StructuralError, match=":3:"):
            load_logit_store(path)

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "store.jsonl"
        self._write(path, ['{"model_id": "m", "classes": 2}', "{oops"])
        with pytest.raises(StructuralError, match=":2:"):
            load_logit_store(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "store.jsonl"
        self._write(path, [
            '{"model_id": "m", "classes": 2}',
            '{"id": "a", "logits": [0.0, 1.0]}',
            '{"id": "a", "logits": [1.0, 0.0]}',
        ])
        with pytest.raises(StructuralError, match="duplicate"):
            load_logit_store(path)

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "store.jsonl"
        path.write_text("")
        with pytest.raises(StructuralError, match="header"):
            load_logit_store(path)

    def test_non_finite_logit_rejected(self, tmp_path):
        path = tmp_path / "store.jsonl"
        self._write(path, [
            '{"model_id": "m", "classes": 2}',
            '{"id": "a", "logits": [NaN, 1.0]}',
        ])
        with pytest.raises(StructuralError):
            load_logit_store(path)


class TestQuery:
    def test_store_hit_is_softmax_of_logits(self, tmp_path):
        path = tmp_path / "store.jsonl"
        write_logit_store(path, "m", 3, {"a": np.array([0.5, 1.5, -0.5])})
        store = load_logit_store(path)
        opinion = query(store, SampleRef(sample_id="a"))
        assert opinion.model_id == "m"
        np.testing.assert_allclose(opinion.probs,
                                   softmax(np.array([0.5, 1.5, -0.5])), atol=1e-15)

    def test_unknown_id_raises_missing_sample(self, tmp_path):
        path = tmp_path / "store.jsonl"
        write_logit_store(path, "m", 2, {"a": np.zeros(2)})
        store = load_logit_store(path)
        with pytest.raises(MissingSampleError):
            query(store, SampleRef(sample_id="zzz"))

    def test_synthetic_backend_reproducible(self):
        backend = SyntheticBackend("syn", class_count=5, seed=7)
        a = query(backend, SampleRef(sample_id="x"))
        b = query(backend, SampleRef(sample_id="x"))
        np.testing.assert_array_equal(a.probs, b.probs)
        validate_distribution(a.probs)

    def test_synthetic_backend_varies_by_sample_and_model(self):
        b1 = SyntheticBackend("syn1", class_count=5, seed=7)
        b2 = SyntheticBackend("syn2", class_count=5, seed=7)
        s1 = SampleRef(sample_id="x")
        s2 = SampleRef(sample_id="y")
        assert not np.array_equal(b1.fetch_logits(s1), b1.fetch_logits(s2))
        assert not np.array_equal(b1.fetch_logits(s1), b2.fetch_logits(s1))


def _mock_remote(handler):
    transport = httpx.MockTransport(handler)
    client = httpx.Client(transport=transport)
    return RemoteBackend("rem", class_count=3, base_url="http://backend.test",
                         client=client)


class TestRemoteBackend:
    def test_happy_path(self):
        def handler(request):
            body = json.loads(request.content)
            assert request.url.path == "/predict"
            assert body["id"] == "s1"
            return httpx.Response(200, json={"logits": [0.1, 0.2, 0.3]})

        backend = _mock_remote(handler)
        opinion = query(backend, SampleRef(sample_id="s1"))
        np.testing.assert_allclose(opinion.probs,
                                   softmax(np.array([0.1, 0.2, 0.3])), atol=1e-15)

    def test_retries_once_then_succeeds(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] == 1:
                return httpx.Response(500)
            return httpx.Response(200, json={"logits": [0.0, 0.0, 1.0]})

        backend = _mock_remote(handler)
        query(backend, SampleRef(sample_id="s"))
        assert calls["n"] == 2

    def test_persistent_failure_raises_backend_error(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            raise httpx.ConnectError("refused")

        backend = _mock_remote(handler)
        with pytest.raises(BackendError):
            backend.fetch_logits(SampleRef(sample_id="s"))
        assert calls["n"] == 2  # initial attempt + one retry

    def test_wrong_logit_count_raises(self):
        backend = _mock_remote(
            lambda request: httpx.Response(200, json={"logits": [0.1, 0.2]}))
        with pytest.raises(StructuralError):
            backend.fetch_logits(SampleRef(sample_id="s"))


class TestBackendSet:
    def test_rejects_duplicate_ids(self):
        with pytest.raises(StructuralError):
            BackendSet([SyntheticBackend("m", 3), SyntheticBackend("m", 3)])

    def test_rejects_class_count_mismatch(self):
        with pytest.raises(StructuralError):
            BackendSet([SyntheticBackend("a", 3), SyntheticBackend("b", 4)])

    def test_rejects_empty(self):
        with pytest.raises(StructuralError):
            BackendSet([])

    def test_exposes_order_and_count(self):
        bs = BackendSet([SyntheticBackend("a", 3), SyntheticBackend("b", 3)])
        assert bs.model_ids == ["a", "b"]
        assert bs.class_count == 3
        assert len(bs) == 2


class TestFanOut:
    def test_order_follows_declaration(self):
        bs = BackendSet([SyntheticBackend(f"m{i}", 4, seed=i) for i in range(4)])
        opinions = fan_out(bs, SampleRef(sample_id="s"))
        assert [o.model_id for o in opinions] == ["m0", "m1", "m2", "m3"]

    def test_order_stable_under_inverted_delays(self):
        # The slowest backend is declared first; order must not change.
        bs = BackendSet([
            SyntheticBackend("slow", 4, seed=0, delay_s=0.05),
            SyntheticBackend("fast", 4, seed=1, delay_s=0.0),
        ])
        opinions = fan_out(bs, SampleRef(sample_id="s"))
        assert [o.model_id for o in opinions] == ["slow", "fast"]

    def test_single_backend_is_singleton(self):
        bs = BackendSet([SyntheticBackend("only", 3)])
        opinions = fan_out(bs, SampleRef(sample_id="s"))
        assert len(opinions) == 1 and opinions[0].model_id == "only"

    def test_runs_concurrently(self):
        bs = BackendSet([
            SyntheticBackend("a", 4, seed=0, delay_s=0.05),
            SyntheticBackend("b", 4, seed=1, delay_s=0.01),
        ])
        start = time.perf_counter()
        fan_out(bs, SampleRef(sample_id="s"))
        wall = time.perf_counter() - start
        assert wall < 0.07  # parallel: max(50, 10) ms plus slack, not the sum

    def test_strict_mode_fails_whole_sample(self, tmp_path):
        path = tmp_path / "store.jsonl"
        write_logit_store(path, "store", 4, {"other": np.zeros(4)})
        bs = BackendSet([SyntheticBackend("ok", 4), load_logit_store(path)])
        with pytest.raises(BackendError):
            fan_out(bs, SampleRef(sample_id="s"))

    def test_lenient_mode_drops_and_records(self, tmp_path):
        path = tmp_path / "store.jsonl"
        write_logit_store(path, "store", 4, {"other": np.zeros(4)})
        bs = BackendSet([SyntheticBackend("ok", 4), load_logit_store(path)])
        omissions = []
        opinions = fan_out(bs, SampleRef(sample_id="s"), strict=False,
                           omissions=omissions)
        assert [o.model_id for o in opinions] == ["ok"]
        assert len(omissions) == 1 and omissions[0][0] == "store"

    def test_lenient_mode_with_no_survivors_raises(self, tmp_path):
        path = tmp_path / "store.jsonl"
        write_logit_store(path, "store", 4, {"other": np.zeros(4)})
        bs = BackendSet([load_logit_store(path)])
        with pytest.raises(BackendError):
            fan_out(bs, SampleRef(sample_id="s"), strict=False)
