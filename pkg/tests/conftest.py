"""Shared fixtures: a miniature deployment (logit stores, descriptors,
YAML config) used by the service and CLI tests."""

import json

import pytest
import yaml

from softcascade.backends import write_logit_store

CLASS_NAMES = [f"species_{i}" for i in range(6)]

# One sample every model is sure about, one they all hedge on.
CONFIDENT_ID = "sample-confident"
AMBIGUOUS_ID = "sample-ambiguous"

STORE_A = {
    CONFIDENT_ID: [10.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    AMBIGUOUS_ID: [1.0, 0.95, 0.9, 0.0, 0.0, 0.0],
}
STORE_B = {
    CONFIDENT_ID: [8.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    AMBIGUOUS_ID: [0.95, 1.0, 0.9, 0.0, 0.0, 0.0],
}


@pytest.fixture
def service_env(tmp_path):
    """Factory writing stores + descriptors + a config file; returns the path."""

    def build(mode="no-arbiter", cache=False, extra=None):
        store_a = tmp_path / "store_a.jsonl"
        store_b = tmp_path / "store_b.jsonl"
        write_logit_store(store_a, "cnn-a", 6, STORE_A)
        write_logit_store(store_b, "cnn-b", 6, STORE_B)

        descriptors = {
            name: {
                "description": f"Distinguishing features of {name}.",
                "support": [f"trait_{i}", "leafy"],
                "contradict": [f"trait_{(i + 1) % 6}"],
            }
            for i, name in enumerate(CLASS_NAMES)
        }
        desc_path = tmp_path / "descriptors.json"
        desc_path.write_text(json.dumps(descriptors))

        config = {
            "listen": "127.0.0.1:8123",
            "mode": mode,
            "class_names": CLASS_NAMES,
            "backends": [
                {"kind": "jsonl", "path": str(store_a)},
                {"kind": "jsonl", "path": str(store_b)},
            ],
            "router": {"tau_conf": 0.6, "tau_gap": 0.1},
            "descriptors": str(desc_path),
        }
        if cache:
            config["arbiter"] = {"cache_dir": str(tmp_path / "cache")}
        if extra:
            config.update(extra)
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(config))
        return path

    return build
