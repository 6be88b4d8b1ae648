import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mass.genserver import (
    BadRequest,
    GenerateRequest,
    ModelRegistry,
    RegistryError,
    circular_shift,
    handle_generate,
    load_registry,
    serve_in_thread,
)
from mass.massgan import GanConfig, GanModel, save_checkpoint
from mass.trace import ContextLabel, parse_text


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    cfg = GanConfig(hidden_size=8, num_layers=1)
    save_checkpoint(GanModel(cfg, seed=1), d / "GLOBAL.ckpt")
    save_checkpoint(GanModel(cfg, seed=2, context=ContextLabel.STREAM), d / "STREAM.ckpt")
    save_checkpoint(GanModel(cfg, seed=3, context=ContextLabel.STREAM_HIGH), d / "STREAM_HIGH.ckpt")
    return d


@pytest.fixture(scope="module")
def registry(model_dir):
    return load_registry(model_dir)


def test_registry_loads_and_falls_back(registry):
    assert set(registry.contexts) == {ContextLabel.GLOBAL, ContextLabel.STREAM, ContextLabel.STREAM_HIGH}
    assert registry.resolve("LOW")[0] is ContextLabel.GLOBAL
    assert registry.resolve("STREAM")[0] is ContextLabel.STREAM
    assert registry.resolve("stream_high")[0] is ContextLabel.STREAM_HIGH


def test_registry_requires_global(tmp_path):
    save_checkpoint(GanModel(GanConfig(hidden_size=4, num_layers=1)), tmp_path / "STREAM.ckpt")
    with pytest.raises(RegistryError):
        load_registry(tmp_path)
    with pytest.raises(RegistryError):
        ModelRegistry({})


def test_corrupt_context_checkpoint_skipped(tmp_path, model_dir):
    (tmp_path / "GLOBAL.ckpt").write_bytes((model_dir / "GLOBAL.ckpt").read_bytes())
    (tmp_path / "LOW.ckpt").write_bytes(b"garbage")
    (tmp_path / "notes.ckpt").write_bytes(b"")
    reg = load_registry(tmp_path)
    assert reg.contexts == [ContextLabel.GLOBAL]


def test_corrupt_global_is_fatal(tmp_path, model_dir):
    (tmp_path / "GLOBAL.ckpt").write_bytes((model_dir / "GLOBAL.ckpt").read_bytes()[:-3])
    with pytest.raises(RegistryError):
        load_registry(tmp_path)


def test_example_request_shape(registry):
    body, ctype = handle_generate(registry, b'{"context":"STREAM_HIGH","seq_len":3,"users":2}', "json")
    assert ctype == "application/json"
    trace = np.array(json.loads(body)["trace"])
    assert trace.shape == (2, 3, 2)


def test_empty_body_defaults(registry):
    trace = np.array(json.loads(handle_generate(registry, b"", "json")[0])["trace"])
    assert trace.shape == (1, 100, 2)
    assert (trace >= 0).all()
    req = GenerateRequest.from_json(b"")
    assert (req.context, req.users, req.seq_len, req.normalize, req.shuffle) == ("GLOBAL", 1, 100, "pos", False)


def test_text_format_layout(registry):
    body, ctype = handle_generate(registry, b'{"users":2,"seq_len":2,"seed":1}', "text")
    assert ctype.startswith("text/plain")
    text = body.decode()
    lines = text.split("\n")
    assert text.endswith("\n") and lines[-1] == ""
    assert len(lines[:-1]) == 5 and lines[2] == ""
    assert all(len(line.split(" ")) == 2 for i, line in enumerate(lines[:-1]) if i != 2)
    as_json = np.array(json.loads(handle_generate(registry, b'{"users":2,"seq_len":2,"seed":1}', "json")[0])["trace"])
    assert np.array_equal(parse_text(text), as_json)


def test_seeded_requests_reproducible(registry):
    body = b'{"users":3,"seq_len":12,"seed":42,"shuffle":true}'
    assert handle_generate(registry, body)[0] == handle_generate(registry, body)[0]
    assert handle_generate(registry, b'{"users":3}')[0] != handle_generate(registry, b'{"users":3}')[0]


def test_minmax_in_unit_interval(registry):
    trace = np.array(json.loads(handle_generate(registry, b'{"users":4,"seq_len":20,"normalize":"minmax"}')[0])["trace"])
    assert trace.min() >= 0 and trace.max() <= 1


@pytest.mark.parametrize(
    "body, fmt",
    [
        (b"{not json", "json"),
        (b"[1, 2]", "json"),
        (b'{"users": 0}', "json"),
        (b'{"seq_len": -3}', "json"),
        (b'{"users": "2"}', "json"),
        (b'{"normalize": "zscore"}', "json"),
        (b'{"context": "NOPE"}', "json"),
        (b'{"shuffle": 1}', "json"),
        (b'{"colour": "red"}', "json"),
        (b"", "xml"),
    ],
)
def test_bad_requests(registry, body, fmt):
    with pytest.raises(BadRequest):
        handle_generate(registry, body, fmt)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 15), st.integers(0, 2**31))
def test_shuffle_is_per_user_rotation(users, steps, seed):
    values = np.random.default_rng(seed).random((users, steps, 2))
    out = circular_shift(values, np.random.default_rng(seed + 1))
    for u in range(users):
        rotations = [np.roll(values[u], k, axis=0) for k in range(steps)]
        assert any(np.array_equal(out[u], r) for r in rotations)
        for f in range(2):
            assert sorted(out[u, :, f]) == sorted(values[u, :, f])


def test_http_endpoints(registry):
    server, thread = serve_in_thread(registry)
    base = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        health = json.load(urllib.request.urlopen(base + "/health", timeout=5))
        assert health["status"] == "ok" and "GLOBAL" in health["contexts"]
        req = urllib.request.Request(base + "/generate?format=json",
                                     data=b'{"context":"STREAM_HIGH","seq_len":3,"users":2}', method="POST")
        trace = json.load(urllib.request.urlopen(req, timeout=5))["trace"]
        assert np.array(trace).shape == (2, 3, 2)
        req = urllib.request.Request(base + "/generate?format=text", data=b"", method="POST")
        text = urllib.request.urlopen(req, timeout=5).read().decode()
        assert len(text.splitlines()) == 100
        for bad in (base + "/generate?format=csv", base + "/nowhere"):
            with pytest.raises(urllib.error.HTTPError) as exc:
                urllib.request.urlopen(urllib.request.Request(bad, data=b"{}", method="POST"), timeout=5)
            assert exc.value.code in (400, 404)
        with pytest.raises(urllib.error.HTTPError) as exc:
            urllib.request.urlopen(urllib.request.Request(base + "/generate", data=b'{"users":0}', method="POST"),
                                   timeout=5)
        assert exc.value.code == 400
    finally:
        server.shutdown()
        server.server_close()


def test_concurrent_requests(registry):
    results = []

    def worker(i):
        results.append(handle_generate(registry, json.dumps({"users": 2, "seq_len": 5, "seed": i}).encode()))

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(results) == 8
