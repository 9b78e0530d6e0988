import gzip
import json
import os

import numpy as np
import pytest

import segfetch


def test_segmentation_round_trip():
    assert segfetch.segment(0x41) == [0, 0, 0, 0, 0, 0, 0, 0, 1, 1]
    for bits in (1, 4, 6, 16):
        block = 0x2AB_CDEF_0123_4567 & ((1 << 58) - 1)
        assert segfetch.desegment(segfetch.segment(block, bits), bits) == block
    with pytest.raises(segfetch.SegfetchError):
        segfetch.desegment([64] * 10)


def test_context_features():
    assert segfetch.pc_context(0x0001000200030004) == pytest.approx(10 / 65536)
    assert segfetch.page_distance_context(10, 7) == pytest.approx(0.25)


def test_labels_and_bitmaps():
    assert segfetch.future_deltas([1000, 1001, 1005, 998], 0, window=3) == {1, 5, -2}
    bits = segfetch.deltas_to_bitmap({1, 5, -2})
    assert len(bits) == 256
    assert [i for i, b in enumerate(bits) if b] == [126, 128, 132]
    assert segfetch.bitmap_to_deltas(bits) == {1, 5, -2}


def test_metrics_and_threshold():
    assert segfetch.set_metrics({1, 5}, {1, 2}) == (0.5, 0.5, 0.5)
    report = segfetch.tune_threshold(np.array([[0.9, 0.6, 0.2]]), np.array([[1, 1, 0]]))
    assert report["optimal_threshold"] == pytest.approx(0.6)
    assert report["optimal_f1"] == pytest.approx(1.0)


def test_latency_estimate():
    assert abs(segfetch.estimate_latency(64, 2) - 100) <= 20


def test_trace_generation_and_io(tmp_path):
    trace = segfetch.generate_trace("stride", length=50, stride=3)
    assert len(trace) == 50
    assert trace[1][3] - trace[0][3] == 3 * 64
    path = tmp_path / "t.csv.gz"
    segfetch.write_trace(str(path), trace, gzip=True)
    with gzip.open(path, "rt") as f:
        assert f.readline().startswith("#")
    assert segfetch.read_trace(str(path)) == trace


def test_simulate_baselines():
    trace = segfetch.generate_trace("stride", length=2000, stride=3)
    none = segfetch.simulate(trace)
    stride = segfetch.simulate(trace, "stride")
    assert none["coverage"] == 0
    assert stride["coverage"] > 0.9
    assert stride["baseline_misses"] == none["demand_misses"]


def test_pipeline_and_model(tmp_path):
    config = {
        "seed": 2,
        "trace": {"length": 1200, "pattern": {"kind": "stride", "stride": 3}},
        "features": {"history": 4},
        "label": {"window": 8, "bound": 32},
        "model": {"d_model": 8, "heads": 2, "layers": 1},
        "train": {"epochs": 1, "batch_size": 32},
    }
    assert segfetch.canonical_config(config)["model"]["outputs"] == 64
    assert len(segfetch.config_hash(config)) == 16
    for stage in ("gen", "preprocess", "train"):
        segfetch.run_stage(stage, config, tmp_path)
    with pytest.raises(segfetch.SegfetchError):
        segfetch.run_stage("eval", config, tmp_path / "empty")

    model = segfetch.Model(str(tmp_path / "model.ckpt"))
    cfg = model.config
    assert (cfg["history"], cfg["features"], cfg["outputs"]) == (4, 10, 64)
    conf = model.predict(np.random.default_rng(0).random((4, 10)), np.zeros((4, 2)))
    assert len(conf) == 64
    assert all(0.0 <= c <= 1.0 for c in conf)
    info = json.loads((tmp_path / "train.json").read_text())
    assert info["parameter_count"] == model.parameter_count
    assert os.path.exists(tmp_path / "manifests" / "train.json")
