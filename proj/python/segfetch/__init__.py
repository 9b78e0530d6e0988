"""Segmented-address prefetching laboratory: Python bindings."""

import json

from ._segfetch import (
    Model,
    SegfetchError,
    __version__,
    bitmap_to_deltas,
    deltas_to_bitmap,
    desegment,
    estimate_latency,
    future_deltas,
    generate_trace,
    page_distance_context,
    pc_context,
    read_trace,
    segment,
    set_metrics,
    stages,
    write_trace,
)
from . import _segfetch


def tune_threshold(conf, labels, grid_step=0.01, max_degree=0):
    """Grid-search the micro-F1 optimal threshold. Returns the report as a dict."""
    import numpy as np

    conf = np.ascontiguousarray(conf, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=bool)
    return json.loads(_segfetch._tune_threshold(conf, labels, grid_step, max_degree))


def simulate(trace, prefetcher="none", degree=1, sets=64, ways=16, latency=0, throughput="H"):
    """Replay a trace through the LLC model. Returns the report as a dict."""
    return json.loads(_segfetch._simulate(list(trace), prefetcher, degree, sets, ways, latency, throughput))


def _config_text(config):
    return config if isinstance(config, str) else json.dumps(config)


def canonical_config(config):
    """Fully expanded experiment config for a dict or JSON string."""
    return json.loads(_segfetch._canonical_config(_config_text(config)))


def config_hash(config):
    """Content hash naming the default run directory of a config."""
    return _segfetch._config_hash(_config_text(config))


def run_stage(stage, config, run_dir):
    """Run one pipeline stage into run_dir."""
    _segfetch._run_stage(stage, _config_text(config), str(run_dir))


__all__ = [
    "Model",
    "SegfetchError",
    "__version__",
    "bitmap_to_deltas",
    "canonical_config",
    "config_hash",
    "deltas_to_bitmap",
    "desegment",
    "estimate_latency",
    "future_deltas",
    "generate_trace",
    "page_distance_context",
    "pc_context",
    "read_trace",
    "run_stage",
    "segment",
    "set_metrics",
    "simulate",
    "stages",
    "tune_threshold",
    "write_trace",
]
