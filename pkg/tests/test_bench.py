"""Structural benchmark contracts: mode equivalence and instrumentation."""

import numpy as np
import pytest
import torch

from nvslite.bench import (
    bench_frame,
    estimate_macs,
    measure_pipeline,
    pad_to_stride,
    run_bench,
    format_bench,
)
from nvslite.geometry import Extrinsics, PoseSamplerConfig, sample_pose
from nvslite.model import ModelConfig, NVSModel

TINY = ModelConfig(base_channels=4, encoder_stages=2, extrinsics_hidden=8,
                   extrinsics_out=8)


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return NVSModel(TINY).eval()


def test_modes_produce_identical_outputs():
    model = tiny_model()
    frame = bench_frame(32, 32)
    T = sample_pose(PoseSamplerConfig(seed=1), frame.median_depth())
    seq = measure_pipeline(model, frame, T, mode="sequential", runs=10)
    par = measure_pipeline(model, frame, T, mode="parallel", runs=10)
    assert seq["output_hash"] == par["output_hash"]
    for a, b in zip(seq["outputs"], par["outputs"]):
        assert torch.allclose(a, b, atol=1e-6)


def test_encoder_invoked_once_per_run_in_both_modes():
    model = tiny_model()
    frame = bench_frame(32, 32)
    T = Extrinsics.identity()
    for mode in ("sequential", "parallel"):
        result = measure_pipeline(model, frame, T, mode=mode, runs=10)
        assert result["encoder_calls_per_run"] == 1


def test_runs_precondition():
    model = tiny_model()
    with pytest.raises(ValueError):
        measure_pipeline(model, bench_frame(32, 32), Extrinsics.identity(), runs=5)


def test_pad_to_stride():
    frame = bench_frame(30, 33)
    padded = pad_to_stride(frame, 8)
    assert padded.depth.shape == (32, 40)
    np.testing.assert_array_equal(padded.rgb[:30, :33], frame.rgb)
    same = pad_to_stride(frame, 1)
    assert same.depth.shape == (30, 33)


def test_mac_estimate_scales_with_resolution():
    model = tiny_model()
    small = estimate_macs(model, 16, 16)
    large = estimate_macs(model, 32, 32)
    assert small > 0
    assert large == pytest.approx(4 * small, rel=0.05)


def test_report_covers_all_configured_resolutions():
    model = tiny_model()
    rows = run_bench(model, resolutions=((16, 16), (24, 32)), runs=10)
    assert {r["resolution"] for r in rows} == {"16x16", "24x32"}
    assert {r["mode"] for r in rows} == {"sequential", "parallel"}
    for r in rows:
        assert r["macs"] > 0 and r["params"] > 0
        assert r["context_reference_gpu_ms"] == 26.0
    text = format_bench(rows)
    assert "median_ms" in text and "not asserted" in text
