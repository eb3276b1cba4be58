import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from regionedit.bench import (ABLATION_COLUMNS, SCALING_COLUMNS,
                              TOGGLE_COLUMNS, BenchConfig, band_scene,
                              detected_threads, fit_line, paired_init_eval,
                              run_scaling_bench, run_skip_ablation,
                              run_toggle_bench, scaling_chart, scaling_fits,
                              summarize_scaling, svg_line_chart, write_csv)
from regionedit.errors import ConfigError, UsageError
from regionedit.pipeline import apply_op
from regionedit.rng import Rng


# -- pure helpers -----------------------------------------------------------

def test_fit_line_recovers_exact_line():
    xs = [0.1, 0.25, 0.5, 0.75, 0.9]
    ys = [3.0 + 40.0 * x for x in xs]
    slope, intercept, r2 = fit_line(xs, ys)
    assert abs(slope - 40.0) < 1e-9
    assert abs(intercept - 3.0) < 1e-9
    assert abs(r2 - 1.0) < 1e-12


def test_fit_line_constant_series_reports_zero_r2():
    slope, intercept, r2 = fit_line([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
    assert abs(slope) < 1e-12
    assert intercept == pytest.approx(5.0)
    assert r2 == 0.0


def test_fit_line_needs_two_points():
    with pytest.raises(UsageError):
        fit_line([1.0], [2.0])


def test_bench_config_validation():
    with pytest.raises(ConfigError):
        BenchConfig(reps=0)
    with pytest.raises(ConfigError):
        BenchConfig(ratios=())
    with pytest.raises(ConfigError):
        BenchConfig(ratios=(0,))
    with pytest.raises(ConfigError):
        BenchConfig(ratios=(100,))


def test_detected_threads_reads_env(monkeypatch):
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    assert detected_threads() >= 1
    monkeypatch.setenv("OMP_NUM_THREADS", "3")
    assert detected_threads() == 3
    monkeypatch.setenv("OPENBLAS_NUM_THREADS", "7")
    assert detected_threads() == 7


def test_band_scene_area_is_exact():
    size = 64
    for ratio in (10, 50, 90):
        scene = band_scene(Rng(0, 2), size, ratio)
        rows_set = int(round(size * ratio / 100.0))
        assert scene.region.sum() == rows_set * size
        # full-width band: every set row is fully set
        row_any = scene.region.any(axis=1)
        assert np.array_equal(scene.region[row_any],
                              np.ones((rows_set, size), dtype=bool))
        redo = apply_op(scene.source, scene.region,
                        int(scene.instruction[0]))
        assert np.array_equal(redo, scene.target)


def test_summarize_scaling_statistics():
    rows = [{"variant": "windowed", "ratio_pct": 25, "sampling_ms": v}
            for v in (10.0, 20.0, 30.0, 40.0, 50.0)]
    rows += [{"variant": "dense", "ratio_pct": 25, "sampling_ms": 7.0}]
    summary = summarize_scaling(rows)
    w = summary[("windowed", 25)]
    assert w["median"] == 30.0 and w["min"] == 10.0 and w["n"] == 5
    assert w["p10"] < w["median"] < w["p90"]
    assert summary[("dense", 25)]["median"] == 7.0


def test_scaling_fits_from_synthetic_summary():
    summary = {}
    for r in (10, 25, 50, 75, 90):
        x = r / 100.0
        summary[("windowed", r)] = {"min": 4.0 + 30.0 * x}
        summary[("dense", r)] = {"min": 55.0}
    fits = scaling_fits(summary)
    assert fits["windowed"]["slope"] == pytest.approx(30.0)
    assert fits["windowed"]["intercept"] == pytest.approx(4.0)
    assert fits["windowed"]["r2"] == pytest.approx(1.0)
    assert abs(fits["dense"]["slope"]) < 1e-9
    assert fits["dense"]["r2"] == 0.0


def test_write_csv_roundtrip(tmp_path):
    rows = [{"a": 1, "b": "x"}, {"a": 2, "b": "y"}]
    f = tmp_path / "out.csv"
    write_csv(rows, f, ("a", "b"))
    with open(f, newline="") as fh:
        got = list(csv.reader(fh))
    assert got == [["a", "b"], ["1", "x"], ["2", "y"]]


def test_svg_chart_is_wellformed_xml(tmp_path):
    f = tmp_path / "chart.svg"
    series = [
        ("plain", [(0.1, 5.0), (0.5, 9.0), (0.9, 13.0)]),
        ("bars", [(0.1, 7.0, 6.0, 8.0), (0.9, 11.0, 10.0, 12.0)]),
    ]
    svg_line_chart(f, series, "title text", "x label", "y label")
    root = ET.parse(f).getroot()
    assert root.tag.endswith("svg")
    text = f.read_text()
    assert "title text" in text and "plain" in text and "bars" in text


def test_scaling_chart_writes_svg(tmp_path):
    summary = {}
    for r in (10, 50, 90):
        summary[("windowed", r)] = {"median": r * 0.3, "p10": r * 0.25,
                                    "p90": r * 0.35, "n": 3}
        summary[("dense", r)] = {"median": 40.0, "p10": 38.0, "p90": 42.0,
                                 "n": 3}
    f = tmp_path / "scaling.svg"
    scaling_chart(summary, f)
    assert ET.parse(f).getroot().tag.endswith("svg")


# -- measured paths on the trained toy model --------------------------------

def test_run_scaling_bench_rows(trained, pipe_cfg):
    bcfg = BenchConfig(image_size=64, ratios=(25, 75), reps=1, warmup=0,
                       seed=0)
    rows = run_scaling_bench(trained, pipe_cfg, bcfg)
    assert len(rows) == 4          # 2 ratios x 1 rep x 2 variants
    for row in rows:
        assert set(row) == set(SCALING_COLUMNS)
        assert row["flops_windowed"] <= row["flops_dense"]
        assert row["sampling_ms"] > 0
    by = {(r["variant"], r["ratio_pct"]): r for r in rows}
    assert (by[("windowed", 25)]["live_tokens"]
            < by[("windowed", 75)]["live_tokens"])
    # dense variant runs the full canvas regardless of ratio
    assert by[("dense", 25)]["live_tokens"] == 64
    assert by[("dense", 25)]["active_windows"] == by[("dense", 25)][
        "total_windows"]


def test_run_toggle_bench_rows(trained, pipe_cfg):
    rows = run_toggle_bench(trained, pipe_cfg, fixtures=1, image_size=64,
                            seed=0)
    assert {r["toggle"] for r in rows} == {"none", "windowed_off",
                                           "cache_off", "integration_off"}
    for row in rows:
        assert set(row) == set(TOGGLE_COLUMNS)
        assert row["max_abs_diff"] <= 1e-5


def test_run_skip_ablation_rows(trained, pipe_cfg):
    rows, summary = run_skip_ablation(trained, pipe_cfg, skips=(0, 18),
                                      fixtures=2, image_size=64, seed=0)
    assert len(rows) == 4
    for row in rows:
        assert set(row) == set(ABLATION_COLUMNS)
    assert set(summary["per_skip"]) == {0, 18}
    assert summary["per_skip"][18]["executed_steps"] == 10
    assert summary["knee_skip"] in (0, 18)
    assert summary["best_median_mse"] >= 0.0


def test_paired_init_eval_shapes(trained, pipe_cfg):
    pairs, winrate = paired_init_eval(trained, pipe_cfg, fixtures=2,
                                      image_size=64, seed=0)
    assert len(pairs) == 2
    assert all(len(p) == 2 and p[0] >= 0 and p[1] >= 0 for p in pairs)
    assert 0.0 <= winrate <= 1.0
