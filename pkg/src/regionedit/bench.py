"""Benchmark harness: runtime scaling, step-skip ablation, variant toggles.

Produces RFC-4180 CSV files (stdlib csv) and small self-contained SVG
charts. Timing rows are raw per-repetition measurements; aggregation
(median, p10, p90) happens in `summarize_scaling` so the CSV stays
replayable.

Two runtime variants are compared for the scaling claim:

* ``windowed``  - the full pipeline: mask-derived active windows,
  windowed attention, static-lane cache, single integrated sequence.
* ``dense``     - a naive editor that regenerates the entire canvas
  every time: the request mask is forced to cover the full image and
  attention runs dense without caching, so its cost cannot depend on
  how small the requested edit is.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError
from .pipeline import (EditRequest, PipelineConfig, SyntheticProxyEditor,
                       run_edit, synthetic_scene)
from .rng import Rng

RATIO_GRID = (10, 25, 50, 75, 90)
SKIP_GRID = (0, 10, 14, 18, 22, 24)

SCALING_COLUMNS = (
    "variant", "ratio_pct", "rep", "image_size", "grid_rows", "grid_cols",
    "window", "halo", "total_steps", "skipped", "executed_steps", "threads",
    "live_tokens", "active_windows", "total_windows",
    "proxy_ms", "mask_ms", "assembly_ms", "sampling_ms", "composite_ms",
    "total_ms", "flops_windowed", "flops_dense",
)

ABLATION_COLUMNS = (
    "skipped", "fixture", "executed_steps", "sampling_ms", "total_ms", "mse",
)

TOGGLE_COLUMNS = (
    "toggle", "fixture", "sampling_ms", "total_ms", "max_abs_diff",
)


@dataclass
class BenchConfig:
    image_size: int = 128
    ratios: tuple = RATIO_GRID
    reps: int = 5
    warmup: int = 1
    seed: int = 0
    threads: int = 0               # informational; recorded per row
    variants: tuple = ("windowed", "dense")

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if not self.ratios:
            raise ConfigError("ratios must be non-empty")
        for r in self.ratios:
            if not 0 < r < 100:
                raise ConfigError(f"ratio_pct must be in (0, 100), got {r}")


def detected_threads() -> int:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        value = os.environ.get(var, "").strip()
        if value.isdigit() and int(value) > 0:
            return int(value)
    return os.cpu_count() or 1


def band_scene(rng: Rng, size: int, ratio_pct: int):
    """Synthetic scene whose edit region is a full-width horizontal band
    covering ratio_pct percent of the canvas. Bands keep the requested
    area exact while the vertical offset varies per repetition."""
    from .pipeline import apply_op
    scene = synthetic_scene(rng, size)
    h = max(1, int(round(size * ratio_pct / 100.0)))
    top = int(rng.integers(0, size - h + 1))
    region = np.zeros((size, size), dtype=bool)
    region[top:top + h, :] = True
    target = apply_op(scene.source, region, int(scene.instruction[0]))
    return replace(scene, region=region, target=target)


def _timed_edit(model, scene, pipe: PipelineConfig, seed: int):
    proxy = SyntheticProxyEditor()
    request = EditRequest(source=scene.source, instruction=scene.instruction,
                          user_mask=scene.region)
    return run_edit(model, proxy, request, pipe, seed=seed)


def run_scaling_bench(model, pipe: PipelineConfig, bcfg: BenchConfig,
                      log=None) -> list:
    """Measure edit runtime against requested edit area for each variant.

    Returns one dict per (variant, ratio, rep) matching SCALING_COLUMNS.
    """
    cfg = model.config
    grid = bcfg.image_size // cfg.patch
    threads = bcfg.threads or detected_threads()
    dense_pipe = replace(pipe, use_windowed=False, use_cache=False)
    rows = []
    # Sweep all ratios within each repetition, rotating the visit order per
    # rep, so slow machine-load drift spreads across ratios instead of
    # aliasing into the fitted slope.
    for rep in range(-bcfg.warmup, bcfg.reps):
        shift = max(rep, 0) % len(bcfg.ratios)
        for ratio in bcfg.ratios[shift:] + bcfg.ratios[:shift]:
            rng = Rng(bcfg.seed + 7451 * ratio + max(rep, 0), 2)
            scene = band_scene(rng, bcfg.image_size, ratio)
            for variant in bcfg.variants:
                if variant == "windowed":
                    result = _timed_edit(model, scene, pipe, seed=bcfg.seed)
                elif variant == "dense":
                    full = replace(scene, region=np.ones_like(scene.region))
                    result = _timed_edit(model, full, dense_pipe,
                                         seed=bcfg.seed)
                else:
                    raise ConfigError(f"unknown bench variant {variant!r}")
                if rep < 0:
                    continue       # warmup repetition, not recorded
                t = result.timings_ms
                info = result.info
                rows.append({
                    "variant": variant, "ratio_pct": ratio, "rep": rep,
                    "image_size": bcfg.image_size,
                    "grid_rows": grid, "grid_cols": grid,
                    "window": cfg.window, "halo": cfg.halo,
                    "total_steps": pipe.total_steps, "skipped": pipe.skipped,
                    "executed_steps": info["executed_steps"],
                    "threads": threads,
                    "live_tokens": info["live_tokens"],
                    "active_windows": info["active_windows"],
                    "total_windows": info["total_windows"],
                    "proxy_ms": round(t["proxy"], 3),
                    "mask_ms": round(t["mask"], 3),
                    "assembly_ms": round(t["assembly"], 3),
                    "sampling_ms": round(t["sampling"], 3),
                    "composite_ms": round(t["composite"], 3),
                    "total_ms": round(sum(t.values()), 3),
                    "flops_windowed": info["flops_windowed"],
                    "flops_dense": info["flops_dense"],
                })
                if log is not None:
                    log(f"ratio={ratio:3d}% rep={rep} {variant:8s} "
                        f"sampling={rows[-1]['sampling_ms']:.1f}ms")
    return rows


def summarize_scaling(rows) -> dict:
    """Per (variant, ratio): min/median/p10/p90 of the sampling stage."""
    grouped = {}
    for row in rows:
        grouped.setdefault((row["variant"], row["ratio_pct"]), []).append(
            float(row["sampling_ms"]))
    out = {}
    for key, vals in grouped.items():
        arr = np.asarray(vals, dtype=np.float64)
        out[key] = {
            "min": float(arr.min()),
            "median": float(np.median(arr)),
            "p10": float(np.percentile(arr, 10)),
            "p90": float(np.percentile(arr, 90)),
            "n": int(arr.size),
        }
    return out


def fit_line(xs, ys):
    """Least squares y = slope*x + intercept; returns (slope, intercept, r2).

    r2 is 1.0 for a perfect fit; a constant series has ss_tot == 0 and
    reports r2 = 0.0 (no variance explained, none present).
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise UsageError("need at least two points to fit a line")
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 0.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def scaling_fits(summary) -> dict:
    """Line fits of sampling time against edit ratio per variant.

    Fits the per-cell minimum over repetitions: contention only ever adds
    time, so the minimum is the estimator of the undisturbed cost and the
    one that keeps transient load spikes out of the slope.
    """
    out = {}
    for variant in sorted({v for v, _ in summary}):
        pts = sorted((r, summary[(variant, r)]["min"])
                     for v, r in summary if v == variant)
        xs = [p[0] / 100.0 for p in pts]
        ys = [p[1] for p in pts]
        slope, intercept, r2 = fit_line(xs, ys)
        out[variant] = {"slope": slope, "intercept": intercept, "r2": r2}
    return out


def run_skip_ablation(model, pipe: PipelineConfig, skips=SKIP_GRID,
                      fixtures: int = 8, image_size: int = 64,
                      seed: int = 0, log=None):
    """MSE against ground truth and sampling time for each skip setting.

    Returns (rows, summary) where summary carries per-skip medians and
    the knee: the largest skip whose median MSE stays within 15 percent
    of the best median across the grid (most steps saved at negligible
    quality cost). The knee is reported, not asserted anywhere.
    """
    rows = []
    scenes = [synthetic_scene(Rng(seed + 31 * i, 2), image_size)
              for i in range(fixtures)]
    for skip in skips:
        variant = replace(pipe, skipped=skip)
        for i, scene in enumerate(scenes):
            result = _timed_edit(model, scene, variant, seed=seed)
            err = result.image.astype(np.float64) - scene.target
            rows.append({
                "skipped": skip, "fixture": i,
                "executed_steps": result.info["executed_steps"],
                "sampling_ms": round(result.timings_ms["sampling"], 3),
                "total_ms": round(sum(result.timings_ms.values()), 3),
                "mse": float(np.mean(err ** 2)),
            })
        if log is not None:
            med = np.median([r["mse"] for r in rows if r["skipped"] == skip])
            log(f"skip={skip:2d} median_mse={med:.6f}")
    per_skip = {}
    for skip in skips:
        sel = [r for r in rows if r["skipped"] == skip]
        per_skip[skip] = {
            "median_mse": float(np.median([r["mse"] for r in sel])),
            "median_sampling_ms": float(np.median([r["sampling_ms"]
                                                   for r in sel])),
            "executed_steps": sel[0]["executed_steps"],
        }
    best = min(v["median_mse"] for v in per_skip.values())
    knee = max((s for s, v in per_skip.items()
                if v["median_mse"] <= 1.15 * best), default=min(skips))
    return rows, {"per_skip": per_skip, "knee_skip": int(knee),
                  "best_median_mse": best}


def run_toggle_bench(model, pipe: PipelineConfig, fixtures: int = 3,
                     image_size: int = 64, seed: int = 0):
    """Ablation toggles: turn each fast path off, compare against baseline.

    Returns rows with the max |difference| in the final image and stage
    timings, plus baseline rows under toggle='none'.
    """
    toggles = {
        "none": {},
        "windowed_off": {"use_windowed": False},
        "cache_off": {"use_cache": False},
        "integration_off": {"use_integration": False},
    }
    scenes = [synthetic_scene(Rng(seed + 17 * i, 2), image_size)
              for i in range(fixtures)]
    rows = []
    # Baseline and toggles run back to back per fixture so each timing
    # comparison sees the same machine conditions.
    for i, scene in enumerate(scenes):
        baseline = None
        for name, overrides in toggles.items():
            variant = replace(pipe, **overrides)
            result = _timed_edit(model, scene, variant, seed=seed)
            if name == "none":
                baseline = result.image.astype(np.float64)
                diff = 0.0
            else:
                diff = float(np.max(np.abs(
                    result.image.astype(np.float64) - baseline)))
            rows.append({
                "toggle": name, "fixture": i,
                "sampling_ms": round(result.timings_ms["sampling"], 3),
                "total_ms": round(sum(result.timings_ms.values()), 3),
                "max_abs_diff": diff,
            })
    return rows


def paired_init_eval(model, pipe: PipelineConfig, fixtures: int = 50,
                     image_size: int = 64, seed: int = 0, log=None):
    """Same-budget comparison of flow initialization strategies.

    For each fixture the edit runs twice with everything held fixed
    except the start of the flow: once from the blended reference state
    on a truncated schedule, once from pure noise on a schedule with the
    same number of executed steps. Returns per-fixture full-image MSE
    pairs and the fraction of fixtures the blended start wins.
    """
    executed = pipe.schedule.executed
    noise_pipe = replace(pipe, total_steps=executed, skipped=0)
    pairs = []
    for i in range(fixtures):
        scene = synthetic_scene(Rng(seed + 101 * i, 2), image_size)
        res_ref = _timed_edit(model, scene, pipe, seed=seed)
        res_noise = _timed_edit(model, scene, noise_pipe, seed=seed)
        mse_ref = float(np.mean(
            (res_ref.image.astype(np.float64) - scene.target) ** 2))
        mse_noise = float(np.mean(
            (res_noise.image.astype(np.float64) - scene.target) ** 2))
        pairs.append((mse_ref, mse_noise))
        if log is not None and (i + 1) % 10 == 0:
            wins = sum(a < b for a, b in pairs)
            log(f"fixtures={i + 1} wins={wins}")
    wins = sum(a < b for a, b in pairs)
    return pairs, wins / len(pairs)


def write_csv(rows, path, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _ticks(lo, hi, count=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min(s for s in (mag, 2 * mag, 5 * mag, 10 * mag) if s >= raw)
    start = math.ceil(lo / step) * step
    vals = []
    v = start
    while v <= hi + 1e-9 * step:
        vals.append(round(v, 10))
        v += step
    return vals


_PALETTE = ("#1e66a8", "#c2452d", "#3c8a4b", "#8453a8", "#b08020")


def svg_line_chart(path, series, title, xlabel, ylabel,
                   width=680, height=420):
    """Minimal line chart writer. `series` is a list of (name, points)
    where each point is (x, y) or (x, y, lo, hi) for an error bar."""
    ml, mr, mt, mb = 64, 16, 36, 48
    pw, ph = width - ml - mr, height - mt - mb
    xs = [p[0] for _, pts in series for p in pts]
    ys = [p[1] for _, pts in series for p in pts]
    ys += [p[2] for _, pts in series for p in pts if len(p) > 2]
    ys += [p[3] for _, pts in series for p in pts if len(p) > 3]
    if not xs:
        raise UsageError("no data to chart")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    pad = 0.05 * (y1 - y0) or 1.0
    y0, y1 = y0 - pad, y1 + pad

    def sx(x):
        return ml + pw * (x - x0) / (x1 - x0)

    def sy(y):
        return mt + ph * (1.0 - (y - y0) / (y1 - y0))

    def esc(s):
        return (str(s).replace("&", "&amp;").replace("<", "&lt;")
                .replace(">", "&gt;"))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
           f'font-size="14">{esc(title)}</text>']
    for tv in _ticks(x0, x1):
        px = sx(tv)
        out.append(f'<line x1="{px:.1f}" y1="{mt}" x2="{px:.1f}" '
                   f'y2="{mt + ph}" stroke="#ddd"/>')
        out.append(f'<text x="{px:.1f}" y="{mt + ph + 16}" '
                   f'text-anchor="middle">{tv:g}</text>')
    for tv in _ticks(y0, y1):
        py = sy(tv)
        out.append(f'<line x1="{ml}" y1="{py:.1f}" x2="{ml + pw}" '
                   f'y2="{py:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{ml - 6}" y="{py + 4:.1f}" '
                   f'text-anchor="end">{tv:g}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" '
               f'fill="none" stroke="#444"/>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" '
               f'text-anchor="middle">{esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">'
               f'{esc(ylabel)}</text>')
    for idx, (name, pts) in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        pts = sorted(pts)
        coords = " ".join(f"{sx(p[0]):.1f},{sy(p[1]):.1f}" for p in pts)
        out.append(f'<polyline points="{coords}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        for p in pts:
            if len(p) > 3:
                out.append(f'<line x1="{sx(p[0]):.1f}" y1="{sy(p[2]):.1f}" '
                           f'x2="{sx(p[0]):.1f}" y2="{sy(p[3]):.1f}" '
                           f'stroke="{color}" stroke-width="1"/>')
            out.append(f'<circle cx="{sx(p[0]):.1f}" cy="{sy(p[1]):.1f}" '
                       f'r="3" fill="{color}"/>')
        ly = mt + 16 + 16 * idx
        out.append(f'<line x1="{ml + pw - 130}" y1="{ly - 4}" '
                   f'x2="{ml + pw - 106}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{ml + pw - 100}" y="{ly}">{esc(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out))


def scaling_chart(summary, path):
    series = []
    for variant in sorted({v for v, _ in summary}):
        pts = [(r, summary[(variant, r)]["median"],
                summary[(variant, r)]["p10"], summary[(variant, r)]["p90"])
               for v, r in sorted(summary) if v == variant]
        series.append((variant, pts))
    svg_line_chart(path, series, "Sampling time vs requested edit area",
                   "edit area (% of canvas)", "sampling stage (ms)")


def ablation_chart(summary, path):
    per_skip = summary["per_skip"]
    pts = [(skip, vals["median_mse"]) for skip, vals in per_skip.items()]
    knee = summary["knee_skip"]
    series = [("median MSE", pts),
              ("knee", [(knee, per_skip[knee]["median_mse"])])]
    svg_line_chart(path, series, "Reconstruction error vs skipped steps",
                   "skipped steps", "full-image MSE")
