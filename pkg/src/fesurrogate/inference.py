"""Bagged inference: average fixed-size forward passes that jointly cover all points."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .network import NetworkParameters, check_feature_mode, predict_raw


REFERENCE_LATENCY = "published figure: 520 ms for ~14,500 nodes on one GPU (comparison only)"


class InferenceError(ValueError):
    pass


@dataclass
class PredictionResult:
    displacement: np.ndarray   # (N, 3) metres
    pass_counts: np.ndarray    # (N,) occurrences over all passes
    milliseconds: float
    pass_indices: Optional[np.ndarray] = None  # (P, S)
    pass_outputs: Optional[np.ndarray] = None  # (P, S, 3)


def min_passes(n_points: int, points_per_pass: int) -> int:
    return math.ceil(n_points / points_per_pass)


def coverage_schedule(n_points: int, points_per_pass: int, passes: int, seed: int,
                      point_ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Point indices for every pass, shape ``(passes, points_per_pass)``.

    Each sweep permutes all points, cuts them into ``ceil(N/S)`` blocks and
    pads every block to ``S`` with uniform draws from the full set.  Sweeps
    repeat until ``passes`` passes exist, so every point appears at least once.
    When ``point_ids`` is given the schedule is built on the id-sorted order,
    making it independent of the input row order.
    """
    N, S = n_points, points_per_pass
    if N < 1:
        raise InferenceError("need at least one point")
    if S < 2:
        raise InferenceError(f"points_per_pass must be >= 2, got {S}")
    blocks = min_passes(N, S)
    if passes < blocks:
        raise InferenceError(
            f"{passes} passes cannot cover {N} points at {S} per pass; minimum is {blocks}")
    canonical = np.arange(N) if point_ids is None else np.argsort(point_ids, kind="stable")
    rng = np.random.default_rng(seed)
    schedule = np.empty((passes, S), dtype=np.int64)
    p = 0
    while p < passes:
        perm = rng.permutation(N)
        for block in np.array_split(perm, blocks):
            if p == passes:
                break
            pad = rng.integers(0, N, S - len(block))
            schedule[p] = canonical[np.concatenate([block, pad])]
            p += 1
    return schedule


def predict(params: NetworkParameters, features: np.ndarray, points_per_pass: int = 512,
            passes: Optional[int] = None, seed: int = 0, point_ids: Optional[np.ndarray] = None,
            chunk: int = 8, keep_passes: bool = False) -> PredictionResult:
    """Bagged prediction over all ``N`` input points (infer mode only).

    ``passes`` defaults to the minimum covering count ``ceil(N/S)``.
    """
    features = np.asarray(features, dtype=np.float64)
    check_feature_mode(params, features)
    N = len(features)
    S = points_per_pass
    passes = min_passes(N, S) if passes is None else passes
    t0 = time.perf_counter()
    schedule = coverage_schedule(N, S, passes, seed, point_ids)
    outputs = np.empty((passes, S, 3))
    for start in range(0, passes, chunk):
        idx = schedule[start:start + chunk]
        outputs[start:start + chunk] = predict_raw(params, features[idx])
    total, counts = accumulate(schedule, outputs, N)
    displacement = total / counts[:, None]
    ms = (time.perf_counter() - t0) * 1e3
    return PredictionResult(displacement, counts, ms,
                            schedule if keep_passes else None, outputs if keep_passes else None)


def accumulate(schedule: np.ndarray, outputs: np.ndarray, n_points: int):
    """Ordered per-point sums and occurrence counts."""
    flat = schedule.ravel()
    vals = outputs.reshape(-1, 3)
    total = np.stack([np.bincount(flat, weights=vals[:, c], minlength=n_points)
                      for c in range(3)], axis=1)
    counts = np.bincount(flat, minlength=n_points)
    return total, counts


def benchmark_latency(params: NetworkParameters, features: np.ndarray, points_per_pass: int = 512,
                      passes: Optional[int] = None, repeats: int = 5, seed: int = 0) -> dict:
    """Median and p95 wall-clock of :func:`predict` after one discarded warm-up."""
    if repeats < 3:
        raise InferenceError("repeats must be >= 3")
    predict(params, features, points_per_pass, passes, seed)
    times = []
    for r in range(repeats):
        t0 = time.perf_counter()
        predict(params, features, points_per_pass, passes, seed)
        times.append((time.perf_counter() - t0) * 1e3)
    times = np.array(times)
    return {"median_ms": float(np.median(times)), "p95_ms": float(np.percentile(times, 95)),
            "runs_ms": times.tolist(), "n_points": int(len(features)),
            "points_per_pass": points_per_pass,
            "passes": passes or min_passes(len(features), points_per_pass),
            "reference": REFERENCE_LATENCY}
