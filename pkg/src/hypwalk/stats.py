"""Shared statistical plumbing: stabilized log-mean-exp with delta-method
errors, interval estimates, and isotonic slope repair."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np


@dataclass
class EstimateWithCI:
    value: float
    se: float
    confidence: float = 0.95
    sample_size: int = 0
    method: str = "monte-carlo"   # "monte-carlo" | "exact-dp"
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.se < 0:
            raise ValueError("standard error must be >= 0")
        if self.method == "exact-dp" and self.se != 0:
            raise ValueError("exact-dp estimates carry zero standard error")

    @property
    def halfwidth(self) -> float:
        z = {0.9: 1.6449, 0.95: 1.9600, 0.99: 2.5758}.get(round(self.confidence, 2), 1.96)
        return z * self.se

    def interval(self) -> Tuple[float, float]:
        return self.value - self.halfwidth, self.value + self.halfwidth

    def agrees_with(self, other: "EstimateWithCI") -> bool:
        """Joint-CI agreement: the difference is within the combined
        halfwidths (exact estimates contribute zero width)."""
        return abs(self.value - other.value) <= self.halfwidth + other.halfwidth


def exact_estimate(value: float) -> EstimateWithCI:
    return EstimateWithCI(value=value, se=0.0, method="exact-dp")


def logmeanexp(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    top = values.max()
    if not math.isfinite(top):
        return float(top)
    return float(top + math.log(np.exp(values - top).mean()))


def logmeanexp_with_se(values: np.ndarray) -> Tuple[float, float, float]:
    """(log mean(exp v), delta-method SE of the log, effective sample size).

    Exponential weighting collapses the effective sample; ESS is reported
    so callers can flag cells where the delta method is untrustworthy.
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    top = values.max()
    w = np.exp(values - top)
    mean = w.mean()
    var = w.var(ddof=1) if n > 1 else 0.0
    se = math.sqrt(var / n) / mean if mean > 0 else math.inf
    ssq = float((w * w).sum())
    ess = float(w.sum() ** 2 / ssq) if ssq > 0 else 0.0
    return float(top + math.log(mean)), se, ess


def wilson_interval(hits: int, trials: int, confidence: float = 0.95) -> Tuple[float, float]:
    if trials <= 0:
        raise ValueError("trials must be positive")
    z = {0.9: 1.6449, 0.95: 1.9600, 0.99: 2.5758}.get(round(confidence, 2), 1.96)
    p = hits / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


def isotonic_increasing(y: np.ndarray, w: Optional[np.ndarray] = None) -> np.ndarray:
    """Pool-adjacent-violators fit of a nondecreasing sequence."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    vals: list = []
    weights: list = []
    counts: list = []
    for yi, wi in zip(y, w):
        vals.append(yi)
        weights.append(wi)
        counts.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v = (vals[-2] * weights[-2] + vals[-1] * weights[-1]) / (weights[-2] + weights[-1])
            wsum = weights[-2] + weights[-1]
            c = counts[-2] + counts[-1]
            vals = vals[:-2] + [v]
            weights = weights[:-2] + [wsum]
            counts = counts[:-2] + [c]
    out = np.empty_like(y)
    pos = 0
    for v, c in zip(vals, counts):
        out[pos : pos + c] = v
        pos += c
    return out


def mean_with_se(values: np.ndarray) -> EstimateWithCI:
    values = np.asarray(values, dtype=float)
    n = values.size
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EstimateWithCI(value=float(values.mean()), se=se, sample_size=n)


def variance_with_se(values: np.ndarray) -> EstimateWithCI:
    """Sample variance with a fourth-moment (non-normal-safe) SE."""
    values = np.asarray(values, dtype=float)
    n = values.size
    m = values.mean()
    centered = values - m
    m2 = float((centered ** 2).mean())
    m4 = float((centered ** 4).mean())
    var = m2 * n / (n - 1) if n > 1 else 0.0
    se = math.sqrt(max(m4 - m2 * m2, 0.0) / n) if n > 1 else 0.0
    return EstimateWithCI(value=var, se=se, sample_size=n)
