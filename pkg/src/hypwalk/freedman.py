"""Scalar exponential-moment inequalities underlying the submartingale
transform, with exact finite-sum checkers and a fuzzer.

The special function f(lam) = exp(-lam) - 1 + lam drives everything:
f >= 0, and f(x)/x^2 is decreasing, which is what lets a truncation
threshold replace the worst-case support bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import HypwalkError
from .centering import freedman_f


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finitely many real atoms with positive weights summing to 1."""

    values: Tuple[float, ...]
    probabilities: Tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != len(self.probabilities) or not self.values:
            raise HypwalkError("values and probabilities must align and be nonempty")
        if any(p <= 0 for p in self.probabilities):
            raise HypwalkError("probabilities must be positive")
        if abs(math.fsum(self.probabilities) - 1.0) > 1e-12:
            raise HypwalkError("probabilities must sum to 1")

    def mean(self) -> float:
        return math.fsum(p * v for v, p in zip(self.values, self.probabilities))

    def var(self) -> float:
        m = self.mean()
        return math.fsum(p * (v - m) ** 2 for v, p in zip(self.values, self.probabilities))

    def expect(self, fn) -> float:
        return math.fsum(p * fn(v) for v, p in zip(self.values, self.probabilities))


def freedman_base_check(dist: DiscreteDistribution, lam: float) -> float:
    """Margin E[exp(lam X)] - exp(f(lam) Var X) for a centered X >= -1 and
    lam >= 0; nonnegative by the base exponential-moment lemma."""
    if lam < 0:
        raise HypwalkError("the base inequality needs lam >= 0")
    if abs(dist.mean()) > 1e-12:
        raise HypwalkError(f"X must be centered, got mean {dist.mean()}")
    if min(dist.values) < -1.0 - 1e-12:
        raise HypwalkError("X must satisfy X >= -1 almost surely")
    lhs = dist.expect(lambda v: math.exp(lam * v))
    rhs = math.exp(freedman_f(lam) * dist.var())
    return lhs - rhs


def scalar_inequality_check(dist: DiscreteDistribution, lam: float, a: float) -> float:
    """Margin of the truncated-transform inequality

        E[exp(lam X + (f(lam a)/a) |X| 1_{|X| >= a})]
            >= exp((f(lam a)/a^2) E[X^2 1_{|X| <= a}])

    for E[X] >= 0, lam > 0, a > 0; both sides exact finite sums. Ties at
    |X| = a fire both indicators, matching the transform's convention.
    """
    if lam <= 0 or a <= 0:
        raise HypwalkError("need lam > 0 and a > 0")
    if dist.mean() < -1e-12:
        raise HypwalkError(f"E[X] must be >= 0, got {dist.mean()}")
    coeff = freedman_f(lam * a)
    lhs = dist.expect(
        lambda v: math.exp(lam * v + (coeff / a) * abs(v) * (abs(v) >= a))
    )
    rhs = math.exp((coeff / (a * a)) * dist.expect(lambda v: v * v * (abs(v) <= a)))
    return lhs - rhs


@dataclass
class FuzzReport:
    cases: int
    min_margin: float
    min_relative_margin: float
    worst_case: dict
    violations: int


def _random_distribution(rng: np.random.Generator, max_atoms: int = 5,
                         value_scale: float = 10.0,
                         require_centered: bool = False,
                         floor: float = -math.inf) -> DiscreteDistribution:
    for _ in range(10_000):
        k = int(rng.integers(2, max_atoms + 1))
        vals = rng.uniform(-value_scale, value_scale, size=k)
        if floor > -math.inf:
            vals = np.maximum(vals, floor)
        probs = rng.dirichlet(np.ones(k))
        if probs.min() <= 1e-9:
            continue
        probs = probs / probs.sum()
        mean = float(np.dot(vals, probs))
        if require_centered:
            vals = vals - mean
            if floor > -math.inf and vals.min() < floor:
                continue
            mean = 0.0
        if mean < 0:
            continue
        total = math.fsum(probs)
        probs = [p / total for p in probs]
        probs[-1] = 1.0 - math.fsum(probs[:-1])
        if probs[-1] <= 0:
            continue
        return DiscreteDistribution(tuple(float(v) for v in vals), tuple(probs))
    raise RuntimeError("rejection sampler starved")


def fuzz_scalar_inequality(cases: int, seed: int, max_lam_a: float = 3.0) -> FuzzReport:
    """Random (distribution, lam, a) sweep of the truncated-transform
    inequality: atoms 2..5 in [-10, 10], Dirichlet weights, E[X] >= 0
    enforced by rejection, lam a <= max_lam_a."""
    rng = np.random.default_rng(seed)
    min_margin = math.inf
    min_rel = math.inf
    worst = {}
    violations = 0
    for _ in range(cases):
        dist = _random_distribution(rng)
        a = float(rng.uniform(0.1, 10.0))
        lam = float(rng.uniform(1e-4, max_lam_a / a))
        margin = scalar_inequality_check(dist, lam, a)
        lhs = margin + math.exp(
            (freedman_f(lam * a) / (a * a)) * dist.expect(lambda v: v * v * (abs(v) <= a))
        )
        rel = margin / (1.0 + abs(lhs))
        if rel < min_rel:
            min_rel = rel
            worst = {"values": dist.values, "probabilities": dist.probabilities,
                     "lam": lam, "a": a, "margin": margin}
        min_margin = min(min_margin, margin)
        if rel < -1e-9:
            violations += 1
    return FuzzReport(cases=cases, min_margin=min_margin, min_relative_margin=min_rel,
                      worst_case=worst, violations=violations)


def fuzz_freedman_base(cases: int, seed: int, max_lam: float = 3.0) -> FuzzReport:
    """Random centered distributions with support >= -1 against the base
    inequality."""
    rng = np.random.default_rng(seed)
    min_margin = math.inf
    min_rel = math.inf
    worst = {}
    violations = 0
    for _ in range(cases):
        for _ in range(10_000):
            k = int(rng.integers(2, 6))
            vals = rng.uniform(-1.0, 3.0, size=k)
            probs = rng.dirichlet(np.ones(k))
            if probs.min() <= 1e-9:
                continue
            mean = float(np.dot(vals, probs))
            vals = vals - mean         # recenter; may push below -1: reject
            if vals.min() < -1.0:
                continue
            total = math.fsum(probs)
            probs = [p / total for p in probs]
            probs[-1] = 1.0 - math.fsum(probs[:-1])
            if probs[-1] <= 0:
                continue
            dist = DiscreteDistribution(tuple(float(v) for v in vals), tuple(probs))
            break
        else:
            raise RuntimeError("rejection sampler starved")
        lam = float(rng.uniform(0.0, max_lam))
        margin = freedman_base_check(dist, lam)
        lhs = margin + math.exp(freedman_f(lam) * dist.var())
        rel = margin / (1.0 + abs(lhs))
        if rel < min_rel:
            min_rel = rel
            worst = {"values": dist.values, "probabilities": dist.probabilities,
                     "lam": lam, "margin": margin}
        min_margin = min(min_margin, margin)
        if rel < -1e-12:
            violations += 1
    return FuzzReport(cases=cases, min_margin=min_margin, min_relative_margin=min_rel,
                      worst_case=worst, violations=violations)
