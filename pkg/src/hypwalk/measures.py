"""Finitely supported step measures on the isometry group.

Finite support keeps every exponential moment finite and makes
convolution supports enumerable; the declared moment parameter alpha is
recorded anyway because it delimits the lambda-range on which deviation
curves are trusted downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from .errors import HypwalkError
from .spaces import SpaceModel, check_non_elementary


@dataclass(frozen=True)
class StepMeasure:
    """Atoms (group element, probability) with probabilities summing to 1."""

    atoms: Tuple[Tuple[object, float], ...]
    alpha: float = 1.0

    def __post_init__(self):
        if len(self.atoms) == 0:
            raise HypwalkError("measure needs at least one atom")
        if self.alpha <= 0:
            raise HypwalkError("exponential-moment parameter alpha must be > 0")
        for _, p in self.atoms:
            if not (p > 0):
                raise HypwalkError(f"atom probabilities must be positive, got {p}")
        total = math.fsum(p for _, p in self.atoms)
        if abs(total - 1.0) > 1e-12:
            raise HypwalkError(f"probabilities sum to {total}, not 1")

    @property
    def elements(self) -> List[object]:
        return [g for g, _ in self.atoms]

    @property
    def probabilities(self) -> List[float]:
        return [p for _, p in self.atoms]

    def expectation(self, values: Sequence[float]) -> float:
        return math.fsum(p * v for (_, p), v in zip(self.atoms, values))


def uniform_measure(model, element_texts: Sequence, alpha: float = 1.0) -> StepMeasure:
    els = [model.element(t) for t in element_texts]
    p = 1.0 / len(els)
    return StepMeasure(tuple((g, p) for g in els), alpha=alpha)


def dirac(element, alpha: float = 1.0) -> StepMeasure:
    return StepMeasure(((element, 1.0),), alpha=alpha)


@dataclass
class ValidationReport:
    probability_defect: float
    max_displacement: float
    exp_moment: float          # integral of exp(alpha * displacement)
    non_elementary: str        # "verified" | "unknown"
    alpha: float
    atom_count: int
    notes: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.probability_defect <= 1e-12


def validate_measure(measure: StepMeasure, model: SpaceModel,
                     search_depth: int = 3) -> ValidationReport:
    """Check measure axioms and report the moment/non-elementarity data
    downstream estimators assume."""
    for g, _ in measure.atoms:
        model.validate_element(g)
    defect = abs(math.fsum(measure.probabilities) - 1.0)
    kappas = [model.displacement(g) for g in measure.elements]
    exp_moment = math.fsum(
        p * math.exp(measure.alpha * k) for p, k in zip(measure.probabilities, kappas)
    )
    status = check_non_elementary(measure, model, search_depth=search_depth)
    notes = []
    if status != "verified":
        notes.append("non-elementarity not verified; deviation theory untrusted")
    return ValidationReport(
        probability_defect=defect,
        max_displacement=max(kappas),
        exp_moment=exp_moment,
        non_elementary=status,
        alpha=measure.alpha,
        atom_count=len(measure.atoms),
        notes=notes,
    )


def convolution_support(measure: StepMeasure, model: SpaceModel, k: int,
                        cap: int = 100_000):
    """All products of k atoms, deduplicated by the model's element key.

    Returns (elements, overflowed). Free-group words deduplicate exactly;
    plane matrices by quantized sign-normalized entries.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    current = {model.element_key(g): g for g in measure.elements}
    overflow = False
    for _ in range(k - 1):
        nxt = {}
        for g in current.values():
            for h in measure.elements:
                prod = model.multiply(h, g)
                nxt[model.element_key(prod)] = prod
                if len(nxt) > cap:
                    overflow = True
                    break
            if overflow:
                break
        current = nxt
        if overflow:
            break
    return list(current.values()), overflow


def convolution_measure(measure: StepMeasure, model: SpaceModel, k: int,
                        cap: int = 100_000) -> StepMeasure:
    """The k-fold convolution as an explicit StepMeasure (exact probabilities,
    atoms merged by element key)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    table = {model.element_key(g): [g, p] for g, p in measure.atoms}
    for _ in range(k - 1):
        nxt: dict = {}
        for g, p in table.values():
            for h, ph in measure.atoms:
                prod = model.multiply(h, g)
                key = model.element_key(prod)
                if key in nxt:
                    nxt[key][1] += p * ph
                else:
                    nxt[key] = [prod, p * ph]
                if len(nxt) > cap:
                    raise HypwalkError(
                        f"convolution support exceeded cap={cap}; use smaller k"
                    )
        table = nxt
    total = math.fsum(p for _, p in table.values())
    atoms = tuple((g, p / total) for g, p in table.values())
    return StepMeasure(atoms, alpha=measure.alpha)


def non_arithmetic_check(measure: StepMeasure, model: SpaceModel,
                         depth: int = 3, cap: int = 4096) -> str:
    """Look for two elements of the same convolution power with different
    translation distances.

    Returns "verified" or "unknown". The translation-distance criterion is
    only meaningful on top of a non-elementary measure (it is what makes
    the deviation variance positive), so elementary supports report
    "unknown" even when a formal mismatch exists.
    """
    if check_non_elementary(measure, model, search_depth=depth) != "verified":
        return "unknown"
    for n in range(1, depth + 1):
        support, overflowed = convolution_support(measure, model, n, cap=cap)
        taus = sorted(model.translation_distance(g) for g in support)
        if taus[-1] - taus[0] > 1e-9:
            return "verified"
        if overflowed:
            break
    return "unknown"
