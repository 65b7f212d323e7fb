"""Trajectory sampling with counter-based reproducibility.

Every random stream is a Philox generator keyed by (master seed, stream
index). Path-block engines draw whole blocks from one stream, so results
depend only on how trajectories are partitioned into blocks (fixed by the
configuration), never on how blocks are scheduled across workers. Merging
block results in block order therefore reproduces the single-worker
output bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import TruncationError, UnsupportedMeasureError
from .measures import StepMeasure
from .spaces import BoundaryTarget, FreeGroupModel

DEFAULT_BLOCK_SIZE = 8192
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SeedSpec:
    """Master seed plus stream index; (seed, stream) -> independent Philox
    stream, bit-reproducible on every platform and worker layout."""

    master_seed: int
    stream: int = 0

    def philox(self) -> np.random.Generator:
        key = ((self.master_seed & _MASK64) << 64) | (self.stream & _MASK64)
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, index: int) -> "SeedSpec":
        return SeedSpec(self.master_seed, self.stream + index)


@dataclass
class Trajectory:
    """One walk realization: displacement series and per-target cocycle
    series (NaN after a truncation failure of that target)."""

    seed: SeedSpec
    n: int
    kappas: np.ndarray
    sigmas: Dict[int, np.ndarray] = field(default_factory=dict)
    increments: Optional[List[object]] = None
    truncation_failures: Dict[int, int] = field(default_factory=dict)

    def to_csv(self, path, target_labels: Optional[Sequence[str]] = None) -> None:
        labels = (
            [f"sigma_{i}" for i in sorted(self.sigmas)]
            if target_labels is None
            else list(target_labels)
        )
        with open(path, "w") as fh:
            fh.write("step,kappa" + "".join(f",{l}" for l in labels) + "\n")
            for step in range(self.n + 1):
                row = [str(step), repr(float(self.kappas[step]))]
                for i in sorted(self.sigmas):
                    row.append(repr(float(self.sigmas[i][step])))
                fh.write(",".join(row) + "\n")


def _draw_atoms(rng: np.random.Generator, cumulative: np.ndarray, size: int) -> np.ndarray:
    idx = np.searchsorted(cumulative, rng.random(size), side="right")
    return np.minimum(idx, len(cumulative) - 1)  # guard the cumsum != 1.0 ulp edge


def sample_path(measure: StepMeasure, n: int, seed: SeedSpec,
                targets: Sequence[BoundaryTarget] = (), model=None,
                keep_increments: bool = False) -> Trajectory:
    """Sample one trajectory of the left walk, L_i = X_i . L_{i-1}.

    Exact on the free group; the H^2 variant renormalizes the running
    matrix each step. Boundary-target cocycle series are accumulated with
    the cocycle identity, so each step costs one increment evaluation.
    """
    if model is None:
        raise ValueError("model is required")
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = seed.philox()
    cumulative = np.cumsum(measure.probabilities)
    kappas = np.zeros(n + 1)
    sigmas = {i: np.zeros(n + 1) for i in range(len(targets))}
    dead: Dict[int, int] = {}
    state = {i: t for i, t in enumerate(targets)}
    # track the walk point, not the running matrix: the point orbit stays
    # numerically sound long after det-1 products lose their determinant
    position = model.o
    increments: Optional[List[object]] = [] if keep_increments else None
    draws = _draw_atoms(rng, cumulative, n) if n else np.empty(0, dtype=int)
    for step in range(1, n + 1):
        g = measure.elements[int(draws[step - 1])]
        if increments is not None:
            increments.append(g)
        position = model.apply(g, position)
        kappas[step] = model.distance(position, model.o)
        for i in list(state):
            if i in dead:
                sigmas[i][step] = math.nan
                continue
            target = state[i]
            try:
                inc = model.cocycle(g, target)
                state[i] = model.boundary_action(g, target)
                sigmas[i][step] = sigmas[i][step - 1] + inc
            except TruncationError:
                dead[i] = step
                sigmas[i][step] = math.nan
    return Trajectory(
        seed=seed, n=n, kappas=kappas, sigmas=sigmas,
        increments=increments, truncation_failures=dead,
    )


# --------------------------------------------------------------------------
# vectorized block engines (free group, nearest-neighbor measures)

def nn_letter_arrays(measure: StepMeasure, model: FreeGroupModel):
    """Letters (0 = identity atom) and cumulative probabilities for the
    vectorized samplers; rejects atoms longer than one letter."""
    letters = []
    for g, _ in measure.atoms:
        model.validate_element(g)
        if len(g) > 1:
            raise UnsupportedMeasureError(
                "block sampler needs nearest-neighbor atoms; "
                f"got word of length {len(g)}"
            )
        letters.append(g[0] if g else 0)
    probs = np.asarray(measure.probabilities)
    return np.asarray(letters, dtype=np.int8), np.cumsum(probs)


class WalkBlockState:
    """Vectorized left-walk word state for a block of paths.

    The stack stores each reduced word back-to-front (index 0 is the last
    letter of the word, the top is the first letter), which is where
    prepending pushes and cancels.
    """

    def __init__(self, block_size: int, horizon: int,
                 initial_word: Tuple[int, ...] = ()):
        self.stack = np.zeros((block_size, horizon + 1 + len(initial_word)),
                              dtype=np.int8)
        self.length = np.full(block_size, len(initial_word), dtype=np.int64)
        for i, letter in enumerate(reversed(initial_word)):
            self.stack[:, i] = letter
        self._rows = np.arange(block_size)

    @property
    def kappa(self) -> np.ndarray:
        return self.length

    def front_letter(self) -> np.ndarray:
        """First letter of each word; 0 for empty words."""
        top = self.stack[self._rows, np.maximum(self.length - 1, 0)]
        return np.where(self.length > 0, top, 0).astype(np.int8)

    def step(self, letters: np.ndarray) -> None:
        """Prepend one letter per path (0 = identity, no move)."""
        top = self.front_letter()
        move = letters != 0
        cancel = move & (self.length > 0) & (letters == -top)
        push = move & ~cancel
        self.stack[self._rows[push], self.length[push]] = letters[push]
        self.length += push.astype(np.int64) - cancel.astype(np.int64)

    def trailing_run(self, letter: int, cap: int) -> np.ndarray:
        """Length of the run of `letter` at the back of each word (the
        stack bottom), scanned up to cap letters."""
        cap = min(cap, self.stack.shape[1])
        window = self.stack[:, :cap]
        hit = window == letter
        run = np.where(hit.all(axis=1), cap, np.argmin(hit, axis=1))
        return np.minimum(run, self.length)


def kappa_checkpoint_block(measure: StepMeasure, model: FreeGroupModel,
                           n: int, checkpoints: Sequence[int],
                           seed: SeedSpec, block_size: int,
                           initial_word: Tuple[int, ...] = ()) -> Dict[int, np.ndarray]:
    """Distance-from-base values at the requested times for one block of
    paths; the core engine behind the Monte Carlo deviation curves.

    With ``initial_word`` set, tracks |L_n . p| instead of |L_n| (the
    cocycle observable of the interior target p, up to the constant |p|).
    """
    letters, cumulative = nn_letter_arrays(measure, model)
    marks = sorted(set(checkpoints))
    if marks and marks[-1] > n:
        raise ValueError("checkpoint beyond horizon")
    rng = seed.philox()
    state = WalkBlockState(block_size, n, initial_word=initial_word)
    out: Dict[int, np.ndarray] = {}
    for step in range(1, n + 1):
        idx = _draw_atoms(rng, cumulative, block_size)
        state.step(letters[idx])
        if step in marks:
            out[step] = state.kappa.copy()
    return out


def block_plan(paths: int, block_size: int = DEFAULT_BLOCK_SIZE) -> List[Tuple[int, int]]:
    """(stream index, block path count) pairs covering `paths` trajectories.

    The plan depends only on (paths, block_size), so any worker layout
    that processes these blocks and merges in stream order reproduces the
    sequential result exactly.
    """
    plan = []
    stream = 0
    remaining = paths
    while remaining > 0:
        take = min(block_size, remaining)
        plan.append((stream, take))
        stream += 1
        remaining -= take
    return plan


def pool_starmap(pool, fn, argtuples):
    """Ordered starmap: results come back in submission order whether the
    work ran serially or on a process pool, so block merges are
    layout-independent."""
    argtuples = list(argtuples)
    if pool is None:
        return [fn(*args) for args in argtuples]
    return list(pool.starmap(fn, argtuples))
