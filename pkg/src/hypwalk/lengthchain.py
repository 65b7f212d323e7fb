"""Exact dynamic-programming oracles for nearest-neighbor free-group walks.

The distance of the walk from the base point is driven by a stack: each
step either pushes a letter or cancels the current front letter. Two
oracle grades come out of this:

* letter-symmetric measures (all present generator letters carry the same
  mass, letter set closed under inverses, optional identity mass): the
  cancellation probability is the same constant from every nonempty word,
  so the length process alone is an exact birth-death chain;

* general nearest-neighbor measures: the length marginal is not a finite
  Markov chain (cancellation exposes arbitrarily deep letters), so the
  (length, front-letter) refinement closes the pop transition with the
  stationary boundary letter law. Its finite-n marginals are approximate
  and flagged as such, while the drift comes from the boundary fixed
  point and is exact.

The boundary fixed point: the stationary law of the first letter of the
boundary word under prepending a random atom satisfies

    alpha(t) = mu(t) (1 - alpha(t^-1)) + alpha(t) * sum_{f != t^-1} gamma(f),
    gamma(f) = mu(f^-1) alpha(f) / (1 - alpha(f^-1)),

with second-letter kernel B(t, u) = alpha(u) / (1 - alpha(t^-1)) for
u != t^-1, and the escape rate is sum_t alpha(t) (1 - 2 mu(t^-1)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import UnsupportedMeasureError
from .measures import StepMeasure
from .spaces import FreeGroupModel


def _nn_letter_probs(measure: StepMeasure, model: FreeGroupModel):
    """Split a nearest-neighbor measure into per-letter masses and the
    identity mass; raises for atoms that are not single letters."""
    letter_p: Dict[int, float] = {}
    identity_p = 0.0
    for g, p in measure.atoms:
        model.validate_element(g)
        if len(g) == 0:
            identity_p += p
        elif len(g) == 1:
            letter_p[g[0]] = letter_p.get(g[0], 0.0) + p
        else:
            raise UnsupportedMeasureError(
                f"atom {g} has length {len(g)}; length-chain oracles need "
                "single-generator or identity atoms"
            )
    return letter_p, identity_p


def _is_letter_symmetric(letter_p: Dict[int, float]) -> bool:
    if not letter_p:
        return True   # pure identity mass: the length never moves
    probs = list(letter_p.values())
    if any(-s not in letter_p for s in letter_p):
        return False
    return max(probs) - min(probs) <= 1e-15


# --------------------------------------------------------------------------
# boundary letter fixed point

@dataclass
class BoundaryLetterLaw:
    """Stationary first-letter distribution of the boundary chain, the
    induced second-letter kernel, and the exact escape rate (drift)."""

    letters: Tuple[int, ...]
    alpha: Dict[int, float]
    drift: float
    residual: float
    iterations: int

    def kernel(self, t: int, u: int) -> float:
        if u == -t:
            return 0.0
        return self.alpha[u] / (1.0 - self.alpha[-t])


def solve_boundary_letter_law(measure: StepMeasure, model: FreeGroupModel,
                              tol: float = 1e-15,
                              max_iter: int = 200_000) -> BoundaryLetterLaw:
    letter_p, identity_p = _nn_letter_probs(measure, model)
    if identity_p >= 1.0 - 1e-15:
        letters = tuple(sorted(letter_p)) or (1,)
        return BoundaryLetterLaw(letters, {t: 0.0 for t in letters}, 0.0, 0.0, 0)
    # identity steps do not move the boundary point; condition them away
    scale = 1.0 - identity_p
    mu = {t: p / scale for t, p in letter_p.items()}
    letters = tuple(sorted(mu))
    if any(-t not in mu for t in letters):
        raise UnsupportedMeasureError(
            "boundary fixed point needs the letter set closed under inverses"
        )
    alpha = {t: 1.0 / len(letters) for t in letters}
    it = 0
    diff = math.inf
    for it in range(1, max_iter + 1):
        gamma = {f: mu[-f] * alpha[f] / (1.0 - alpha[-f]) for f in letters}
        total_gamma = math.fsum(gamma.values())
        new = {}
        for t in letters:
            new[t] = mu[t] * (1.0 - alpha[-t]) + alpha[t] * (total_gamma - gamma[-t])
        z = math.fsum(new.values())
        new = {t: v / z for t, v in new.items()}
        diff = max(abs(new[t] - alpha[t]) for t in letters)
        alpha = new
        if diff < tol:
            break
    # drift of the conditioned walk, rescaled by the moving fraction
    drift = scale * math.fsum(alpha[t] * (1.0 - 2.0 * mu.get(-t, 0.0)) for t in letters)
    return BoundaryLetterLaw(letters, alpha, drift, diff, it)


# --------------------------------------------------------------------------
# chains

@dataclass
class ChainMoments:
    n: int
    mean: float
    variance: float
    log_mgf: float
    lam: float

    @property
    def mgf(self) -> float:
        return math.exp(self.log_mgf) if self.log_mgf < 700 else math.inf


class LengthChainOracle:
    """Forward-DP oracle for the law of the walk's distance from the base
    point at fixed times.

    ``exact_marginals`` tells whether finite-n distributions are exact
    (letter-symmetric case) or carry the stationary-closure approximation
    (general biased case). ``drift`` is exact in both cases.
    """

    def __init__(self, measure: StepMeasure, model: FreeGroupModel, horizon: int):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.measure = measure
        self.model = model
        self.horizon = horizon
        letter_p, identity_p = _nn_letter_probs(measure, model)
        self.identity_p = identity_p
        self.letter_p = letter_p
        self.symmetric = _is_letter_symmetric(letter_p)
        if self.symmetric:
            omega = len(letter_p)
            p = (1.0 - identity_p) / omega if omega else 0.0
            self.down_p = p
            self.up_p = max(1.0 - identity_p - p, 0.0)
            self.up_from_zero = 1.0 - identity_p
            self.drift = (omega - 2) * p if omega else 0.0
            self.drift_method = "symmetric-chain"
            self.exact_marginals = True
            self.letters: Tuple[int, ...] = tuple(sorted(letter_p))
            self.boundary_law: Optional[BoundaryLetterLaw] = None
        else:
            law = solve_boundary_letter_law(measure, model)
            self.boundary_law = law
            self.letters = law.letters
            self.drift = law.drift
            self.drift_method = "boundary-fixed-point"
            self.exact_marginals = False

    # -- state evolution -----------------------------------------------

    def _evolve(self, n: int, lam: float = 0.0,
                checkpoints: Optional[Iterable[int]] = None):
        """Run the forward DP to time n with exponential tilt exp(lam * dm)
        folded into the transitions; per-step renormalization keeps the
        vector in range and accumulates the log normalizer.

        Yields (step, state, log_norm) at each checkpoint (state is the
        [length] or [length, letter] weight array).
        """
        marks = sorted(set(checkpoints)) if checkpoints is not None else [n]
        if marks and marks[-1] > self.horizon:
            raise ValueError(f"requested time {marks[-1]} beyond horizon {self.horizon}")
        N = (marks[-1] if marks else n) + 1
        up_w = math.exp(lam)
        down_w = math.exp(-lam)
        log_norm = 0.0
        if self.symmetric:
            markset = set(marks)
            state = np.zeros(N + 1)
            state[0] = 1.0
            for step in range(1, marks[-1] + 1):
                new = state * self.identity_p
                new[1:] += state[:-1] * self.up_p * up_w
                new[1] += state[0] * (self.up_from_zero - self.up_p) * up_w
                new[:-1] += state[1:] * self.down_p * down_w
                z = new.sum()
                log_norm += math.log(z)
                state = new / z
                if step in markset:
                    yield step, state, log_norm
        else:
            markset = set(marks)
            letters = self.letters
            L = len(letters)
            mu = np.array([self.letter_p[t] for t in letters])
            law = self.boundary_law
            B = np.array([[law.kernel(t, u) for u in letters] for t in letters])
            mu_inv = np.array([self.letter_p[-t] for t in letters])
            push = np.array(
                [[0.0 if u == -t else self.letter_p[u] for u in letters] for t in letters]
            )
            state = np.zeros((N + 1, L))
            zero_mass = 1.0  # probability mass sitting at the empty word
            # step from the empty word pushes any letter
            for step in range(1, marks[-1] + 1):
                new = np.zeros_like(state)
                new_zero = zero_mass * self.identity_p
                new[1, :] += zero_mass * mu * up_w
                new[1:, :] += state[:-1, :] @ push * up_w
                pop_mass = state[1:, :] * mu_inv[None, :]
                new_zero += pop_mass[0].sum() * down_w
                new[1:-1, :] += (pop_mass[1:, :] @ B) * down_w
                new += state * self.identity_p
                z = new.sum() + new_zero
                log_norm += math.log(z)
                state = new / z
                zero_mass = new_zero / z
                if step in markset:
                    packed = np.concatenate([[zero_mass], state[1:].sum(axis=1)])
                    yield step, packed, log_norm

    # -- public queries --------------------------------------------------

    def distribution(self, n: int) -> np.ndarray:
        """Length marginal at time n (index = distance)."""
        for _, state, _ in self._evolve(n, 0.0, [n]):
            return state[: n + 1].copy()
        raise RuntimeError("unreachable")

    def moments(self, n: int, lam: float = 0.0) -> ChainMoments:
        dist = self.distribution(n)
        m = np.arange(dist.size)
        mean = float(np.dot(dist, m))
        var = float(np.dot(dist, (m - mean) ** 2))
        log_mgf = self.log_mgf(lam, n)
        return ChainMoments(n=n, mean=mean, variance=var, log_mgf=log_mgf, lam=lam)

    def log_mgf(self, lam: float, n: int) -> float:
        """log E[exp(lam * kappa_n)], exact in log domain."""
        dist = self.distribution(n)
        m = np.arange(dist.size, dtype=float)
        with np.errstate(divide="ignore"):
            logp = np.where(dist > 0, np.log(np.maximum(dist, 1e-320)), -np.inf)
        vals = logp + lam * m
        top = vals.max()
        return float(top + math.log(np.exp(vals - top).sum()))

    def log_mgf_table(self, lams: Sequence[float], n_list: Sequence[int]) -> Dict[Tuple[float, int], float]:
        """One forward pass; log E[exp(lam kappa_n)] for every (lam, n)."""
        out: Dict[Tuple[float, int], float] = {}
        for step, state, _ in self._evolve(max(n_list), 0.0, n_list):
            dist = state
            m = np.arange(dist.size, dtype=float)
            with np.errstate(divide="ignore"):
                logp = np.where(dist > 0, np.log(np.maximum(dist, 1e-320)), -np.inf)
            for lam in lams:
                vals = logp + lam * m
                top = vals.max()
                out[(lam, step)] = float(top + math.log(np.exp(vals - top).sum()))
        return out

    def drift_estimate(self, n: Optional[int] = None) -> float:
        """Boundary-effect-free drift from mean increments: the chain's
        stationary increment rate (E[kappa_{2n}] - E[kappa_n]) / n."""
        n = n or min(self.horizon // 2, 1000)
        means = {}
        for step, state, _ in self._evolve(2 * n, 0.0, [n, 2 * n]):
            m = np.arange(state.size)
            means[step] = float(np.dot(state, m))
        return (means[2 * n] - means[n]) / n


def build_length_chain(measure: StepMeasure, model: FreeGroupModel,
                       horizon: int) -> LengthChainOracle:
    if not isinstance(model, FreeGroupModel):
        raise UnsupportedMeasureError("length-chain oracles exist for free-group models only")
    return LengthChainOracle(measure, model, horizon)


# --------------------------------------------------------------------------
# auxiliary exact chain: distance minus boundary cocycle

class TailRunChain:
    """Exact joint law of (distance, trailing run) for a letter-symmetric
    walk against an eventually-constant boundary word.

    The gap kappa(L_n) - sigma(L_n, s^inf) equals twice the trailing run
    of s^-1 letters in the walk word. The run is frozen while the word is
    longer than the run and only moves when the word consists of run
    letters alone, so (length, run) is a Markov pair for symmetric
    measures. States are packed as dicts {(m, r): prob}.
    """

    def __init__(self, measure: StepMeasure, model: FreeGroupModel):
        letter_p, identity_p = _nn_letter_probs(measure, model)
        if not _is_letter_symmetric(letter_p):
            raise UnsupportedMeasureError("tail-run chain requires a letter-symmetric measure")
        self.omega = len(letter_p)
        self.p = (1.0 - identity_p) / self.omega
        self.p0 = identity_p

    def gap_distribution(self, n: int) -> Dict[int, np.ndarray]:
        """Distribution of the gap 2r at every step up to n; returns
        {step: array over r}."""
        p, p0, omega = self.p, self.p0, self.omega
        cur: Dict[Tuple[int, int], float] = {(0, 0): 1.0}
        out: Dict[int, np.ndarray] = {}
        for step in range(1, n + 1):
            nxt: Dict[Tuple[int, int], float] = {}
            def add(key, v):
                nxt[key] = nxt.get(key, 0.0) + v
            for (m, r), q in cur.items():
                if p0:
                    add((m, r), q * p0)
                if m == 0:
                    add((1, 1), q * p)                  # step s^-1 eats the tail
                    add((1, 0), q * (omega - 1) * p)
                elif m > r:
                    add((m - 1, r), q * p)              # cancel the front letter
                    add((m + 1, r), q * (omega - 1) * p)
                else:  # m == r: word is pure run letters
                    add((r - 1, r - 1), q * p)          # step s shortens the run
                    add((r + 1, r + 1), q * p)          # step s^-1 extends it
                    add((r + 1, r), q * (omega - 2) * p)
            cur = nxt
            rmax = max(r for (_, r) in cur)
            arr = np.zeros(rmax + 1)
            for (m, r), q in cur.items():
                arr[r] += q
            out[step] = arr
        return out

    def tail_probability(self, n: int, threshold: float) -> float:
        """P(kappa - sigma > threshold) at time n (gap = 2r)."""
        arr = self.gap_distribution(n)[n]
        r = np.arange(arr.size)
        return float(arr[2 * r > threshold].sum())
