"""Constant-drift cocycle construction and martingale traces.

The displacement cocycle sigma does not have constant drift across the
boundary; a bounded corrector psi solving

    psi - P psi = q - ell,      q(x) = sum_g mu(g) sigma(g, x),

turns it into sigma0(g, x) = sigma(g, x) + psi(g.x) - psi(x) whose mean
increment is ell everywhere. The walk transported to the boundary,
Z_n = L_n . x, is then a Markov chain and M_n = sigma0(L_n, x) - n*ell a
martingale whose predictable bracket accumulates

    phi(x) = sum_g mu(g) (sigma0(g, x) - ell)^2.

Everything is solved on a finite boundary grid. For free groups the grid
holds all reduced words of a fixed depth, each standing for the
eventually-constant boundary word that repeats its last letter; the
induced action is exact on cancellations and drops one deep letter on
prepends, and the solve is against the grid chain's own stationary drift
(the gap to the exact drift is reported, never hidden).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    GridError,
    SolverDivergedError,
    TruncationError,
    UnsupportedMeasureError,
)
from .lengthchain import build_length_chain
from .measures import StepMeasure, convolution_measure
from .sampling import SeedSpec, WalkBlockState, block_plan, pool_starmap
from .spaces import (
    BoundaryTarget,
    FreeBoundary,
    FreeGroupModel,
    PlaneBoundary,
    PlaneModel,
)
from .stats import EstimateWithCI, exact_estimate, mean_with_se
from . import words as W


# --------------------------------------------------------------------------
# boundary grids

class FreeBoundaryGrid:
    """All reduced words of a fixed depth over the free group's letters,
    viewed as repeat-last boundary points. Node lookups are exact; there
    is no interpolation on trees."""

    def __init__(self, model: FreeGroupModel, depth: int = 8):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.model = model
        self.depth = depth
        self.letters = [s for j in range(1, model.rank + 1) for s in (j, -j)]
        words: List[Tuple[int, ...]] = []
        def rec(w: List[int]):
            if len(w) == depth:
                words.append(tuple(w))
                return
            for s in self.letters:
                if not w or s != -w[-1]:
                    w.append(s)
                    rec(w)
                    w.pop()
        rec([])
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        self.array = np.array(words, dtype=np.int8)
        self.first_letter = self.array[:, 0].astype(np.int8)

    def __len__(self) -> int:
        return len(self.words)

    def node_of(self, target: BoundaryTarget) -> int:
        if not isinstance(target, FreeBoundary):
            raise GridError(f"free-group grids hold boundary words, got {target}")
        if target.repeat:
            return self.index[target.materialize(self.depth)]
        if len(target.prefix) < self.depth:
            raise GridError(
                f"prefix of depth {len(target.prefix)} cannot resolve a "
                f"depth-{self.depth} node (prefix-only mode)"
            )
        return self.index[target.prefix[: self.depth]]

    def target_of(self, node: int) -> FreeBoundary:
        return FreeBoundary(self.words[node], True)

    def act_letter(self, s: int) -> np.ndarray:
        """Node image table under prepending one letter. Cancellation is
        exact (re-extends by the repeating letter); a push drops the
        deepest letter."""
        out = np.empty(len(self.words), dtype=np.int64)
        for i, w in enumerate(self.words):
            if s == -w[0]:
                nw = w[1:] + (w[-1],)
            else:
                nw = (s,) + w[:-1]
            out[i] = self.index[nw]
        return out

    def act_word(self, u: Tuple[int, ...]) -> np.ndarray:
        """Node image table under prepending a whole word (exact action on
        the represented point, truncated back to grid depth)."""
        if len(u) == 0:
            return np.arange(len(self.words), dtype=np.int64)
        out = np.empty(len(self.words), dtype=np.int64)
        ext = self.depth + len(u)
        for i, w in enumerate(self.words):
            mat = w + (w[-1],) * (ext - len(w))
            prod = W.multiply(u, mat)
            out[i] = self.index[prod[: self.depth]]
        return out

    def sigma_word(self, u: Tuple[int, ...]) -> np.ndarray:
        """sigma(u, node) for every node: |u| - 2 * (common prefix of u^-1
        with the boundary word); exact, the repeat tail supplies all the
        letters the comparison can need."""
        ui = W.inverse(u)
        out = np.empty(len(self.words))
        for i, w in enumerate(self.words):
            mat = w + (w[-1],) * max(0, len(u) - len(w))
            out[i] = len(u) - 2 * W.common_prefix_len(ui, mat)
        return out

    def lookup_distance(self) -> float:
        return 0.0


class PlaneBoundaryGrid:
    """Angle-parameterized grid on the circle boundary of H^2 with
    nearest-node lookups; lookup displacement is recorded because the
    action only lands near, not on, grid nodes."""

    def __init__(self, model: PlaneModel, size: int = 512):
        self.model = model
        self.size = size
        self.thetas = (np.arange(size) + 0.5) * math.pi / size
        self.max_lookup = 0.0

    def __len__(self) -> int:
        return self.size

    def xi_of(self, node: int) -> float:
        th = self.thetas[node]
        c = math.cos(th)
        return math.inf if abs(c) < 1e-15 else math.sin(th) / c  # tan, poles to inf

    def node_of(self, target: BoundaryTarget) -> int:
        if not isinstance(target, PlaneBoundary):
            raise GridError(f"plane grids hold circle points, got {target}")
        xi = target.xi
        th = math.pi / 2.0 if math.isinf(xi) else math.atan(xi) % math.pi
        idx = int(round(th / (math.pi / self.size) - 0.5)) % self.size
        gap = abs(((self.thetas[idx] - th) + math.pi / 2) % math.pi - math.pi / 2)
        self.max_lookup = max(self.max_lookup, gap)
        return idx

    def target_of(self, node: int) -> PlaneBoundary:
        return PlaneBoundary(self.xi_of(node))

    def act_element(self, g) -> np.ndarray:
        out = np.empty(self.size, dtype=np.int64)
        for i in range(self.size):
            img = self.model.boundary_action(g, self.target_of(i))
            out[i] = self.node_of(img)
        return out

    def sigma_element(self, g) -> np.ndarray:
        out = np.empty(self.size)
        for i in range(self.size):
            out[i] = self.model.cocycle(g, self.target_of(i))
        return out


def build_grid(model, depth: int = 8, plane_size: int = 512):
    if isinstance(model, FreeGroupModel):
        return FreeBoundaryGrid(model, depth)
    return PlaneBoundaryGrid(model, plane_size)


# --------------------------------------------------------------------------
# drift

def plane_kappa_block(measure: StepMeasure, model: PlaneModel, n: int,
                      seed: SeedSpec, block_size: int,
                      checkpoints: Sequence[int] = ()) -> Dict[int, np.ndarray]:
    """Vectorized H^2 displacement sampler: the walk point obeys
    z_n = X_n . z_{n-1}, so one Moebius update per step suffices. The
    horizon is limited by Im z underflow (kappa beyond ~600)."""
    marks = sorted(set(checkpoints)) or [n]
    mats = np.stack([np.asarray(g, dtype=float) for g in measure.elements])
    cumulative = np.cumsum(measure.probabilities)
    rng = seed.philox()
    z = np.full(block_size, 1j, dtype=complex)
    out: Dict[int, np.ndarray] = {}
    for step in range(1, marks[-1] + 1):
        idx = np.minimum(np.searchsorted(cumulative, rng.random(block_size), side="right"),
                         len(cumulative) - 1)
        a, b = mats[idx, 0, 0], mats[idx, 0, 1]
        c, d = mats[idx, 1, 0], mats[idx, 1, 1]
        z = (a * z + b) / (c * z + d)
        if z.imag.min() < 1e-280:
            raise UnsupportedMeasureError(
                f"plane sampler degenerated at step {step}; shorten the horizon"
            )
        if step in marks:
            t = 1.0 + np.abs(z - 1j) ** 2 / (2.0 * z.imag)
            out[step] = np.arccosh(np.maximum(t, 1.0))
    return out


def drift_of(measure: StepMeasure, model, paths: int = 20_000, n: int = 300,
             seed: Optional[SeedSpec] = None) -> EstimateWithCI:
    """Escape rate of the walk. Exact through the length-chain oracle for
    nearest-neighbor free-group measures, Monte Carlo otherwise."""
    if isinstance(model, FreeGroupModel):
        try:
            chain = build_length_chain(measure, model, max(2 * n, 16))
            return exact_estimate(chain.drift)
        except UnsupportedMeasureError:
            pass
    seed = seed or SeedSpec(0, 900_000)
    if isinstance(model, PlaneModel):
        n = min(n, 250)   # Im z underflows once kappa passes ~600
        finals = []
        for stream, count in block_plan(paths, 8192):
            finals.append(plane_kappa_block(measure, model, n, seed.substream(stream),
                                            count)[n] / n)
        return mean_with_se(np.concatenate(finals))
    rng = seed.philox()
    cumulative = np.cumsum(measure.probabilities)
    finals = np.empty(paths)
    for p in range(paths):
        cur = model.identity
        draws = np.minimum(np.searchsorted(cumulative, rng.random(n), side="right"),
                           len(cumulative) - 1)
        for d in draws:
            cur = model.multiply(measure.elements[int(d)], cur)
        finals[p] = model.displacement(cur) / n
    return mean_with_se(finals)


# --------------------------------------------------------------------------
# centering solver

@dataclass
class PsiSolution:
    """Bounded corrector on the grid plus the full solve audit trail."""

    grid: object
    psi: np.ndarray
    drift_used: float
    drift_supplied: float
    drift_mismatch: float
    sup_norm: float
    residual: float
    iterations: int
    stationary: np.ndarray
    q: np.ndarray
    notes: Tuple[str, ...] = ()

    def to_json(self, config_hash: str = "") -> str:
        payload = {
            "schema_version": 1,
            "config_hash": config_hash,
            "drift_used": self.drift_used,
            "drift_supplied": self.drift_supplied,
            "drift_mismatch": self.drift_mismatch,
            "sup_norm": self.sup_norm,
            "residual": self.residual,
            "iterations": self.iterations,
            "psi": {str(i): float(v) for i, v in enumerate(self.psi)},
        }
        return json.dumps(payload, sort_keys=True)


def _measure_tables(measure: StepMeasure, grid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(probabilities, action node table [N, atoms], sigma table [N, atoms])."""
    probs = np.asarray(measure.probabilities)
    acts = []
    sigs = []
    if isinstance(grid, FreeBoundaryGrid):
        for g in measure.elements:
            if len(g) == 1:
                acts.append(grid.act_letter(g[0]))
            else:
                acts.append(grid.act_word(g))
            sigs.append(grid.sigma_word(g))
    else:
        for g in measure.elements:
            acts.append(grid.act_element(g))
            sigs.append(grid.sigma_element(g))
    return probs, np.stack(acts, axis=1), np.stack(sigs, axis=1)


def _apply_markov(values: np.ndarray, act: np.ndarray, probs: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values, dtype=float)
    for j in range(act.shape[1]):
        out += probs[j] * values[act[:, j]]
    return out


def _stationary(act: np.ndarray, probs: np.ndarray, tol: float = 1e-15,
                max_iter: int = 50_000) -> np.ndarray:
    n = act.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        new = np.zeros(n)
        for j in range(act.shape[1]):
            np.add.at(new, act[:, j], pi * probs[j])
        if np.abs(new - pi).max() < tol:
            return new
        pi = new
    return pi


def solve_centering(measure: StepMeasure, model, grid, ell: Optional[float] = None,
                    tol: float = 1e-12, max_iter: int = 100_000) -> PsiSolution:
    """Truncated Neumann solve of the centering equation on the grid.

    The series is centered at the grid chain's own drift (the stationary
    mean of q); centering at a different supplied ell makes the partial
    sums drift linearly, so the supplied value is kept only as the
    reported mismatch diagnostic.
    """
    probs, act, sig = _measure_tables(measure, grid)
    q = sig @ probs
    pi = _stationary(act, probs)
    ell_grid = float(pi @ q)
    if ell is None:
        ell = ell_grid
    term = q - ell_grid
    psi = term.copy()
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        term = _apply_markov(term, act, probs)
        psi += term
        if np.abs(term).max() < tol:
            converged = True
            break
    residual = float(np.abs(psi - _apply_markov(psi, act, probs) - (q - ell_grid)).max())
    solution = PsiSolution(
        grid=grid,
        psi=psi,
        drift_used=ell_grid,
        drift_supplied=float(ell),
        drift_mismatch=abs(ell_grid - float(ell)),
        sup_norm=float(np.abs(psi).max()),
        residual=residual,
        iterations=iterations,
        stationary=pi,
        q=q,
    )
    if not converged or residual > max(tol, 1e-10) * 10:
        raise SolverDivergedError(
            f"centering residual {residual:.3e} after {iterations} iterations",
            partial=solution,
        )
    return solution


# --------------------------------------------------------------------------
# drift cocycle

class DriftCocycle:
    """sigma0 evaluation backed by a solved corrector, with per-node tables
    for everything the trace engines need."""

    def __init__(self, measure: StepMeasure, model, grid, solution: PsiSolution):
        self.measure = measure
        self.model = model
        self.grid = grid
        self.solution = solution
        self.psi = solution.psi
        self.ell = solution.drift_used
        probs, act, sig = _measure_tables(measure, grid)
        self.probs = probs
        self.act = act
        self.sigma_tab = sig
        self.dm_tab = sig + self.psi[act] - self.psi[:, None] - self.ell
        self.phi_tab = (self.dm_tab ** 2) @ probs
        self._vle: Dict[float, np.ndarray] = {}

    # -- lookups

    def node_of(self, x) -> int:
        if isinstance(x, (int, np.integer)):
            return int(x)
        return self.grid.node_of(x)

    def psi_at(self, x) -> float:
        return float(self.psi[self.node_of(x)])

    def sigma0(self, g, x) -> float:
        """sigma(g, x) + psi(g.x) - psi(x), with psi read off the grid
        (exact node resolution on trees; nearest node on the circle)."""
        node = self.node_of(x)
        target = self.grid.target_of(node)
        sigma = self.model.cocycle(g, target)
        image = self.model.boundary_action(g, target)
        return sigma + float(self.psi[self.node_of(image)]) - float(self.psi[node])

    def phi(self, x) -> float:
        return float(self.phi_tab[self.node_of(x)])

    def constant_drift_residual(self) -> float:
        return float(np.abs(self.dm_tab @ self.probs).max())

    def v_mu(self) -> float:
        """Worst one-step second moment of the martingale difference over
        the grid."""
        return float(self.phi_tab.max())

    def conditional_sq_below(self, a: float) -> np.ndarray:
        """E[dM^2 1_{|dM| <= a} | node] table (the predictable part of the
        truncated bracket transform)."""
        key = float(a)
        if key not in self._vle:
            masked = np.where(np.abs(self.dm_tab) <= a, self.dm_tab ** 2, 0.0)
            self._vle[key] = masked @ self.probs
        return self._vle[key]

    def sigma_sq_grid(self) -> float:
        """Stationary average of phi on the grid chain (the model-exact
        asymptotic variance)."""
        return float(self.solution.stationary @ self.phi_tab)

    def transient_potential(self) -> Tuple[np.ndarray, float]:
        """h = sum_j P^j (phi - sigma^2); argmax is the adversarial start
        for quadratic-variation deviation probes."""
        sigma2 = self.sigma_sq_grid()
        term = self.phi_tab - sigma2
        h = term.copy()
        for _ in range(200_000):
            term = _apply_markov(term, self.act, self.probs)
            h += term
            if np.abs(term).max() < 1e-13:
                break
        return h, sigma2

    def cesaro_average_table(self, m: int) -> np.ndarray:
        """(1/m) sum_{l=1..m} P^l phi, for block-average concentration
        companions."""
        acc = np.zeros_like(self.phi_tab)
        cur = self.phi_tab.copy()
        for _ in range(m):
            cur = _apply_markov(cur, self.act, self.probs)
            acc += cur
        return acc / m


def solve_cocycle(measure: StepMeasure, model, grid=None, depth: int = 8,
                  ell: Optional[float] = None, tol: float = 1e-12,
                  max_iter: int = 100_000) -> DriftCocycle:
    grid = grid if grid is not None else build_grid(model, depth)
    solution = solve_centering(measure, model, grid, ell=ell, tol=tol, max_iter=max_iter)
    return DriftCocycle(measure, model, grid, solution)


def v_mu(cocycle: DriftCocycle) -> float:
    return cocycle.v_mu()


def accelerated_variance(measure: StepMeasure, model, k: int, grid=None,
                         depth: int = 8, cap: int = 100_000) -> float:
    """v(mu conv k)/k: re-solve the centering for the k-fold convolution
    and take the worst one-step second moment, normalized per step."""
    conv = convolution_measure(measure, model, k, cap=cap)
    cocycle = solve_cocycle(conv, model, grid=grid, depth=depth)
    return cocycle.v_mu() / k


# --------------------------------------------------------------------------
# traces

@dataclass
class MartingaleTrace:
    """Per-step martingale data along one trajectory."""

    n: int
    M: np.ndarray                 # M_0..M_n
    dM: np.ndarray                # increments, length n
    bracket: np.ndarray           # predictable quadratic variation
    realized: np.ndarray          # sum of squared increments
    G: Dict[float, np.ndarray]    # truncated transform per threshold a
    nodes: np.ndarray             # grid node of Z_0..Z_n
    sigma: np.ndarray             # exact cocycle sigma(L_j, x)
    truncated_at: Optional[int] = None

    def to_csv(self, path) -> None:
        a_cols = sorted(self.G)
        with open(path, "w") as fh:
            fh.write("step,node,M,dM,bracket,realized,sigma"
                     + "".join(f",G_{a}" for a in a_cols) + "\n")
            for j in range(self.n + 1):
                row = [str(j), str(int(self.nodes[j])), repr(float(self.M[j])),
                       repr(float(self.dM[j - 1])) if j > 0 else "",
                       repr(float(self.bracket[j])), repr(float(self.realized[j])),
                       repr(float(self.sigma[j]))]
                row += [repr(float(self.G[a][j])) for a in a_cols]
                fh.write(",".join(row) + "\n")


def martingale_trace(cocycle: DriftCocycle, trajectory, x: BoundaryTarget,
                     a_list: Sequence[float] = ()) -> MartingaleTrace:
    """Replay a trajectory's increments through the cocycle.

    The bracket's j-th increment conditions on Z_{x,j-1} (the node column
    makes that auditable); the truncated transform subtracts the penalty
    a|dM| whenever |dM| >= a, with ties included on both sides.
    """
    if trajectory.increments is None:
        raise ValueError("trajectory must be sampled with keep_increments=True")
    n = trajectory.n
    model = cocycle.model
    M = np.zeros(n + 1)
    dM = np.zeros(n)
    bracket = np.zeros(n + 1)
    realized = np.zeros(n + 1)
    G = {float(a): np.zeros(n + 1) for a in a_list}
    nodes = np.zeros(n + 1, dtype=np.int64)
    sigma = np.zeros(n + 1)
    target = x
    node = cocycle.node_of(x)
    nodes[0] = node
    truncated = None
    for j in range(1, n + 1):
        g = trajectory.increments[j - 1]
        grid_target = cocycle.grid.target_of(node)
        try:
            inc_sigma = model.cocycle(g, target)
            target = model.boundary_action(g, target)
        except (TruncationError, GridError):
            truncated = j - 1
            break
        node2 = cocycle.node_of(model.boundary_action(g, grid_target))
        step_dm = inc_sigma + float(cocycle.psi[node2] - cocycle.psi[node]) - cocycle.ell
        dM[j - 1] = step_dm
        M[j] = M[j - 1] + step_dm
        bracket[j] = bracket[j - 1] + float(cocycle.phi_tab[node])
        realized[j] = realized[j - 1] + step_dm * step_dm
        sigma[j] = sigma[j - 1] + inc_sigma
        for a, series in G.items():
            pen = a * abs(step_dm) if abs(step_dm) >= a else 0.0
            series[j] = series[j - 1] + float(cocycle.conditional_sq_below(a)[node]) - pen
        node = node2
        nodes[j] = node
    if truncated is not None:
        k = truncated
        return MartingaleTrace(
            n=k, M=M[: k + 1], dM=dM[:k], bracket=bracket[: k + 1],
            realized=realized[: k + 1],
            G={a: s[: k + 1] for a, s in G.items()},
            nodes=nodes[: k + 1], sigma=sigma[: k + 1], truncated_at=k,
        )
    return MartingaleTrace(
        n=n, M=M, dM=dM, bracket=bracket, realized=realized, G=G,
        nodes=nodes, sigma=sigma, truncated_at=None,
    )


# --------------------------------------------------------------------------
# vectorized trace engine (free-group grids)

@dataclass
class TraceBlockResult:
    paths: int
    checkpoints: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)
    submart_sums: Optional[np.ndarray] = None     # [steps, pairs]
    submart_sumsq: Optional[np.ndarray] = None
    phi_sum: float = 0.0                          # occupation sums past burn-in
    phi_sumsq_per_path: Optional[np.ndarray] = None
    phi_count: int = 0
    max_dm_minus_kappa: float = -math.inf
    cesaro: Dict[int, np.ndarray] = field(default_factory=dict)


def trace_block(cocycle: DriftCocycle, target: FreeBoundary, n: int,
                seed: SeedSpec, block_size: int,
                a_values: Sequence[float] = (),
                checkpoints: Sequence[int] = (),
                submart_pairs: Sequence[Tuple[float, float]] = (),
                burn_in: Optional[int] = None,
                cesaro_ms: Sequence[int] = (),
                snapshot_fields: Sequence[str] = ("M", "bracket", "sigma", "kappa"),
                ) -> TraceBlockResult:
    """Simulate one block of walks against a repeat-mode boundary target.

    Words are tracked exactly, so the cocycle sums are exact; psi is read
    at table-propagated grid nodes, which makes M - (sigma - n*ell)
    telescope to psi(Z_n) - psi(Z_0) identically. Identity atoms are
    allowed (letter 0: no move).
    """
    if not isinstance(cocycle.grid, FreeBoundaryGrid):
        raise GridError("the block engine needs a free-group grid")
    if not (isinstance(target, FreeBoundary) and target.repeat):
        raise GridError("the block engine needs a repeat-mode boundary target")
    letters = []
    for g in cocycle.measure.elements:
        if len(g) > 1:
            raise UnsupportedMeasureError("block traces need nearest-neighbor atoms")
        letters.append(g[0] if g else 0)
    letters = np.asarray(letters, dtype=np.int8)
    cumulative = np.cumsum(cocycle.probs)
    psi, ell, phi = cocycle.psi, cocycle.ell, cocycle.phi_tab
    act = cocycle.act
    vle = {float(a): cocycle.conditional_sq_below(a) for a in a_values}
    fvals = {}
    for lam, a in submart_pairs:
        if float(a) not in vle:
            raise ValueError(f"submartingale pair needs a={a} in a_values")
        fvals[(lam, a)] = freedman_f(lam * a) / (a * a)

    # target letters: prefix then repeats, enough for every possible eat
    xi = np.asarray(target.prefix + (target.prefix[-1],) * (n + 2), dtype=np.int8)

    rng = seed.philox()
    B = block_size
    state = WalkBlockState(B, n)
    eaten = np.zeros(B, dtype=np.int64)
    node = np.full(B, cocycle.node_of(target), dtype=np.int64)
    M = np.zeros(B)
    bracket = np.zeros(B)
    realized = np.zeros(B)
    sigma = np.zeros(B)
    G = {float(a): np.zeros(B) for a in a_values}
    marks = set(checkpoints)
    result = TraceBlockResult(paths=B)
    if submart_pairs:
        result.submart_sums = np.zeros((n, len(submart_pairs)))
        result.submart_sumsq = np.zeros((n, len(submart_pairs)))
    phi_path = np.zeros(B)
    ces = {int(m): (np.zeros(B), cocycle.cesaro_average_table(m)) for m in cesaro_ms}
    burn = burn_in if burn_in is not None else 0
    rows = np.arange(B)
    atom_kappa = np.abs(letters).clip(0, 1).astype(float)  # kappa of each atom (0 or 1)

    for step in range(1, n + 1):
        idx = np.minimum(np.searchsorted(cumulative, rng.random(B), side="right"),
                         len(cumulative) - 1)
        let = letters[idx]
        # exact first letter of Z_{j-1}: word front if nonempty, else tail
        front = state.front_letter()
        z1 = np.where(state.length > 0, front, xi[eaten])
        moving = let != 0
        sig_inc = np.where(moving, 1.0 - 2.0 * (z1 == -let), 0.0)
        node2 = act[node, idx]
        dm = sig_inc + psi[node2] - psi[node] - ell
        bracket += phi[node]
        phi_now = phi[node2]
        for a, series in G.items():
            pen = np.where(np.abs(dm) >= a, a * np.abs(dm), 0.0)
            series += vle[a][node] - pen
        M += dm
        realized += dm * dm
        sigma += sig_inc
        slack = np.abs(dm) - atom_kappa[idx]
        result.max_dm_minus_kappa = max(result.max_dm_minus_kappa, float(slack.max()))
        # exact word state: eat the tail when the word is empty
        eat = moving & (state.length == 0) & (let == -xi[eaten])
        state.step(np.where(eat, 0, let).astype(np.int8))
        eaten += eat
        node = node2
        if step > burn:
            phi_path += phi_now
            result.phi_sum += float(phi_now.sum())
            result.phi_count += B
        for m, (acc, table) in ces.items():
            acc += phi_now - table[node]
        if result.submart_sums is not None:
            for col, (lam, a) in enumerate(submart_pairs):
                stat = np.exp(lam * M - fvals[(lam, a)] * G[float(a)])
                result.submart_sums[step - 1, col] = stat.sum()
                result.submart_sumsq[step - 1, col] = (stat * stat).sum()
        if step in marks:
            snap: Dict[str, np.ndarray] = {}
            if "M" in snapshot_fields:
                snap["M"] = M.copy()
            if "bracket" in snapshot_fields:
                snap["bracket"] = bracket.copy()
            if "realized" in snapshot_fields:
                snap["realized"] = realized.copy()
            if "sigma" in snapshot_fields:
                snap["sigma"] = sigma.copy()
            if "kappa" in snapshot_fields:
                snap["kappa"] = state.kappa.astype(float) + 0.0
            for a in a_values:
                snap[f"G_{a}"] = G[float(a)].copy()
            result.checkpoints[step] = snap
    denom = max(n - burn, 1)
    result.phi_sumsq_per_path = phi_path / denom
    result.cesaro = {m: acc for m, (acc, _) in ces.items()}
    return result


# --------------------------------------------------------------------------
# derived estimates and checks

def sigma_sq_occupation(cocycle: DriftCocycle, x: FreeBoundary, n: int,
                        burn_in: int, paths: int, seed: SeedSpec,
                        block_size: int = 8192, pool=None) -> EstimateWithCI:
    """Occupation-measure average of phi along the boundary chain; the CI
    comes from path-to-path dispersion of the per-path means."""
    if burn_in >= n:
        raise ValueError("need n > burn_in")
    fn = partial(trace_block, cocycle, x, n, burn_in=burn_in, snapshot_fields=())
    jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
    results = pool_starmap(pool, fn, jobs)
    values = np.concatenate([r.phi_sumsq_per_path for r in results])
    est = mean_with_se(values)
    flags = ()
    if cocycle.solution.residual > 1e-8:
        flags = ("low-confidence-solver",)
    return EstimateWithCI(value=est.value, se=est.se, sample_size=est.sample_size,
                          method="monte-carlo", flags=flags)


def freedman_f(lam: float) -> float:
    """exp(-lam) - 1 + lam, computed via expm1 to keep tiny arguments
    exact; nonnegative for all real lam."""
    return math.expm1(-lam) + lam


@dataclass
class OneStepCheck:
    min_margin: float
    argmin_node: int
    lam: float
    a: float


def submartingale_onestep_check(cocycle: DriftCocycle, lam: float, a: float) -> OneStepCheck:
    """Exact per-node conditional check: the one-step mean of
    exp(lam dM - (f(lam a)/a^2) dG) is >= 1 at every grid node."""
    coeff = freedman_f(lam * a) / (a * a)
    dm = cocycle.dm_tab
    vle = cocycle.conditional_sq_below(a)
    pen = np.where(np.abs(dm) >= a, a * np.abs(dm), 0.0)
    statistic = np.exp(lam * dm - coeff * (vle[:, None] - pen))
    means = statistic @ cocycle.probs
    worst = int(np.argmin(means))
    return OneStepCheck(min_margin=float(means[worst] - 1.0), argmin_node=worst,
                        lam=lam, a=a)


@dataclass
class SubmartingaleReport:
    onestep: List[OneStepCheck]
    mean_series: Dict[Tuple[float, float], np.ndarray]
    se_series: Dict[Tuple[float, float], np.ndarray]
    max_decrease_sigmas: float
    paths: int

    @property
    def onestep_min_margin(self) -> float:
        return min(c.min_margin for c in self.onestep)


def submartingale_transform_check(cocycle: DriftCocycle, x: FreeBoundary,
                                  lam_values: Sequence[float],
                                  a_values: Sequence[float], n: int, paths: int,
                                  seed: SeedSpec, block_size: int = 8192,
                                  pool=None) -> SubmartingaleReport:
    """Exact one-step conditional checks at every node plus Monte Carlo
    monotonicity of the unconditional means up to n."""
    onestep = [
        submartingale_onestep_check(cocycle, lam, a)
        for lam in lam_values for a in a_values
    ]
    pairs = [(lam, a) for lam in lam_values for a in a_values]
    sums = np.zeros((n, len(pairs)))
    sumsq = np.zeros((n, len(pairs)))
    total = 0
    fn = partial(trace_block, cocycle, x, n, a_values=a_values,
                 submart_pairs=pairs, snapshot_fields=())
    jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
    for (stream, count), res in zip(block_plan(paths, block_size),
                                    pool_starmap(pool, fn, jobs)):
        sums += res.submart_sums
        sumsq += res.submart_sumsq
        total += count
    means = sums / total
    variances = np.maximum(sumsq / total - means ** 2, 0.0)
    ses = np.sqrt(variances / total)
    mean_series = {}
    se_series = {}
    worst = -math.inf
    for col, pair in enumerate(pairs):
        mean_series[pair] = means[:, col]
        se_series[pair] = ses[:, col]
        diffs = np.diff(means[:, col])
        pair_se = np.sqrt(ses[1:, col] ** 2 + ses[:-1, col] ** 2)
        drop = np.where(diffs < 0, -diffs / np.maximum(pair_se, 1e-300), 0.0)
        worst = max(worst, float(drop.max()) if drop.size else 0.0)
    return SubmartingaleReport(
        onestep=onestep, mean_series=mean_series, se_series=se_series,
        max_decrease_sigmas=worst, paths=total,
    )


@dataclass
class ConditionalMgfReport:
    certified_range: float
    eps: float
    v: float
    lam_grid: Tuple[float, ...]
    failures: Dict[float, float]


def conditional_mgf_bound_check(cocycle: DriftCocycle, eps: float,
                                lam_grid: Sequence[float]) -> ConditionalMgfReport:
    """Exact per-node conditional MGF versus exp(lam^2 (v+eps)/2); returns
    the largest symmetric lambda-range certified across the grid."""
    v = cocycle.v_mu()
    ok_radius = 0.0
    failures: Dict[float, float] = {}
    lam_sorted = sorted(set(abs(l) for l in lam_grid if l != 0.0))
    for radius in lam_sorted:
        good = True
        for lam in (-radius, radius):
            lhs = np.log(np.exp(lam * cocycle.dm_tab) @ cocycle.probs).max()
            rhs = lam * lam * (v + eps) / 2.0
            if lhs > rhs + 1e-14:
                failures[lam] = float(lhs - rhs)
                good = False
        if good:
            ok_radius = radius
        else:
            break
    return ConditionalMgfReport(
        certified_range=ok_radius, eps=eps, v=v,
        lam_grid=tuple(lam_grid), failures=failures,
    )


@dataclass
class DifferenceBoundReport:
    max_observed_excess: float     # max |dM| - kappa(X) over all steps
    bound_slack_single: float      # vs ell + ||psi||_inf
    bound_slack_double: float      # vs ell + 2||psi||_inf (always certified)
    paths: int


def difference_bound_check(cocycle: DriftCocycle, x: FreeBoundary, n: int,
                           paths: int, seed: SeedSpec, block_size: int = 8192,
                           pool=None) -> DifferenceBoundReport:
    """Pathwise bound on martingale differences.

    |dM| <= kappa(X) + ell + 2||psi||_inf holds identically (the corrector
    enters twice); the tighter single-corrector variant is reported as
    observed slack and raises if the certified bound is ever violated.
    """
    worst = -math.inf
    total = 0
    fn = partial(trace_block, cocycle, x, n, snapshot_fields=())
    jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
    for (stream, count), res in zip(block_plan(paths, block_size),
                                    pool_starmap(pool, fn, jobs)):
        worst = max(worst, res.max_dm_minus_kappa)
        total += count
    psi_inf = cocycle.solution.sup_norm
    single = cocycle.ell + psi_inf - worst
    double = cocycle.ell + 2.0 * psi_inf - worst
    if double < -1e-9:
        from .errors import InvariantViolationError
        raise InvariantViolationError(
            f"|dM| exceeded kappa + ell + 2||psi||_inf by {-double:.3e}; "
            "solver or grid bug"
        )
    return DifferenceBoundReport(
        max_observed_excess=worst, bound_slack_single=single,
        bound_slack_double=double, paths=total,
    )
