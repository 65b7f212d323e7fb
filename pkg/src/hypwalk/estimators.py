"""Deviation-curve estimators: the limit log-Laplace transform, its
Legendre transform, curvature at the drift, and the concentration-bound
companions.

Everything exponential goes through max-subtracted log-mean-exp, and every
Monte Carlo cell carries a delta-method standard error plus the effective
sample size of its exponential weights; cells whose ESS collapses are
flagged, not silently trusted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .centering import DriftCocycle, conditional_mgf_bound_check, trace_block
from .errors import HypwalkError, UnsupportedMeasureError
from .lengthchain import LengthChainOracle, build_length_chain
from .measures import StepMeasure
from functools import partial

from .sampling import (
    SeedSpec,
    WalkBlockState,
    block_plan,
    kappa_checkpoint_block,
    nn_letter_arrays,
    pool_starmap,
)
from .spaces import FreeBoundary, FreeGroupModel, InteriorPoint
from .stats import (
    EstimateWithCI,
    exact_estimate,
    isotonic_increasing,
    logmeanexp_with_se,
    variance_with_se,
    wilson_interval,
)

ESS_FLOOR = 100.0


# --------------------------------------------------------------------------
# point estimates

def estimate_drift(measure: StepMeasure, model, n: int = 2000,
                   paths: int = 20_000, seed: Optional[SeedSpec] = None) -> EstimateWithCI:
    if isinstance(model, FreeGroupModel):
        try:
            chain = build_length_chain(measure, model, max(2 * n, 16))
            return exact_estimate(chain.drift)
        except UnsupportedMeasureError:
            pass
    from .centering import drift_of
    return drift_of(measure, model, paths=paths, n=n, seed=seed)


def _collect_kappas(measure, model, n, checkpoints, paths, seed, block_size,
                    pool=None):
    fn = partial(kappa_checkpoint_block, measure, model, n, checkpoints)
    jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
    blocks = pool_starmap(pool, fn, jobs)
    return {c: np.concatenate([b[c] for b in blocks]) for c in checkpoints}


def _collect_kappas_shifted(measure, model, n, checkpoints, paths, seed,
                            block_size, pool, initial_word):
    fn = partial(kappa_checkpoint_block, measure, model, n, checkpoints,
                 initial_word=initial_word)
    jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
    blocks = pool_starmap(pool, fn, jobs)
    return {c: np.concatenate([b[c] for b in blocks]).astype(float)
            for c in checkpoints}


def estimate_clt_variance(measure: StepMeasure, model, n: int = 2000,
                          paths: int = 40_000, seed: Optional[SeedSpec] = None,
                          block_size: int = 8192, pool=None) -> EstimateWithCI:
    """Variance of kappa_n / sqrt(n). Exact-DP when the length chain is
    exact (Richardson-extrapolated in 1/n to kill the boundary term);
    otherwise Monte Carlo with a fourth-moment standard error."""
    if isinstance(model, FreeGroupModel):
        try:
            chain = build_length_chain(measure, model, max(n, 16))
            if chain.exact_marginals:
                v_half = chain.moments(n // 2).variance / (n // 2)
                v_full = chain.moments(n).variance / n
                return exact_estimate(2.0 * v_full - v_half)
        except UnsupportedMeasureError:
            pass
    seed = seed or SeedSpec(0, 910_000)
    kappas = _collect_kappas(measure, model, n, [n], paths, seed, block_size, pool)[n]
    est = variance_with_se(kappas.astype(float) / math.sqrt(n))
    return est


# --------------------------------------------------------------------------
# Laplace curves

@dataclass
class LaplaceCell:
    lam: float
    n: int
    estimate: EstimateWithCI
    ess: float = math.inf
    fekete_bound: bool = False    # finite-n value upper-bounds the limit (lam >= 0)
    low_confidence: bool = False


@dataclass
class LaplaceCurve:
    """Gridded estimates of (1/n) log E exp(lam * observable_n) on an
    n-ladder, with per-lambda Richardson extrapolation in 1/n."""

    lambdas: Tuple[float, ...]
    n_ladder: Tuple[int, ...]
    cells: Dict[Tuple[float, int], LaplaceCell]
    drift: float
    method: str                  # "exact-dp" | "monte-carlo"
    observable: str = "distance"  # "distance" | "cocycle"
    target_label: str = ""

    def __post_init__(self):
        lams = sorted(self.lambdas)
        if 0.0 not in lams:
            raise HypwalkError("lambda grid must contain 0")
        self.lambdas = tuple(lams)

    def value(self, lam: float, n: int) -> EstimateWithCI:
        return self.cells[(lam, n)].estimate

    def extrapolated(self, lam: float) -> EstimateWithCI:
        """a + b/n least-squares extrapolation across the ladder (a at
        n = inf); falls back to the largest n when the ladder is short."""
        ns = sorted(self.n_ladder)
        if lam == 0.0:
            return EstimateWithCI(0.0, 0.0, method="monte-carlo")
        if len(ns) < 2:
            return self.cells[(lam, ns[-1])].estimate
        ys = np.array([self.cells[(lam, n)].estimate.value for n in ns])
        ses = np.array([self.cells[(lam, n)].estimate.se for n in ns])
        A = np.stack([np.ones(len(ns)), 1.0 / np.array(ns, dtype=float)], axis=1)
        if self.method == "exact-dp" or ses.max() == 0.0:
            coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
            # deterministic ladder; the 1/n model's own misfit is the error
            se = float(np.abs(ys - A @ coef).max())
        else:
            w = 1.0 / np.maximum(ses, ses[ses > 0].min() if (ses > 0).any() else 1.0) ** 2
            scale = np.sqrt(w / w.max())
            coef, *_ = np.linalg.lstsq(A * scale[:, None], ys * scale, rcond=None)
            cov = np.linalg.pinv((A.T * w) @ A)
            se = math.sqrt(max(cov[0, 0], 0.0))
        return EstimateWithCI(float(coef[0]), float(se),
                              method="monte-carlo", sample_size=len(ns))

    def ladder_envelope(self, lam: float) -> Tuple[float, float]:
        """(liminf-style, limsup-style) finite-ladder statistics: the min
        and max of the per-n values, reported without asserting that the
        two limits coincide for cocycle observables."""
        vals = [self.cells[(lam, n)].estimate.value for n in self.n_ladder]
        return min(vals), max(vals)

    def convexity_defect(self) -> float:
        """Most negative discrete second difference of the extrapolated
        curve (>= -slack for a convex estimate)."""
        lams = np.array(self.lambdas)
        vals = np.array([self.extrapolated(l).value for l in lams])
        worst = 0.0
        for i in range(1, len(lams) - 1):
            h1 = lams[i] - lams[i - 1]
            h2 = lams[i + 1] - lams[i]
            second = (vals[i + 1] - vals[i]) / h2 - (vals[i] - vals[i - 1]) / h1
            worst = min(worst, second)
        return worst

    def rows(self) -> List[dict]:
        out = []
        for (lam, n), cell in sorted(self.cells.items()):
            est = cell.estimate
            out.append({
                "lambda": lam, "n": n, "value": est.value, "se": est.se,
                "ess": cell.ess if math.isfinite(cell.ess) else -1.0,
                "fekete_upper_bound": int(cell.fekete_bound),
                "low_confidence": int(cell.low_confidence),
                "method": self.method,
            })
        return out


def _symmetric_cocycle_rate(measure: StepMeasure, model: FreeGroupModel) -> Optional[Tuple[float, float, float]]:
    """(up, down, stay) step law of the cocycle against a repeat target for
    letter-symmetric measures, where the increment is an honest iid step."""
    letters, _ = nn_letter_arrays(measure, model)
    probs = np.asarray(measure.probabilities)
    stay = float(probs[letters == 0].sum())
    move = probs[letters != 0]
    if move.size and (move.max() - move.min()) <= 1e-15:
        p = float(move[0])
        return (1.0 - stay - p, p, stay)
    return None


def estimate_laplace(measure: StepMeasure, model, lam_grid: Sequence[float],
                     n_ladder: Sequence[int], paths: int = 100_000,
                     seed: Optional[SeedSpec] = None,
                     target=None, block_size: int = 8192,
                     lam_max: Optional[float] = None,
                     cocycle: Optional[DriftCocycle] = None,
                     method: str = "auto", pool=None) -> LaplaceCurve:
    """Deviation curve of the displacement (or of the cocycle against a
    boundary target when ``target`` is set).

    Exact-DP route: the length chain for letter-symmetric measures; the
    iid cocycle step law for boundary targets of symmetric measures.
    Monte Carlo route: log-mean-exp over paths with delta-method errors
    and ESS flags per cell.
    """
    seed = seed or SeedSpec(0, 920_000)
    lam_max = lam_max if lam_max is not None else 0.25 * measure.alpha
    lams = sorted(set(float(l) for l in lam_grid) | {0.0})
    if any(abs(l) > lam_max + 1e-12 for l in lams):
        raise HypwalkError(f"lambda grid exceeds the configured max {lam_max}")
    ns = sorted(set(int(n) for n in n_ladder))
    drift = estimate_drift(measure, model).value
    cells: Dict[Tuple[float, int], LaplaceCell] = {}

    if method not in ("auto", "exact-dp", "monte-carlo"):
        raise HypwalkError(f"unknown method {method!r}")
    exact_chain: Optional[LengthChainOracle] = None
    if method != "monte-carlo" and isinstance(model, FreeGroupModel) and target is None:
        try:
            chain = build_length_chain(measure, model, max(ns))
            if chain.exact_marginals:
                exact_chain = chain
        except UnsupportedMeasureError:
            pass
    if method == "exact-dp" and exact_chain is None and target is None:
        raise UnsupportedMeasureError("no exact oracle for this measure/model")

    if exact_chain is not None:
        table = exact_chain.log_mgf_table(lams, ns)
        for lam in lams:
            for n in ns:
                val = 0.0 if lam == 0.0 else table[(lam, n)] / n
                cells[(lam, n)] = LaplaceCell(
                    lam=lam, n=n, estimate=exact_estimate(val),
                    fekete_bound=lam >= 0.0,
                )
        return LaplaceCurve(tuple(lams), tuple(ns), cells, drift, "exact-dp")

    if target is not None and isinstance(target, InteriorPoint) \
            and isinstance(model, FreeGroupModel):
        # sigma(L_n, p) = |L_n . p| - |p|: same engine, shifted start
        word = model.validate_point(target.point)
        raw = _collect_kappas_shifted(measure, model, max(ns), ns, paths, seed,
                                      block_size, pool, word)
        samples = {n: raw[n] - float(len(word)) for n in ns}
        for n in ns:
            col = samples[n].astype(float)
            for lam in lams:
                if lam == 0.0:
                    cells[(lam, n)] = LaplaceCell(
                        lam=0.0, n=n, estimate=EstimateWithCI(0.0, 0.0, sample_size=col.size))
                    continue
                log_mean, se_log, ess = logmeanexp_with_se(lam * col)
                est = EstimateWithCI(value=log_mean / n, se=se_log / n, sample_size=col.size)
                cells[(lam, n)] = LaplaceCell(lam=lam, n=n, estimate=est, ess=ess,
                                              low_confidence=ess < ESS_FLOOR)
        return LaplaceCurve(tuple(lams), tuple(ns), cells, drift, "monte-carlo",
                            observable="cocycle", target_label="interior")

    if target is not None and isinstance(model, FreeGroupModel) \
            and isinstance(target, FreeBoundary) and target.repeat:
        rate = _symmetric_cocycle_rate(measure, model) if method != "monte-carlo" else None
        if method == "exact-dp" and rate is None:
            raise UnsupportedMeasureError("no exact cocycle oracle for this measure")
        if rate is not None:
            up, down, stay = rate
            for lam in lams:
                step = up * math.exp(lam) + down * math.exp(-lam) + stay
                for n in ns:
                    val = 0.0 if lam == 0.0 else math.log(step)
                    cells[(lam, n)] = LaplaceCell(lam=lam, n=n,
                                                  estimate=exact_estimate(val))
            return LaplaceCurve(tuple(lams), tuple(ns), cells, drift,
                                "exact-dp", observable="cocycle")
        if cocycle is None:
            raise HypwalkError("cocycle-target curves for biased measures need a solved cocycle")
        fn = partial(trace_block, cocycle, target, max(ns),
                     checkpoints=ns, snapshot_fields=("sigma",))
        jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
        blocks = pool_starmap(pool, fn, jobs)
        samples = {n: np.concatenate([b.checkpoints[n]["sigma"] for b in blocks])
                   for n in ns}
        observable = "cocycle"
    elif not isinstance(model, FreeGroupModel):
        from .centering import plane_kappa_block
        fn = partial(plane_kappa_block, measure, model, max(ns), checkpoints=ns)
        jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
        blocks = pool_starmap(pool, fn, jobs)
        samples = {n: np.concatenate([b[n] for b in blocks]) for n in ns}
        observable = "distance"
    else:
        samples = _collect_kappas(measure, model, max(ns), ns, paths, seed,
                                  block_size, pool)
        observable = "distance"

    for n in ns:
        col = samples[n].astype(float)
        for lam in lams:
            if lam == 0.0:
                cells[(lam, n)] = LaplaceCell(lam=0.0, n=n,
                                              estimate=EstimateWithCI(0.0, 0.0, sample_size=col.size))
                continue
            log_mean, se_log, ess = logmeanexp_with_se(lam * col)
            est = EstimateWithCI(value=log_mean / n, se=se_log / n, sample_size=col.size)
            cells[(lam, n)] = LaplaceCell(
                lam=lam, n=n, estimate=est, ess=ess,
                fekete_bound=lam >= 0.0 and observable == "distance",
                low_confidence=ess < ESS_FLOOR,
            )
    return LaplaceCurve(tuple(lams), tuple(ns), cells, drift, "monte-carlo",
                        observable=observable)


def fekete_upper_bound(measure: StepMeasure, model, lam: float, n: int,
                       paths: int = 100_000, seed: Optional[SeedSpec] = None,
                       block_size: int = 8192) -> EstimateWithCI:
    """Finite-n value of (1/n) log E exp(lam kappa_n) for lam >= 0; by
    submultiplicativity of the displacement this upper-bounds the limit."""
    if lam < 0:
        raise HypwalkError("the subadditive upper bound needs lam >= 0")
    curve = estimate_laplace(measure, model, [0.0, lam], [n], paths=paths,
                             seed=seed, block_size=block_size,
                             lam_max=max(lam, 1e-9))
    return curve.value(lam, n)


# --------------------------------------------------------------------------
# Legendre transform and curvature

@dataclass
class RateCurve:
    xs: Tuple[float, ...]
    values: Tuple[float, ...]
    repaired: Tuple[bool, ...]
    drift: float
    source_lambdas: Tuple[float, ...]

    def value_at(self, x: float) -> float:
        i = int(np.argmin(np.abs(np.array(self.xs) - x)))
        return self.values[i]

    def rows(self) -> List[dict]:
        return [
            {"x": x, "rate": v, "convexity_repaired": int(r)}
            for x, v, r in zip(self.xs, self.values, self.repaired)
        ]


def legendre_transform(curve: LaplaceCurve, xs: Optional[Sequence[float]] = None,
                       repair_tolerance: float = 1e-6) -> RateCurve:
    """Discrete Fenchel conjugate of the extrapolated deviation curve.

    Monte Carlo noise can break convexity, so slopes are isotonic-repaired
    first; a repair beyond ``repair_tolerance`` plus the cells' own CI
    slack is refused rather than silently smoothed away.
    """
    lams = np.array(curve.lambdas)
    if lams.size < 5:
        raise HypwalkError("need at least 5 lambda points spanning 0")
    ests = [curve.extrapolated(l) for l in lams]
    vals = np.array([e.value for e in ests])
    slack = np.array([e.se for e in ests])
    slopes = np.diff(vals) / np.diff(lams)
    fixed = isotonic_increasing(slopes)
    repaired_vals = vals.copy()
    repaired_vals[1:] = vals[0] + np.cumsum(fixed * np.diff(lams))
    # re-anchor at lambda = 0 where the curve vanishes identically
    zero_idx = int(np.argmin(np.abs(lams)))
    repaired_vals -= repaired_vals[zero_idx]
    shift = float(np.abs(repaired_vals - vals).max())
    allowed = repair_tolerance + 2.0 * float(slack.max(initial=0.0))
    if shift > allowed:
        raise HypwalkError(
            f"curve is non-convex beyond repair: isotonic shift {shift:.3e} "
            f"> allowance {allowed:.3e}"
        )
    point_repaired = np.abs(repaired_vals - vals) > 1e-12
    if xs is None:
        lo, hi = fixed.min(), fixed.max()
        xs = np.linspace(lo, hi, 81)
    xs = np.asarray(sorted(xs))
    rate = np.array([float((x * lams - repaired_vals).max()) for x in xs])
    # conjugating at a grid point marks it repaired if its maximizing cell was
    argmaxes = [int(np.argmax(x * lams - repaired_vals)) for x in xs]
    flags = [bool(point_repaired[min(a, len(point_repaired) - 1)]) for a in argmaxes]
    return RateCurve(tuple(float(x) for x in xs), tuple(rate), tuple(flags),
                     drift=curve.drift, source_lambdas=curve.lambdas)


@dataclass
class CurvatureFit:
    """Quadratic coefficient of a deviation curve near its vertex; always
    reported with its fit residual and window, never as a bare number."""

    coefficient: float
    residual: float
    window: float
    n_ladder: Tuple[int, ...]
    points: int
    half_window_coefficient: float
    extrapolation_spread: float
    inconclusive: bool = False
    notes: Tuple[str, ...] = ()


def curvature_at_drift(curve: LaplaceCurve, drift: Optional[float] = None,
                       window: float = 0.1) -> CurvatureFit:
    """Least-squares c in value(lam) - lam*drift ~ c lam^2 over |lam| <=
    window, after Richardson extrapolation across the n-ladder."""
    drift = curve.drift if drift is None else drift
    lams = [l for l in curve.lambdas if l != 0.0 and abs(l) <= window + 1e-12]
    pos = [l for l in lams if l > 0]
    neg = [l for l in lams if l < 0]
    if len(pos) < 3 or len(neg) < 3:
        return CurvatureFit(math.nan, math.nan, window, tuple(curve.n_ladder), len(lams),
                            math.nan, math.nan, inconclusive=True,
                            notes=("need >= 3 lambda points on each side of 0",))
    def fit(subset):
        ys, ws, spread = [], [], 0.0
        for lam in subset:
            est = curve.extrapolated(lam)
            ys.append(est.value - lam * drift)
            ws.append(1.0 / max(est.se, 1e-12) ** 2)
            spread = max(spread, est.se)
        ys = np.array(ys); ws = np.array(ws)
        x2 = np.array(subset) ** 2
        c = float((ws * ys * x2).sum() / (ws * x2 * x2).sum())
        resid = float(np.sqrt(((ys - c * x2) ** 2).mean()))
        return c, resid, spread
    c, resid, spread = fit(lams)
    half = [l for l in lams if abs(l) <= window / 2 + 1e-12]
    c_half = fit(half)[0] if len([l for l in half if l > 0]) >= 2 and \
        len([l for l in half if l < 0]) >= 2 else math.nan
    return CurvatureFit(
        coefficient=c, residual=resid, window=window,
        n_ladder=tuple(curve.n_ladder), points=len(lams),
        half_window_coefficient=c_half, extrapolation_spread=spread,
    )


def rate_curvature(rate: RateCurve, drift: Optional[float] = None,
                   window: float = 0.06, min_sigma_sq: float = 1e-6) -> CurvatureFit:
    """Symmetric-window fit of rate(drift + u) ~ c u^2."""
    drift = rate.drift if drift is None else drift
    xs = np.array(rate.xs)
    vals = np.array(rate.values)
    mask = (np.abs(xs - drift) <= window) & (np.abs(xs - drift) > 1e-9)
    us = xs[mask] - drift
    ys = vals[mask]
    if us.size < 4 or (us > 0).sum() < 2 or (us < 0).sum() < 2:
        return CurvatureFit(math.nan, math.nan, window, (), int(us.size),
                            math.nan, math.nan, inconclusive=True,
                            notes=("window too small around the drift",))
    u2 = us ** 2
    c = float((ys * u2).sum() / (u2 * u2).sum())
    resid = float(np.sqrt(((ys - c * u2) ** 2).mean()))
    if c > 0 and 1.0 / (2.0 * c) < min_sigma_sq:
        return CurvatureFit(c, resid, window, (), int(us.size), math.nan, math.nan,
                            inconclusive=True,
                            notes=("implied variance below the degeneracy floor",))
    half_mask = (np.abs(xs - drift) <= window / 2) & (np.abs(xs - drift) > 1e-9)
    uh = xs[half_mask] - drift
    yh = vals[half_mask]
    c_half = float((yh * uh ** 2).sum() / (uh ** 4).sum()) if uh.size >= 4 else math.nan
    return CurvatureFit(c, resid, window, (), int(us.size), c_half, 0.0)


# --------------------------------------------------------------------------
# deviation probes and explicit bounds

@dataclass
class QvLdpCell:
    n: int
    hits: int
    paths: int
    probability: float
    wilson_low: float
    wilson_high: float
    below_resolution: bool
    log_rate: Optional[float]    # (1/n) log p-hat, None below resolution


@dataclass
class QvLdpReport:
    eps: float
    sigma_sq: float
    cells: List[QvLdpCell]
    rate_strictly_decreasing: Optional[bool]
    prob_strictly_decreasing: Optional[bool]
    all_below_resolution: bool

    def rows(self) -> List[dict]:
        return [
            {"n": c.n, "hits": c.hits, "paths": c.paths, "probability": c.probability,
             "wilson_low": c.wilson_low, "wilson_high": c.wilson_high,
             "log_rate": c.log_rate if c.log_rate is not None else math.nan,
             "below_resolution": int(c.below_resolution)}
            for c in self.cells
        ]


def qv_ldp_probe(cocycle: DriftCocycle, x: FreeBoundary, eps: float,
                 n_list: Sequence[int], paths: int, seed: SeedSpec,
                 sigma_sq: Optional[float] = None,
                 block_size: int = 8192, pool=None) -> QvLdpReport:
    """Empirical decay of P(|<M>_n - n sigma^2| >= n eps) along an
    n-ladder; zero-hit cells are reported as below-resolution, never as a
    zero rate."""
    sigma_sq = cocycle.sigma_sq_grid() if sigma_sq is None else sigma_sq
    ns = sorted(set(int(n) for n in n_list))
    hits = {n: 0 for n in ns}
    total = 0
    fn = partial(trace_block, cocycle, x, max(ns),
                 checkpoints=ns, snapshot_fields=("bracket",))
    jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
    for (stream, count), res in zip(block_plan(paths, block_size),
                                    pool_starmap(pool, fn, jobs)):
        total += count
        for n in ns:
            br = res.checkpoints[n]["bracket"]
            hits[n] += int((np.abs(br - n * sigma_sq) >= n * eps).sum())
    cells = []
    for n in ns:
        h = hits[n]
        p = h / total
        lo, hi = wilson_interval(h, total)
        below = h == 0
        cells.append(QvLdpCell(
            n=n, hits=h, paths=total, probability=p, wilson_low=lo, wilson_high=hi,
            below_resolution=below,
            log_rate=None if below else math.log(p) / n,
        ))
    rates = [c.log_rate for c in cells]
    probs = [c.probability for c in cells]
    if any(r is None for r in rates):
        rate_dec = None
    else:
        rate_dec = all(rates[i + 1] < rates[i] for i in range(len(rates) - 1))
    prob_dec = all(probs[i + 1] < probs[i] for i in range(len(probs) - 1)) \
        if all(p > 0 for p in probs) else None
    return QvLdpReport(
        eps=eps, sigma_sq=sigma_sq, cells=cells,
        rate_strictly_decreasing=rate_dec,
        prob_strictly_decreasing=prob_dec,
        all_below_resolution=all(c.below_resolution for c in cells),
    )


def azuma_bound(n: int, eps: float, sup_norm: float) -> float:
    """2 exp(-n eps^2 / (8 ||xi||_inf^2)): the bounded-difference tail
    bound behind the block-average concentration step."""
    if n <= 0 or sup_norm <= 0:
        raise ValueError("n and sup_norm must be positive")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return 2.0 * math.exp(-n * eps * eps / (8.0 * sup_norm * sup_norm))


def azuma_empirical_check(n_list: Sequence[int], eps_list: Sequence[float],
                          paths: int, seed: SeedSpec) -> List[dict]:
    """Simulated +-1 martingale tails against azuma_bound; the bound must
    dominate every cell."""
    rng = seed.philox()
    n_max = max(n_list)
    rows = []
    steps = rng.integers(0, 2, size=(paths, n_max)).astype(np.int64) * 2 - 1
    cums = np.cumsum(steps, axis=1)
    for n in sorted(n_list):
        s = cums[:, n - 1]
        for eps in eps_list:
            p = float((np.abs(s) >= n * eps).mean())
            rows.append({
                "n": n, "eps": eps, "empirical": p,
                "bound": azuma_bound(n, eps, 1.0),
                "dominated": int(p <= azuma_bound(n, eps, 1.0)),
            })
    return rows


def cesaro_block_bound(n: int, m: int, eps: float, sup_norm: float) -> float:
    """2 m^2 exp(-n eps^2 / (8 ||phi||_inf^2)): concentration of an
    additive functional around its m-step averaged version."""
    if m < 1 or m > n:
        raise ValueError("need 1 <= m <= n")
    if sup_norm <= 0 or eps < 0:
        raise ValueError("positive sup_norm and nonnegative eps required")
    return 2.0 * m * m * math.exp(-n * eps * eps / (8.0 * sup_norm * sup_norm))


def cesaro_empirical_check(cocycle: DriftCocycle, x: FreeBoundary,
                           n: int, m_list: Sequence[int], eps_list: Sequence[float],
                           paths: int, seed: SeedSpec,
                           block_size: int = 8192, pool=None) -> List[dict]:
    """Empirical tails of |sum_j [phi(Z_j) - avg_m phi(Z_j)]| against the
    block bound, with the threshold m n eps + 2 m ||phi||_inf."""
    sup_phi = float(np.abs(cocycle.phi_tab).max())
    ms = sorted(set(int(m) for m in m_list))
    sums: Dict[int, List[np.ndarray]] = {m: [] for m in ms}
    total = 0
    fn = partial(trace_block, cocycle, x, n, cesaro_ms=ms, snapshot_fields=())
    jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
    for (stream, count), res in zip(block_plan(paths, block_size),
                                    pool_starmap(pool, fn, jobs)):
        total += count
        for m in ms:
            sums[m].append(res.cesaro[m])
    rows = []
    for m in ms:
        devs = np.abs(np.concatenate(sums[m]))
        for eps in eps_list:
            threshold = m * n * eps + 2 * m * sup_phi
            p = float((devs >= threshold).mean())
            bound = cesaro_block_bound(n, m, eps, sup_phi)
            rows.append({
                "n": n, "m": m, "eps": eps, "threshold": threshold,
                "empirical": p, "bound": min(bound, 1.0),
                "dominated": int(p <= bound),
            })
    return rows


@dataclass
class PunctualTailReport:
    rows: List[dict]
    beta_hat: Optional[float]
    beta_se: Optional[float]
    uniformity_spread: float     # max over R of the k-to-k spread of log tails


def _punctual_block(measure, model, letter, ks, R_list, cap, seed, count):
    letters, cumulative = nn_letter_arrays(measure, model)
    rng = seed.philox()
    state = WalkBlockState(count, max(ks))
    hits = {(k, r): 0 for k in ks for r in R_list}
    for step in range(1, max(ks) + 1):
        idx = np.minimum(np.searchsorted(cumulative, rng.random(count), side="right"),
                         len(cumulative) - 1)
        state.step(letters[idx])
        if step in ks:
            run = state.trailing_run(-letter, cap)
            for r in R_list:
                hits[(step, r)] += int((2 * run > r).sum())
    return hits


def punctual_deviation_probe(measure: StepMeasure, model: FreeGroupModel,
                             x, R_list: Sequence[float], k_list: Sequence[int],
                             paths: int, seed: SeedSpec,
                             block_size: int = 8192, pool=None) -> PunctualTailReport:
    """Tails of kappa(L_k) - sigma(L_k, x), which on the tree equal twice
    the trailing run of the walk word against the target's letters.

    Interior targets have identically zero gap. The decay rate beta-hat is
    fit on log tails over R cells with hits in every k."""
    if isinstance(x, InteriorPoint):
        rows = [{"k": k, "R": r, "tail": 0.0, "hits": 0, "paths": paths}
                for k in k_list for r in R_list]
        return PunctualTailReport(rows=rows, beta_hat=None, beta_se=None,
                                  uniformity_spread=0.0)
    if not (isinstance(x, FreeBoundary) and x.repeat and len(set(x.prefix)) == 1):
        raise HypwalkError("boundary probes support single-letter repeat targets")
    letter = x.prefix[0]
    ks = sorted(set(int(k) for k in k_list))
    cap = int(max(R_list) // 2 + 2)
    hits = {(k, r): 0 for k in ks for r in R_list}
    total = 0
    fn = partial(_punctual_block, measure, model, letter, ks, tuple(R_list), cap)
    jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
    for (stream, count), block_hits in zip(block_plan(paths, block_size),
                                           pool_starmap(pool, fn, jobs)):
        total += count
        for key, h in block_hits.items():
            hits[key] += h
    rows = []
    for k in ks:
        for r in R_list:
            h = hits[(k, r)]
            rows.append({"k": k, "R": r, "tail": h / total, "hits": h, "paths": total})
    # decay fit over R using the worst (largest) tail across k per R
    worst: Dict[float, float] = {}
    for row in rows:
        worst[row["R"]] = max(worst.get(row["R"], 0.0), row["tail"])
    fit_r = [r for r, t in worst.items() if t > 0]
    beta = beta_se = None
    if len(fit_r) >= 2:
        rs = np.array(sorted(fit_r))
        ys = np.log(np.array([worst[r] for r in rs]))
        A = np.stack([np.ones_like(rs), -rs], axis=1)
        coef, res_, *_ = np.linalg.lstsq(A, ys, rcond=None)
        beta = float(coef[1])
        dof = max(len(rs) - 2, 1)
        resid = ys - A @ coef
        beta_se = float(math.sqrt((resid @ resid) / dof / (rs.var() * len(rs) + 1e-300)))
    spread = 0.0
    for r in R_list:
        tails = [row["tail"] for row in rows if row["R"] == r and row["tail"] > 0]
        if len(tails) >= 2:
            spread = max(spread, math.log(max(tails)) - math.log(min(tails)))
    return PunctualTailReport(rows=rows, beta_hat=beta, beta_se=beta_se,
                              uniformity_spread=spread)


@dataclass
class LaplaceControlReport:
    v: float
    eps: float
    psi_sup: float
    certified_lambda: float
    rows: List[dict]
    all_dominated: bool


def laplace_control_check(cocycle: DriftCocycle, eps: float,
                          lam_grid: Sequence[float], n_list: Sequence[int],
                          paths: int, seed: SeedSpec, x: FreeBoundary,
                          block_size: int = 8192, pool=None) -> LaplaceControlReport:
    """Checks log E exp(lam (sigma(L_n, x) - n ell)) against the
    subgaussian envelope lam^2 (v + eps) n / 2 + 2 ||psi||_inf |lam|.

    Cells outside the certified one-step lambda-range are skipped (listed
    with status "skipped"), not asserted.
    """
    v = cocycle.v_mu()
    psi_sup = cocycle.solution.sup_norm
    mgf = conditional_mgf_bound_check(cocycle, eps, [abs(l) for l in lam_grid if l != 0])
    certified = mgf.certified_range
    allowed = min(certified, v / certified) if certified > 0 else 0.0
    ns = sorted(set(int(n) for n in n_list))
    lams = [l for l in lam_grid]
    rate = _symmetric_cocycle_rate(cocycle.measure, cocycle.model) \
        if isinstance(cocycle.model, FreeGroupModel) else None
    samples: Dict[int, np.ndarray] = {}
    if rate is None:
        fn = partial(trace_block, cocycle, x, max(ns),
                     checkpoints=ns, snapshot_fields=("sigma",))
        jobs = [(seed.substream(s), c) for s, c in block_plan(paths, block_size)]
        blocks = pool_starmap(pool, fn, jobs)
        samples = {n: np.concatenate([b.checkpoints[n]["sigma"] for b in blocks])
                   for n in ns}
    rows = []
    all_ok = True
    for lam in lams:
        for n in ns:
            rhs = lam * lam * (v + eps) * n / 2.0 + 2.0 * psi_sup * abs(lam)
            if lam != 0.0 and abs(lam) > allowed + 1e-12:
                rows.append({"lambda": lam, "n": n, "status": "skipped",
                             "lhs_log": math.nan, "rhs_log": rhs, "se": math.nan})
                continue
            if lam == 0.0:
                lhs, se = 0.0, 0.0
            elif rate is not None:
                up, down, stay = rate
                step = up * math.exp(lam) + down * math.exp(-lam) + stay
                lhs, se = n * (math.log(step) - lam * cocycle.ell), 0.0
            else:
                vals = lam * (samples[n] - n * cocycle.ell)
                lhs, se, _ = logmeanexp_with_se(vals)
            ok = lhs <= rhs + 3.0 * se + 1e-12
            all_ok = all_ok and ok
            rows.append({"lambda": lam, "n": n, "status": "ok" if ok else "violated",
                         "lhs_log": lhs, "rhs_log": rhs, "se": se})
    return LaplaceControlReport(v=v, eps=eps, psi_sup=psi_sup,
                                certified_lambda=allowed, rows=rows,
                                all_dominated=all_ok)
