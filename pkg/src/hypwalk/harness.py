"""Experiment orchestration: run the configured pipeline, collect stage
payloads and pass/fail assertions, and write the artifact directory.

Workers only shard path blocks; the block plan and merge order are fixed
by the configuration, so numeric outputs are identical for any worker
count (that invariant is itself an assertion the test suite exercises).
"""

from __future__ import annotations

import multiprocessing
import os
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import estimators as est
from .centering import (
    DriftCocycle,
    conditional_mgf_bound_check,
    difference_bound_check,
    sigma_sq_occupation,
    solve_cocycle,
    submartingale_transform_check,
    accelerated_variance,
)
from .config import ExperimentConfig
from .errors import ConfigError, UnsupportedMeasureError
from .freedman import fuzz_freedman_base, fuzz_scalar_inequality
from .measures import non_arithmetic_check, validate_measure
from .reporting import render_summary, write_csv, write_dat, write_json
from .sampling import SeedSpec, sample_path
from .spaces import FreeBoundary, FreeGroupModel, geometry_report

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


@dataclass
class Assertion:
    name: str
    status: str            # "pass" | "fail" | "inconclusive"
    detail: str


@dataclass
class RunReport:
    config_hash: str
    stages: Dict[str, dict] = field(default_factory=dict)
    assertions: List[Assertion] = field(default_factory=list)
    wall_clock: Dict[str, float] = field(default_factory=dict)
    path_counts: Dict[str, int] = field(default_factory=dict)

    def record(self, name: str, ok: bool, detail: str) -> None:
        self.assertions.append(Assertion(name, "pass" if ok else "fail", detail))

    def inconclusive(self, name: str, detail: str) -> None:
        self.assertions.append(Assertion(name, "inconclusive", detail))

    def assertion_counts(self) -> Dict[str, int]:
        out = {"pass": 0, "fail": 0, "inconclusive": 0}
        for a in self.assertions:
            out[a.status] += 1
        return out

    @property
    def exit_code(self) -> int:
        return EXIT_ASSERTION if self.assertion_counts()["fail"] else EXIT_OK


class RunContext:
    """Shared objects a pipeline run keeps handing around."""

    def __init__(self, cfg: ExperimentConfig, pool=None):
        self.cfg = cfg
        self.pool = pool
        self.model = cfg.model()
        self.measure = cfg.measure(self.model)
        self.targets = cfg.targets(self.model)
        self.seed = cfg.master_seed
        self.cocycle: Optional[DriftCocycle] = None
        self.curve = None
        self.rate_curve = None

    def seeds(self, lane: int) -> SeedSpec:
        # distinct lanes per stage keep streams collision-free
        return SeedSpec(self.seed, lane * 1_000_000)

    def boundary_target(self) -> FreeBoundary:
        for t in self.targets:
            if isinstance(t, FreeBoundary) and t.repeat:
                return t
        raise ConfigError("pipeline needs at least one repeat-mode boundary target")


# --------------------------------------------------------------------------
# stages

def stage_validate(ctx: RunContext, report: RunReport) -> None:
    cfg = ctx.cfg
    v = validate_measure(ctx.measure, ctx.model)
    na = non_arithmetic_check(ctx.measure, ctx.model)
    report.stages["validate"] = {
        "probability_defect": v.probability_defect,
        "max_displacement": v.max_displacement,
        "exp_moment": v.exp_moment,
        "alpha": v.alpha,
        "non_elementary": v.non_elementary,
        "non_arithmetic": na,
        "atom_count": v.atom_count,
    }
    report.record("measure-valid", v.ok, f"probability defect {v.probability_defect:.2e}")
    if v.non_elementary != "verified":
        report.inconclusive("non-elementary", "no witness found; results untrusted")
    else:
        report.record("non-elementary", True, "two independent loxodromics found")


def stage_geometry(ctx: RunContext, report: RunReport) -> None:
    geo = geometry_report(ctx.model, seed=ctx.seed + 17,
                          samples=ctx.cfg.geometry_samples)
    report.stages["geometry"] = {
        "samples": geo["samples"],
        "total_violations": geo["total_violations"],
        **{f"max_{k}": v for k, v in geo["maxima"].items()},
    }
    report.record("geometry-suite", geo["total_violations"] == 0,
                  f"{geo['total_violations']} violations over {geo['samples']} samples")


def stage_solve(ctx: RunContext, report: RunReport, out_dir: Optional[str]) -> None:
    cfg = ctx.cfg
    if not isinstance(ctx.model, FreeGroupModel):
        report.inconclusive("solver", "plane grids are nearest-node; residuals reported only")
    cocycle = solve_cocycle(ctx.measure, ctx.model, depth=cfg.boundary_depth,
                            tol=cfg.solve_tol, max_iter=cfg.solve_max_iter)
    ctx.cocycle = cocycle
    sol = cocycle.solution
    drift = est.estimate_drift(ctx.measure, ctx.model)
    report.stages["solve"] = {
        "drift_grid": sol.drift_used,
        "drift_oracle": drift.value,
        "drift_oracle_se": drift.se,
        "drift_mismatch": abs(sol.drift_used - drift.value),
        "psi_sup_norm": sol.sup_norm,
        "residual": sol.residual,
        "iterations": sol.iterations,
        "constant_drift_residual": cocycle.constant_drift_residual(),
        "grid_nodes": len(cocycle.grid),
        "sigma_sq_grid": cocycle.sigma_sq_grid(),
        "v_mu": cocycle.v_mu(),
    }
    if out_dir:
        with open(os.path.join(out_dir, "psi.json"), "w") as fh:
            fh.write(sol.to_json(report.config_hash) + "\n")
    report.record("psi-residual", sol.residual <= cfg.tol_psi_residual,
                  f"residual {sol.residual:.2e} vs {cfg.tol_psi_residual:.0e}")
    report.record("constant-drift", cocycle.constant_drift_residual() <= cfg.tol_psi_residual,
                  f"residual {cocycle.constant_drift_residual():.2e}")


def stage_simulate(ctx: RunContext, report: RunReport, out_dir: Optional[str]) -> None:
    cfg = ctx.cfg
    n = min(max(cfg.n_ladder), 2000)
    traj = sample_path(ctx.measure, n, SeedSpec(ctx.seed, 1), targets=ctx.targets,
                       model=ctx.model, keep_increments=False)
    twin = sample_path(ctx.measure, n, SeedSpec(ctx.seed, 1), targets=ctx.targets,
                       model=ctx.model, keep_increments=False)
    identical = bool(np.array_equal(traj.kappas, twin.kappas))
    envelope_ok = True
    for i, series in traj.sigmas.items():
        valid = ~np.isnan(series)
        envelope_ok &= bool((np.abs(series[valid]) <= traj.kappas[valid] + 1e-9).all())
    report.stages["simulate"] = {
        "n": n,
        "final_kappa": float(traj.kappas[-1]),
        "truncation_failures": len(traj.truncation_failures),
        "deterministic_replay": identical,
    }
    if out_dir:
        traj.to_csv(os.path.join(out_dir, "trajectory.csv"))
    report.record("replay-deterministic", identical, "same seed, identical series")
    report.record("sigma-envelope", envelope_ok, "|sigma| <= kappa along the path")


def stage_laplace(ctx: RunContext, report: RunReport, out_dir: Optional[str]) -> None:
    cfg = ctx.cfg
    curve = est.estimate_laplace(ctx.measure, ctx.model, cfg.lambda_grid, cfg.n_ladder,
                                 paths=cfg.laplace_paths, seed=ctx.seeds(2),
                                 block_size=cfg.block_size, pool=ctx.pool)
    ctx.curve = curve
    payload = {
        "method": curve.method,
        "drift": curve.drift,
        "convexity_defect": curve.convexity_defect(),
        "zero_cell": curve.value(0.0, max(cfg.n_ladder)).value,
    }
    report.record("laplace-zero", payload["zero_cell"] == 0.0, "curve vanishes at 0")
    if curve.method == "exact-dp":
        fekete_ok = True
        detail = []
        for lam in [l for l in curve.lambdas if l > 0]:
            ns = sorted(curve.n_ladder)
            vals = [curve.value(lam, n).value for n in ns]
            for a, b in zip(vals, vals[1:]):
                fekete_ok &= b <= a + 1e-12
            detail.append(f"lam={lam}: " + ">=".join(f"{v:.6f}" for v in vals))
        report.record("fekete-monotone", fekete_ok, "; ".join(detail[:3]))
        mc = est.estimate_laplace(ctx.measure, ctx.model, cfg.lambda_grid, cfg.n_ladder,
                                  paths=cfg.laplace_paths, seed=ctx.seeds(3),
                                  block_size=cfg.block_size, method="monte-carlo",
                                  pool=ctx.pool)
        worst_z = 0.0
        flagged = 0
        for lam in curve.lambdas:
            if lam == 0.0:
                continue
            for n in curve.n_ladder:
                cell = mc.cells[(lam, n)]
                if cell.low_confidence:
                    flagged += 1
                    continue
                z = abs(cell.estimate.value - curve.value(lam, n).value) / max(cell.estimate.se, 1e-300)
                worst_z = max(worst_z, z)
        payload["mc_worst_z"] = worst_z
        payload["mc_low_confidence_cells"] = flagged
        report.record("mc-matches-exact", worst_z <= 3.0,
                      f"worst |z| = {worst_z:.2f} over the grid ({flagged} cells ESS-flagged)")
    fit = est.curvature_at_drift(curve, window=cfg.curvature_window)
    payload["curvature"] = fit.coefficient
    payload["curvature_residual"] = fit.residual
    payload["curvature_halfwindow"] = fit.half_window_coefficient
    report.stages["laplace"] = payload
    if out_dir:
        write_csv(os.path.join(out_dir, "laplace.csv"), curve.rows(),
                  config_hash=report.config_hash)
        write_json(os.path.join(out_dir, "laplace.json"), payload, report.config_hash)


def stage_rate(ctx: RunContext, report: RunReport, out_dir: Optional[str]) -> None:
    cfg = ctx.cfg
    curve = ctx.curve
    if curve is None:
        raise ConfigError("rate stage needs the laplace stage first")
    drift = curve.drift
    xs = np.arange(drift - cfg.rate_x_window, drift + cfg.rate_x_window + 1e-12,
                   cfg.rate_x_step)
    rate = est.legendre_transform(curve, xs=xs)
    ctx.rate_curve = rate
    rfit = est.rate_curvature(rate, drift, window=cfg.rate_x_window / 2)
    payload = {
        "rate_at_drift": rate.value_at(drift),
        "curvature": rfit.coefficient,
        "curvature_residual": rfit.residual,
        "inconclusive": rfit.inconclusive,
    }
    report.stages["rate"] = payload
    report.record("rate-minimum-at-drift",
                  rate.value_at(drift) <= max(1e-3, 3e3 * np.finfo(float).eps),
                  f"I(drift) = {rate.value_at(drift):.2e}")
    if out_dir:
        write_csv(os.path.join(out_dir, "rate.csv"), rate.rows(),
                  config_hash=report.config_hash)
        write_json(os.path.join(out_dir, "rate.json"), payload, report.config_hash)


def stage_transforms(ctx: RunContext, report: RunReport, out_dir: Optional[str]) -> None:
    cfg = ctx.cfg
    fz = fuzz_scalar_inequality(cfg.fuzz_cases, seed=ctx.seed + 101)
    fb = fuzz_freedman_base(cfg.fuzz_cases, seed=ctx.seed + 202)
    payload = {
        "scalar_cases": fz.cases,
        "scalar_min_relative_margin": fz.min_relative_margin,
        "scalar_violations": fz.violations,
        "base_cases": fb.cases,
        "base_min_relative_margin": fb.min_relative_margin,
        "base_violations": fb.violations,
    }
    report.record("scalar-inequality-fuzz", fz.violations == 0,
                  f"min relative margin {fz.min_relative_margin:.2e} over {fz.cases} cases")
    report.record("freedman-base-fuzz", fb.violations == 0,
                  f"min relative margin {fb.min_relative_margin:.2e} over {fb.cases} cases")
    if ctx.cocycle is not None and isinstance(ctx.model, FreeGroupModel):
        target = ctx.boundary_target()
        sub = submartingale_transform_check(
            ctx.cocycle, target, cfg.transform_lambdas, cfg.transform_a_values,
            n=cfg.monotonicity_n, paths=cfg.monotonicity_paths,
            seed=ctx.seeds(4), block_size=cfg.block_size, pool=ctx.pool,
        )
        payload["onestep_min_margin"] = sub.onestep_min_margin
        payload["max_mean_decrease_sigmas"] = sub.max_decrease_sigmas
        report.record("submartingale-onestep", sub.onestep_min_margin >= -1e-12,
                      f"min node margin {sub.onestep_min_margin:.2e}")
        report.record("submartingale-monotone", sub.max_decrease_sigmas <= 3.0,
                      f"worst decrease {sub.max_decrease_sigmas:.2f} sigma")
        mgf = conditional_mgf_bound_check(ctx.cocycle, cfg.control_eps,
                                          np.arange(0.05, 1.01, 0.05))
        payload["certified_lambda_range"] = mgf.certified_range
    report.stages["transforms"] = payload
    if out_dir:
        write_json(os.path.join(out_dir, "transforms.json"), payload, report.config_hash)


def stage_qv(ctx: RunContext, report: RunReport, out_dir: Optional[str]) -> None:
    cfg = ctx.cfg
    if ctx.cocycle is None or not isinstance(ctx.model, FreeGroupModel):
        report.inconclusive("qv", "needs a solved free-group cocycle")
        return
    cocycle = ctx.cocycle
    target = ctx.boundary_target()
    if cfg.qv_start == "worst":
        h, _ = cocycle.transient_potential()
        start = cocycle.grid.target_of(int(np.argmax(h)))
    else:
        from .config import parse_boundary_target
        start = parse_boundary_target(cfg.qv_start, ctx.model)
    occ = sigma_sq_occupation(cocycle, target, n=max(cfg.qv_n_list) * 2,
                              burn_in=max(cfg.qv_n_list) // 2, paths=cfg.qv_paths,
                              seed=ctx.seeds(5), block_size=cfg.block_size,
                              pool=ctx.pool)
    probe = est.qv_ldp_probe(cocycle, start, cfg.qv_eps, cfg.qv_n_list,
                             paths=cfg.qv_paths, seed=ctx.seeds(6),
                             block_size=cfg.block_size, pool=ctx.pool)
    clt = est.estimate_clt_variance(ctx.measure, ctx.model, n=max(cfg.n_ladder),
                                    paths=cfg.laplace_paths, seed=ctx.seeds(7),
                                    block_size=cfg.block_size, pool=ctx.pool)
    accel = {}
    try:
        for k in (1, 2, 4):
            accel[k] = accelerated_variance(ctx.measure, ctx.model, k,
                                            depth=cfg.boundary_depth)
    except UnsupportedMeasureError:
        pass
    payload = {
        "sigma_sq_grid": cocycle.sigma_sq_grid(),
        "sigma_sq_occupation": occ.value,
        "sigma_sq_occupation_se": occ.se,
        "clt_variance": clt.value,
        "clt_variance_se": clt.se,
        "accelerated": {str(k): v for k, v in accel.items()},
        "qv_eps": cfg.qv_eps,
        "qv_rows": probe.rows(),
        "qv_rate_strictly_decreasing": probe.rate_strictly_decreasing,
        "qv_prob_strictly_decreasing": probe.prob_strictly_decreasing,
    }
    report.stages["qv"] = payload
    grid_var = cocycle.sigma_sq_grid()
    agree = abs(occ.value - grid_var) <= max(3 * occ.se, 1e-3)
    report.record("occupation-matches-grid", agree,
                  f"occupation {occ.value:.5f} vs grid {grid_var:.5f}")
    agree2 = abs(clt.value - grid_var) <= 3 * max(clt.se, 1e-12) + 0.5 / max(cfg.n_ladder)
    report.record("clt-variance-consistent", agree2,
                  f"clt {clt.value:.5f} (se {clt.se:.1e}) vs grid {grid_var:.5f}")
    if accel:
        gaps = [abs(accel[k] - grid_var) for k in sorted(accel)]
        shrinking = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
        report.record("accelerated-gap-shrinking", shrinking,
                      "gaps " + ", ".join(f"{g:.4f}" for g in gaps))
    if out_dir:
        write_csv(os.path.join(out_dir, "qv.csv"), probe.rows(),
                  config_hash=report.config_hash)
        write_json(os.path.join(out_dir, "qv.json"), payload, report.config_hash)


def stage_bounds(ctx: RunContext, report: RunReport, out_dir: Optional[str]) -> None:
    cfg = ctx.cfg
    rows = est.azuma_empirical_check(cfg.bounds_azuma_n, cfg.bounds_azuma_eps,
                                     paths=cfg.bounds_paths, seed=ctx.seeds(8))
    azuma_ok = all(r["dominated"] for r in rows)
    payload = {"azuma_rows": rows, "azuma_all_dominated": azuma_ok}
    report.record("azuma-dominates", azuma_ok, f"{len(rows)} cells")
    if ctx.cocycle is not None and isinstance(ctx.model, FreeGroupModel):
        target = ctx.boundary_target()
        ces = est.cesaro_empirical_check(ctx.cocycle, target, n=max(cfg.bounds_azuma_n),
                                         m_list=[1, 5], eps_list=cfg.bounds_azuma_eps,
                                         paths=cfg.bounds_paths, seed=ctx.seeds(9),
                                         block_size=cfg.block_size, pool=ctx.pool)
        ces_ok = all(r["dominated"] for r in ces)
        payload["cesaro_rows"] = ces
        report.record("cesaro-dominates", ces_ok, f"{len(ces)} cells")
        control = est.laplace_control_check(
            ctx.cocycle, cfg.control_eps, cfg.control_lambdas, cfg.control_n,
            paths=cfg.bounds_paths, seed=ctx.seeds(10), x=target,
            block_size=cfg.block_size, pool=ctx.pool,
        )
        payload["control_rows"] = control.rows
        payload["control_certified_lambda"] = control.certified_lambda
        report.record("laplace-control-dominates", control.all_dominated,
                      f"certified |lambda| <= {control.certified_lambda:.3f}")
        probe = est.punctual_deviation_probe(
            ctx.measure, ctx.model, target, R_list=[1.0, 3.0, 5.0, 7.0],
            k_list=[50, 100], paths=cfg.bounds_paths, seed=ctx.seeds(11),
            block_size=cfg.block_size, pool=ctx.pool,
        )
        payload["punctual_rows"] = probe.rows
        payload["punctual_beta_hat"] = probe.beta_hat
        if probe.beta_hat is not None:
            report.record("punctual-decay", probe.beta_hat > 0,
                          f"beta-hat {probe.beta_hat:.3f}")
        db = difference_bound_check(ctx.cocycle, target, n=min(500, max(cfg.n_ladder)),
                                    paths=min(cfg.bounds_paths, 20_000),
                                    seed=ctx.seeds(12), block_size=cfg.block_size,
                                    pool=ctx.pool)
        payload["difference_bound_excess"] = db.max_observed_excess
        payload["difference_bound_slack_single"] = db.bound_slack_single
        report.record("difference-bound", db.bound_slack_double >= 0,
                      f"slack {db.bound_slack_double:.3f} (single-corrector "
                      f"slack {db.bound_slack_single:.3f})")
    report.stages["bounds"] = payload
    if out_dir:
        write_json(os.path.join(out_dir, "bounds.json"), payload, report.config_hash)
        write_csv(os.path.join(out_dir, "bounds_azuma.csv"), rows,
                  config_hash=report.config_hash)


STAGES = {
    "validate": stage_validate,
    "geometry": stage_geometry,
    "solve-psi": stage_solve,
    "simulate": stage_simulate,
    "laplace": stage_laplace,
    "rate": stage_rate,
    "verify-transforms": stage_transforms,
    "verify-qv": stage_qv,
    "verify-bounds": stage_bounds,
}

_STAGE_DEPS = {
    "validate": [],
    "geometry": [],
    "solve-psi": ["validate"],
    "simulate": ["validate"],
    "laplace": ["validate"],
    "rate": ["validate", "laplace"],
    "verify-transforms": ["validate", "solve-psi"],
    "verify-qv": ["validate", "solve-psi"],
    "verify-bounds": ["validate", "solve-psi"],
}


def _expand_stages(names) -> List[str]:
    ordered = list(STAGES.keys())
    wanted: set = set()
    def add(name):
        for dep in _STAGE_DEPS[name]:
            add(dep)
        wanted.add(name)
    for n in names:
        add(n)
    return [s for s in ordered if s in wanted]


def run_pipeline(cfg: ExperimentConfig, stages=None, out_dir: Optional[str] = None,
                 workers: Optional[int] = None) -> RunReport:
    workers = cfg.workers if workers is None else workers
    stages = _expand_stages(stages or list(STAGES.keys()))
    report = RunReport(config_hash=cfg.config_hash())
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    pool_cm = multiprocessing.Pool(workers) if workers > 1 else nullcontext(None)
    with pool_cm as pool:
        ctx = RunContext(cfg, pool=pool)
        for name in stages:
            fn = STAGES[name]
            t0 = time.time()
            if name in ("solve-psi", "simulate", "laplace", "rate",
                        "verify-transforms", "verify-qv", "verify-bounds"):
                fn(ctx, report, out_dir)
            else:
                fn(ctx, report)
            report.wall_clock[name] = time.time() - t0
    if out_dir:
        write_json(os.path.join(out_dir, "report.json"),
                   {"master_seed": cfg.master_seed,
                    "stages": report.stages,
                    "assertions": [a.__dict__ for a in report.assertions]},
                   report.config_hash)
        write_json(os.path.join(out_dir, "run_meta.json"),
                   {"wall_clock": report.wall_clock, "workers": workers},
                   report.config_hash)
        with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
            fh.write(render_summary(report))
    return report


def render_report_dir(out_dir: str) -> int:
    """Rebuild summary.txt and gnuplot .dat files from an artifact
    directory; returns an exit code."""
    from .reporting import load_out_dir
    found = load_out_dir(out_dir)
    if not found:
        print(f"no run artifacts in {out_dir!r}")
        return EXIT_CONFIG
    lines = [f"artifacts in {out_dir}:"]
    for name, payload in found.items():
        keys = [k for k in payload.keys() if k not in ("schema_version", "config_hash")]
        lines.append(f"  {name}: config_hash={payload.get('config_hash')} "
                     f"({len(keys)} sections)")
    import csv as _csv
    for name in sorted(os.listdir(out_dir)):
        if not name.endswith(".csv"):
            continue
        with open(os.path.join(out_dir, name)) as fh:
            rows = []
            reader = _csv.reader(line for line in fh if not line.startswith("#"))
            header = next(reader, None)
            if not header:
                continue
            for row in reader:
                rows.append(dict(zip(header, row)))
        write_dat(os.path.join(out_dir, name[:-4] + ".dat"), rows, header)
        lines.append(f"  {name} -> {name[:-4]}.dat")
    with open(os.path.join(out_dir, "summary.txt"), "a") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK
