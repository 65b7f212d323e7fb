"""Experiment configuration: one declarative TOML file per run.

The config hash covers everything that determines numeric output; worker
count and output directory are runtime concerns and excluded, so the same
experiment sharded differently carries the same provenance hash.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass
from typing import List, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .measures import StepMeasure
from .spaces import FreeBoundary, FreeGroupModel, InteriorPoint, PlaneModel
from . import words as W

SCHEMA_VERSION = 1


@dataclass
class ExperimentConfig:
    raw: dict
    model_kind: str
    rank: int
    boundary_depth: int
    delta: float
    atoms: List[Tuple[object, float]]   # word text (free group) or matrix rows (plane)
    alpha: float
    boundary_targets: List[str]
    interior_targets: List[str]
    master_seed: int
    workers: int
    block_size: int
    out_dir: str
    lambda_grid: List[float]
    n_ladder: List[int]
    laplace_paths: int
    curvature_window: float
    rate_x_window: float
    rate_x_step: float
    solve_tol: float
    solve_max_iter: int
    transform_lambdas: List[float]
    transform_a_values: List[float]
    monotonicity_n: int
    monotonicity_paths: int
    fuzz_cases: int
    qv_eps: float
    qv_n_list: List[int]
    qv_paths: int
    qv_start: str
    bounds_azuma_n: List[int]
    bounds_azuma_eps: List[float]
    control_lambdas: List[float]
    control_n: List[int]
    control_eps: float
    bounds_paths: int
    geometry_samples: int
    tol_psi_residual: float
    tol_geometry: float
    tol_busemann: float

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.raw.items() if k != "run"}
        run = dict(self.raw.get("run", {}))
        run.pop("workers", None)
        run.pop("out_dir", None)
        payload["run"] = run
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- constructed objects

    def model(self):
        if self.model_kind == "free-group":
            return FreeGroupModel(self.rank, boundary_depth=self.boundary_depth)
        if self.model_kind == "plane":
            return PlaneModel(delta=self.delta)
        raise ConfigError(f"unknown model kind {self.model_kind!r}")

    def measure(self, model) -> StepMeasure:
        if not self.atoms:
            raise ConfigError("measure.atoms must be nonempty")
        atoms = []
        for name, p in self.atoms:
            if not isinstance(p, (int, float)) or p <= 0:
                raise ConfigError(f"atom {name!r} needs a positive probability, got {p}")
            atoms.append((model.element(name), float(p)))
        total = math.fsum(p for _, p in atoms)
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"measure.atoms probabilities sum to {total}, not 1")
        return StepMeasure(tuple(atoms), alpha=self.alpha)

    def targets(self, model):
        out = []
        for text in self.boundary_targets:
            out.append(parse_boundary_target(text, model))
        for text in self.interior_targets:
            if isinstance(model, PlaneModel):
                out.append(InteriorPoint(model.validate_point(complex(text))))
            else:
                out.append(InteriorPoint(model.element(text)))
        return out


def parse_boundary_target(text: str, model):
    """"a^inf" / "ab^inf" -> repeat-mode boundary word; "ab|prefix" ->
    prefix-only; for the plane a float or "inf"."""
    text = text.strip()
    if isinstance(model, PlaneModel):
        from .spaces import PlaneBoundary
        return PlaneBoundary(math.inf if text in ("inf", "+inf") else float(text))
    if text.endswith("^inf"):
        word = W.parse_word(text[:-4], model.rank)
        if not word:
            raise ConfigError(f"empty boundary word in {text!r}")
        return FreeBoundary(word, True)
    if text.endswith("|prefix"):
        word = W.parse_word(text[: -len("|prefix")], model.rank)
        return FreeBoundary(word, False)
    raise ConfigError(f"cannot parse boundary target {text!r}")


def _get(table: dict, key: str, default):
    value = table.get(key, default)
    if value is None:
        raise ConfigError(f"missing config key {key!r}")
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        model_t = data.get("model", {})
        measure_t = data.get("measure", {})
        targets_t = data.get("targets", {})
        run_t = data.get("run", {})
        laplace_t = data.get("laplace", {})
        rate_t = data.get("rate", {})
        solve_t = data.get("solve", {})
        trans_t = data.get("transforms", {})
        qv_t = data.get("qv", {})
        bounds_t = data.get("bounds", {})
        tol_t = data.get("tolerances", {})
        geom_t = data.get("geometry", {})

        lam = [float(x) for x in _get(laplace_t, "lambda_grid",
                                      [-0.05, -0.04, -0.03, -0.02, -0.01,
                                       0.01, 0.02, 0.03, 0.04, 0.05])]
        ladder = [int(x) for x in _get(laplace_t, "n_ladder", [250, 500, 1000])]
        if not lam or not ladder:
            raise ConfigError("laplace grids must be nonempty")
        cfg = ExperimentConfig(
            raw=data,
            model_kind=str(_get(model_t, "kind", "free-group")),
            rank=int(_get(model_t, "rank", 2)),
            boundary_depth=int(_get(model_t, "boundary_depth", 8)),
            delta=float(_get(model_t, "delta", 1.0)),
            atoms=[(a[0], float(a[1])) for a in _get(measure_t, "atoms", [
                ["a", 0.25], ["a^-1", 0.25], ["b", 0.25], ["b^-1", 0.25]])],
            alpha=float(_get(measure_t, "alpha", 1.0)),
            boundary_targets=[str(t) for t in _get(targets_t, "boundary", ["a^inf"])],
            interior_targets=[str(t) for t in _get(targets_t, "interior", ["e"])],
            master_seed=int(_get(run_t, "master_seed", 20240817)),
            workers=int(_get(run_t, "workers", 1)),
            block_size=int(_get(run_t, "block_size", 8192)),
            out_dir=str(_get(run_t, "out_dir", "out")),
            lambda_grid=lam,
            n_ladder=ladder,
            laplace_paths=int(_get(laplace_t, "paths", 20_000)),
            curvature_window=float(_get(laplace_t, "curvature_window", 0.1)),
            rate_x_window=float(_get(rate_t, "x_window", 0.12)),
            rate_x_step=float(_get(rate_t, "x_step", 0.005)),
            solve_tol=float(_get(solve_t, "tolerance", 1e-12)),
            solve_max_iter=int(_get(solve_t, "max_iter", 100_000)),
            transform_lambdas=[float(x) for x in _get(trans_t, "lambdas", [0.05, 0.1])],
            transform_a_values=[float(x) for x in _get(trans_t, "a_values", [1.0, 2.0])],
            monotonicity_n=int(_get(trans_t, "monotonicity_n", 100)),
            monotonicity_paths=int(_get(trans_t, "monotonicity_paths", 20_000)),
            fuzz_cases=int(_get(trans_t, "fuzz_cases", 20_000)),
            qv_eps=float(_get(qv_t, "eps", 0.05)),
            qv_n_list=[int(x) for x in _get(qv_t, "n_list", [100, 200, 400])],
            qv_paths=int(_get(qv_t, "paths", 20_000)),
            qv_start=str(_get(qv_t, "start", "worst")),
            bounds_azuma_n=[int(x) for x in _get(bounds_t, "azuma_n", [100, 200, 400])],
            bounds_azuma_eps=[float(x) for x in _get(bounds_t, "azuma_eps", [0.2, 0.3, 0.5])],
            control_lambdas=[float(x) for x in _get(bounds_t, "control_lambdas", [0.02, 0.05])],
            control_n=[int(x) for x in _get(bounds_t, "control_n", [200, 500])],
            control_eps=float(_get(bounds_t, "control_eps", 0.1)),
            bounds_paths=int(_get(bounds_t, "paths", 20_000)),
            geometry_samples=int(_get(geom_t, "samples", 1000)),
            tol_psi_residual=float(_get(tol_t, "psi_residual", 1e-8)),
            tol_geometry=float(_get(tol_t, "geometry", 1e-9)),
            tol_busemann=float(_get(tol_t, "busemann_limit", 1e-6)),
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    for name, value in [
        ("solve.tolerance", cfg.solve_tol),
        ("tolerances.psi_residual", cfg.tol_psi_residual),
        ("tolerances.geometry", cfg.tol_geometry),
        ("tolerances.busemann_limit", cfg.tol_busemann),
    ]:
        if value <= 0:
            raise ConfigError(f"{name} must be > 0, got {value}")
    if cfg.master_seed < 0 or cfg.master_seed > (1 << 64) - 1:
        raise ConfigError("run.master_seed must fit in 64 bits")
    if cfg.workers < 1:
        raise ConfigError("run.workers must be >= 1")
    if cfg.block_size < 1:
        raise ConfigError("run.block_size must be >= 1")
    if not cfg.lambda_grid or not cfg.n_ladder:
        raise ConfigError("laplace grids must be nonempty")
    if not cfg.qv_n_list:
        raise ConfigError("qv.n_list must be nonempty")
    total = math.fsum(p for _, p in cfg.atoms)
    if abs(total - 1.0) > 1e-12:
        raise ConfigError(
            f"measure.atoms: probabilities sum to {total!r}, not 1 "
            "(fix the offending atom weights)"
        )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    return config_from_dict(data)


def default_config() -> ExperimentConfig:
    return config_from_dict({})
