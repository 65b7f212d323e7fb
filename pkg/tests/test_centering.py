import json
import math

import numpy as np
import pytest

from hypwalk import (
    FreeBoundary,
    GridError,
    InteriorPoint,
    SeedSpec,
    StepMeasure,
    accelerated_variance,
    conditional_mgf_bound_check,
    difference_bound_check,
    dirac,
    drift_of,
    martingale_trace,
    sample_path,
    sigma_sq_occupation,
    solve_cocycle,
    submartingale_transform_check,
    v_mu,
)
from hypwalk.centering import trace_block

XI_A = FreeBoundary((1,), True)
XI_B = FreeBoundary((2,), True)

ALPHA_DRIFT_BIASED = 0.5426848841796105   # boundary fixed point, residual < 1e-15


class TestSolver:
    def test_uniform_psi_vanishes(self, cocycle_uniform):
        sol = cocycle_uniform.solution
        assert sol.sup_norm <= 1e-10
        assert sol.residual <= 1e-12
        assert sol.drift_used == pytest.approx(0.5, abs=1e-12)
        assert cocycle_uniform.constant_drift_residual() <= 1e-12

    def test_uniform_phi_constant(self, cocycle_uniform):
        # (1/4)(1/4 + 9/4 + 1/4 + 1/4) at every boundary word
        assert cocycle_uniform.phi_tab.min() == pytest.approx(0.75, abs=1e-12)
        assert cocycle_uniform.phi_tab.max() == pytest.approx(0.75, abs=1e-12)
        assert v_mu(cocycle_uniform) == pytest.approx(0.75, abs=1e-12)
        assert cocycle_uniform.sigma_sq_grid() == pytest.approx(0.75, abs=1e-10)

    def test_uniform_sigma0_equals_sigma(self, cocycle_uniform, fg):
        assert cocycle_uniform.sigma0(fg.element("a"), XI_A) == pytest.approx(1.0, abs=1e-12)
        assert cocycle_uniform.sigma0(fg.element("a^-1"), XI_A) == pytest.approx(-1.0, abs=1e-12)

    def test_dirac_identity(self, fg):
        cocycle = solve_cocycle(dirac(fg.identity), fg, depth=4)
        assert cocycle.ell == 0.0
        assert cocycle.solution.sup_norm == 0.0
        assert cocycle.phi_tab.max() == 0.0

    def test_biased_residual_and_drift(self, cocycle_biased):
        sol = cocycle_biased.solution
        assert sol.residual <= 1e-8
        assert cocycle_biased.constant_drift_residual() <= 1e-8
        # grid drift deviates from the exact drift only through truncation
        assert abs(sol.drift_used - ALPHA_DRIFT_BIASED) < 1e-5
        assert sol.sup_norm == pytest.approx(1.1442204, abs=1e-4)

    def test_biased_tables_match_generic_evaluation(self, cocycle_biased, fg):
        # tables vs the generic sigma0/phi path through model operations
        grid = cocycle_biased.grid
        for node in (0, 100, 1234, 8747):
            target = grid.target_of(node)
            phi_direct = sum(
                p * (cocycle_biased.sigma0(g, target) - cocycle_biased.ell) ** 2
                for g, p in cocycle_biased.measure.atoms
            )
            assert cocycle_biased.phi_tab[node] == pytest.approx(phi_direct, abs=1e-12)

    def test_off_grid_is_hard_error(self, cocycle_uniform):
        with pytest.raises(GridError):
            cocycle_uniform.node_of(FreeBoundary((1, 2), False))  # too shallow
        with pytest.raises(GridError):
            cocycle_uniform.node_of(InteriorPoint(()))

    def test_psi_json_roundtrip(self, cocycle_biased):
        payload = json.loads(cocycle_biased.solution.to_json())
        assert payload["schema_version"] == 1
        assert payload["residual"] <= 1e-8
        assert len(payload["psi"]) == len(cocycle_biased.grid)

    def test_supplied_drift_mismatch_reported(self, fg, biased):
        cocycle = solve_cocycle(biased, fg, depth=6, ell=ALPHA_DRIFT_BIASED)
        assert cocycle.solution.drift_supplied == ALPHA_DRIFT_BIASED
        assert 0 < cocycle.solution.drift_mismatch < 1e-4

    def test_truncation_sensitivity(self, fg, biased):
        """Deepening the grid must shrink the gap between the grid drift
        and the boundary fixed point (reported diagnostic, not a certified
        convergence rate)."""
        gaps = []
        for depth in (4, 6, 8):
            cocycle = solve_cocycle(biased, fg, depth=depth)
            gaps.append(abs(cocycle.ell - ALPHA_DRIFT_BIASED))
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 1e-5

    def test_plane_grid_smoke(self, plane):
        g = plane.element([[1.2, 0.1], [0.0, 1 / 1.2]])
        h = plane.element([[1.0, 0.0], [0.4, 1.0]])
        m = StepMeasure(((g, 0.3), (plane.inverse(g), 0.3), (h, 0.2), (plane.inverse(h), 0.2)))
        cocycle = solve_cocycle(m, plane, depth=8)
        assert cocycle.solution.sup_norm < 10
        assert math.isfinite(cocycle.solution.residual)
        assert cocycle.grid.max_lookup > 0  # nearest-node lookups recorded


class TestDrift:
    def test_exact_routes(self, fg, uniform, biased):
        assert drift_of(uniform, fg).value == pytest.approx(0.5, abs=1e-14)
        est = drift_of(biased, fg)
        assert est.method == "exact-dp"
        assert est.value == pytest.approx(ALPHA_DRIFT_BIASED, abs=1e-12)
        assert drift_of(dirac(fg.identity), fg).value == 0.0


class TestTraces:
    def test_trace_identities_uniform(self, cocycle_uniform, fg, uniform):
        traj = sample_path(uniform, 300, SeedSpec(5, 3), targets=[XI_A], model=fg,
                           keep_increments=True)
        tr = martingale_trace(cocycle_uniform, traj, XI_A, a_list=[1.0, 2.0])
        assert tr.M[0] == 0.0
        assert np.all(np.diff(tr.bracket) >= 0)
        assert np.all(np.diff(tr.realized) >= 0)
        assert tr.bracket[-1] == pytest.approx(0.75 * tr.n, abs=1e-9)
        # psi == 0: the martingale IS the centered cocycle
        assert np.abs(tr.M - (tr.sigma - 0.5 * np.arange(tr.n + 1))).max() <= 1e-9
        # all |dM| <= 3/2 <= 2: the truncated transform collapses to the bracket
        assert np.abs(tr.G[2.0] - tr.bracket).max() <= 1e-9
        assert np.abs(tr.sigma - traj.sigmas[0][: tr.n + 1]).max() == 0.0

    def test_trace_band_biased(self, cocycle_biased, fg, biased):
        traj = sample_path(biased, 300, SeedSpec(6, 4), targets=[XI_A], model=fg,
                           keep_increments=True)
        tr = martingale_trace(cocycle_biased, traj, XI_A, a_list=[2.0])
        band = 2 * cocycle_biased.solution.sup_norm + 1e-9
        drift = cocycle_biased.ell
        gap = tr.M - (tr.sigma - drift * np.arange(tr.n + 1))
        assert np.abs(gap).max() <= band
        assert np.all(np.diff(tr.bracket) > 0)
        assert np.all(tr.G[2.0] <= tr.bracket + 1e-12)

    def test_block_engine_matches_trace(self, cocycle_biased, fg, biased):
        res = trace_block(cocycle_biased, XI_A, 200, SeedSpec(8, 0), 256,
                          a_values=(2.0,), checkpoints=(200,))
        snap = res.checkpoints[200]
        band = 2 * cocycle_biased.solution.sup_norm + 1e-9
        gap = snap["M"] - (snap["sigma"] - cocycle_biased.ell * 200)
        assert np.abs(gap).max() <= band
        assert np.all(snap["G_2.0"] <= snap["bracket"] + 1e-12)
        assert np.all(np.abs(snap["sigma"]) <= snap["kappa"] + 1e-9)

    def test_trace_csv_export(self, cocycle_uniform, fg, uniform, tmp_path):
        traj = sample_path(uniform, 20, SeedSpec(5, 9), targets=[XI_A], model=fg,
                           keep_increments=True)
        tr = martingale_trace(cocycle_uniform, traj, XI_A, a_list=[2.0])
        out = tmp_path / "trace.csv"
        tr.to_csv(out)
        lines = out.read_text().splitlines()
        assert lines[0] == "step,node,M,dM,bracket,realized,sigma,G_2.0"
        assert len(lines) == 22

    def test_empirical_martingale_property_binned(self, cocycle_biased):
        """Binned by the conditioning node's first letter (a coarsening of
        the per-node partition), mean dM must vanish within 4 SE."""
        first = cocycle_biased.grid.first_letter
        sums = {s: 0.0 for s in (-2, -1, 1, 2)}
        sqs = {s: 0.0 for s in (-2, -1, 1, 2)}
        counts = {s: 0 for s in (-2, -1, 1, 2)}
        dm_tab = cocycle_biased.dm_tab
        from hypwalk.sampling import nn_letter_arrays
        _, cum = nn_letter_arrays(cocycle_biased.measure, cocycle_biased.model)
        rng = SeedSpec(14, 1).philox()
        node = np.full(4096, cocycle_biased.node_of(XI_A), dtype=np.int64)
        for _ in range(200):
            idx = np.minimum(np.searchsorted(cum, rng.random(4096), side="right"), 3)
            dm = dm_tab[node, idx]
            for s in sums:
                mask = first[node] == s
                sums[s] += float(dm[mask].sum())
                sqs[s] += float((dm[mask] ** 2).sum())
                counts[s] += int(mask.sum())
            node = cocycle_biased.act[node, idx]
        for s in sums:
            mean = sums[s] / counts[s]
            se = math.sqrt(sqs[s] / counts[s]) / math.sqrt(counts[s])
            assert abs(mean) <= 4 * se, f"letter {s}: mean {mean} vs 4 SE {4*se}"

    def test_mean_band(self, cocycle_biased):
        """E[sigma(L_n, x)] stays within 2||psi|| of n*ell (empirically)."""
        n = 400
        res = trace_block(cocycle_biased, XI_A, n, SeedSpec(9, 0), 20_000,
                          checkpoints=(n,), snapshot_fields=("sigma",))
        mean = res.checkpoints[n]["sigma"].mean()
        se = res.checkpoints[n]["sigma"].std(ddof=1) / math.sqrt(20_000)
        band = 2 * cocycle_biased.solution.sup_norm
        assert abs(mean - n * cocycle_biased.ell) <= band + 4 * se


class TestVarianceRoutes:
    def test_occupation_uniform_exact(self, cocycle_uniform):
        est = sigma_sq_occupation(cocycle_uniform, XI_A, n=200, burn_in=50,
                                  paths=2000, seed=SeedSpec(4, 0))
        assert est.value == pytest.approx(0.75, abs=1e-12)   # phi is constant

    def test_occupation_two_starts_agree(self, cocycle_biased):
        a = sigma_sq_occupation(cocycle_biased, XI_A, n=1500, burn_in=300,
                                paths=6000, seed=SeedSpec(4, 1))
        b = sigma_sq_occupation(cocycle_biased, XI_B, n=1500, burn_in=300,
                                paths=6000, seed=SeedSpec(4, 2))
        assert a.agrees_with(b)

    def test_dirac_occupation_zero(self, fg):
        cocycle = solve_cocycle(dirac(fg.identity), fg, depth=4)
        est = sigma_sq_occupation(cocycle, XI_A, n=50, burn_in=10, paths=100,
                                  seed=SeedSpec(4, 3))
        assert est.value == 0.0

    def test_accelerated_uniform_all_k(self, fg, uniform):
        for k in (1, 2, 4):
            assert accelerated_variance(uniform, fg, k, depth=6) == pytest.approx(
                0.75, abs=1e-10)

    def test_accelerated_k1_equals_vmu(self, fg, biased, cocycle_biased):
        v1 = accelerated_variance(biased, fg, 1, depth=8)
        assert v1 == pytest.approx(v_mu(cocycle_biased), abs=1e-10)

    def test_accelerated_gap_shrinks(self, fg, biased, cocycle_biased):
        sigma2 = cocycle_biased.sigma_sq_grid()
        gaps = [abs(accelerated_variance(biased, fg, k, depth=6) - sigma2)
                for k in (1, 2, 4)]
        assert gaps[0] > gaps[1] > gaps[2]


class TestTransformChecks:
    def test_onestep_margins(self, cocycle_uniform, cocycle_biased):
        for cocycle in (cocycle_uniform, cocycle_biased):
            for lam in (0.05, 0.1):
                for a in (1.0, 2.0):
                    from hypwalk.centering import submartingale_onestep_check
                    chk = submartingale_onestep_check(cocycle, lam, a)
                    assert chk.min_margin >= -1e-12

    def test_monotonicity_small(self, cocycle_uniform):
        rep = submartingale_transform_check(
            cocycle_uniform, XI_A, [0.05], [1.0, 2.0], n=60, paths=20_000,
            seed=SeedSpec(12, 0))
        assert rep.max_decrease_sigmas <= 3.0
        series = rep.mean_series[(0.05, 2.0)]
        assert series[0] >= 1.0 - 1e-9   # submartingale starts at mean >= 1

    def test_conditional_mgf_ranges(self, cocycle_uniform, fg):
        rep = conditional_mgf_bound_check(cocycle_uniform, 0.1,
                                          np.arange(0.05, 1.01, 0.05))
        assert rep.certified_range >= 0.4
        # one-sided check at +0.5 (exact four-atom sum) holds with eps=0.1
        lhs = float(np.log(np.exp(0.5 * cocycle_uniform.dm_tab)
                           @ cocycle_uniform.probs).max())
        assert lhs <= 0.25 * (0.75 + 0.1) / 2
        cocycle0 = solve_cocycle(dirac(fg.identity), fg, depth=4)
        rep0 = conditional_mgf_bound_check(cocycle0, 0.01, [0.5, 1.0, 2.0])
        assert rep0.certified_range == 2.0   # dM == 0: every lambda certified

    def test_difference_bound(self, cocycle_uniform, cocycle_biased):
        rep = difference_bound_check(cocycle_uniform, XI_A, n=200, paths=4000,
                                     seed=SeedSpec(13, 0))
        # uniform: |dM| <= kappa + 1/2 exactly, psi = 0
        assert rep.bound_slack_single >= -1e-12
        assert rep.max_observed_excess <= 0.5 + 1e-12
        rep2 = difference_bound_check(cocycle_biased, XI_A, n=200, paths=4000,
                                      seed=SeedSpec(13, 1))
        assert rep2.bound_slack_double >= 0
        assert rep2.bound_slack_single >= -1e-12   # observed: single norm suffices
