import itertools
import math

import pytest

from hypwalk import (
    StepMeasure,
    TailRunChain,
    UnsupportedMeasureError,
    build_length_chain,
    solve_boundary_letter_law,
)
from hypwalk import words as W


def brute_force_length_distribution(measure, n):
    """Exact law of the word length after n left-multiplications, by DP
    over the full reduced-word state space (independent of the chain)."""
    states = {(): 1.0}
    for _ in range(n):
        nxt = {}
        for word, p in states.items():
            for g, pg in measure.atoms:
                new = W.multiply(g, word)
                nxt[new] = nxt.get(new, 0.0) + p * pg
        states = nxt
    out = {}
    for word, p in states.items():
        out[len(word)] = out.get(len(word), 0.0) + p
    return out


class TestUniformChain:
    def test_transition_structure(self, fg, uniform):
        chain = build_length_chain(uniform, fg, 64)
        assert chain.symmetric and chain.exact_marginals
        assert chain.up_p == pytest.approx(0.75)
        assert chain.down_p == pytest.approx(0.25)
        assert chain.up_from_zero == pytest.approx(1.0)
        assert chain.drift == pytest.approx(0.5)

    def test_first_step_moments(self, fg, uniform):
        chain = build_length_chain(uniform, fg, 8)
        m = chain.moments(1, lam=0.7)
        assert m.mean == 1.0 and m.variance == 0.0
        assert m.log_mgf == pytest.approx(0.7, abs=1e-14)
        assert chain.log_mgf(0.0, 5) == pytest.approx(0.0, abs=1e-14)

    def test_matches_brute_force(self, fg, uniform):
        chain = build_length_chain(uniform, fg, 10)
        exact = brute_force_length_distribution(uniform, 8)
        dist = chain.distribution(8)
        for m, p in exact.items():
            assert dist[m] == pytest.approx(p, abs=1e-14)
        lam = 0.3
        brute_mgf = math.log(sum(p * math.exp(lam * m) for m, p in exact.items()))
        assert chain.log_mgf(lam, 8) == pytest.approx(brute_mgf, abs=1e-12)

    def test_long_horizon_drift(self, fg, uniform):
        chain = build_length_chain(uniform, fg, 4200)
        m = chain.moments(2000)
        assert abs(m.mean / 2000 - 0.5) <= 1e-3
        assert chain.drift_estimate(1000) == pytest.approx(0.5, abs=1e-12)

    def test_identity_mass(self, fg):
        lazy = StepMeasure((
            (fg.element("a"), 0.2), (fg.element("a^-1"), 0.2),
            (fg.element("b"), 0.2), (fg.element("b^-1"), 0.2),
            (fg.identity, 0.2),
        ))
        chain = build_length_chain(lazy, fg, 16)
        assert chain.symmetric
        exact = brute_force_length_distribution(lazy, 6)
        dist = chain.distribution(6)
        for m, p in exact.items():
            assert dist[m] == pytest.approx(p, abs=1e-14)


class TestBiasedChain:
    def test_boundary_fixed_point(self, fg, biased):
        law = solve_boundary_letter_law(biased, fg)
        assert law.residual < 1e-14
        assert sum(law.alpha.values()) == pytest.approx(1.0, abs=1e-12)
        # the b-directions are symmetric, a dominates
        assert law.alpha[2] == pytest.approx(law.alpha[-2], abs=1e-12)
        assert law.alpha[1] > law.alpha[2] > law.alpha[-1]
        assert law.drift == pytest.approx(0.5426848841796105, abs=1e-12)

    def test_chain_flags_and_drift(self, fg, biased):
        chain = build_length_chain(biased, fg, 600)
        assert not chain.exact_marginals
        assert chain.drift_method == "boundary-fixed-point"
        # the stationary-closure chain reproduces the exact escape rate
        assert chain.drift_estimate(250) == pytest.approx(chain.drift, abs=1e-10)

    def test_closure_quality_vs_brute_force(self, fg, biased):
        chain = build_length_chain(biased, fg, 16)
        exact = brute_force_length_distribution(biased, 10)
        dist = chain.distribution(10)
        tv = 0.5 * sum(abs(dist[m] - exact.get(m, 0.0)) for m in range(11))
        assert tv < 5e-3   # approximate marginals, honest but close

    def test_rejects_long_atoms(self, fg):
        long_measure = StepMeasure(((fg.element("ab"), 1.0),))
        with pytest.raises(UnsupportedMeasureError):
            build_length_chain(long_measure, fg, 8)


class TestTailRunChain:
    def brute_force_gap(self, measure, n, letter=1):
        """Joint law of kappa - sigma(., letter^inf) = 2 * trailing run of
        letter^-1, by enumeration over step sequences."""
        atoms = measure.atoms
        out = {}
        for seq in itertools.product(range(len(atoms)), repeat=n):
            p = 1.0
            word = ()
            for i in seq:
                g, pg = atoms[i]
                word = W.multiply(g, word)
                p *= pg
            run = 0
            for s in reversed(word):
                if s == -letter:
                    run += 1
                else:
                    break
            out[2 * run] = out.get(2 * run, 0.0) + p
        return out

    def test_matches_enumeration(self, fg, uniform):
        chain = TailRunChain(uniform, fg)
        exact = self.brute_force_gap(uniform, 6)
        dist = chain.gap_distribution(6)[6]
        for gap, p in exact.items():
            assert dist[gap // 2] == pytest.approx(p, abs=1e-12)

    def test_tail_probability(self, fg, uniform):
        chain = TailRunChain(uniform, fg)
        exact = self.brute_force_gap(uniform, 7)
        want = sum(p for g, p in exact.items() if g > 3)
        assert chain.tail_probability(7, 3) == pytest.approx(want, abs=1e-12)

    def test_rejects_biased(self, fg, biased):
        with pytest.raises(UnsupportedMeasureError):
            TailRunChain(biased, fg)
