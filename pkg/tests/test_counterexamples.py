import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carlab.counterexamples import (
    DriftMdpParams,
    Grid1D,
    MeasureReport,
    adversarial_states,
    comb_adv_measure_analytic,
    comb_dip_kl_quadrature,
    comb_grid,
    comb_policy_grid,
    comb_t,
    comb_t_objective,
    comb_vulnerable_policy,
    drift_mdp,
    hat_width,
    instability_hat_q,
    kl_budget_attack,
    linf_closeness_report,
    linf_worst_q,
    lp_necessity_comb_q,
    margin_policy,
    measure_sets,
    non_contraction_witness,
    policy_measure_sets,
    robustness_guarantee_report,
    solve_drift,
    suboptimal_mask,
    window_dilate,
)
from carlab.mdp_core import value_iteration
from carlab.operators import KlMeasurementConfig, bellman_residual, kl_k_measurement, lp_norm


@pytest.fixture(scope="module")
def drift_small():
    grid = Grid1D(-1.0, 1.0, 2001)
    mdp, q_star = solve_drift(DriftMdpParams(), grid)
    return grid, mdp, q_star


@pytest.fixture(scope="module")
def comb_case():
    delta, eps = 0.1, 0.05
    grid = comb_grid(1.0, delta, eps, 0.9)
    _, q_star = solve_drift(DriftMdpParams(), grid)
    return grid, q_star, lp_necessity_comb_q(q_star, 1.0, delta, eps, grid)


@pytest.fixture(scope="module")
def hat_case():
    grid = Grid1D(-1.0, 1.0, 200001)
    mdp, q_star = solve_drift(DriftMdpParams(variant="stay"), grid)
    return grid, mdp, q_star


def sign_split_policy(grid, p_opt):
    s = grid.points
    return np.where(s[:, None] >= 0, [p_opt, 1 - p_opt], [1 - p_opt, p_opt])


class TestGrid:
    def test_rejects_even_count(self):
        with pytest.raises(ValueError):
            Grid1D(-1.0, 1.0, 100)

    def test_zero_is_a_point_and_measure(self):
        g = Grid1D(-1.0, 1.0, 11)
        assert g.points[5] == 0.0
        assert g.cell_measure * g.n == pytest.approx(2.0)

    def test_from_spacing_rejects_misalignment(self):
        with pytest.raises(ValueError):
            Grid1D.from_spacing(-1.0, 1.0, 0.3)

    def test_window_dilate_matches_brute_force(self, rng):
        mask = rng.random(200) < 0.05
        for w in (0, 1, 4):
            expect = np.array([mask[max(0, i - w):i + w + 1].any() for i in range(200)])
            np.testing.assert_array_equal(window_dilate(mask, w), expect)


class TestNonContraction:
    def test_gap_and_ratio(self):
        w = non_contraction_witness(n=20.0, delta=1.0, gamma=0.9)
        assert w.sup_gap == 1.0
        assert w.operator_gap == pytest.approx(18.0, abs=1e-12)
        assert w.ratio == pytest.approx(18.0, abs=1e-12)

    @pytest.mark.parametrize("n,gamma", [(5.0, 0.5), (40.0, 0.99)])
    def test_gap_scales_with_n(self, n, gamma):
        w = non_contraction_witness(n=n, delta=1.0, gamma=gamma)
        assert w.operator_gap == pytest.approx(gamma * n, rel=1e-12)

    def test_rejects_small_n(self):
        with pytest.raises(ValueError, match="n must exceed"):
            non_contraction_witness(n=0.5, delta=1.0)

    def test_probe_at_half_radius_collapses(self):
        # the closed ball around -eps/2 reaches a point where both tables agree
        w = non_contraction_witness(n=20.0, delta=1.0, eps=0.08, probe=-0.04)
        assert w.operator_gap == 0.0


class TestDriftMdp:
    def test_optimal_policy_sign_split(self, drift_small):
        grid, _, q = drift_small
        s = grid.points
        assert np.all(q[s > 1e-12, 1] > q[s > 1e-12, 0])
        assert np.all(q[s < -1e-12, 0] > q[s < -1e-12, 1])

    def test_tie_at_zero(self, drift_small):
        grid, _, q = drift_small
        i0 = grid.index_of(0.0)
        assert q[i0, 0] == pytest.approx(q[i0, 1], abs=1e-12)

    def test_gap_exceeds_two_k_s(self, drift_small):
        grid, _, q = drift_small
        s = grid.points
        pos = s > 1e-12
        assert np.all(q[pos, 1] - q[pos, 0] > 2 * 1.0 * s[pos])

    def test_rejects_misaligned_grid(self):
        with pytest.raises(ValueError):
            drift_mdp(DriftMdpParams(step=0.1), Grid1D(-1.0, 1.0, 31))

    def test_parameter_guards(self):
        with pytest.raises(ValueError):
            DriftMdpParams(k1=2.0, k2=1.0)
        with pytest.raises(ValueError):
            DriftMdpParams(variant="stay", kernel_width=0.05)

    def test_kernel_rows_are_distributions(self):
        grid = Grid1D(-1.0, 1.0, 201)
        mdp = drift_mdp(DriftMdpParams(kernel_width=0.05), grid)
        sums = np.asarray(mdp.transition.sum(axis=1)).ravel()
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)


class TestCombQ:
    def test_lp_error_and_sub_measure(self, comb_case):
        grid, q_star, comb = comb_case
        err = lp_norm(comb.q[:, 1] - q_star[:, 1], 1, grid.cell_measure)
        assert err == pytest.approx(comb.analytic_lp_error(1.0), rel=0.02)
        assert comb.analytic_lp_error(1.0) <= 0.1 + 1e-12
        rep = measure_sets(comb.q, q_star, 0.05, grid)
        assert rep.m_sub == pytest.approx(comb.analytic_sub_measure, rel=0.02)
        assert rep.m_sub < 2 * 0.1

    def test_every_point_adversarial(self, comb_case):
        grid, q_star, comb = comb_case
        rep = measure_sets(comb.q, q_star, 0.05, grid)
        # the tie point s = 0 has no suboptimal action and cannot be attacked
        assert rep.m_nu == grid.cell_measure
        assert rep.m_adv + rep.m_nu == pytest.approx(rep.m_total, rel=1e-12)
        assert comb_adv_measure_analytic(comb, 0.05) == pytest.approx(2.0)

    def test_hand_enumeration_of_one_state(self, comb_case):
        grid, q_star, comb = comb_case
        i = grid.index_of(0.5 + 0.01)
        window = grid.window(0.05)
        hits = [j for j in range(i - window, i + window + 1)
                if np.argmax(comb.q[j]) == 0 and q_star[i, 0] < q_star[i].max() - 1e-9]
        assert hits, "the state should see a depressed a2 within eps"

    def test_rejects_infinite_p(self, comb_case):
        grid, q_star, _ = comb_case
        with pytest.raises(ValueError):
            lp_necessity_comb_q(q_star, math.inf, 0.1, 0.05, grid)


class TestLinfReport:
    def test_zero_delta(self, drift_small):
        grid, _, q = drift_small
        rep = linf_closeness_report(q, 0.0, 0.05, 1.0, grid)
        assert rep.m_sub == 0.0
        assert rep.m_adv <= 2 * 0.05 + 2 * grid.cell_measure

    def test_bounds(self, drift_small):
        grid, _, q = drift_small
        rep = linf_closeness_report(q, 0.05, 0.1, 1.0, grid)
        assert rep.m_sub <= 0.1 + grid.cell_measure
        assert rep.m_adv <= 0.3 + 2 * grid.cell_measure
        assert all(ok for _, _, ok in rep.checks().values())

    def test_greedy_optimal_at_two_delta_over_k(self, drift_small):
        grid, _, q = drift_small
        worst = linf_worst_q(q, 0.05)
        i = grid.index_of(2 * 0.05 / 1.0)
        assert np.argmax(worst[i]) == np.argmax(q[i])

    def test_rejects_delta_above_slope(self, drift_small):
        grid, _, q = drift_small
        with pytest.raises(ValueError):
            linf_closeness_report(q, 2.0, 0.1, 1.0, grid)


class TestInstabilityHat:
    def test_ratio_and_residual(self, hat_case):
        grid, mdp, q_star = hat_case
        hat = instability_hat_q(q_star, 1.0, 1.0, math.inf, 10.0, 0.01, grid)
        num = lp_norm(hat.q - q_star, math.inf, grid.cell_measure)
        den = lp_norm(bellman_residual(hat.q, mdp), 1.0, grid.cell_measure)
        assert den <= 3 * hat.h * hat.width + 1e-12
        assert 3 * hat.h * hat.width <= 0.01 + 1e-12
        assert num >= 10 * den
        assert num == hat.h

    def test_grid_norms_match_closed_forms(self, hat_case):
        grid, mdp, q_star = hat_case
        hat = instability_hat_q(q_star, 1.0, 1.0, math.inf, 10.0, 0.01, grid)
        den = lp_norm(bellman_residual(hat.q, mdp), 1.0, grid.cell_measure)
        assert den == pytest.approx(hat.analytic_residual_norm(1.0, mdp.gamma), rel=0.02)
        err2 = lp_norm(hat.q - q_star, 2.0, grid.cell_measure)
        assert err2 == pytest.approx(hat.analytic_error_norm(2.0), rel=0.02)

    def test_finite_p_lower_bound(self, hat_case):
        grid, mdp, q_star = hat_case
        hat = instability_hat_q(q_star, 1.0, 1.0, 4.0, 2.0, 0.05, grid)
        num = lp_norm(hat.q - q_star, 4.0, grid.cell_measure)
        assert num >= hat.h * (hat.width / 2) ** (1 / 4) * 0.98

    def test_zero_height(self, hat_case):
        grid, mdp, q_star = hat_case
        hat = instability_hat_q(q_star, 0.0, 1.0, math.inf, 10.0, 0.01, grid)
        np.testing.assert_array_equal(hat.q, q_star)

    def test_rejects_unresolved_width(self):
        grid = Grid1D(-1.0, 1.0, 201)
        _, q_star = solve_drift(DriftMdpParams(variant="stay"), grid)
        with pytest.raises(ValueError, match="grid spacing"):
            instability_hat_q(q_star, 1.0, 1.0, math.inf, 10.0, 0.01, grid)

    def test_width_formula(self):
        assert hat_width(1.0, 1.0, math.inf, 10.0, 0.01) == pytest.approx(1 / 300)
        with pytest.raises(ValueError):
            hat_width(1.0, 2.0, 1.0, 10.0, 0.01)


@pytest.fixture(scope="module")
def comb():
    delta, eps = 0.05, 0.05
    grid = comb_policy_grid(delta, eps, min_points=20)
    phi = sign_split_policy(grid, 0.9)
    return grid, phi, comb_vulnerable_policy(phi, 1.0, delta, eps, grid)


class TestCombPolicy:
    def test_t_solves_the_budget_inequality(self):
        t = comb_t(0.05)
        assert comb_t_objective(t) <= 0.025
        assert comb_t_objective(t + 1e-8) > 0.025

    def test_one_measurement_within_delta(self, comb):
        grid, phi, cp = comb
        cfg = KlMeasurementConfig(1, np.ones(grid.n), grid.cell_measure)
        assert kl_k_measurement(phi, cp.pi, cfg) <= 0.05
        assert comb_dip_kl_quadrature(cp, phi[-1], phi[0]) <= 0.05

    def test_absolute_deviation_matches_closed_form(self, comb):
        grid, phi, cp = comb
        lay = cp.layout
        grid_val = np.sum(np.abs(cp.pi[:, 0] - phi[:, 0])) * grid.cell_measure
        closed = 2 * len(lay.centers) * lay.l * (0.9 - lay.t) / 2
        assert grid_val == pytest.approx(closed, rel=0.02)

    def test_grid_kl_converges_to_quadrature(self):
        gaps = []
        for pts in (10, 40):
            grid = comb_policy_grid(0.05, 0.05, min_points=pts)
            phi = sign_split_policy(grid, 0.9)
            cp = comb_vulnerable_policy(phi, 1.0, 0.05, 0.05, grid)
            kg = kl_k_measurement(phi, cp.pi, KlMeasurementConfig(1, np.ones(grid.n), grid.cell_measure))
            gaps.append(abs(kg / comb_dip_kl_quadrature(cp, phi[-1], phi[0]) - 1))
        assert gaps[1] < gaps[0] / 2

    def test_measures(self, comb):
        grid, _, cp = comb
        rep = policy_measure_sets(cp.pi, grid, 0.05)
        assert rep.m_adv == pytest.approx(rep.m_total)
        assert rep.m_sub <= cp.layout.dip_measure + 2 * grid.cell_measure
        assert rep.m_sub <= 2 * 0.05

    def test_policy_returns_to_phi_between_dips(self, comb):
        grid, phi, cp = comb
        outside = ~cp.dip_mask
        np.testing.assert_allclose(cp.pi[outside], phi[outside])

    def test_rejects_deterministic_phi(self):
        grid = comb_policy_grid(0.05, 0.05, min_points=5)
        with pytest.raises(ValueError, match="strictly stochastic"):
            comb_vulnerable_policy(sign_split_policy(grid, 1.0), 1.0, 0.05, 0.05, grid)


class TestRobustnessGuarantee:
    def test_zero_delta_separated(self):
        grid = Grid1D(-0.5, 0.5, 1001)
        phi = sign_split_policy(grid, 0.8)
        rep = robustness_guarantee_report(phi, phi, np.ones(grid.n), 0.0, 0.05, grid)
        assert rep.h_delta == 0.0 and rep.m_sub == 0.0

    def test_margin_above_threshold_gives_empty_set(self):
        grid = Grid1D(-0.5, 0.5, 1001)
        phi = sign_split_policy(grid, 0.75)
        assert 2 * math.sqrt(2 * 0.01) == pytest.approx(0.283, abs=1e-3)
        pi = kl_budget_attack(phi, np.ones(grid.n), 0.01)
        rep = robustness_guarantee_report(phi, pi, np.ones(grid.n), 0.01, 0.05, grid)
        assert rep.h_delta == 0.0
        assert rep.m_sub == 0.0

    def test_margin_policy_bounds(self):
        grid = Grid1D(-0.5, 0.5, 20001)
        phi = margin_policy(grid, 0.05)
        mu = np.ones(grid.n)
        pi = kl_budget_attack(phi, mu, 0.05)
        rep = robustness_guarantee_report(phi, pi, mu, 0.05, 0.05, grid)
        assert all(ok for _, _, ok in rep.checks().values())
        assert rep.m_adv <= 2 * 0.05 + rep.h_delta + 2 * grid.cell_measure

    def test_budget_attack_spends_delta(self):
        grid = Grid1D(-0.5, 0.5, 101)
        phi = margin_policy(grid, 0.2)
        mu = np.full(grid.n, 2.0)
        pi = kl_budget_attack(phi, mu, 0.01)
        kl = np.sum(phi * np.log(phi / pi), axis=1)
        np.testing.assert_allclose(mu * kl, 0.01, rtol=1e-6)

    def test_comb_dips_land_in_s_delta(self):
        grid = comb_policy_grid(0.05, 0.05, min_points=20)
        phi = sign_split_policy(grid, 0.9)
        cp = comb_vulnerable_policy(phi, 1.0, 0.05, 0.05, grid)
        delta = 0.01
        rep = robustness_guarantee_report(cp.pi, cp.pi, np.ones(grid.n), delta, 0.05, grid)
        assert rep.h_delta > 0
        in_s_delta = np.abs(cp.pi[:, 0] - cp.pi[:, 1]) <= 2 * math.sqrt(2 * delta)
        assert rep.h_delta == pytest.approx(in_s_delta.sum() * grid.cell_measure)
        assert not np.any(in_s_delta & ~cp.dip_mask)
        s = grid.points
        for c in cp.layout.centers:
            for centre in (c, -c):
                near = np.abs(s - centre) <= cp.layout.l / 2
                assert np.any(in_s_delta & near)

    def test_rejects_budget_violation(self):
        grid = Grid1D(-0.5, 0.5, 101)
        phi = margin_policy(grid, 0.2)
        with pytest.raises(ValueError, match="exceeds delta"):
            robustness_guarantee_report(phi, phi[:, ::-1], np.ones(grid.n), 0.01, 0.05, grid)


class TestMeasureSets:
    def test_optimal_input_has_no_suboptimal_states(self, drift_small):
        grid, _, q = drift_small
        assert measure_sets(q, q, 0.05, grid).m_sub == 0.0

    def test_zero_radius_equal_measures(self, comb_case):
        grid, q_star, comb = comb_case
        rep = measure_sets(comb.q, q_star, 0.0, grid)
        assert rep.m_adv == rep.m_sub

    def test_report_invariant_enforced(self):
        with pytest.raises(ValueError):
            MeasureReport(m_sub=0.5, m_adv=0.2, m_total=1.0, epsilon=0.1, tag="x")

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 6), st.integers(0, 6))
    def test_adv_sets_nested_in_radius(self, seed, w1, w2):
        r = np.random.default_rng(seed)
        q_star = r.normal(size=(81, 3))
        scores = q_star + r.normal(scale=0.5, size=(81, 3))
        bad = suboptimal_mask(scores, q_star)
        greedy = np.argmax(scores, axis=1)
        lo, hi = sorted((w1, w2))
        small = adversarial_states(greedy, bad, lo)
        large = adversarial_states(greedy, bad, hi)
        sub = bad[np.arange(81), greedy]
        assert np.all(sub <= small)
        assert np.all(small <= large)
