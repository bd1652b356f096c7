import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carlab.envs import GRID_MOVES, GridAdversaryEnv
from carlab.mdp_core import (
    TabularMdp,
    argmax_sets,
    dilate,
    discontinuity_states,
    greedy_policy,
    intrinsic_neighborhood,
    load_mdp,
    nonintrinsic_state_set,
    perturbation_set,
    save_mdp,
    value_iteration,
    visitation_distribution,
)
from carlab.operators import bellman_apply

from conftest import chain_mdp, random_mdp


def enumerate_optimal_q(mdp):
    """Q* as the best Q^pi over every deterministic policy, each evaluated by
    a dense linear solve."""
    p = mdp.dense_transition()
    n_s, n_a = mdp.n_states, mdp.n_actions
    best_v = np.full(n_s, -np.inf)
    for pol in itertools.product(range(n_a), repeat=n_s):
        idx = np.arange(n_s)
        p_pi = p[idx, pol]
        r_pi = mdp.reward[idx, pol]
        v = np.linalg.solve(np.eye(n_s) - mdp.gamma * p_pi, r_pi)
        best_v = np.maximum(best_v, v)
    return mdp.reward + mdp.gamma * p @ best_v


class TestTabularMdp:
    def test_rejects_non_stochastic_rows(self):
        p = np.full((2, 1, 2), 0.6)
        with pytest.raises(ValueError, match="sum to 1"):
            TabularMdp(p, np.zeros((2, 1)), 0.9, np.array([0.5, 0.5]))

    def test_rejects_negative_probability(self):
        p = np.array([[[1.5, -0.5]], [[0.0, 1.0]]])
        with pytest.raises(ValueError, match="negative"):
            TabularMdp(p, np.zeros((2, 1)), 0.9, np.array([0.5, 0.5]))

    @pytest.mark.parametrize("gamma", [1.0, 1.5, -0.1])
    def test_rejects_bad_gamma(self, gamma):
        p = np.ones((1, 1, 1))
        with pytest.raises(ValueError, match="gamma"):
            TabularMdp(p, np.ones((1, 1)), gamma, np.ones(1))

    def test_rejects_bad_mu0(self):
        with pytest.raises(ValueError, match="mu0"):
            TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.5, np.array([0.7]))

    def test_rejects_nonfinite_reward(self):
        with pytest.raises(ValueError, match="finite"):
            TabularMdp(np.ones((1, 1, 1)), np.array([[np.inf]]), 0.5, np.ones(1))

    def test_save_load_roundtrip(self, tmp_path, rng):
        mdp = random_mdp(rng, 4, 3, 0.8)
        mdp = TabularMdp(mdp.transition, mdp.reward, mdp.gamma, mdp.mu0, rng.random((4, 2)))
        path = tmp_path / "m.txt"
        save_mdp(mdp, path)
        back = load_mdp(path)
        assert back.gamma == mdp.gamma
        np.testing.assert_array_equal(back.reward, mdp.reward)
        np.testing.assert_array_equal(back.dense_transition(), mdp.dense_transition())
        np.testing.assert_array_equal(back.state_coords, mdp.state_coords)
        header = path.read_text().splitlines()[0].split()
        assert header[:2] == ["4", "3"]

    def test_load_rejects_truncated_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("2 1 0.9\n1 2\n")
        with pytest.raises(ValueError, match="malformed"):
            load_mdp(path)


class TestValueIteration:
    def test_geometric_series(self):
        mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9, np.ones(1))
        q = value_iteration(mdp, tol=1e-12)
        assert q[0, 0] == pytest.approx(10.0, abs=1e-10)

    def test_zero_reward_gives_zero(self, rng):
        base = random_mdp(rng, 5, 3)
        mdp = TabularMdp(base.transition, np.zeros((5, 3)), 0.9, base.mu0)
        assert np.all(value_iteration(mdp) == 0.0)

    def test_matches_policy_enumeration_on_small_grid(self):
        env = GridAdversaryEnv(layout=("S.", ".G"))
        mdp, _ = env.tabularize()
        q = value_iteration(mdp, tol=1e-12)
        np.testing.assert_allclose(q, enumerate_optimal_q(mdp), atol=1e-9)

    def test_matches_policy_enumeration_with_wall_and_hazard(self):
        env = GridAdversaryEnv(layout=("S#G", "..H"))
        mdp, _ = env.tabularize()
        np.testing.assert_allclose(value_iteration(mdp, tol=1e-12), enumerate_optimal_q(mdp), atol=1e-9)

    def test_residual_within_tolerance(self, grid_model):
        mdp, _, q = grid_model
        assert np.max(np.abs(bellman_apply(q, mdp) - q)) <= 1e-10

    def test_residual_trace_non_increasing(self, rng):
        mdp = random_mdp(rng, 6, 3, 0.95)
        _, trace = value_iteration(mdp, tol=1e-10, return_trace=True)
        assert np.all(np.diff(trace) <= 1e-15)

    def test_rejects_nonpositive_tol(self):
        mdp = chain_mdp()
        with pytest.raises(ValueError):
            value_iteration(mdp, tol=0.0)


class TestGreedyPolicy:
    def test_unique_max(self):
        assert greedy_policy(np.array([[1.0, 3.0, 2.0]]))[0] == 1

    def test_tie_lowest_index(self):
        assert greedy_policy(np.array([[2.0, 2.0]]))[0] == 0

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            greedy_policy(np.array([[np.nan, 1.0]]))

    def test_gridworld_follows_shortest_paths(self, grid_env, grid_model):
        mdp, _, q = grid_model
        env = grid_env
        # BFS distance to the goal over free cells
        dist = {g: 0 for g in env.goals}
        queue = deque(env.goals)
        while queue:
            c = queue.popleft()
            for mv in GRID_MOVES:
                n = (c[0] + int(mv[0]), c[1] + int(mv[1]))
                if n in env.index and n not in env.walls and n not in dist:
                    dist[n] = dist[c] + 1
                    queue.append(n)
        pi = greedy_policy(q)
        for c in env.cells:
            if env.is_terminal(c) or c in env.walls:
                continue
            nxt, _ = env.move(c, pi[env.index[c]])
            assert dist[nxt] == dist[c] - 1


class TestVisitation:
    def test_single_state(self):
        mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.7, np.ones(1))
        d = visitation_distribution(mdp, np.array([0]))
        assert d.d[0, 0] == pytest.approx(1.0, abs=1e-14)

    def test_absorbing_chain_matches_truncated_rollout(self):
        gamma = 0.9
        mdp = chain_mdp(gamma)
        d = visitation_distribution(mdp, np.array([0, 0])).d[:, 0]
        # exact distribution propagation for 10,000 steps
        p_pi = mdp.dense_transition()[:, 0, :]
        dist = mdp.mu0.copy()
        acc = np.zeros(2)
        w = 1.0 - gamma
        for _ in range(10_000):
            acc += w * dist
            dist = dist @ p_pi
            w *= gamma
        np.testing.assert_allclose(d, acc, atol=1e-8)
        np.testing.assert_allclose(d, [1 - gamma, gamma], atol=1e-12)

    def test_uniform_policy_positive_on_reachable_cells(self, grid_env, grid_model):
        mdp, _, _ = grid_model
        uniform = np.full((mdp.n_states, mdp.n_actions), 0.25)
        d = visitation_distribution(mdp, uniform)
        assert d.d.sum() == pytest.approx(1.0, abs=1e-10)
        reachable = [grid_env.index[c] for c in grid_env.cells if c not in grid_env.walls]
        assert np.all(d.d[reachable] > 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.99))
    def test_normalised_and_nonnegative(self, seed, gamma):
        r = np.random.default_rng(seed)
        mdp = random_mdp(r, 4, 3, gamma, sparse_rows=True)
        pi = r.dirichlet(np.ones(3), size=4)
        d = visitation_distribution(mdp, pi).d
        assert d.min() >= 0.0
        assert abs(d.sum() - 1.0) <= 1e-10


def corridor_mdp():
    """Three cells in a row; both ends are absorbing with reward 1 on entry,
    so the two actions tie in the middle."""
    p = np.zeros((3, 2, 3))
    r = np.zeros((3, 2))
    p[0, :, 0] = 1.0
    p[2, :, 2] = 1.0
    p[1, 0, 0] = 1.0
    p[1, 1, 2] = 1.0
    r[1, :] = 1.0
    return TabularMdp(p, r, 0.9, np.array([0.0, 1.0, 0.0]), np.array([[-1.0], [0.0], [1.0]]))


class TestIntrinsicNeighborhood:
    def test_zero_radius_is_the_center(self, grid_model):
        mdp, coords, q = grid_model
        b = perturbation_set(coords, 0.0)
        bs = intrinsic_neighborhood(mdp, q, b)
        assert bs.as_sets() == [{s} for s in range(mdp.n_states)]

    def test_subset_and_same_argmax(self, grid_env, grid_model):
        mdp, coords, q = grid_model
        b = perturbation_set(coords, 1.01 * grid_env.spacing)
        bs = intrinsic_neighborhood(mdp, q, b)
        opt = argmax_sets(q)
        for s, (full, sub) in enumerate(zip(b.as_sets(), bs.as_sets())):
            assert sub <= full
            assert s in sub
            for t in sub:
                assert np.array_equal(opt[t], opt[s])

    def test_far_cell_equal_and_boundary_cell_strict(self):
        env = GridAdversaryEnv(("S......",) + (".......",) * 5 + ("S.....G",))
        mdp, coords = env.tabularize()
        q = value_iteration(mdp, tol=1e-10)
        b = perturbation_set(coords, 1.01 * env.spacing)
        bs = intrinsic_neighborhood(mdp, q, b)
        opt = argmax_sets(q)
        full, sub = b.as_sets(), bs.as_sets()
        same = [s for s in range(mdp.n_states) if all(np.array_equal(opt[t], opt[s]) for t in full[s])]
        mixed = [s for s in range(mdp.n_states) if s not in same]
        assert same and mixed
        for s in same:
            assert sub[s] == full[s]
        for s in mixed:
            assert sub[s] < full[s]

    def test_gridworld_default_radius_has_no_nonintrinsic_states(self, grid_env, grid_model):
        mdp, coords, q = grid_model
        b = perturbation_set(coords, 0.4 * grid_env.spacing)
        s_nin, _ = nonintrinsic_state_set(mdp, q, b)
        assert s_nin.size == 0


class TestNonintrinsicStates:
    def test_dominant_action_gives_empty_set(self, rng):
        base = random_mdp(rng, 5, 2)
        r = np.column_stack([np.full(5, 1.0), np.zeros(5)])
        mdp = TabularMdp(base.transition, r, 0.9, base.mu0, np.arange(5.0))
        q = value_iteration(mdp)
        s_nin, s_nu = nonintrinsic_state_set(mdp, q, perturbation_set(mdp.state_coords, 2.0))
        assert s_nin.size == 0 and s_nu.size == 0

    def test_corridor_center_is_non_unique(self):
        mdp = corridor_mdp()
        q = value_iteration(mdp)
        _, s_nu = nonintrinsic_state_set(mdp, q, perturbation_set(mdp.state_coords, 1.0))
        assert 1 in s_nu

    def test_gridworld_contained_in_dilated_boundary(self, grid_env, grid_model):
        mdp, coords, q = grid_model
        b = perturbation_set(coords, 1.01 * grid_env.spacing)
        s_nin, s_nu = nonintrinsic_state_set(mdp, q, b)
        opt = argmax_sets(q)
        # brute force: a cell is on a decision boundary if some grid
        # neighbour within the ball has another optimal action set
        boundary = {s for s in range(mdp.n_states)
                    if any(not np.array_equal(opt[t], opt[s]) for t in b.neighbors(s))}
        dilated = set()
        for s in boundary:
            dilated |= set(b.neighbors(s).tolist())
        assert set(s_nin.tolist()) <= dilated

    @pytest.mark.parametrize("radius", [0.5, 1.01, 2.01])
    def test_containment_in_dilated_nonunique_and_jump_sets(self, grid_env, grid_model, radius):
        mdp, coords, q = grid_model
        b = perturbation_set(coords, radius * grid_env.spacing)
        s_nin, s_nu = nonintrinsic_state_set(mdp, q, b)
        s0 = discontinuity_states(q, b, threshold=0.0)
        cover = dilate(np.union1d(s_nu, s0), b)
        assert set(s_nin.tolist()) <= set(cover.tolist())


class TestPerturbationSet:
    def test_center_included_and_symmetric(self, rng):
        coords = rng.random((40, 2))
        for metric in ("L_inf", "L_2"):
            b = perturbation_set(coords, 0.2, metric)
            sets = b.as_sets()
            for s, nb in enumerate(sets):
                assert s in nb
                for t in nb:
                    assert s in sets[t]

    def test_matches_brute_force(self, rng):
        coords = rng.random((30, 2))
        b = perturbation_set(coords, 0.25, "L_inf")
        for s in range(30):
            expect = set(np.flatnonzero(np.abs(coords - coords[s]).max(axis=1) <= 0.25).tolist())
            assert b.as_sets()[s] == expect

    def test_rejects_negative_radius(self):
        with pytest.raises(ValueError):
            perturbation_set(np.zeros((2, 1)), -1.0)

    def test_rejects_unknown_metric(self):
        with pytest.raises(ValueError):
            perturbation_set(np.zeros((2, 1)), 1.0, "L_1")
