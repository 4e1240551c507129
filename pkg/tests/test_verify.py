import numpy as np
import pytest

from tumorctrl.presets import preset_problem
from tumorctrl.solver import solve_state
from tumorctrl.verify import (CheckReport, DimensionTooLarge,
                              brute_force_optimize, duality_gap,
                              fd_gradient_check, linearized_fd_check,
                              linearized_fd_refinement, separation_monitor,
                              write_check_csv)

# a small instance keeps these oracle tests fast; the full-size preset runs
# live in the acceptance suite
SMALL = dict(n=(16,), n_steps=24, t_final=0.25)


@pytest.fixture(scope="module")
def small_problem():
    return preset_problem("1D-logarithmic-default", **SMALL)


class TestFdGradientCheck:
    def test_passes_on_small_instance(self, small_problem):
        rep = fd_gradient_check(small_problem, n_directions=3)
        assert rep.passed
        assert rep.metric("max_best_rel_error") <= 1e-3
        # central differences decay quadratically before the floor
        assert 1.5 <= rep.metric("prefloor_slope") <= 2.5

    def test_random_admissible_points(self, small_problem):
        # gradient correctness away from the nominal control
        from tumorctrl.presets import random_admissible_controls

        for seed in (1, 2, 3):
            u = random_admissible_controls(small_problem, seed, scale=0.4)
            rep = fd_gradient_check(small_problem, u=u, n_directions=1)
            assert rep.metric("max_best_rel_error") <= 1e-3

    def test_two_dimensional_instance(self):
        prob = preset_problem("2D-regular-default")
        rep = fd_gradient_check(prob, n_directions=2)
        assert rep.passed

    def test_deterministic_given_seed(self, small_problem):
        a = fd_gradient_check(small_problem, n_directions=2)
        b = fd_gradient_check(small_problem, n_directions=2)
        assert a.metrics == b.metrics

    def test_stationary_point_both_sides_tiny(self):
        prob = preset_problem("stationary-trivial")
        from tumorctrl.optim import smooth_gradient
        from tumorctrl.verify import _smooth_cost, _unit_direction

        g1, g2 = smooth_gradient(prob.params, prob.pot, prob.hspec,
                                 prob.targets, prob.u0, prob.init)
        rng = np.random.default_rng(0)
        k1, k2 = _unit_direction(prob, rng)
        tau, vol = prob.timegrid.tau, prob.grid.cell_volume
        adj = tau * vol * (np.sum(g1.values * k1) + np.sum(g2.values * k2))
        eps = 1e-4
        from tumorctrl.verify import _pack_controls
        up = _pack_controls(prob, prob.u0.u1.values + eps * k1,
                            prob.u0.u2.values + eps * k2)
        dn = _pack_controls(prob, prob.u0.u1.values - eps * k1,
                            prob.u0.u2.values - eps * k2)
        fd = (_smooth_cost(prob, up) - _smooth_cost(prob, dn)) / (2 * eps)
        assert abs(adj) <= 1e-10 and abs(fd) <= 1e-10


class TestLinearizedChecks:
    def test_single_level(self, small_problem):
        rep = linearized_fd_check(small_problem)
        assert rep.passed
        assert rep.metric("best_rel_error") <= 1e-2

    def test_zero_direction_gives_zero(self, small_problem):
        shape = (small_problem.timegrid.n_steps, small_problem.grid.n_cells)
        z = np.zeros(shape)
        from tumorctrl.fields import SpaceTimeField
        from tumorctrl.solver import LinearizedSpec, solve_linearized

        base = solve_state(small_problem.params, small_problem.pot,
                           small_problem.hspec, small_problem.u0,
                           small_problem.init)
        spec = LinearizedSpec(
            lam1=1, lam2=1,
            k1=SpaceTimeField(small_problem.timegrid, small_problem.grid, z),
            k2=SpaceTimeField(small_problem.timegrid, small_problem.grid, z))
        lin = solve_linearized(small_problem.params, small_problem.pot,
                               small_problem.hspec, base, small_problem.u0,
                               spec)
        assert np.all(lin.phi.values == 0.0)

    def test_refinement_table_three_levels(self, small_problem):
        rep = linearized_fd_refinement(small_problem, levels=3)
        assert len(rep.refinement) >= 3
        errs = [r[3] for r in rep.refinement]
        assert all(b < a for a, b in zip(errs, errs[1:]))
        assert rep.passed


class TestDualityGap:
    def test_zero_tracking_zero_gap(self):
        prob = preset_problem("1D-logarithmic-default", beta1=0.0, beta2=0.0,
                              **SMALL)
        rep = duality_gap(prob, levels=3)
        assert rep.metric("base_gap") == 0.0
        assert rep.passed

    def test_order_one_in_tau(self, small_problem):
        rep = duality_gap(small_problem, levels=3)
        assert len(rep.refinement) >= 3
        assert rep.passed

    def test_simultaneous_refinement_decreases(self, small_problem):
        rep = duality_gap(small_problem, levels=3, refine="both")
        gaps = [r[3] for r in rep.refinement]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        assert rep.observed_order >= 1.0


class TestBruteForce:
    def test_zero_tracking_finds_zero(self):
        prob = preset_problem("time-sparsity-demo", beta1=0.0, beta2=0.0,
                              n=(2,), n_steps=2, t_final=0.4)
        u, j = brute_force_optimize(prob.params, prob.pot, prob.hspec,
                                    prob.targets, prob.mode, prob.bounds,
                                    prob.init)
        assert j == 0.0
        assert np.all(u.u1.values == 0.0) and np.all(u.u2.values == 0.0)

    def test_dimension_guard(self):
        prob = preset_problem("time-sparsity-demo", n=(4,), n_steps=2)
        with pytest.raises(DimensionTooLarge):
            brute_force_optimize(prob.params, prob.pot, prob.hspec,
                                 prob.targets, prob.mode, prob.bounds,
                                 prob.init)


class TestSeparationMonitor:
    def test_regular_not_applicable(self):
        prob = preset_problem("stationary-trivial")
        traj = solve_state(prob.params, prob.pot, prob.hspec, prob.u0,
                           prob.init)
        rep = separation_monitor(traj, prob.pot)
        assert rep.passed
        assert rep.metric("applicable") == 0.0

    def test_default_margins_healthy(self, small_problem):
        traj = solve_state(small_problem.params, small_problem.pot,
                           small_problem.hspec, small_problem.u0,
                           small_problem.init)
        rep = separation_monitor(traj, small_problem.pot)
        assert rep.passed
        assert rep.metric("min_margin") > 1e-3

    def test_stress_names_offending_step(self):
        prob = preset_problem("stress-separation")
        traj = solve_state(prob.params, prob.pot, prob.hspec, prob.u0,
                           prob.init)
        rep = separation_monitor(traj, prob.pot)
        assert not rep.passed
        assert rep.metric("first_offending_step") >= 0
        assert rep.metric("min_margin") <= 1e-6


def test_check_csv(tmp_path):
    rep = CheckReport("demo", (("a", 1.0, 2.0, True), ("b", 3.0, None, None)),
                      ((0, 0.1, 0.2, 1e-3), (1, 0.05, 0.1, 5e-4)),
                      observed_order=1.0, passed=True)
    path = tmp_path / "check.csv"
    write_check_csv(rep, path)
    text = path.read_text()
    assert "metric,a,1.0,2.0,1" in text
    assert "refinement,,,,,0,0.1,0.2,0.001" in text
    assert "metric,passed,1" in text
