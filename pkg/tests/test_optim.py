
import numpy as np
import pytest

from tumorctrl.fields import (Field, SpaceTimeField, StateTriple, TimeGrid,
                              grid1d)
from tumorctrl.model import ModelParams, regular_potential, smoothstep7
from tumorctrl.optim import (kappa_sweep, proximal_gradient_solve,
                             reduced_cost, smooth_gradient, support_measure,
                             vi_residual, zero_control_threshold)
from tumorctrl.presets import preset_problem, random_admissible_controls
from tumorctrl.solver import ControlPair, Targets, solve_state
from tumorctrl.sparsity import SparsityMode

HS = smoothstep7()


def stationary_problem():
    return preset_problem("stationary-trivial")


class TestReducedCost:
    def test_stationary_zero_cost(self):
        p = stationary_problem()
        cost = reduced_cost(p.params, p.pot, p.hspec, p.targets, p.mode,
                            p.u0, p.init)
        assert cost == 0.0

    def test_one_point_arithmetic(self):
        # beta1 = beta2 = 0, u1 = 2 on one unit cell/step, nu = 2, kappa = 1:
        # cost = nu/2 * 4 + kappa * 2 = 6
        pr = ModelParams(alpha=1.0, beta=1.0, chi=0.0, p_rate=0.0, a_rate=0.0,
                         b_rate=0.0, e_rate=0.0, sigma_s=0.0, nu=2.0,
                         kappa=1.0, beta1=0.0, beta2=0.0)
        tg, g = TimeGrid(1.0, 1), grid1d(1, 1.0)
        u = ControlPair(SpaceTimeField(tg, g, [[2.0]]),
                        SpaceTimeField(tg, g, [[0.0]]))
        init = StateTriple(Field.full(g, 0.0), Field.full(g, 0.0),
                           Field.full(g, 0.0))
        targets = Targets(SpaceTimeField.zeros(tg, g, on_nodes=True),
                          Field.full(g, 0.0))
        cost = reduced_cost(pr, regular_potential(), HS, targets,
                            SparsityMode.FULL_Q, u, init)
        assert cost == pytest.approx(6.0, abs=1e-14)

    def test_matches_independent_quadrature(self, rng):
        # recompute the four cost terms with a separately coded quadrature
        p = preset_problem("time-sparsity-demo")
        shape = (p.timegrid.n_steps, p.grid.n_cells)
        u = ControlPair(
            SpaceTimeField(p.timegrid, p.grid, rng.uniform(-0.5, 0.5, shape)),
            SpaceTimeField(p.timegrid, p.grid, rng.uniform(-0.5, 0.5, shape)))
        cost = reduced_cost(p.params, p.pot, p.hspec, p.targets, p.mode, u,
                            p.init)
        traj = solve_state(p.params, p.pot, p.hspec, u, p.init)
        tau, vol = p.timegrid.tau, p.grid.cell_volume
        w = np.full(p.timegrid.n_steps + 1, tau)
        w[0] = w[-1] = tau / 2
        diff = traj.phi.values - p.targets.phi_q.values
        track_q = 0.5 * p.params.beta1 * sum(
            w[i] * vol * np.sum(diff[i] ** 2) for i in range(len(w)))
        track_t = 0.5 * p.params.beta2 * vol * np.sum(
            (traj.phi.values[-1] - p.targets.phi_omega.values) ** 2)
        quad = 0.5 * p.params.nu * tau * vol * (
            np.sum(u.u1.values ** 2) + np.sum(u.u2.values ** 2))
        gval = p.params.kappa * tau * sum(
            np.sqrt(vol * np.sum(u.u1.values[i] ** 2))
            + np.sqrt(vol * np.sum(u.u2.values[i] ** 2))
            for i in range(p.timegrid.n_steps))
        oracle = track_q + track_t + quad + gval
        assert cost == pytest.approx(oracle, rel=1e-12)


class TestSmoothGradient:
    def test_zero_tracking_gives_nu_u(self, rng):
        p = preset_problem("time-sparsity-demo", beta1=0.0, beta2=0.0)
        shape = (p.timegrid.n_steps, p.grid.n_cells)
        u = ControlPair(
            SpaceTimeField(p.timegrid, p.grid, rng.uniform(-1, 1, shape)),
            SpaceTimeField(p.timegrid, p.grid, rng.uniform(-1, 1, shape)))
        g1, g2 = smooth_gradient(p.params, p.pot, p.hspec, p.targets, u,
                                 p.init)
        assert np.array_equal(g1.values, p.params.nu * u.u1.values)
        assert np.array_equal(g2.values, p.params.nu * u.u2.values)

    def test_stationary_gradient_zero(self):
        p = stationary_problem()
        g1, g2 = smooth_gradient(p.params, p.pot, p.hspec, p.targets, p.u0,
                                 p.init)
        assert np.all(g1.values == 0.0) and np.all(g2.values == 0.0)


class TestViResidual:
    def test_zero_at_trivial_optimum(self):
        p = stationary_problem()
        r = vi_residual(p.params, p.pot, p.hspec, p.targets, p.mode,
                        p.bounds, p.u0, p.init)
        assert r <= 1e-10

    def test_positive_off_optimum(self):
        p = preset_problem("time-sparsity-demo")
        u = random_admissible_controls(p, seed=5)
        r = vi_residual(p.params, p.pot, p.hspec, p.targets, p.mode,
                        p.bounds, u, p.init)
        assert r > 1e-4


class TestOptimizer:
    def test_pure_regularization_converges_to_zero(self):
        p = preset_problem("time-sparsity-demo", beta1=0.0, beta2=0.0)
        u0 = random_admissible_controls(p, seed=11)
        res = proximal_gradient_solve(p.params, p.pot, p.hspec, p.targets,
                                      p.mode, p.bounds, u0, p.opts, p.init)
        assert res.converged
        assert np.all(res.control.u1.values == 0.0)
        assert np.all(res.control.u2.values == 0.0)

    def test_monotone_descent_and_fixed_point(self):
        p = preset_problem("time-sparsity-demo")
        u0 = random_admissible_controls(p, seed=3)
        res = proximal_gradient_solve(p.params, p.pot, p.hspec, p.targets,
                                      p.mode, p.bounds, u0, p.opts, p.init)
        pad = 4 * np.finfo(float).eps * (1.0 + np.abs(res.cost_history[:-1]))
        assert np.all(np.diff(res.cost_history) <= pad)
        assert res.converged and res.vi_residual <= p.opts.tol_vi
        # subgradient respects the mode constraints
        vol = p.grid.cell_volume
        for lam in (res.subgradient.lam1, res.subgradient.lam2):
            norms = np.sqrt(vol * np.sum(lam.values ** 2, axis=1))
            assert np.all(norms <= 1.0 + 1e-10)

    def test_vi_sign_implications(self):
        # where d + kappa lambda + nu u is meaningfully positive, u must sit
        # at the lower bound (and symmetrically at the upper bound)
        p = preset_problem("time-sparsity-demo", kappa=5e-4, nu=0.002,
                           lo1=-0.02, hi1=0.02, lo2=-0.02, hi2=0.02)
        res = proximal_gradient_solve(p.params, p.pot, p.hspec, p.targets,
                                      p.mode, p.bounds, p.u0, p.opts, p.init)
        assert res.converged
        for comp, lam, d, lo, hi in (
                (res.control.u1, res.subgradient.lam1, res.d1, -0.02, 0.02),
                (res.control.u2, res.subgradient.lam2, res.d2, -0.02, 0.02)):
            q = d.values + p.params.kappa * lam.values \
                + p.params.nu * comp.values
            assert np.all(np.isclose(comp.values[q > 1e-8], lo, atol=1e-10))
            assert np.all(np.isclose(comp.values[q < -1e-8], hi, atol=1e-10))
        # the small box must actually bind for the test to have content
        assert np.any(np.isclose(res.control.u1.values, 0.02)) \
            or np.any(np.isclose(res.control.u1.values, -0.02))

    def test_history_lengths(self):
        p = preset_problem("time-sparsity-demo")
        res = proximal_gradient_solve(p.params, p.pot, p.hspec, p.targets,
                                      p.mode, p.bounds, p.u0, p.opts, p.init)
        assert res.cost_history.size == res.n_iters + 1
        assert res.vi_history.size == res.n_iters + 1
        assert res.eta_history.size == res.n_iters
        assert res.control.is_admissible(p.bounds)


class TestThreshold:
    def test_zero_tracking_zero_threshold(self):
        p = preset_problem("time-sparsity-demo", beta1=0.0, beta2=0.0)
        rep = zero_control_threshold(p.params, p.pot, p.hspec, p.targets,
                                     p.mode, p.init)
        assert rep.kappa0_estimate == 0.0

    def test_time_mode_formula(self):
        # recompute the suprema directly from the adjoint at u = 0
        from tumorctrl.solver import adjoint_mismatch_fields, solve_adjoint

        p = preset_problem("time-sparsity-demo")
        rep = zero_control_threshold(p.params, p.pot, p.hspec, p.targets,
                                     p.mode, p.init)
        u0 = ControlPair.zeros(p.timegrid, p.grid)
        traj = solve_state(p.params, p.pot, p.hspec, u0, p.init)
        adj = solve_adjoint(p.params, p.pot, p.hspec, traj, u0, p.targets)
        d1, d2 = adjoint_mismatch_fields(p.hspec, traj, adj)
        vol = p.grid.cell_volume
        k1 = np.max(np.sqrt(vol * np.sum(d1 ** 2, axis=1)))
        k2 = np.max(np.sqrt(vol * np.sum(d2 ** 2, axis=1)))
        assert rep.kappa1 == pytest.approx(k1, rel=1e-13)
        assert rep.kappa2 == pytest.approx(k2, rel=1e-13)
        assert rep.kappa0_estimate == pytest.approx(max(k1, k2), rel=1e-13)

    def test_mode_none_rejected(self):
        p = stationary_problem()
        with pytest.raises(ValueError):
            zero_control_threshold(p.params, p.pot, p.hspec, p.targets,
                                   SparsityMode.NONE, p.init)


class TestKappaSweep:
    def test_requires_ascending(self):
        p = preset_problem("time-sparsity-demo")
        with pytest.raises(ValueError):
            kappa_sweep(p.params, p.pot, p.hspec, p.targets, p.mode,
                        p.bounds, p.u0, p.opts, [0.1, 0.01], p.init)

    def test_support_vanishes_beyond_threshold(self):
        p = preset_problem("time-sparsity-demo")
        rep = zero_control_threshold(p.params, p.pot, p.hspec, p.targets,
                                     p.mode, p.init)
        k0 = rep.kappa0_estimate
        rows = kappa_sweep(p.params, p.pot, p.hspec, p.targets, p.mode,
                           p.bounds, p.u0, p.opts, [0.0, 0.5 * k0, 2.0 * k0],
                           p.init)
        assert rows[0]["support1"] > 0.0
        assert rows[-1]["support1"] == 0.0 and rows[-1]["support2"] == 0.0
        assert rows[-1]["control_norm"] == 0.0


def test_support_measure_units():
    tg, g = TimeGrid(1.0, 4), grid1d(2, 1.0)
    vals = np.zeros((4, 2))
    vals[1, :] = 0.5
    u = ControlPair(SpaceTimeField(tg, g, vals), SpaceTimeField.zeros(tg, g))
    s1, s2 = support_measure(SparsityMode.TIME, u)
    assert s1 == pytest.approx(0.25)  # one slice of measure tau
    assert s2 == 0.0
    s1, _ = support_measure(SparsityMode.FULL_Q, u)
    assert s1 == pytest.approx(0.25 * 1.0)  # two cells x tau*vol each
