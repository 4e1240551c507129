"""Reduced objective, adjoint gradient, proximal-gradient optimization.

The reduced cost splits into a smooth part (tracking + nu/2 ||u||^2, whose
gradient comes from one forward and one adjoint solve) and the nonsmooth
part kappa*g + box indicator handled entirely by the prox.  Stationarity is
measured by the variational-inequality residual
||u - P_box(-(d + kappa*lambda)/nu)||, which vanishes exactly at points
satisfying the first-order conditions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import SpaceTimeField, StateTriple, inner
from .model import BoxBounds, InterpolantSpec, ModelParams, PotentialSpec
from .solver import (AdjointTriple, ControlPair, Targets, Trajectory,
                     adjoint_mismatch_fields, solve_adjoint, solve_state)
from .sparsity import (SparsityMode, SubgradientPair, eval_g, mode_norms,
                       prox_pair, select_subgradient)


class StepsizeCollapse(RuntimeError):
    """Backtracking reduced the step size below its floor."""


@dataclass(frozen=True)
class OptimizeOptions:
    """Proximal-gradient options; eta0 defaults to 1/nu."""

    max_iters: int = 500
    eta0: float | None = None
    backtrack: float = 0.5
    decrease: float = 1e-4
    tol_vi: float = 1e-8
    tol_cost: float = 0.0
    eta_min: float = 1e-14

    def __post_init__(self):
        if not (0.0 < self.backtrack < 1.0):
            raise ValueError("backtracking factor must lie in (0, 1)")
        for name in ("decrease", "tol_vi", "eta_min"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.tol_cost < 0.0:
            raise ValueError("tol_cost must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass(frozen=True)
class OptimizeResult:
    control: ControlPair
    trajectory: Trajectory
    adjoint: AdjointTriple
    subgradient: SubgradientPair
    d1: SpaceTimeField
    d2: SpaceTimeField
    cost_history: np.ndarray
    vi_history: np.ndarray
    eta_history: np.ndarray
    support1: np.ndarray
    support2: np.ndarray
    n_iters: int
    converged: bool

    @property
    def cost(self) -> float:
        return float(self.cost_history[-1])

    @property
    def vi_residual(self) -> float:
        return float(self.vi_history[-1])


@dataclass(frozen=True)
class ThresholdReport:
    """Smallest kappa for which the zero control is VI-stationary."""

    mode: SparsityMode
    kappa1: float
    kappa2: float
    norms1: np.ndarray
    norms2: np.ndarray

    @property
    def kappa0_estimate(self) -> float:
        return max(self.kappa1, self.kappa2)


def _tracking_cost(params, targets: Targets, traj: Trajectory) -> float:
    diff = traj.phi.values - targets.phi_q.values
    w = traj.phi.time_weights()
    vol = traj.grid.cell_volume
    q_term = 0.5 * params.beta1 * vol * float(np.dot(w, np.sum(diff ** 2, axis=1)))
    dT = traj.phi.values[-1] - targets.phi_omega.values
    o_term = 0.5 * params.beta2 * vol * float(np.sum(dT ** 2))
    return q_term + o_term


def _control_cost(params, mode, u: ControlPair) -> float:
    quad = 0.5 * params.nu * (inner(u.u1, u.u1) + inner(u.u2, u.u2))
    return quad + params.kappa * eval_g(mode, u)


def reduced_cost(params: ModelParams, pot: PotentialSpec,
                 hspec: InterpolantSpec, targets: Targets, mode: SparsityMode,
                 u: ControlPair, init: StateTriple) -> float:
    """Cost of the control u through the state solve.

    beta1/2 ||phi_u - phi_q||_Q^2 + beta2/2 ||phi_u(T) - phi_omega||^2
    + nu/2 ||u||_Q^2 + kappa g(u), with trapezoidal time quadrature for the
    tracking term and interval quadrature for the control terms.
    """
    traj = solve_state(params, pot, hspec, u, init)
    return _tracking_cost(params, targets, traj) + _control_cost(params, mode, u)


@dataclass(frozen=True)
class _GradientBundle:
    trajectory: Trajectory
    adjoint: AdjointTriple
    d1: np.ndarray
    d2: np.ndarray
    g1: np.ndarray
    g2: np.ndarray


def _gradient_bundle(params, pot, hspec, targets, u: ControlPair,
                     init: StateTriple,
                     traj: Trajectory | None = None) -> _GradientBundle:
    if traj is None:
        traj = solve_state(params, pot, hspec, u, init)
    adj = solve_adjoint(params, pot, hspec, traj, u, targets)
    d1, d2 = adjoint_mismatch_fields(hspec, traj, adj)
    g1 = d1 + params.nu * u.u1.values
    g2 = d2 + params.nu * u.u2.values
    return _GradientBundle(traj, adj, d1, d2, g1, g2)


def smooth_gradient(params: ModelParams, pot: PotentialSpec,
                    hspec: InterpolantSpec, targets: Targets, u: ControlPair,
                    init: StateTriple) -> tuple[SpaceTimeField, SpaceTimeField]:
    """Gradient of the smooth reduced cost: (-psi1 h(phi) + nu u1, psi3 + nu u2).

    One forward and one backward (adjoint) solve.
    """
    b = _gradient_bundle(params, pot, hspec, targets, u, init)
    tg, grid = u.timegrid, u.grid
    return (SpaceTimeField(tg, grid, b.g1), SpaceTimeField(tg, grid, b.g2))


def _q_norm(u: ControlPair, a1: np.ndarray, a2: np.ndarray) -> float:
    tau = u.timegrid.tau
    vol = u.grid.cell_volume
    return math.sqrt(tau * vol * (float(np.sum(a1 ** 2)) + float(np.sum(a2 ** 2))))


def _vi_residual_from(params, mode, bounds: BoxBounds, u: ControlPair,
                      d1: np.ndarray, d2: np.ndarray) -> float:
    kappa = params.kappa if mode is not SparsityMode.NONE else 0.0
    lam = select_subgradient(mode, u, (d1, d2), kappa, params.nu)
    t1 = np.clip(-(d1 + kappa * lam.lam1.values) / params.nu,
                 bounds.lo1, bounds.hi1)
    t2 = np.clip(-(d2 + kappa * lam.lam2.values) / params.nu,
                 bounds.lo2, bounds.hi2)
    return _q_norm(u, u.u1.values - t1, u.u2.values - t2)


def vi_residual(params: ModelParams, pot: PotentialSpec,
                hspec: InterpolantSpec, targets: Targets, mode: SparsityMode,
                bounds: BoxBounds, u: ControlPair, init: StateTriple) -> float:
    """Stationarity measure ||u - P_box(-(d + kappa lambda)/nu)||_Q.

    Zero exactly at points satisfying the first-order variational
    inequality, with lambda the residual-minimizing subgradient selection.
    """
    b = _gradient_bundle(params, pot, hspec, targets, u, init)
    return _vi_residual_from(params, mode, bounds, u, b.d1, b.d2)


def support_measure(mode: SparsityMode, u: ControlPair,
                    tol: float = 1e-8) -> tuple[float, float]:
    """Measure of the nonzero set of each control, in mode units."""
    tau = u.timegrid.tau
    vol = u.grid.cell_volume
    out = []
    for comp in (u.u1, u.u2):
        if mode is SparsityMode.TIME:
            nrm = np.sqrt(vol * np.sum(comp.values ** 2, axis=1))
            out.append(tau * float(np.count_nonzero(nrm > tol)))
        elif mode is SparsityMode.SPACE:
            nrm = np.sqrt(tau * np.sum(comp.values ** 2, axis=0))
            out.append(vol * float(np.count_nonzero(nrm > tol)))
        else:
            out.append(tau * vol
                       * float(np.count_nonzero(np.abs(comp.values) > tol)))
    return tuple(out)


def _support_pattern(mode: SparsityMode, u: ControlPair, tol: float = 1e-12):
    tau, vol = u.timegrid.tau, u.grid.cell_volume
    pats = []
    for comp in (u.u1, u.u2):
        if mode is SparsityMode.TIME:
            pats.append(np.sqrt(vol * np.sum(comp.values ** 2, axis=1)) > tol)
        elif mode is SparsityMode.SPACE:
            pats.append(np.sqrt(tau * np.sum(comp.values ** 2, axis=0)) > tol)
        else:
            pats.append(np.abs(comp.values) > tol)
    return pats


def proximal_gradient_solve(params: ModelParams, pot: PotentialSpec,
                            hspec: InterpolantSpec, targets: Targets,
                            mode: SparsityMode, bounds: BoxBounds,
                            u0: ControlPair, opts: OptimizeOptions,
                            init: StateTriple) -> OptimizeResult:
    """Minimize the reduced cost by proximal gradient with backtracking.

    Iterates u+ = prox(u - eta grad J1(u)) where the prox handles
    kappa*g + box jointly; a step is accepted when the full cost decreases
    by at least (decrease/eta) ||u+ - u||_Q^2, so the cost history is
    nonincreasing up to a rounding pad of 4 eps (1 + |cost|).  Stops at VI
    residual <= tol_vi, at a relative cost stagnation below tol_cost (if
    enabled), or at max_iters.
    """
    tg, grid = u0.timegrid, u0.grid
    kappa = params.kappa if mode is not SparsityMode.NONE else 0.0
    eta0 = opts.eta0 if opts.eta0 is not None else 1.0 / params.nu

    u1 = np.clip(u0.u1.values, bounds.lo1, bounds.hi1)
    u2 = np.clip(u0.u2.values, bounds.lo2, bounds.hi2)

    def pack(a1, a2):
        return ControlPair(SpaceTimeField(tg, grid, a1),
                           SpaceTimeField(tg, grid, a2), bounds)

    u = pack(u1, u2)
    traj = solve_state(params, pot, hspec, u, init)
    cost = _tracking_cost(params, targets, traj) + _control_cost(params, mode, u)
    bundle = _gradient_bundle(params, pot, hspec, targets, u, init, traj=traj)

    costs, vis, etas = [cost], [], []
    eta = eta0
    converged = False
    n_iters = 0
    for it in range(opts.max_iters):
        vi = _vi_residual_from(params, mode, bounds, u, bundle.d1, bundle.d2)
        vis.append(vi)
        if vi <= opts.tol_vi:
            converged = True
            break
        # backtracking on the full nonsmooth cost
        while True:
            v1 = SpaceTimeField(tg, grid, u.u1.values - eta * bundle.g1)
            v2 = SpaceTimeField(tg, grid, u.u2.values - eta * bundle.g2)
            p1, p2 = prox_pair(mode, v1, v2, eta, kappa, bounds)
            u_trial = ControlPair(p1, p2, bounds)
            traj_trial = solve_state(params, pot, hspec, u_trial, init)
            cost_trial = (_tracking_cost(params, targets, traj_trial)
                          + _control_cost(params, mode, u_trial))
            dist2 = (_q_norm(u, p1.values - u.u1.values,
                             p2.values - u.u2.values)) ** 2
            # the epsilon pad keeps the test meaningful when the decrease
            # reaches rounding level near a stationary point
            noise = 4.0 * np.finfo(float).eps * (1.0 + abs(cost))
            if cost_trial <= cost - (opts.decrease / eta) * dist2 + noise:
                break
            eta *= opts.backtrack
            if eta < opts.eta_min:
                raise StepsizeCollapse(
                    f"step size {eta:.3e} below floor at iteration {it}")
        stalled = (opts.tol_cost > 0.0
                   and cost - cost_trial <= opts.tol_cost * (1.0 + abs(cost)))
        u, cost = u_trial, cost_trial
        bundle = _gradient_bundle(params, pot, hspec, targets, u, init,
                                  traj=traj_trial)
        costs.append(cost)
        etas.append(eta)
        n_iters = it + 1
        eta = min(eta / opts.backtrack, eta0)
        if stalled:
            break
    else:
        vi = _vi_residual_from(params, mode, bounds, u, bundle.d1, bundle.d2)
        vis.append(vi)
        converged = vi <= opts.tol_vi
    if len(vis) == n_iters:  # stalled exit: record the final residual
        vis.append(_vi_residual_from(params, mode, bounds, u,
                                     bundle.d1, bundle.d2))

    lam = select_subgradient(mode, u, (bundle.d1, bundle.d2), kappa, params.nu)
    sup1, sup2 = _support_pattern(mode, u)
    return OptimizeResult(
        control=u, trajectory=bundle.trajectory, adjoint=bundle.adjoint,
        subgradient=lam,
        d1=SpaceTimeField(tg, grid, bundle.d1),
        d2=SpaceTimeField(tg, grid, bundle.d2),
        cost_history=np.asarray(costs), vi_history=np.asarray(vis),
        eta_history=np.asarray(etas), support1=sup1, support2=sup2,
        n_iters=n_iters, converged=converged)


def zero_control_threshold(params: ModelParams, pot: PotentialSpec,
                           hspec: InterpolantSpec, targets: Targets,
                           mode: SparsityMode,
                           init: StateTriple) -> ThresholdReport:
    """Mode-norm suprema of d at the zero control.

    The returned kappa0 estimate is the smallest sparsity weight for which
    u = 0 satisfies the variational inequality: for kappa above it the
    optimizer returns the zero control.
    """
    if mode is SparsityMode.NONE:
        raise ValueError("threshold needs a sparsity mode other than 'none'")
    grid = init.grid
    tg = targets.phi_q.timegrid
    u = ControlPair.zeros(tg, grid)
    b = _gradient_bundle(params, pot, hspec, targets, u, init)
    d1 = SpaceTimeField(tg, grid, b.d1)
    d2 = SpaceTimeField(tg, grid, b.d2)
    n1 = mode_norms(mode, d1)
    n2 = mode_norms(mode, d2)
    return ThresholdReport(mode, float(np.max(n1)) if n1.size else 0.0,
                           float(np.max(n2)) if n2.size else 0.0, n1, n2)


def kappa_sweep(params: ModelParams, pot: PotentialSpec,
                hspec: InterpolantSpec, targets: Targets, mode: SparsityMode,
                bounds: BoxBounds, u0: ControlPair, opts: OptimizeOptions,
                kappas, init: StateTriple) -> list:
    """Optimize for each kappa (ascending) and record support statistics.

    kappa = 0 runs the unregularized box-constrained problem (g disabled).
    Support monotonicity in kappa is reported, never asserted.
    """
    import dataclasses

    ks = [float(k) for k in kappas]
    if any(b < a for a, b in zip(ks, ks[1:])):
        raise ValueError("kappa list must be ascending")
    rows = []
    for k in ks:
        if k == 0.0:
            pr, md = params, SparsityMode.NONE
        else:
            pr, md = dataclasses.replace(params, kappa=k), mode
        res = proximal_gradient_solve(pr, pot, hspec, targets, md, bounds,
                                      u0, opts, init)
        s1, s2 = support_measure(md if k > 0.0 else mode, res.control)
        rows.append({
            "kappa": k,
            "cost": res.cost,
            "vi_residual": res.vi_residual,
            "support1": s1,
            "support2": s2,
            "control_norm": _q_norm(res.control, res.control.u1.values,
                                    res.control.u2.values),
            "iterations": res.n_iters,
        })
    return rows
