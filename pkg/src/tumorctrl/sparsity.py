"""Sparsity functionals, proximal operators, subgradients and certificates.

Three sparsity-promoting functionals are supported per control component:
the plain L1 norm over the space-time cylinder (full sparsity), the time
integral of spatial L2 norms (directional sparsity in time) and the space
integral of temporal L2 norms (directional sparsity in space).  All discrete
norms carry the volume / tau quadrature weights, so zero-slice thresholds
match their continuous counterparts: a prox slice vanishes exactly when the
weighted slice norm of the input is <= eta * kappa.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .fields import Field, SpaceTimeField, slice_norms
from .model import BoxBounds
from .solver import AdjointTriple, ControlPair, Trajectory, adjoint_mismatch_fields


class BadBounds(ValueError):
    """Box bounds unusable for the requested operation."""


class BisectionFailure(RuntimeError):
    """Group-prox scalar fixed point not bracketed to tolerance."""


class BoundsNotSignedError(ValueError):
    """Certificates require scalar bounds with lo < 0 < hi."""


class SparsityMode(enum.Enum):
    NONE = "none"
    FULL_Q = "full"
    TIME = "time"
    SPACE = "space"

    @classmethod
    def from_name(cls, name: str) -> "SparsityMode":
        for m in cls:
            if m.value == name:
                return m
        raise ValueError(f"unknown sparsity mode {name!r}")


@dataclass(frozen=True)
class SubgradientPair:
    """Selected subgradients (lambda1, lambda2) of g at a control pair."""

    lam1: SpaceTimeField
    lam2: SpaceTimeField


@dataclass(frozen=True)
class CertificateReport:
    """Where any locally optimal control must vanish.

    Per control component i, a slice (time step, cell, or point depending on
    the mode) is flagged exactly when the mode norm of d_i = (-psi1 h(phi),
    psi3)_i is <= kappa there.
    """

    mode: SparsityMode
    kappa: float
    d1: SpaceTimeField
    d2: SpaceTimeField
    norms1: np.ndarray
    norms2: np.ndarray
    flagged1: np.ndarray
    flagged2: np.ndarray
    coords: tuple


def eval_g(mode: SparsityMode, u: ControlPair) -> float:
    """Discrete sparsity functional g(u1) + g(u2) for the chosen mode."""
    if mode is SparsityMode.NONE:
        return 0.0
    tau = u.timegrid.tau
    vol = u.grid.cell_volume
    total = 0.0
    for comp in (u.u1, u.u2):
        if mode is SparsityMode.FULL_Q:
            total += tau * vol * float(np.sum(np.abs(comp.values)))
        elif mode is SparsityMode.TIME:
            total += tau * float(np.sum(slice_norms(comp, "time")))
        else:
            total += vol * float(np.sum(slice_norms(comp, "space")))
    return total


def project_box(s, lo, hi):
    """Componentwise clipping min(hi, max(lo, s))."""
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise BadBounds("lower bound exceeds upper bound")
    if isinstance(s, Field):
        return Field(s.grid, np.clip(s.values, lo, hi))
    if isinstance(s, SpaceTimeField):
        return SpaceTimeField(s.timegrid, s.grid, np.clip(s.values, lo, hi))
    if np.isscalar(s):
        return float(np.clip(s, lo, hi))
    return np.clip(np.asarray(s, dtype=float), lo, hi)


def _group_prox(v: np.ndarray, weight: float, eta_kappa: float, lo, hi,
                tol: float = 1e-12, maxiter: int = 200) -> np.ndarray:
    """Exact box-constrained group-soft-threshold of one slice.

    Solves argmin_u 1/2 ||u - v||_w^2 + eta_kappa ||u||_w + box indicator,
    with ||.||_w the weight-scaled Euclidean norm.  The minimizer is
    P_box(v * theta / (theta + eta_kappa)) where theta = ||u||_w solves a
    strictly decreasing scalar fixed-point equation, found by bisection.
    """
    nv = math.sqrt(weight * float(np.dot(v, v)))
    if nv <= eta_kappa:
        return np.zeros_like(v)

    def u_of(theta):
        return np.clip(v * (theta / (theta + eta_kappa)), lo, hi)

    def excess(theta):
        u = u_of(theta)
        return math.sqrt(weight * float(np.dot(u, u))) - theta

    a, b = 0.0, nv
    # invariant: excess(a) >= 0 >= excess(b); the positive root is unique
    for _ in range(maxiter):
        if b - a <= tol * max(1.0, nv):
            break
        mid = 0.5 * (a + b)
        if excess(mid) > 0.0:
            a = mid
        else:
            b = mid
    else:
        raise BisectionFailure(
            f"group prox bisection stalled: interval {b - a:.3e}")
    return u_of(0.5 * (a + b))


def prox(mode: SparsityMode, v: SpaceTimeField, eta: float, kappa: float,
         lo, hi) -> SpaceTimeField:
    """Proximal map of eta * (kappa g + box indicator) at v, one component.

    FULL_Q soft-thresholds pointwise by eta*kappa and clips.  TIME treats
    each time slice as one group (SPACE swaps the roles of t and x); the
    slice is exactly zero iff its weighted norm is <= eta*kappa, otherwise
    the box-constrained group shrinkage is solved to 1e-12 by bisection.
    """
    if not eta > 0.0:
        raise ValueError(f"eta must be positive, got {eta!r}")
    if kappa < 0.0:
        raise ValueError(f"kappa must be nonnegative, got {kappa!r}")
    vals = v.values
    if mode is SparsityMode.NONE or kappa == 0.0:
        return SpaceTimeField(v.timegrid, v.grid, np.clip(vals, lo, hi))
    if not (np.all(np.asarray(lo) < 0.0) and np.all(np.asarray(hi) > 0.0)):
        raise BadBounds("sparsity prox requires lo < 0 < hi")

    ek = eta * kappa
    if mode is SparsityMode.FULL_Q:
        shrunk = np.sign(vals) * np.maximum(np.abs(vals) - ek, 0.0)
        return SpaceTimeField(v.timegrid, v.grid, np.clip(shrunk, lo, hi))

    lo_a = np.broadcast_to(np.asarray(lo, dtype=float), vals.shape)
    hi_a = np.broadcast_to(np.asarray(hi, dtype=float), vals.shape)
    out = np.empty_like(vals)
    if mode is SparsityMode.TIME:
        w = v.grid.cell_volume
        for n in range(vals.shape[0]):
            out[n] = _group_prox(vals[n], w, ek, lo_a[n], hi_a[n])
    else:
        w = v.timegrid.tau
        for j in range(vals.shape[1]):
            out[:, j] = _group_prox(vals[:, j], w, ek, lo_a[:, j], hi_a[:, j])
    return SpaceTimeField(v.timegrid, v.grid, out)


def prox_pair(mode: SparsityMode, v1: SpaceTimeField, v2: SpaceTimeField,
              eta: float, kappa: float, bounds: BoxBounds) -> tuple:
    """Apply prox to both control components with their own bounds."""
    return (prox(mode, v1, eta, kappa, bounds.lo1, bounds.hi1),
            prox(mode, v2, eta, kappa, bounds.lo2, bounds.hi2))


def _select_component(mode: SparsityMode, u: np.ndarray, d: np.ndarray,
                      kappa: float, weight_time: float,
                      weight_space: float) -> np.ndarray:
    lam = np.zeros_like(u)
    if mode is SparsityMode.NONE or kappa == 0.0:
        return lam
    if mode is SparsityMode.FULL_Q:
        nz = u != 0.0
        lam[nz] = np.sign(u[nz])
        lam[~nz] = np.clip(-d[~nz] / kappa, -1.0, 1.0)
        return lam
    axis, w = ((1, weight_space) if mode is SparsityMode.TIME
               else (0, weight_time))
    norms = np.sqrt(w * np.sum(u ** 2, axis=axis, keepdims=True))
    nz = np.broadcast_to(norms > 0.0, u.shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(nz, u / norms, 0.0)
    # zero groups: project -d/kappa onto the weighted unit ball
    wball = -d / kappa
    bnorm = np.sqrt(w * np.sum(wball ** 2, axis=axis, keepdims=True))
    shrink = np.where(bnorm > 1.0, 1.0 / np.maximum(bnorm, 1e-300), 1.0)
    lam = np.where(nz, lam, wball * shrink)
    return lam


def select_subgradient(mode: SparsityMode, u: ControlPair, d: tuple,
                       kappa: float, nu: float = 1.0) -> SubgradientPair:
    """Pick the stationarity-relevant subgradient of g at u.

    On nonzero slices/points the subdifferential is a singleton (sign or
    normalized slice).  On the zero set we take the projection of -d/kappa
    onto the unit ball (interval for full sparsity), which minimizes the
    variational-inequality residual among admissible selections; nu is
    accepted for signature compatibility but the minimizer does not depend
    on it.
    """
    d1 = d[0].values if isinstance(d[0], SpaceTimeField) else np.asarray(d[0])
    d2 = d[1].values if isinstance(d[1], SpaceTimeField) else np.asarray(d[1])
    tau = u.timegrid.tau
    vol = u.grid.cell_volume
    lam1 = _select_component(mode, u.u1.values, d1, kappa, tau, vol)
    lam2 = _select_component(mode, u.u2.values, d2, kappa, tau, vol)
    return SubgradientPair(SpaceTimeField(u.timegrid, u.grid, lam1),
                           SpaceTimeField(u.timegrid, u.grid, lam2))


def prox_kkt_residual(mode: SparsityMode, u_prox: SpaceTimeField,
                      v: SpaceTimeField, eta: float, kappa: float,
                      lo, hi) -> float:
    """Max-norm residual of the fixed point u = P_box(v - eta*kappa*lambda).

    The lambda is selected from the prox problem itself (d = -v/eta), so a
    small residual certifies that prox returned the slice-wise minimizer.
    """
    dummy = ControlPair(u_prox, u_prox)
    if kappa > 0.0 and mode is not SparsityMode.NONE:
        lam = select_subgradient(mode, dummy, (-v.values / eta, -v.values / eta),
                                 kappa).lam1.values
    else:
        lam = np.zeros_like(u_prox.values)
    target = np.clip(v.values - eta * kappa * lam, lo, hi)
    return float(np.max(np.abs(u_prox.values - target)))


def mode_norms(mode: SparsityMode, d: SpaceTimeField) -> np.ndarray:
    if mode is SparsityMode.FULL_Q:
        return np.abs(d.values)
    if mode is SparsityMode.TIME:
        return slice_norms(d, "time")
    if mode is SparsityMode.SPACE:
        return slice_norms(d, "space")
    raise ValueError("certificates need a sparsity mode other than 'none'")


def certificate(mode: SparsityMode, adjoint: AdjointTriple, base: Trajectory,
                hspec, kappa: float, bounds: BoxBounds) -> CertificateReport:
    """Sparsity certificate at a candidate control's trajectory.

    Builds d = (-psi1 h(phi), psi3) on the control slices and flags, per
    component, every slice whose mode norm is <= kappa: there any locally
    optimal control must vanish.  The equivalence needs scalar bounds with
    lo < 0 < hi; with anything else the certificate is refused rather than
    silently wrong.
    """
    if not bounds.is_signed():
        raise BoundsNotSignedError(
            "certificate requires scalar bounds with lo < 0 < hi")
    d1a, d2a = adjoint_mismatch_fields(hspec, base, adjoint)
    tg, grid = base.timegrid, base.grid
    d1 = SpaceTimeField(tg, grid, d1a)
    d2 = SpaceTimeField(tg, grid, d2a)
    n1 = mode_norms(mode, d1)
    n2 = mode_norms(mode, d2)
    if mode is SparsityMode.TIME:
        coords = (tg.node_times()[:-1],)
    elif mode is SparsityMode.SPACE:
        coords = grid.cell_centers()
    else:
        coords = (tg.node_times()[:-1],) + grid.cell_centers()
    return CertificateReport(mode, float(kappa), d1, d2, n1, n2,
                             n1 <= kappa, n2 <= kappa, coords)


def certificate_to_csv(report: CertificateReport, path) -> None:
    """Rows: slice id, slice coordinate(s), |d| norms, flags, kappa."""
    mode = report.mode
    n1 = np.ravel(report.norms1)
    n2 = np.ravel(report.norms2)
    f1 = np.ravel(report.flagged1).astype(int)
    f2 = np.ravel(report.flagged2).astype(int)
    if mode is SparsityMode.TIME:
        coord_names, coord_cols = ["t"], [report.coords[0]]
    elif mode is SparsityMode.SPACE:
        coord_names = ["x", "y"][: len(report.coords)]
        coord_cols = list(report.coords)
    else:
        times = report.coords[0]
        cells = report.coords[1:]
        nslices, ncells = report.norms1.shape
        coord_names = ["t", "x", "y"][: 1 + len(cells)]
        coord_cols = [np.repeat(times, ncells)]
        coord_cols += [np.tile(c, nslices) for c in cells]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("slice," + ",".join(coord_names)
                 + ",norm_d1,norm_d2,flagged1,flagged2,kappa\n")
        for i in range(n1.size):
            cc = ",".join(repr(float(c[i])) for c in coord_cols)
            fh.write(f"{i},{cc},{float(n1[i])!r},{float(n2[i])!r},"
                     f"{f1[i]},{f2[i]},{report.kappa!r}\n")
