"""Model data: parameters, double-well potentials, interpolation function h.

The continuous model couples a chemical potential mu, a tumor fraction phi
and a nutrient concentration sigma.  Everything the PDE solvers need to know
about the physics lives here: coefficient signs, the convex/nonconvex split
of the double-well potential, and the smooth interpolant h that switches
source terms off in healthy tissue (phi = -1) and on in tumor tissue
(phi = +1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class SingularDomain(ValueError):
    """Potential evaluated outside its admissible interval."""


@dataclass(frozen=True)
class ModelParams:
    """Physical and cost coefficients of the three-field system.

    alpha, beta   relaxation coefficients of the mu- and phi-equations
    chi           chemotaxis coupling
    p_rate        proliferation rate P
    a_rate        apoptosis rate A
    b_rate        nutrient supply rate B
    e_rate        nutrient consumption rate E
    sigma_s       nutrient level of the pre-existing vasculature
    nu            quadratic control weight
    kappa         sparsity weight
    beta1, beta2  tracking weights (distributed / terminal)
    """

    alpha: float
    beta: float
    chi: float
    p_rate: float
    a_rate: float
    b_rate: float
    e_rate: float
    sigma_s: float
    nu: float
    kappa: float
    beta1: float
    beta2: float

    def __post_init__(self):
        for name in ("alpha", "beta", "nu", "kappa"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0.0):
                raise ValueError(f"{name} must be strictly positive, got {v!r}")
        for name in ("chi", "p_rate", "a_rate", "b_rate", "e_rate",
                     "sigma_s", "beta1", "beta2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be nonnegative, got {v!r}")


ScalarFunc = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PotentialSpec:
    """Double-well potential F = F1 + F2 with a convex F1.

    ``f1`` holds (F1, F1', F1'', F1''') and ``f2`` the same for F2.  For
    singular variants the admissible interval is (r_minus, r_plus); array
    evaluation clamps arguments to (r_minus + clamp_margin, r_plus -
    clamp_margin) and reports how many entries were clamped, so callers can
    decide whether a clamp event is fatal (it is, for the state solver).
    """

    name: str
    r_minus: float
    r_plus: float
    f1: tuple[ScalarFunc, ScalarFunc, ScalarFunc, ScalarFunc]
    f2: tuple[ScalarFunc, ScalarFunc, ScalarFunc, ScalarFunc]
    clamp_margin: float = 1e-12

    @property
    def is_singular(self) -> bool:
        return math.isfinite(self.r_minus) or math.isfinite(self.r_plus)

    def admissible(self, r: float, margin: float | None = None) -> bool:
        m = self.clamp_margin if margin is None else margin
        lo = self.r_minus + m if math.isfinite(self.r_minus) else -math.inf
        hi = self.r_plus - m if math.isfinite(self.r_plus) else math.inf
        return lo < r < hi

    def _clamp(self, r: np.ndarray) -> tuple[np.ndarray, int]:
        if not self.is_singular:
            return r, 0
        lo = self.r_minus + self.clamp_margin
        hi = self.r_plus - self.clamp_margin
        clamped = np.clip(r, lo, hi)
        return clamped, int(np.count_nonzero(clamped != r))

    def split_eval(self, r: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray, int]:
        """(F1^(order), F2^(order)) at clamped r, plus the clamp count."""
        rc, n_clamped = self._clamp(np.asarray(r, dtype=float))
        return self.f1[order](rc), self.f2[order](rc), n_clamped


def eval_potential(pot: PotentialSpec, r: float, margin: float = 1e-12):
    """Evaluate F, F', F'', F''' at a single admissible point.

    Raises SingularDomain if r is not strictly inside
    (r_minus + margin, r_plus - margin) for a singular variant.
    """
    if pot.is_singular and not pot.admissible(r, margin):
        raise SingularDomain(
            f"r={r!r} outside admissible interval "
            f"({pot.r_minus}, {pot.r_plus}) of potential '{pot.name}'")
    ra = np.asarray(float(r))
    out = tuple(float(pot.f1[k](ra) + pot.f2[k](ra)) for k in range(4))
    return out


def regular_potential() -> PotentialSpec:
    """Quartic double well F(r) = (1 - r^2)^2 / 4 on the whole real line.

    Split so that F1 is convex with F1(0) = 0:
    F1 = r^4/4 + r^2/2 and F2 = 1/4 - r^2.
    """
    f1 = (lambda r: 0.25 * r**4 + 0.5 * r**2,
          lambda r: r**3 + r,
          lambda r: 3.0 * r**2 + 1.0,
          lambda r: 6.0 * r)
    f2 = (lambda r: 0.25 - r**2,
          lambda r: -2.0 * r,
          lambda r: -2.0 * np.ones_like(r),
          lambda r: np.zeros_like(r))
    return PotentialSpec("regular", -math.inf, math.inf, f1, f2)


def logarithmic_potential(k: float = 2.0) -> PotentialSpec:
    """Logarithmic double well on (-1, 1).

    F1(r) = (1+r)ln(1+r) + (1-r)ln(1-r) is the convex singular part and
    F2(r) = -k r^2 the smooth concave part; k > 1 makes F nonconvex.
    """
    if not k > 1.0:
        raise ValueError(f"logarithmic potential requires k > 1, got {k!r}")
    f1 = (lambda r: (1.0 + r) * np.log1p(r) + (1.0 - r) * np.log1p(-r),
          lambda r: np.log1p(r) - np.log1p(-r),
          lambda r: 2.0 / (1.0 - r**2),
          lambda r: 4.0 * r / (1.0 - r**2) ** 2)
    f2 = (lambda r, k=k: -k * r**2,
          lambda r, k=k: -2.0 * k * r,
          lambda r, k=k: -2.0 * k * np.ones_like(r),
          lambda r: np.zeros_like(r))
    return PotentialSpec(f"logarithmic(k={k:g})", -1.0, 1.0, f1, f2)


def custom_split_potential(name, r_minus, r_plus, f1, f2) -> PotentialSpec:
    """Wrap user-supplied (F1, F2) derivative tuples as a PotentialSpec."""
    return PotentialSpec(name, float(r_minus), float(r_plus),
                         tuple(f1), tuple(f2))


@dataclass(frozen=True)
class InterpolantSpec:
    """Interpolation function h with h(-1) = 0, h(1) = 1 and bounded h'."""

    name: str
    h: ScalarFunc
    hd: ScalarFunc
    hdd: ScalarFunc


def eval_h(hspec: InterpolantSpec, r) -> tuple:
    """Values of h, h', h'' at r (scalar or array)."""
    ra = np.asarray(r, dtype=float)
    out = (hspec.h(ra), hspec.hd(ra), hspec.hdd(ra))
    if np.isscalar(r) or np.ndim(r) == 0:
        return tuple(float(v) for v in out)
    return out


def smoothstep7() -> InterpolantSpec:
    """Default interpolant: 7th-order smoothstep in y = (r+1)/2.

    h = 35 y^4 - 84 y^5 + 70 y^6 - 20 y^7 on [-1, 1], constant outside.
    The first three derivatives vanish at both endpoints, so the constant
    extension is C^3 and h' is globally bounded.
    """
    def _y(r):
        return np.clip(0.5 * (np.asarray(r, dtype=float) + 1.0), 0.0, 1.0)

    def h(r):
        y = _y(r)
        return y**4 * (35.0 + y * (-84.0 + y * (70.0 - 20.0 * y)))

    def hd(r):
        y = _y(r)
        return 0.5 * 140.0 * y**3 * (1.0 - y) ** 3

    def hdd(r):
        y = _y(r)
        return 0.25 * 420.0 * y**2 * (1.0 - y) ** 2 * (1.0 - 2.0 * y)

    return InterpolantSpec("smoothstep7", h, hd, hdd)


@dataclass(frozen=True)
class BoxBounds:
    """Per-control box bounds; scalars or per-(step, cell) arrays."""

    lo1: float | np.ndarray
    hi1: float | np.ndarray
    lo2: float | np.ndarray
    hi2: float | np.ndarray

    def __post_init__(self):
        for lo, hi, i in ((self.lo1, self.hi1, 1), (self.lo2, self.hi2, 2)):
            if np.any(np.asarray(lo) > np.asarray(hi)):
                raise ValueError(f"bounds for control {i} violate lo <= hi")

    def pair(self, i: int):
        return (self.lo1, self.hi1) if i == 1 else (self.lo2, self.hi2)

    def is_signed(self) -> bool:
        """True iff both boxes are scalar with lo < 0 < hi (certificate hypothesis)."""
        for lo, hi in ((self.lo1, self.hi1), (self.lo2, self.hi2)):
            if np.ndim(lo) != 0 or np.ndim(hi) != 0:
                return False
            if not (float(lo) < 0.0 < float(hi)):
                return False
        return True


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validate_setup: a list of (code, message) violations."""

    violations: tuple = ()

    @property
    def passed(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.passed:
            return "setup valid"
        return "; ".join(f"{c}: {m}" for c, m in self.violations)


def validate_setup(params: ModelParams, pot: PotentialSpec, init,
                   hspec: InterpolantSpec | None = None,
                   n_samples: int = 257) -> ValidationReport:
    """Check the model assumptions on a concrete setup.

    Verifies parameter signs, strict interior separation of the initial
    phase field, convexity of the sampled F1, and the interpolant axioms.
    Returns a report instead of raising, so callers can surface every
    violated assumption at once.
    """
    bad = []

    def check(cond, code, msg):
        if not cond:
            bad.append((code, msg))

    for name in ("alpha", "beta", "nu", "kappa"):
        check(getattr(params, name) > 0.0, f"{name} positive",
              f"{name} = {getattr(params, name)!r} must be > 0")
    for name in ("chi", "p_rate", "a_rate", "b_rate", "e_rate",
                 "sigma_s", "beta1", "beta2"):
        check(getattr(params, name) >= 0.0, f"{name} nonnegative",
              f"{name} = {getattr(params, name)!r} must be >= 0")

    grids = {id(f.grid) for f in (init.mu, init.phi, init.sigma)}
    if len(grids) > 1:
        eq = (init.mu.grid == init.phi.grid == init.sigma.grid)
        check(eq, "shared grid", "initial fields must share one grid")

    phi0 = init.phi.values
    lo, hi = float(np.min(phi0)), float(np.max(phi0))
    check(pot.r_minus < lo and hi < pot.r_plus, "initial separation",
          f"phi0 range [{lo:g}, {hi:g}] not strictly inside "
          f"({pot.r_minus:g}, {pot.r_plus:g})")

    # sampled potential axioms on the interior of the admissible interval
    a = pot.r_minus if math.isfinite(pot.r_minus) else -3.0
    b = pot.r_plus if math.isfinite(pot.r_plus) else 3.0
    span = b - a
    rs = np.linspace(a + 1e-6 * span, b - 1e-6 * span, n_samples)
    f1dd, _, _ = pot.split_eval(rs, 2)
    check(np.all(f1dd >= -1e-12), "F1 convex",
          "sampled F1'' has negative values")
    f1_0, f2_0, _ = pot.split_eval(np.asarray(0.0), 0)
    check(abs(float(f1_0)) <= 1e-12, "F1(0) zero", f"F1(0) = {float(f1_0)!r}")
    check(math.isfinite(float(f1_0 + f2_0)), "F(0) finite", "F(0) not finite")

    if hspec is not None:
        hs, hds, _ = eval_h(hspec, rs[(rs >= -1.0) & (rs <= 1.0)])
        check(np.all((hs >= -1e-12) & (hs <= 1.0 + 1e-12)), "h range",
              "h must take values in [0, 1]")
        inner = np.linspace(-1.0 + 1e-6, 1.0 - 1e-6, n_samples)
        hv = eval_h(hspec, inner)[0]
        check(np.all(hv > 0.0), "h positive", "h must be positive on (-1, 1)")
        check(np.all(np.isfinite(hds)), "h' bounded", "h' must be finite")

    return ValidationReport(tuple(bad))
