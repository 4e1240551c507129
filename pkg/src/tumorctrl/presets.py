"""Problem bundles, field recipes and the named experiment presets.

A Problem collects everything one experiment needs (parameters, potential,
interpolant, grids, initial data, targets, bounds, sparsity mode, starting
control) and remembers the flat settings it was built from, so verification
studies can rebuild the same problem at refined resolutions.

Field recipes are small textual descriptions evaluated on a grid:

  constant V            uniform value
  cosine OFF AMP        OFF + AMP * prod_i cos(pi x_i / L_i)
  bump OFF AMP          OFF + AMP * prod_i sin(pi x_i / L_i)
  pulse OFF AMP T0 T1   bump profile active only for T0 <= t <= T1
  random AMP            uniform(-AMP, AMP), drawn from the problem seed
  values v1 v2 ...      inline cell values (space-only)

Node fields sample recipes at node times, interval fields at interval
midpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .fields import (Field, GridSpec, SpaceTimeField, StateTriple, TimeGrid)
from .model import (BoxBounds, InterpolantSpec, ModelParams, PotentialSpec,
                    logarithmic_potential, regular_potential, smoothstep7)
from .optim import OptimizeOptions
from .solver import ControlPair, Targets
from .sparsity import SparsityMode


def _spatial_profile(kind: str, grid: GridSpec) -> np.ndarray:
    coords = grid.cell_centers()
    prof = np.ones(grid.n_cells)
    fn = np.cos if kind == "cosine" else np.sin
    for x, L in zip(coords, grid.length):
        prof = prof * fn(np.pi * x / L)
    return prof


def eval_space_recipe(recipe: str, grid: GridSpec,
                      rng: np.random.Generator) -> np.ndarray:
    """Evaluate a space-only recipe to one value per cell."""
    parts = recipe.split()
    kind = parts[0]
    if kind == "constant":
        return np.full(grid.n_cells, float(parts[1]))
    if kind in ("cosine", "bump"):
        off, amp = float(parts[1]), float(parts[2])
        return off + amp * _spatial_profile(kind, grid)
    if kind == "random":
        return float(parts[1]) * rng.uniform(-1.0, 1.0, grid.n_cells)
    if kind == "values":
        vals = np.array([float(v) for v in parts[1:]])
        if vals.size != grid.n_cells:
            raise ValueError(
                f"inline recipe has {vals.size} values, grid has "
                f"{grid.n_cells} cells")
        return vals
    raise ValueError(f"unknown spatial recipe {recipe!r}")


def eval_spacetime_recipe(recipe: str, grid: GridSpec, timegrid: TimeGrid,
                          on_nodes: bool,
                          rng: np.random.Generator) -> SpaceTimeField:
    """Evaluate a recipe to a node or interval space-time field."""
    times = timegrid.node_times() if on_nodes else timegrid.slice_times()
    parts = recipe.split()
    kind = parts[0]
    if kind == "pulse":
        off, amp, t0, t1 = (float(v) for v in parts[1:5])
        prof = _spatial_profile("bump", grid)
        gate = ((times >= t0) & (times <= t1)).astype(float)
        vals = off + amp * gate[:, None] * prof[None, :]
    elif kind == "random":
        vals = float(parts[1]) * rng.uniform(-1.0, 1.0,
                                             (times.size, grid.n_cells))
    else:
        row = eval_space_recipe(recipe, grid, rng)
        vals = np.tile(row, (times.size, 1))
    return SpaceTimeField(timegrid, grid, vals)


_POTENTIALS = {
    "regular": lambda s: regular_potential(),
    "logarithmic": lambda s: logarithmic_potential(float(s.get("log_k", 2.0))),
}

_INTERPOLANTS = {"smoothstep7": smoothstep7}


@dataclass(frozen=True)
class Problem:
    """One fully-specified experiment instance."""

    name: str
    params: ModelParams
    pot: PotentialSpec
    hspec: InterpolantSpec
    grid: GridSpec
    timegrid: TimeGrid
    init: StateTriple
    targets: Targets
    bounds: BoxBounds
    mode: SparsityMode
    u0: ControlPair
    opts: OptimizeOptions
    seed: int
    settings: MappingProxyType

    def with_resolution(self, space_scale: int = 1,
                        time_scale: int = 1) -> "Problem":
        """Rebuild the same problem with refined grids (recipes re-sampled)."""
        s = dict(self.settings)
        s["n"] = tuple(int(v) * int(space_scale) for v in s["n"])
        s["n_steps"] = int(s["n_steps"]) * int(time_scale)
        return make_problem(s)

    def solver_args(self):
        return (self.params, self.pot, self.hspec)


DEFAULT_SETTINGS = {
    "name": "custom",
    "alpha": 1.0, "beta": 1.0, "chi": 0.3,
    "p_rate": 0.5, "a_rate": 0.1, "b_rate": 0.5, "e_rate": 0.5,
    "sigma_s": 0.6, "nu": 0.1, "kappa": 0.02, "beta1": 1.0, "beta2": 0.0,
    "potential": "regular", "log_k": 2.0, "h": "smoothstep7",
    "dim": 1, "n": (32,), "length": (1.0,),
    "t_final": 0.25, "n_steps": 64,
    "init_mu": "constant 0", "init_phi": "constant 0",
    "init_sigma": "constant 0.5",
    "target_phi_q": "constant 0", "target_phi_omega": "constant 0",
    "lo1": -1.0, "hi1": 1.0, "lo2": -1.0, "hi2": 1.0,
    "mode": "none",
    "u0_1": "constant 0", "u0_2": "constant 0",
    "seed": 20260808,
    "max_iters": 400, "eta0": 0.0, "backtrack": 0.5, "decrease": 1e-4,
    "tol_vi": 1e-8, "tol_cost": 0.0,
}


def make_problem(settings: dict) -> Problem:
    """Build a Problem from flat settings (missing keys take defaults)."""
    s = dict(DEFAULT_SETTINGS)
    s.update(settings)
    unknown = set(s) - set(DEFAULT_SETTINGS)
    if unknown:
        raise ValueError(f"unknown settings: {sorted(unknown)}")

    params = ModelParams(
        alpha=float(s["alpha"]), beta=float(s["beta"]), chi=float(s["chi"]),
        p_rate=float(s["p_rate"]), a_rate=float(s["a_rate"]),
        b_rate=float(s["b_rate"]), e_rate=float(s["e_rate"]),
        sigma_s=float(s["sigma_s"]), nu=float(s["nu"]),
        kappa=float(s["kappa"]), beta1=float(s["beta1"]),
        beta2=float(s["beta2"]))
    if s["potential"] not in _POTENTIALS:
        raise ValueError(f"unknown potential {s['potential']!r}")
    pot = _POTENTIALS[s["potential"]](s)
    if s["h"] not in _INTERPOLANTS:
        raise ValueError(f"unknown interpolant {s['h']!r}")
    hspec = _INTERPOLANTS[s["h"]]()

    n = tuple(int(v) for v in (s["n"] if hasattr(s["n"], "__len__") else (s["n"],)))
    length = tuple(float(v) for v in (s["length"]
                                      if hasattr(s["length"], "__len__")
                                      else (s["length"],)))
    grid = GridSpec(int(s["dim"]), n, length)
    timegrid = TimeGrid(float(s["t_final"]), int(s["n_steps"]))

    rng = np.random.default_rng(int(s["seed"]))
    init = StateTriple(
        Field(grid, eval_space_recipe(s["init_mu"], grid, rng)),
        Field(grid, eval_space_recipe(s["init_phi"], grid, rng)),
        Field(grid, eval_space_recipe(s["init_sigma"], grid, rng)))
    targets = Targets(
        eval_spacetime_recipe(s["target_phi_q"], grid, timegrid, True, rng),
        Field(grid, eval_space_recipe(s["target_phi_omega"], grid, rng)))
    bounds = BoxBounds(float(s["lo1"]), float(s["hi1"]),
                       float(s["lo2"]), float(s["hi2"]))
    mode = SparsityMode.from_name(str(s["mode"]))
    u0 = ControlPair(
        eval_spacetime_recipe(s["u0_1"], grid, timegrid, False, rng),
        eval_spacetime_recipe(s["u0_2"], grid, timegrid, False, rng),
        bounds)
    opts = OptimizeOptions(
        max_iters=int(s["max_iters"]),
        eta0=None if float(s["eta0"]) <= 0.0 else float(s["eta0"]),
        backtrack=float(s["backtrack"]), decrease=float(s["decrease"]),
        tol_vi=float(s["tol_vi"]), tol_cost=float(s["tol_cost"]))

    return Problem(str(s["name"]), params, pot, hspec, grid, timegrid, init,
                   targets, bounds, mode, u0, opts, int(s["seed"]),
                   MappingProxyType(dict(s)))


PRESET_SETTINGS = {
    # exact stationary solution (0, 1, 0): every residual vanishes
    "stationary-trivial": {
        "name": "stationary-trivial",
        "alpha": 1.0, "beta": 1.0, "chi": 1.0, "p_rate": 1.0, "a_rate": 0.0,
        "b_rate": 1.0, "e_rate": 1.0, "sigma_s": 0.0, "nu": 0.1,
        "kappa": 0.01, "beta1": 1.0, "beta2": 1.0,
        "potential": "regular", "dim": 1, "n": (8,), "length": (1.0,),
        "t_final": 0.1, "n_steps": 8,
        "init_mu": "constant 0", "init_phi": "constant 1",
        "init_sigma": "constant 0",
        "target_phi_q": "constant 1", "target_phi_omega": "constant 1",
        "mode": "none",
    },
    # workhorse 1D instance with the singular potential
    "1D-logarithmic-default": {
        "name": "1D-logarithmic-default",
        "alpha": 1.0, "beta": 1.0, "chi": 0.3, "p_rate": 0.8, "a_rate": 0.2,
        "b_rate": 0.5, "e_rate": 0.6, "sigma_s": 0.6, "nu": 0.1,
        "kappa": 0.02, "beta1": 1.0, "beta2": 0.5,
        "potential": "logarithmic", "log_k": 2.0,
        "dim": 1, "n": (64,), "length": (1.0,),
        "t_final": 0.25, "n_steps": 128,
        "init_mu": "constant 0", "init_phi": "cosine 0.0 0.3",
        "init_sigma": "constant 0.5",
        "target_phi_q": "cosine -0.1 0.2", "target_phi_omega": "constant 0",
        "mode": "time",
        "u0_1": "cosine 0.05 0.15", "u0_2": "cosine -0.05 0.1",
    },
    # small 2D instance with the regular potential and full sparsity
    "2D-regular-default": {
        "name": "2D-regular-default",
        "alpha": 1.0, "beta": 1.0, "chi": 0.3, "p_rate": 0.6, "a_rate": 0.1,
        "b_rate": 0.5, "e_rate": 0.5, "sigma_s": 0.6, "nu": 0.1,
        "kappa": 0.02, "beta1": 1.0, "beta2": 0.5,
        "potential": "regular",
        "dim": 2, "n": (12, 12), "length": (1.0, 1.0),
        "t_final": 0.2, "n_steps": 32,
        "init_mu": "constant 0", "init_phi": "cosine 0.0 0.4",
        "init_sigma": "constant 0.5",
        "target_phi_q": "cosine -0.1 0.2", "target_phi_omega": "constant 0",
        "mode": "full",
        "u0_1": "cosine 0.05 0.1", "u0_2": "cosine -0.05 0.1",
    },
    # drives the control early, then lets sparsity switch it off
    "time-sparsity-demo": {
        "name": "time-sparsity-demo",
        "alpha": 1.0, "beta": 1.0, "chi": 0.2, "p_rate": 0.5, "a_rate": 0.1,
        "b_rate": 0.5, "e_rate": 0.4, "sigma_s": 0.5, "nu": 0.05,
        "kappa": 0.01, "beta1": 1.0, "beta2": 0.0,
        "potential": "regular",
        "dim": 1, "n": (16,), "length": (1.0,),
        "t_final": 0.5, "n_steps": 40,
        "init_mu": "constant 0", "init_phi": "constant 0",
        "init_sigma": "constant 0.5",
        "target_phi_q": "pulse 0.0 0.6 0.0 0.15",
        "target_phi_omega": "constant 0",
        "lo1": -2.0, "hi1": 2.0, "lo2": -2.0, "hi2": 2.0,
        "mode": "time", "kappa": 5e-4,
        "max_iters": 800, "tol_vi": 1e-9,
    },
    # aggressive cytotoxic drive squeezing phi toward the singular wall
    "stress-separation": {
        "name": "stress-separation",
        "alpha": 1.0, "beta": 1.0, "chi": 0.5, "p_rate": 10.0, "a_rate": 0.0,
        "b_rate": 2.0, "e_rate": 0.0, "sigma_s": 1.0, "nu": 0.1,
        "kappa": 0.02, "beta1": 1.0, "beta2": 0.0,
        "potential": "logarithmic", "log_k": 2.0,
        "dim": 1, "n": (32,), "length": (1.0,),
        "t_final": 0.6, "n_steps": 96,
        "init_mu": "constant 0", "init_phi": "constant 0",
        "init_sigma": "constant 1",
        "target_phi_q": "constant 0", "target_phi_omega": "constant 0",
        "lo1": -30.0, "hi1": 30.0, "lo2": -30.0, "hi2": 30.0,
        "mode": "time",
        "u0_1": "constant -16", "u0_2": "constant 0",
    },
}


def preset_names() -> tuple:
    return tuple(sorted(PRESET_SETTINGS))


def preset_settings(name: str) -> dict:
    if name not in PRESET_SETTINGS:
        raise KeyError(f"unknown preset {name!r}; known: {preset_names()}")
    return dict(PRESET_SETTINGS[name])


def preset_problem(name: str, **overrides) -> Problem:
    s = preset_settings(name)
    s.update(overrides)
    return make_problem(s)


def random_admissible_controls(problem: Problem, seed: int,
                               scale: float = 0.5) -> ControlPair:
    """A random control strictly inside the box, for optimizer starts."""
    rng = np.random.default_rng(seed)
    shape = (problem.timegrid.n_steps, problem.grid.n_cells)
    b = problem.bounds
    u1 = rng.uniform(scale * np.broadcast_to(b.lo1, shape),
                     scale * np.broadcast_to(b.hi1, shape))
    u2 = rng.uniform(scale * np.broadcast_to(b.lo2, shape),
                     scale * np.broadcast_to(b.hi2, shape))
    return ControlPair(SpaceTimeField(problem.timegrid, problem.grid, u1),
                       SpaceTimeField(problem.timegrid, problem.grid, u2),
                       problem.bounds)
