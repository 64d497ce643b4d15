"""The six benchmark problems: definitions, exact solutions, assembly recipes.

Each problem owns its domain, its exact solution (used only for error
measurement), and an ``assemble`` closure producing one scheme per cloud node.
Problems built on Hessian-eigenvalue operators take per-node candidate frames
from the multilevel policy; the others fix their direction sets up front.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import frames as fr
from . import grid, operators as ops


@dataclass
class Problem:
    name: str
    domain: grid.SignedDistanceDomain
    assemble: Callable  # (cloud, frames) -> list[NodeScheme]
    exact: Callable[[np.ndarray], np.ndarray]
    eigenvalue: bool = False
    uses_frames: bool = False
    exact_c: float | None = None

    def pin_node(self, cloud) -> int:
        """Interior node nearest the domain center (deterministic tie-break)."""
        lo, side = cloud.domain.bounding_cube
        center = lo + 0.5 * side
        return int(np.argmin(np.linalg.norm(cloud.interior - center, axis=1)))

    def build_cloud(self, n: int):
        return grid.assemble_point_cloud(self.domain, n)


def stencil_width_cap(cloud) -> int:
    """Largest integer stencil width inside the search radius: floor(eps/h)."""
    return int(math.floor(cloud.params.epsilon / cloud.params.h + 1e-12))


def _r2(p: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(p)
    return np.einsum("ni,ni->n", p, p)


# --- linear degenerate equation ------------------------------------------------

_WAVE = np.array([1.0, -math.sqrt(2.0), -math.sqrt(3.0)])
# direction orthogonal to the boundary-data wave vector, so the data extend
# to a solution constant along the characteristic lines
_NU_DEGENERATE = np.array([1.0, -1.0, (math.sqrt(3.0) + math.sqrt(6.0)) / 3.0])


def _linear_degenerate() -> Problem:
    domain = grid.ball(1.0)

    def exact(p):
        p = np.atleast_2d(p)
        return np.sin(2.0 * math.pi * (p @ _WAVE))

    def assemble(cloud, frames=None):
        interior = ops.assemble_directional_max(cloud, [_NU_DEGENERATE])
        boundary = ops.assemble_dirichlet(cloud, lambda q: exact(q)[0])
        return interior + boundary

    return Problem(
        name="linear-degenerate", domain=domain, assemble=assemble, exact=exact
    )


# --- maximum of two linear operators --------------------------------------------

_NU1_TWO_OP = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)
_NU2_TWO_OP = np.array([-1.0, 0.0, 1.0]) / math.sqrt(2.0)


def _two_operator() -> Problem:
    domain = grid.ball(1.0)

    def exact(p):
        return np.exp(0.5 * _r2(p))

    def source(q):
        x, y, z = q
        e = math.exp(0.5 * (x * x + y * y + z * z))
        a = -0.5 * e * (2.0 + x * x + 2.0 * x * y + y * y)
        b = -0.5 * e * (2.0 + x * x - 2.0 * x * z + z * z)
        return max(a, b)

    def assemble(cloud, frames=None):
        interior = ops.assemble_directional_max(
            cloud, [_NU1_TWO_OP, _NU2_TWO_OP], source=source
        )
        boundary = ops.assemble_dirichlet(cloud, lambda q: exact(np.atleast_2d(q))[0])
        return interior + boundary

    return Problem(name="two-operator", domain=domain, assemble=assemble, exact=exact)


# --- convex envelope of an obstacle ---------------------------------------------


def _convex_envelope() -> Problem:
    domain = grid.ball(0.5)

    def exact(p):
        return 0.4 * np.sqrt(_r2(p))

    def obstacle(q):
        return min(2.0 * math.sqrt(float(q @ q)), 0.2)

    def assemble(cloud, frames=None):
        k = stencil_width_cap(cloud)
        dirs = fr.enumerate_directions(k).directions
        interior = ops.assemble_directional_max(cloud, list(dirs), obstacle=obstacle)
        boundary = ops.assemble_dirichlet(cloud, lambda q: 0.2)
        return interior + boundary

    return Problem(
        name="convex-envelope", domain=domain, assemble=assemble, exact=exact
    )


# --- determinant equation (convex solutions) -------------------------------------


def _monge_ampere() -> Problem:
    domain = grid.ball(0.5)

    def exact(p):
        return np.exp(0.5 * _r2(p))

    def source(q):
        r2 = float(q @ q)
        return math.exp(1.5 * r2) * (1.0 + r2)

    spec = ops.EigenFunctionSpec(pair=ops.PHI_LOGMAX, addend=ops.PHI_MIN0, source=source)

    def assemble(cloud, frames):
        interior = ops.assemble_eigen(cloud, spec, frames)
        boundary = ops.assemble_dirichlet(cloud, lambda q: math.exp(0.5 * float(q @ q)))
        return interior + boundary

    return Problem(
        name="monge-ampere",
        domain=domain,
        assemble=assemble,
        exact=exact,
        uses_frames=True,
    )


# --- trace equation with flux boundary data and unknown scale --------------------


def _poisson_neumann() -> Problem:
    domain = grid.ball(1.0)

    def exact(p):
        return np.exp(0.5 * _r2(p))

    def fval(q):
        r2 = float(q @ q)
        return (3.0 + r2) * math.exp(0.5 * r2)

    spec = ops.EigenFunctionSpec(pair=ops.PHI_LINEAR)

    def assemble(cloud, frames):
        interior = ops.assemble_eigen(
            cloud, spec, frames, scale=lambda q: 1.0 / fval(q), c_coeff=1.0
        )
        boundary = ops.assemble_neumann(cloud, lambda q: math.exp(0.5))
        return interior + boundary

    return Problem(
        name="poisson-neumann-eig",
        domain=domain,
        assemble=assemble,
        exact=exact,
        eigenvalue=True,
        uses_frames=True,
        exact_c=1.0,
    )


# --- minimal Lagrangian graphs (transport boundary condition) ---------------------

_TARGET_CENTER = (2.0, 1.0, -1.0)


def _minimal_lagrangian() -> Problem:
    domain = grid.ball(1.0)
    target = ops.ball_target_support(_TARGET_CENTER, 1.0)

    def exact(p):
        p = np.atleast_2d(p)
        shift = p + np.array([2.0, 1.0, -1.0])
        return 0.5 * np.einsum("ni,ni->n", shift, shift)

    spec = ops.EigenFunctionSpec(pair=ops.PHI_ATAN)

    def assemble(cloud, frames):
        interior = ops.assemble_eigen(cloud, spec, frames, c_coeff=1.0)
        k = stencil_width_cap(cloud)
        dirs = fr.enumerate_directions(k)
        boundary = ops.assemble_ot_boundary(cloud, target, dirs)
        return interior + boundary

    return Problem(
        name="minimal-lagrangian",
        domain=domain,
        assemble=assemble,
        exact=exact,
        eigenvalue=True,
        uses_frames=True,
        exact_c=3.0 * math.atan(1.0),
    )


_FACTORIES = {
    "linear-degenerate": _linear_degenerate,
    "two-operator": _two_operator,
    "convex-envelope": _convex_envelope,
    "monge-ampere": _monge_ampere,
    "poisson-neumann-eig": _poisson_neumann,
    "minimal-lagrangian": _minimal_lagrangian,
}

PROBLEM_NAMES = tuple(_FACTORIES)


def problem(name: str) -> Problem:
    """Look up a benchmark problem by its registry name."""
    if name not in _FACTORIES:
        known = ", ".join(PROBLEM_NAMES)
        raise ops.ConfigurationError(f"unknown problem {name!r}; known: {known}")
    return _FACTORIES[name]()
