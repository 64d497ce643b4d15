"""Point cloud construction from a signed-distance domain description.

The cloud is a Cartesian lattice restricted to points at least ``delta`` inside
the domain, plus boundary points obtained by sub-discretizing every lattice
cube that crosses the boundary at the finer pitch ``h_B`` and projecting the
near-boundary candidates onto the true boundary.  The over-resolved boundary
(h_B < delta) is what keeps directional stencils both consistent and monotone
for points near the boundary.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree


class DomainError(Exception):
    """Raised when a domain cannot support the requested discretization."""


class ProjectionError(Exception):
    """Raised when a boundary candidate fails to project onto the boundary."""


@dataclass(frozen=True)
class SignedDistanceDomain:
    """Domain described by a signed distance function (negative inside).

    ``distance``, ``project`` and ``outward_normal`` are vectorized over an
    (N, 3) array of points.  ``bounding_cube`` is (lower corner, side length)
    of an axis-aligned cube containing the domain.
    """

    name: str
    distance: Callable[[np.ndarray], np.ndarray]
    project: Callable[[np.ndarray], np.ndarray]
    outward_normal: Callable[[np.ndarray], np.ndarray]
    bounding_cube: tuple[np.ndarray, float]

    @property
    def side(self) -> float:
        return self.bounding_cube[1]

    @property
    def diameter(self) -> float:
        return self.side * np.sqrt(3.0)


@dataclass(frozen=True)
class GridParams:
    """Resolution parameters tied to the lattice count n.

    With the bounding cube rescaled to unit side: h = 1/n, n_B ~ n^(1/4) with a
    floor of 2, h_B = h/n_B, delta = h/2 and epsilon = sqrt(h); all lengths are
    then mapped back to physical units.  This keeps h_B < delta < epsilon at
    every resolution.
    """

    n: int
    h: float
    n_B: int
    h_B: float
    delta: float
    epsilon: float

    @classmethod
    def from_n(cls, domain: SignedDistanceDomain, n: int) -> "GridParams":
        if n < 4:
            raise DomainError(f"lattice count n={n} too small (need n >= 4)")
        side = domain.side
        h = side / n
        n_B = max(2, round(n ** 0.25))
        h_B = h / n_B
        delta = h / 2.0
        epsilon = side * np.sqrt(1.0 / n)
        return cls(n=n, h=h, n_B=n_B, h_B=h_B, delta=delta, epsilon=epsilon)


def _lattice_coords(domain: SignedDistanceDomain, n: int) -> np.ndarray:
    lo, side = domain.bounding_cube
    return lo[None, :] + np.arange(n + 1)[:, None] * (side / n)


def build_interior(domain: SignedDistanceDomain, n: int):
    """Lattice nodes of the bounding cube with distance(x) + delta < 0.

    Returns ``(ijk, points)`` where ``ijk`` are integer lattice indices.
    """
    params = GridParams.from_n(domain, n)
    lo, side = domain.bounding_cube
    axes = np.arange(n + 1) * params.h
    gx, gy, gz = np.meshgrid(axes, axes, axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) + lo[None, :]
    dist = np.asarray(domain.distance(pts))
    keep = dist + params.delta < 0.0
    if not np.any(keep):
        raise DomainError(
            f"domain {domain.name!r} has no interior lattice points at n={n} "
            f"(delta={params.delta:g})"
        )
    idx = np.argwhere(keep.reshape(n + 1, n + 1, n + 1))
    return idx.astype(np.int64), pts[keep]


def find_boundary_cubes(domain: SignedDistanceDomain, n: int) -> np.ndarray:
    """Indices (i, j, k) of lattice cubes with corners of both distance signs."""
    lo, side = domain.bounding_cube
    h = side / n
    axes = np.arange(n + 1) * h
    gx, gy, gz = np.meshgrid(axes, axes, axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1) + lo[None, None, None, :]
    dist = np.asarray(domain.distance(pts.reshape(-1, 3))).reshape(n + 1, n + 1, n + 1)
    neg = dist < 0.0
    pos = dist > 0.0
    any_neg = np.zeros((n, n, n), dtype=bool)
    any_pos = np.zeros((n, n, n), dtype=bool)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                corner_neg = neg[di : n + di, dj : n + dj, dk : n + dk]
                corner_pos = pos[di : n + di, dj : n + dj, dk : n + dk]
                any_neg |= corner_neg
                any_pos |= corner_pos
    return np.argwhere(any_neg & any_pos).astype(np.int64)


def sample_boundary_points(
    domain: SignedDistanceDomain, cube: np.ndarray, params: GridParams
):
    """Project near-boundary sub-lattice points of one boundary cube.

    The cube is sub-discretized at pitch h_B; candidates with |distance| < h_B/2
    are projected onto the boundary.  Returns ``(points, normals)``.
    """
    lo, _ = domain.bounding_cube
    base = lo + np.asarray(cube, dtype=float) * params.h
    t = np.arange(params.n_B + 1) * params.h_B
    gx, gy, gz = np.meshgrid(t, t, t, indexing="ij")
    cand = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) + base[None, :]
    dist = np.asarray(domain.distance(cand))
    cand = cand[np.abs(dist) < params.h_B / 2.0]
    if len(cand) == 0:
        return np.empty((0, 3)), np.empty((0, 3))
    proj = np.asarray(domain.project(cand))
    resid = np.abs(np.asarray(domain.distance(proj)))
    bad = resid > 1e-10 * domain.diameter
    if np.any(bad):
        raise ProjectionError(
            f"projection failed for candidate {cand[np.argmax(resid)]} "
            f"(residual {resid.max():.3e})"
        )
    return proj, np.asarray(domain.outward_normal(proj))


def _dedup_greedy(points: np.ndarray, radius: float) -> np.ndarray:
    """Indices of points kept by a first-come sweep removing near-duplicates.

    A point is kept iff no previously kept point lies within ``radius``.
    Grid hashing keeps the sweep linear and the outcome order-deterministic.
    """
    if len(points) == 0:
        return np.empty(0, dtype=np.int64)
    cell = radius
    keys = np.floor(points / cell).astype(np.int64)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    kept = []
    r2 = radius * radius
    for i, (p, key) in enumerate(zip(points, map(tuple, keys))):
        ok = True
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    near = buckets.get((key[0] + di, key[1] + dj, key[2] + dk))
                    if not near:
                        continue
                    for j in near:
                        d = points[j] - p
                        if d @ d < r2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            kept.append(i)
            buckets.setdefault(key, []).append(i)
    return np.array(kept, dtype=np.int64)


@dataclass
class PointCloud:
    """Interior lattice points followed by projected boundary points.

    Node ids index ``points``; ids below ``n_interior`` are interior.  The
    lattice map recovers interior ids from integer indices, and the KD-tree
    answers fixed-radius neighbor queries for stencil construction.
    """

    domain: SignedDistanceDomain
    params: GridParams
    points: np.ndarray  # (N, 3)
    n_interior: int
    lattice_ijk: np.ndarray  # (n_interior, 3)
    normals: np.ndarray  # (N - n_interior, 3) outward unit normals
    boundary_cubes: np.ndarray  # (N - n_interior, 3) source cube of each point
    _lattice_map: dict = field(default_factory=dict, repr=False)
    _tree: cKDTree | None = field(default=None, repr=False)
    _stencil_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._lattice_map:
            self._lattice_map = {
                tuple(map(int, ijk)): i for i, ijk in enumerate(self.lattice_ijk)
            }
            if len(self._lattice_map) != self.n_interior:
                raise DomainError("duplicate interior lattice indices")
        if self._tree is None:
            self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_boundary(self) -> int:
        return len(self.points) - self.n_interior

    @property
    def interior(self) -> np.ndarray:
        return self.points[: self.n_interior]

    @property
    def boundary(self) -> np.ndarray:
        return self.points[self.n_interior :]

    def is_interior(self, node: int) -> bool:
        return node < self.n_interior

    def lattice_node(self, ijk) -> int | None:
        return self._lattice_map.get(tuple(int(v) for v in ijk))

    def neighbors_within(self, x: np.ndarray, r: float) -> np.ndarray:
        """Ids of all cloud points within distance r of x, ascending."""
        idx = self._tree.query_ball_point(np.asarray(x, dtype=float), r)
        return np.sort(np.asarray(idx, dtype=np.int64))

    def normal(self, node: int) -> np.ndarray:
        return self.normals[node - self.n_interior]


def assemble_point_cloud(domain: SignedDistanceDomain, n: int) -> PointCloud:
    """Build the full discretization: interior lattice + projected boundary.

    Boundary points closer than h_B/4 to an earlier one are merged so stencil
    systems never see coincident neighbors.
    """
    params = GridParams.from_n(domain, n)
    ijk, interior = build_interior(domain, n)
    cubes = find_boundary_cubes(domain, n)
    pts_list, nrm_list, src_list = [], [], []
    for cube in cubes:
        pts, nrm = sample_boundary_points(domain, cube, params)
        if len(pts):
            pts_list.append(pts)
            nrm_list.append(nrm)
            src_list.append(np.repeat(cube[None, :], len(pts), axis=0))
    if pts_list:
        bpts = np.concatenate(pts_list)
        bnrm = np.concatenate(nrm_list)
        bsrc = np.concatenate(src_list)
        keep = _dedup_greedy(bpts, params.h_B / 4.0)
        bpts, bnrm, bsrc = bpts[keep], bnrm[keep], bsrc[keep]
    else:
        bpts = np.empty((0, 3))
        bnrm = np.empty((0, 3))
        bsrc = np.empty((0, 3), dtype=np.int64)
    points = np.concatenate([interior, bpts])
    return PointCloud(
        domain=domain,
        params=params,
        points=points,
        n_interior=len(interior),
        lattice_ijk=ijk,
        normals=bnrm,
        boundary_cubes=bsrc,
    )


def dump_cloud(cloud: PointCloud, path) -> None:
    """Write the cloud as plain text: one `kind x y z [nx ny nz]` per line."""
    with open(path, "w") as fh:
        fh.write(f"# ellipt3d-cloud v1 n={cloud.params.n} nB={cloud.params.n_B}\n")
        for p in cloud.interior:
            fh.write(f"I {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for p, nv in zip(cloud.boundary, cloud.normals):
            fh.write(
                f"B {p[0]:.17g} {p[1]:.17g} {p[2]:.17g} "
                f"{nv[0]:.17g} {nv[1]:.17g} {nv[2]:.17g}\n"
            )


# --- concrete domains -------------------------------------------------------


def ball(radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> SignedDistanceDomain:
    c = np.asarray(center, dtype=float)

    def distance(x):
        return np.linalg.norm(np.atleast_2d(x) - c, axis=1) - radius

    def project(x):
        x = np.atleast_2d(x)
        d = x - c
        nrm = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(nrm == 0):
            raise ProjectionError("cannot project the center of a ball")
        return c + radius * d / nrm

    def outward_normal(x):
        x = np.atleast_2d(x)
        d = x - c
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    lo = c - radius
    return SignedDistanceDomain(
        name=f"ball({radius:g})",
        distance=distance,
        project=project,
        outward_normal=outward_normal,
        bounding_cube=(lo, 2.0 * radius),
    )


_CUBE_PAD = 2.0 / np.e  # irrational: domain faces never land on lattice planes


def cube(side: float = 1.0, center=(0.0, 0.0, 0.0), pad: float = _CUBE_PAD) -> SignedDistanceDomain:
    """Axis-aligned cube domain.

    The bounding cube is padded so boundary lattice cubes have corners of both
    distance signs; a rational pad could put the domain faces exactly on
    lattice planes for some n, where no sign change registers.
    """
    c = np.asarray(center, dtype=float)
    half = side / 2.0

    def distance(x):
        q = np.abs(np.atleast_2d(x) - c) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside

    def project(x):
        x = np.atleast_2d(x)
        q = x - c
        clamped = np.clip(q, -half, half)
        on_face = clamped.copy()
        # interior points snap their largest |component| out to the face
        inside = np.all(np.abs(q) < half, axis=1)
        if np.any(inside):
            qi = q[inside]
            ax = np.argmax(np.abs(qi), axis=1)
            snapped = qi.copy()
            rows = np.arange(len(qi))
            snapped[rows, ax] = np.where(qi[rows, ax] >= 0, half, -half)
            on_face[inside] = snapped
        return c + on_face

    def outward_normal(x):
        x = np.atleast_2d(x)
        q = x - c
        # face with the largest |component| wins; edges/corners blend
        n = np.where(np.abs(np.abs(q) - half) < 1e-12, np.sign(q), 0.0)
        deg = np.all(n == 0.0, axis=1)
        if np.any(deg):
            ax = np.argmax(np.abs(q[deg]), axis=1)
            fix = np.zeros((int(deg.sum()), 3))
            fix[np.arange(len(fix)), ax] = np.sign(q[deg][np.arange(len(fix)), ax])
            n[deg] = fix
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    bound = side * (1.0 + pad)
    lo = c - bound / 2.0
    return SignedDistanceDomain(
        name=f"cube({side:g})",
        distance=distance,
        project=project,
        outward_normal=outward_normal,
        bounding_cube=(lo, bound),
    )


def from_callable(
    name: str,
    distance: Callable[[np.ndarray], np.ndarray],
    bounding_cube: tuple,
    h_ref: float = 1e-3,
) -> SignedDistanceDomain:
    """Wrap a user signed-distance callback with numeric projection and normals.

    Projection runs the damped iteration x <- x - distance(x) * grad(x) with a
    central-difference gradient until |distance| <= 1e-10 * diameter.
    """
    lo, side = np.asarray(bounding_cube[0], dtype=float), float(bounding_cube[1])
    diameter = side * np.sqrt(3.0)
    step = h_ref * side

    def grad(x):
        g = np.empty_like(x, dtype=float)
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = step
            g[:, ax] = (
                np.asarray(distance(x + e)) - np.asarray(distance(x - e))
            ) / (2 * step)
        nrm = np.linalg.norm(g, axis=1, keepdims=True)
        nrm[nrm == 0] = 1.0
        return g / nrm

    def project(x):
        x = np.atleast_2d(x).astype(float).copy()
        for _ in range(50):
            d = np.asarray(distance(x))
            if np.all(np.abs(d) <= 1e-10 * diameter):
                return x
            x = x - 0.8 * d[:, None] * grad(x)
        d = np.asarray(distance(x))
        worst = int(np.argmax(np.abs(d)))
        raise ProjectionError(
            f"projection did not converge for candidate {x[worst]} "
            f"(residual {abs(d[worst]):.3e})"
        )

    return SignedDistanceDomain(
        name=name,
        distance=lambda x: np.asarray(distance(np.atleast_2d(x))),
        project=project,
        outward_normal=grad,
        bounding_cube=(lo, side),
    )


_DOMAIN_PATTERN = re.compile(r"^(?P<kind>[a-z_]+)\((?P<arg>[-+0-9.eE]+)\)$")
_DOMAIN_FACTORIES: dict[str, Callable[[float], SignedDistanceDomain]] = {
    "ball": ball,
    "cube": cube,
}


def register_domain(kind: str, factory: Callable[[float], SignedDistanceDomain]) -> None:
    """Register a named single-parameter domain factory, e.g. 'shell'."""
    _DOMAIN_FACTORIES[kind] = factory


def domain(spec: str) -> SignedDistanceDomain:
    """Look up a domain by name, e.g. 'ball(1)' or 'cube(0.5)'."""
    m = _DOMAIN_PATTERN.match(spec.strip())
    if not m or m.group("kind") not in _DOMAIN_FACTORIES:
        known = ", ".join(f"{k}(r)" for k in sorted(_DOMAIN_FACTORIES))
        raise DomainError(f"unknown domain {spec!r}; known: {known}")
    return _DOMAIN_FACTORIES[m.group("kind")](float(m.group("arg")))
