"""Consistent, monotone finite difference stencils on point clouds.

Second directional derivatives use a centered difference when the direction is
lattice-aligned and both neighbors exist; otherwise coefficients come from a
sign-constrained least squares fit over one neighbor per octant of the rotated
frame.  First directional derivatives at boundary points walk the ray into the
interior lattice and interpolate across the entry face, giving nonpositive
coefficients (the monotone orientation for boundary conditions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class StencilError(Exception):
    """Base class for stencil construction failures."""


class NotAligned(StencilError):
    """Centered differencing unavailable: direction not realizable on the lattice."""


class EmptyOctant(StencilError):
    """No cloud point in one octant of the rotated frame within the search radius."""

    def __init__(self, octant: int, node: int):
        super().__init__(f"octant {octant} empty around node {node}")
        self.octant = octant
        self.node = node


class InfeasibleStencil(StencilError):
    """Sign-constrained least squares residual too large for a valid stencil."""

    def __init__(self, residual: float):
        super().__init__(f"constrained least squares residual {residual:.3e}")
        self.residual = residual


class RayEscaped(StencilError):
    """Boundary ray left the domain before reaching the interior lattice."""


@dataclass
class Stencil:
    """Signed-coefficient approximation of a directional derivative.

    ``kind`` is "second" (coefficients >= 0, units 1/length^2) or "first"
    (coefficients <= 0, units 1/length).  ``angular_error`` records the largest
    angle between a chosen neighbor offset and the signed direction axis.
    """

    reference: int
    neighbors: np.ndarray
    coefficients: np.ndarray
    direction: np.ndarray
    kind: str
    angular_error: float = 0.0


@dataclass
class NnlsProblem:
    """min 0.5*||M a - b||^2 subject to a >= 0 or a <= 0."""

    M: np.ndarray
    b: np.ndarray
    lower_bound_sign: str = "nonnegative"  # or "nonpositive"


def solve_constrained_ls(problem: NnlsProblem, feasibility_tol: float | None = None) -> np.ndarray:
    """Active-set (Lawson-Hanson) solve of a sign-constrained least squares.

    When ``feasibility_tol`` is given, a residual above ``tol * ||b||`` raises
    InfeasibleStencil; stencil builders use this to detect neighbor-selection
    violations.  Anti-cycling comes from always picking the lowest eligible
    index among ties, with an iteration cap of 10 * n.
    """
    M = np.asarray(problem.M, dtype=float)
    b = np.asarray(problem.b, dtype=float)
    if problem.lower_bound_sign == "nonpositive":
        flipped = solve_constrained_ls(
            NnlsProblem(-M, b, "nonnegative"), feasibility_tol=feasibility_tol
        )
        return -flipped
    if problem.lower_bound_sign != "nonnegative":
        raise ValueError(f"unknown sign constraint {problem.lower_bound_sign!r}")
    if not np.all(np.isfinite(M)) or not np.all(np.isfinite(b)):
        raise ValueError("constrained least squares input must be finite")

    nvar = M.shape[1]
    x = np.zeros(nvar)
    passive = np.zeros(nvar, dtype=bool)
    scale = max(1.0, float(np.abs(M).max()), float(np.abs(b).max()))
    dual_tol = 1e-12 * scale * scale
    for _ in range(10 * max(nvar, 1)):
        w = M.T @ (b - M @ x)
        w_free = np.where(passive, -np.inf, w)
        j = int(np.argmax(w_free))
        if w_free[j] <= dual_tol:
            break
        passive[j] = True
        while True:
            z_p, *_ = np.linalg.lstsq(M[:, passive], b, rcond=None)
            if np.all(z_p > 0.0):
                x = np.zeros(nvar)
                x[passive] = z_p
                break
            # step toward z until the first passive variable hits zero, drop it
            x_p = x[passive]
            mask = z_p <= 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(mask, x_p / (x_p - z_p), np.inf)
            alpha = float(np.min(ratios))
            x_p = x_p + alpha * (z_p - x_p)
            x[passive] = x_p
            drop = np.zeros(nvar, dtype=bool)
            drop[passive] = x_p <= 1e-14 * scale
            passive &= ~drop
            x[~passive] = 0.0
            if not np.any(passive):
                break
    if feasibility_tol is not None:
        residual = float(np.linalg.norm(M @ x - b))
        if residual > feasibility_tol * max(np.linalg.norm(b), 1e-300):
            raise InfeasibleStencil(residual)
    return x


def integer_direction(nu: np.ndarray, max_mult: int = 16) -> tuple[int, int, int] | None:
    """Smallest integer vector parallel to nu (within 1e-12), or None."""
    nu = np.asarray(nu, dtype=float)
    imax = int(np.argmax(np.abs(nu)))
    if nu[imax] == 0.0:
        return None
    r = nu / nu[imax]
    for q in range(1, max_mult + 1):
        v = q * r
        vr = np.round(v)
        if np.max(np.abs(v - vr)) < 1e-9 and np.any(vr != 0.0):
            vi = vr.astype(np.int64)
            g = math.gcd(math.gcd(abs(int(vi[0])), abs(int(vi[1]))), abs(int(vi[2])))
            vi = vi // g
            unit = vi / np.linalg.norm(vi)
            if np.linalg.norm(np.cross(unit, nu)) < 1e-12:
                if np.dot(unit, nu) < 0:
                    vi = -vi
                return (int(vi[0]), int(vi[1]), int(vi[2]))
    return None


def frame_completion(nu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal completion (nu, nu2, nu3).

    nu2 is the normalized cross product of nu with the standard basis vector
    least aligned with nu, which keeps the completion well conditioned.
    """
    nu = np.asarray(nu, dtype=float)
    e = np.zeros(3)
    e[int(np.argmin(np.abs(nu)))] = 1.0
    nu2 = np.cross(nu, e)
    nu2 /= np.linalg.norm(nu2)
    nu3 = np.cross(nu, nu2)
    nu3 /= np.linalg.norm(nu3)
    return nu2, nu3


def centered_second_difference(cloud, x0: int, nu_int) -> Stencil:
    """Two-neighbor centered difference along an integer lattice direction."""
    if not cloud.is_interior(x0):
        raise NotAligned(f"node {x0} is not an interior lattice point")
    nu_int = np.asarray(nu_int, dtype=np.int64)
    ijk = cloud.lattice_ijk[x0]
    plus = cloud.lattice_node(ijk + nu_int)
    minus = cloud.lattice_node(ijk - nu_int)
    if plus is None or minus is None:
        raise NotAligned(f"missing lattice neighbor for node {x0} along {tuple(nu_int)}")
    norm2 = float(nu_int @ nu_int)
    h = cloud.params.h
    coef = 1.0 / (norm2 * h * h)
    unit = nu_int / math.sqrt(norm2)
    return Stencil(
        reference=x0,
        neighbors=np.array([plus, minus], dtype=np.int64),
        coefficients=np.array([coef, coef]),
        direction=unit,
        kind="second",
        angular_error=0.0,
    )


def _rotated_coords(cloud, x0: int, nu: np.ndarray, radius: float):
    """Neighbor ids and their coordinates in the frame (nu, nu2, nu3)."""
    p0 = cloud.points[x0]
    ids = cloud.neighbors_within(p0, radius)
    ids = ids[ids != x0]
    rel = cloud.points[ids] - p0
    nu2, nu3 = frame_completion(nu)
    coords = np.column_stack([rel @ nu, rel @ nu2, rel @ nu3])
    return ids, coords


def _octant_pick(ids: np.ndarray, coords: np.ndarray, octants=range(8)):
    """One best-aligned neighbor per requested octant.

    The alignment objective is the squared in-plane azimuth from the signed
    direction axis plus the squared elevation out of that plane; ties break on
    distance then node id.  Raises EmptyOctant when an octant has no point.
    """
    X, Y, Z = coords[:, 0], coords[:, 1], coords[:, 2]
    r = np.linalg.norm(coords, axis=1)
    obj = np.arctan2(np.abs(Y), np.abs(X)) ** 2
    obj += np.arcsin(np.clip(np.abs(Z) / np.maximum(r, 1e-300), 0.0, 1.0)) ** 2
    obj = np.round(obj, 12)  # merge symmetry-equal objectives before tie-break
    bits = (X >= 0).astype(int) * 4 + (Y >= 0).astype(int) * 2 + (Z >= 0).astype(int)
    chosen = []
    for o in octants:
        mask = bits == o
        if not np.any(mask):
            raise EmptyOctant(o, -1)
        sel = np.flatnonzero(mask)
        order = np.lexsort((ids[sel], r[sel], obj[sel]))
        chosen.append(sel[order[0]])
    chosen = np.array(chosen, dtype=np.int64)
    align = np.arccos(np.clip(np.abs(X[chosen]) / np.maximum(r[chosen], 1e-300), 0.0, 1.0))
    return chosen, float(align.max())


def select_octant_neighbors(cloud, x0: int, nu: np.ndarray, radius: float | None = None):
    """Eight neighbor ids (one per octant of the rotated frame) and their
    worst alignment angle to the signed direction axis."""
    radius = cloud.params.epsilon if radius is None else radius
    ids, coords = _rotated_coords(cloud, x0, np.asarray(nu, dtype=float), radius)
    try:
        picks, ang = _octant_pick(ids, coords)
    except EmptyOctant as exc:
        raise EmptyOctant(exc.octant, x0) from None
    return ids[picks], ang


def _second_system(coords: np.ndarray, scale: float):
    """Rows of the consistency system in rotated coordinates, scaled to O(1)."""
    Xs = coords / scale
    M = np.vstack([Xs[:, 0], Xs[:, 1], Xs[:, 2], 0.5 * Xs[:, 0] ** 2])
    b = np.array([0.0, 0.0, 0.0, 1.0])
    return M, b


def _solve_second(cloud, x0, nu, ids, ang, feasibility_tol=1e-6):
    p0 = cloud.points[x0]
    rel = cloud.points[ids] - p0
    nu2, nu3 = frame_completion(nu)
    coords = np.column_stack([rel @ nu, rel @ nu2, rel @ nu3])
    scale = cloud.params.epsilon
    M, b = _second_system(coords, scale)
    a = solve_constrained_ls(NnlsProblem(M, b), feasibility_tol=feasibility_tol)
    return Stencil(
        reference=x0,
        neighbors=np.asarray(ids, dtype=np.int64),
        coefficients=a / (scale * scale),
        direction=np.asarray(nu, dtype=float),
        kind="second",
        angular_error=ang,
    )


def build_second_directional(cloud, x0: int, nu: np.ndarray) -> Stencil:
    """Monotone approximation of the second directional derivative at x0.

    Dispatch, in order: centered difference (lattice direction, both neighbors
    present, width below the search radius); one aligned neighbor plus four
    octant picks on the opposite side; eight octant picks.  An empty octant
    first retries with doubled radius, then falls back to an unstructured fit
    over all points within that radius.
    """
    if not cloud.is_interior(x0):
        raise ValueError(f"node {x0} is not interior")
    nu = np.asarray(nu, dtype=float)
    nu = nu / np.linalg.norm(nu)
    params = cloud.params
    eps = params.epsilon

    nu_int = integer_direction(nu)
    aligned_id = None
    aligned_sign = 0
    if nu_int is not None:
        width = math.sqrt(sum(c * c for c in nu_int)) * params.h
        if width < eps:
            ijk = cloud.lattice_ijk[x0]
            plus = cloud.lattice_node(ijk + np.asarray(nu_int))
            minus = cloud.lattice_node(ijk - np.asarray(nu_int))
            if plus is not None and minus is not None:
                return centered_second_difference(cloud, x0, nu_int)
            if plus is not None:
                aligned_id, aligned_sign = plus, +1
            elif minus is not None:
                aligned_id, aligned_sign = minus, -1

    if aligned_id is not None:
        try:
            ids, coords = _rotated_coords(cloud, x0, nu, eps)
            opposite = range(4) if aligned_sign > 0 else range(4, 8)
            picks, ang = _octant_pick(ids, coords, octants=opposite)
            neighbor_ids = np.concatenate([[aligned_id], ids[picks]])
            return _solve_second(cloud, x0, nu, neighbor_ids, ang)
        except (EmptyOctant, InfeasibleStencil):
            pass  # fall through to the symmetric eight-octant path

    radius = eps
    for attempt in range(2):
        try:
            ids, ang = select_octant_neighbors(cloud, x0, nu, radius)
            return _solve_second(cloud, x0, nu, ids, ang)
        except EmptyOctant:
            if attempt == 0:
                radius = min(2.0 * eps, cloud.domain.diameter)
            else:
                break
        except InfeasibleStencil:
            break

    # last resort: unconstrained neighbor set, sign constraint still enforced
    ids, coords = _rotated_coords(cloud, x0, nu, min(2.0 * eps, cloud.domain.diameter))
    if len(ids) == 0:
        raise EmptyOctant(0, x0)
    r = np.linalg.norm(coords, axis=1)
    align = np.arccos(np.clip(np.abs(coords[:, 0]) / np.maximum(r, 1e-300), 0, 1))
    scale = eps
    M, b = _second_system(coords, scale)
    a = solve_constrained_ls(NnlsProblem(M, b), feasibility_tol=1e-6)
    used = a > 0
    return Stencil(
        reference=x0,
        neighbors=ids[used],
        coefficients=a[used] / (scale * scale),
        direction=nu,
        kind="second",
        angular_error=float(align[used].max()) if np.any(used) else 0.0,
    )


def _face_vertices(cell: np.ndarray, axis: int, plane: int):
    """Lattice indices of the four vertices of a cell face normal to ``axis``."""
    other = [ax for ax in range(3) if ax != axis]
    verts = []
    for da in (0, 1):
        for db in (0, 1):
            v = cell.copy()
            v[axis] = plane
            v[other[0]] = cell[other[0]] + da
            v[other[1]] = cell[other[1]] + db
            verts.append(tuple(int(x) for x in v))
    return verts  # order: (0,0), (0,1), (1,0), (1,1) in the two free axes


def _barycentric_face_coeffs(u: float, v: float, present) -> np.ndarray | None:
    """Interpolation weights over face corners (00, 01, 10, 11) for a point
    (u, v) in the unit square, restricted to corners flagged present.

    The square splits into triangles along either diagonal; the first triangle
    (fixed order) whose corners are all present and which contains the point
    gives at most three nonzero weights.  Returns None when no such triangle
    exists, which sends the caller to the next face along the ray.
    """
    u = min(max(u, 0.0), 1.0)
    v = min(max(v, 0.0), 1.0)
    # triangles as (corner indices, barycentric weights, containment); points
    # on a diagonal belong to both adjacent triangles, so gates are non-strict
    candidates = (
        ((0, 2, 3), (1.0 - u, u - v, v), u >= v),
        ((0, 1, 3), (1.0 - v, v - u, u), u <= v),
        ((0, 2, 1), (1.0 - u - v, u, v), u + v <= 1.0),
        ((3, 1, 2), (u + v - 1.0, 1.0 - u, 1.0 - v), u + v >= 1.0),
    )
    for corners, weights, inside in candidates:
        if inside and all(present[ci] for ci in corners):
            lam = np.zeros(4)
            for ci, w in zip(corners, weights):
                lam[ci] = w
            return lam
    return None


def build_first_directional_boundary(cloud, x0: int, n_dir: np.ndarray) -> Stencil:
    """Monotone approximation of the first derivative along an outward direction.

    Walks the ray x0 - t*n into the domain; the first crossed lattice face whose
    four vertices are interior cloud points yields an exact interpolation
    stencil with nonpositive coefficients.  If the entered cell touches the
    interior lattice but the face is incomplete, the four nearest interior
    points within 2h of the face center are fitted instead.
    """
    if cloud.is_interior(x0):
        raise ValueError(f"node {x0} is not a boundary point")
    nhat = np.asarray(n_dir, dtype=float)
    nhat = nhat / np.linalg.norm(nhat)
    if float(nhat @ cloud.normal(x0)) <= 0.0:
        raise ValueError("direction must have positive dot with the outward normal")

    p0 = cloud.points[x0]
    lo, side = cloud.domain.bounding_cube
    h = cloud.params.h
    n = cloud.params.n
    d = -nhat  # travel direction into the domain

    # Amanatides-Woo traversal state
    start = p0 + 1e-9 * h * d
    cell = np.floor((start - lo) / h).astype(np.int64)
    cell = np.clip(cell, 0, n - 1)
    step = np.where(d > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.abs(h / d)
        next_plane = lo + (cell + (step > 0)) * h
        t_max = np.where(d != 0, (next_plane - p0) / d, np.inf)
    t_max = np.where(np.isfinite(t_max), t_max, np.inf)

    partial_center = None
    for _ in range(3 * (n + 2)):
        axis = int(np.argmin(t_max))
        t_cross = float(t_max[axis])
        cell = cell.copy()
        cell[axis] += step[axis]
        if cell[axis] < 0 or cell[axis] >= n:
            break
        plane = cell[axis] + (0 if step[axis] > 0 else 1)
        verts = _face_vertices(cell, axis, plane)
        vert_ids = [cloud.lattice_node(v) for v in verts]
        present = [vid is not None for vid in vert_ids]
        if sum(present) >= 3:
            crossing = p0 + t_cross * d
            other = [ax for ax in range(3) if ax != axis]
            u = (crossing[other[0]] - (lo[other[0]] + verts[0][other[0]] * h)) / h
            v = (crossing[other[1]] - (lo[other[1]] + verts[0][other[1]] * h)) / h
            lam = _barycentric_face_coeffs(u, v, present)
            if lam is not None:
                keep = [ci for ci in range(4) if present[ci]]
                return Stencil(
                    reference=x0,
                    neighbors=np.array([vert_ids[ci] for ci in keep], dtype=np.int64),
                    coefficients=np.array([-lam[ci] / t_cross for ci in keep]),
                    direction=nhat,
                    kind="first",
                    angular_error=0.0,
                )
        if partial_center is None and any(present):
            partial_center = lo + np.array(verts, dtype=float).mean(axis=0) * h
        t_max[axis] += t_delta[axis]
    if partial_center is not None:
        return _first_from_scatter(cloud, x0, nhat, partial_center)
    raise RayEscaped(f"ray from node {x0} found no interior lattice face")


def _first_from_scatter(cloud, x0: int, nhat: np.ndarray, center: np.ndarray) -> Stencil:
    h = cloud.params.h
    all_ids = cloud.neighbors_within(center, 2.0 * h)
    all_ids = all_ids[all_ids < cloud.n_interior]
    if len(all_ids) < 4:
        raise RayEscaped(f"fewer than 4 interior points near the entry face for node {x0}")
    dist = np.linalg.norm(cloud.points[all_ids] - center, axis=1)
    order = np.lexsort((all_ids, dist))
    for ids in (all_ids[order[:4]], all_ids[order]):
        rel = (cloud.points[ids] - cloud.points[x0]) / h
        try:
            a = solve_constrained_ls(
                NnlsProblem(rel.T, nhat, "nonpositive"), feasibility_tol=1e-6
            )
        except InfeasibleStencil:
            if len(ids) == len(all_ids):
                raise
            continue  # four nearest points too coplanar; retry with all of them
        return Stencil(
            reference=x0,
            neighbors=ids,
            coefficients=a / h,
            direction=nhat,
            kind="first",
            angular_error=0.0,
        )
    raise RayEscaped(f"no feasible first-derivative fit near node {x0}")


def apply_stencil(stencil: Stencil, u: np.ndarray) -> float:
    """Evaluate sum_j a_j (u_j - u_0)."""
    du = u[stencil.neighbors] - u[stencil.reference]
    return float(stencil.coefficients @ du)


def dump_stencils(stencils, path) -> None:
    """Debug dump: one `node nu a_1..a_m neighbor_ids` line per stencil."""
    with open(path, "w") as fh:
        for s in stencils:
            nu = " ".join(f"{v:.17g}" for v in s.direction)
            coef = " ".join(f"{a:.17g}" for a in s.coefficients)
            nbrs = " ".join(str(int(j)) for j in s.neighbors)
            fh.write(f"{s.reference} {nu} {coef} {nbrs}\n")


# --- batched construction ------------------------------------------------------
#
# Assembling a problem needs stencils for every (interior node, direction) pair;
# the batch paths below fill the cloud-level cache with numba kernels and fall
# back to the single-node builders above for the rare irregular cases.  Batch
# and single-node paths share the selection objective and tie-breaking, so the
# cache contents do not depend on which path filled them.

from . import _kernels  # noqa: E402  (kept below the reference implementations)


def direction_key(nu) -> tuple:
    """Cache key for a direction, canonical up to sign."""
    nu_int = integer_direction(np.asarray(nu, dtype=float))
    if nu_int is not None:
        a = np.asarray(nu_int)
        return ("i",) + tuple(int(v) for v in a)
    unit = np.asarray(nu, dtype=float)
    unit = unit / np.linalg.norm(unit)
    for comp in unit:
        if abs(comp) > 1e-14:
            if comp < 0:
                unit = -unit
            break
    return ("f",) + tuple(np.round(unit, 12))


def _canonical_unit(nu) -> np.ndarray:
    """Unit vector with sign fixed the same way as direction_key."""
    unit = np.asarray(nu, dtype=float)
    unit = unit / np.linalg.norm(unit)
    for comp in unit:
        if abs(comp) > 1e-14:
            if comp < 0:
                unit = -unit
            break
    return unit


def _lattice_id_grid(cloud) -> np.ndarray:
    grid_key = ("idgrid",)
    cached = cloud._stencil_cache.get(grid_key)
    if cached is None:
        n = cloud.params.n
        cached = np.full((n + 1, n + 1, n + 1), -1, dtype=np.int64)
        ijk = cloud.lattice_ijk
        cached[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = np.arange(cloud.n_interior)
        cloud._stencil_cache[grid_key] = cached
    return cached


def _interior_neighbor_csr(cloud):
    csr_key = ("csr", round(cloud.params.epsilon, 15))
    cached = cloud._stencil_cache.get(csr_key)
    if cached is None:
        lists = cloud._tree.query_ball_point(
            cloud.interior, cloud.params.epsilon, return_sorted=True
        )
        indptr = np.zeros(cloud.n_interior + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(l) for l in lists])
        indices = np.fromiter(
            (j for l in lists for j in l), dtype=np.int64, count=indptr[-1]
        )
        cached = (indptr, indices)
        cloud._stencil_cache[csr_key] = cached
    return cached


def second_stencil(cloud, node: int, nu) -> Stencil:
    """Cached second-derivative stencil for (node, direction up to sign)."""
    key = ("second", node, direction_key(nu))
    cached = cloud._stencil_cache.get(key)
    if cached is None:
        try:
            cached = build_second_directional(cloud, node, _canonical_unit(nu))
        except StencilError as exc:
            cached = exc
        cloud._stencil_cache[key] = cached
    if isinstance(cached, StencilError):
        raise cached
    return cached


def first_direction_key(nhat: np.ndarray) -> bytes:
    return np.round(nhat, 12).tobytes()


def first_stencil(cloud, node: int, n_dir) -> Stencil:
    """Cached boundary first-derivative stencil for (node, signed direction)."""
    nhat = np.asarray(n_dir, dtype=float)
    nhat = nhat / np.linalg.norm(nhat)
    key = ("first", node, first_direction_key(nhat))
    cached = cloud._stencil_cache.get(key)
    if cached is None:
        try:
            cached = build_first_directional_boundary(cloud, node, nhat)
        except StencilError as exc:
            cached = exc
        cloud._stencil_cache[key] = cached
    if isinstance(cached, StencilError):
        raise cached
    return cached


def ensure_second_stencils(cloud, nu, nodes=None) -> tuple:
    """Fill the cache with second-derivative stencils for many nodes at once.

    Returns the direction key so callers can read the cache without paying for
    key normalization per node.
    """
    dkey = direction_key(nu)
    if nodes is None:
        nodes = range(cloud.n_interior)
    missing = np.array(
        sorted(
            {
                int(n)
                for n in nodes
                if ("second", int(n), dkey) not in cloud._stencil_cache
            }
        ),
        dtype=np.int64,
    )
    if len(missing) == 0:
        return dkey
    params = cloud.params
    unit = _canonical_unit(nu)
    generalized = missing
    mode = np.zeros(len(missing), dtype=np.int8)
    aligned = np.full(len(missing), -1, dtype=np.int64)

    nu_int = integer_direction(unit)
    if nu_int is not None:
        width = math.sqrt(sum(c * c for c in nu_int)) * params.h
        if width < params.epsilon:
            idgrid = _lattice_id_grid(cloud)
            v = np.asarray(nu_int, dtype=np.int64)
            ijk = cloud.lattice_ijk[missing]
            n = params.n

            def lookup(shift):
                pos = ijk + shift
                ok = np.all((pos >= 0) & (pos <= n), axis=1)
                out = np.full(len(pos), -1, dtype=np.int64)
                out[ok] = idgrid[pos[ok, 0], pos[ok, 1], pos[ok, 2]]
                return out

            plus = lookup(v)
            minus = lookup(-v)
            both = (plus >= 0) & (minus >= 0)
            coef = 1.0 / (float(v @ v) * params.h * params.h)
            for node, pl, mi in zip(missing[both], plus[both], minus[both]):
                cloud._stencil_cache[("second", int(node), dkey)] = Stencil(
                    reference=int(node),
                    neighbors=np.array([pl, mi], dtype=np.int64),
                    coefficients=np.array([coef, coef]),
                    direction=unit,
                    kind="second",
                    angular_error=0.0,
                )
            rest = ~both
            generalized = missing[rest]
            mode = np.where(plus >= 0, 1, np.where(minus >= 0, 2, 0))[rest].astype(np.int8)
            aligned = np.where(plus >= 0, plus, minus)[rest]
        # wide lattice directions keep mode 0 (symmetric octants)

    if len(generalized) == 0:
        return dkey
    indptr, indices = _interior_neighbor_csr(cloud)
    sub_ptr = np.zeros(len(generalized) + 1, dtype=np.int64)
    counts = indptr[generalized + 1] - indptr[generalized]
    sub_ptr[1:] = np.cumsum(counts)
    sub_idx = np.empty(sub_ptr[-1], dtype=np.int64)
    for row, node in enumerate(generalized):
        sub_idx[sub_ptr[row] : sub_ptr[row + 1]] = indices[indptr[node] : indptr[node + 1]]
    nu2, nu3 = frame_completion(unit)
    out_nbrs = np.empty((len(generalized), 9), dtype=np.int64)
    out_coef = np.empty((len(generalized), 9))
    out_count = np.zeros(len(generalized), dtype=np.int64)
    out_ang = np.zeros(len(generalized))
    out_status = np.empty(len(generalized), dtype=np.int8)
    _kernels.build_second_generalized_batch(
        cloud.points,
        generalized,
        sub_ptr,
        sub_idx,
        mode,
        aligned,
        unit,
        nu2,
        nu3,
        params.epsilon,
        out_nbrs,
        out_coef,
        out_count,
        out_ang,
        out_status,
    )
    for row, node in enumerate(generalized):
        key = ("second", int(node), dkey)
        if out_status[row] == 0:
            m = out_count[row]
            cloud._stencil_cache[key] = Stencil(
                reference=int(node),
                neighbors=out_nbrs[row, :m].copy(),
                coefficients=out_coef[row, :m].copy(),
                direction=unit,
                kind="second",
                angular_error=float(out_ang[row]),
            )
        else:
            try:
                built = build_second_directional(cloud, int(node), unit)
            except StencilError as exc:
                built = exc
            cloud._stencil_cache[key] = built
    return dkey


def ensure_first_stencils(cloud, nodes, dirs) -> None:
    """Fill the cache with boundary first-derivative stencils for (node, dir) rows.

    Runs the ray-walk kernel over all missing rows, the batched scatter fit
    for rays that only crossed partially interior faces, and stores a
    RayEscaped error for rays that never reached the interior lattice.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    dirs = np.asarray(dirs, dtype=float)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    rounded = np.round(dirs, 12)
    missing_nodes = []
    missing_rows = []
    missing_keys = []
    cache = cloud._stencil_cache
    for row in range(len(nodes)):
        key = ("first", int(nodes[row]), rounded[row].tobytes())
        if key not in cache:
            missing_nodes.append(int(nodes[row]))
            missing_rows.append(row)
            missing_keys.append(key)
    if not missing_nodes:
        return
    x0_ids = np.asarray(missing_nodes, dtype=np.int64)
    dirs = dirs[missing_rows]
    idgrid = _lattice_id_grid(cloud)
    lo, _ = cloud.domain.bounding_cube
    out_nbrs = np.empty((len(x0_ids), 4), dtype=np.int64)
    out_coef = np.empty((len(x0_ids), 4))
    out_count = np.zeros(len(x0_ids), dtype=np.int64)
    out_center = np.full((len(x0_ids), 3), np.nan)
    out_status = np.empty(len(x0_ids), dtype=np.int8)
    _kernels.first_derivative_batch(
        cloud.points,
        x0_ids,
        dirs,
        idgrid,
        np.asarray(lo, dtype=float),
        cloud.params.h,
        cloud.params.n,
        out_nbrs,
        out_coef,
        out_count,
        out_center,
        out_status,
    )
    for row in np.flatnonzero(out_status == 0):
        m = out_count[row]
        cloud._stencil_cache[missing_keys[row]] = Stencil(
            reference=missing_nodes[row],
            neighbors=out_nbrs[row, :m].copy(),
            coefficients=out_coef[row, :m].copy(),
            direction=dirs[row],
            kind="first",
            angular_error=0.0,
        )
    for row in np.flatnonzero(out_status == 2):
        cloud._stencil_cache[missing_keys[row]] = RayEscaped(
            f"ray from node {missing_nodes[row]} found no interior lattice face"
        )

    scatter = np.flatnonzero(out_status == 1)
    if len(scatter) == 0:
        return
    centers = out_center[scatter]
    cand = cloud._tree.query_ball_point(centers, 2.0 * cloud.params.h, return_sorted=True)
    indptr = [0]
    indices = []
    for lists in cand:
        ids = [j for j in lists if j < cloud.n_interior]
        indices.extend(ids)
        indptr.append(len(indices))
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    max_m = int(np.max(indptr[1:] - indptr[:-1])) if len(scatter) else 0
    s_nbrs = np.empty((len(scatter), max(max_m, 1)), dtype=np.int64)
    s_coef = np.empty((len(scatter), max(max_m, 1)))
    s_count = np.zeros(len(scatter), dtype=np.int64)
    s_resid = np.zeros(len(scatter))
    s_status = np.empty(len(scatter), dtype=np.int8)
    _kernels.first_scatter_batch(
        cloud.points,
        x0_ids[scatter],
        dirs[scatter],
        centers,
        indptr,
        indices,
        cloud.params.h,
        s_nbrs,
        s_coef,
        s_count,
        s_resid,
        s_status,
    )
    for pos, row in enumerate(scatter):
        key = missing_keys[row]
        if s_status[pos] == 0:
            m = s_count[pos]
            cloud._stencil_cache[key] = Stencil(
                reference=missing_nodes[row],
                neighbors=s_nbrs[pos, :m].copy(),
                coefficients=s_coef[pos, :m].copy(),
                direction=dirs[row],
                kind="first",
                angular_error=0.0,
            )
        elif s_status[pos] == 1:
            cloud._stencil_cache[key] = InfeasibleStencil(float(s_resid[pos]))
        else:
            cloud._stencil_cache[key] = RayEscaped(
                f"fewer than 4 interior points near the entry face for node "
                f"{missing_nodes[row]}"
            )
