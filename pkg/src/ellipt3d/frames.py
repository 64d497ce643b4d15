"""Discrete orthogonal coordinate frames in Z^3.

Hessian-eigenvalue operators are evaluated as a maximum of G(sum_j phi(u_{nu_j nu_j}))
over orthogonal coordinate frames.  This module enumerates the realizable integer
frames at each stencil width k, measures their angular resolution, and builds the
nearest-neighbor alignment maps that let the maximization walk from width k to
width k+1 while only ever comparing ~25 candidate frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_FORMAT_HEADER = "# ellipt3d-frames v1"


class FrameCacheError(Exception):
    """Raised when a frame-cache file cannot be parsed."""


def _gcd3(a: int, b: int, c: int) -> int:
    return math.gcd(math.gcd(abs(a), abs(b)), abs(c))


def canonical_direction(v) -> tuple[int, int, int]:
    """Reduce an integer vector to its primitive, sign-canonical representative.

    Divides out the gcd and flips the sign so the first nonzero component is
    positive.  Two vectors map to the same output iff they are parallel.
    """
    a, b, c = int(v[0]), int(v[1]), int(v[2])
    g = _gcd3(a, b, c)
    if g == 0:
        raise ValueError("zero vector has no direction")
    a, b, c = a // g, b // g, c // g
    for comp in (a, b, c):
        if comp != 0:
            if comp < 0:
                a, b, c = -a, -b, -c
            break
    return (a, b, c)


@dataclass(frozen=True)
class DirectionSet:
    """Primitive, sign-canonical integer directions with inf-norm <= k."""

    k: int
    directions: np.ndarray  # (M, 3) int64, lexicographically sorted

    def __len__(self) -> int:
        return len(self.directions)

    def unit(self) -> np.ndarray:
        d = self.directions.astype(float)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class FrameSet:
    """Orthogonal triples of primitive integer vectors with inf-norm <= k.

    Each frame is canonical: members sign-canonical and sorted lexicographically,
    so the 48-fold symmetry group contributes a single representative.
    ``dtheta`` is an optional Monte Carlo estimate of the angular resolution.
    """

    k: int
    frames: np.ndarray  # (M, 3, 3) int64
    dtheta: float | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def unit(self) -> np.ndarray:
        f = self.frames.astype(float)
        return f / np.linalg.norm(f, axis=2, keepdims=True)


def enumerate_directions(k: int) -> DirectionSet:
    """All primitive sign-canonical integer vectors with inf-norm <= k."""
    if k < 1:
        raise ValueError("stencil width k must be >= 1")
    seen = set()
    rng = range(-k, k + 1)
    for a in rng:
        for b in rng:
            for c in rng:
                if a == 0 and b == 0 and c == 0:
                    continue
                seen.add(canonical_direction((a, b, c)))
    dirs = np.array(sorted(seen), dtype=np.int64)
    return DirectionSet(k=k, directions=dirs)


def canonical_frame(v1, v2, v3) -> tuple[tuple[int, int, int], ...]:
    triple = sorted(canonical_direction(v) for v in (v1, v2, v3))
    return tuple(triple)


def _cross(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def enumerate_frames(k: int) -> FrameSet:
    """All canonical orthogonal frames realizable at stencil width k.

    A pair of orthogonal primitive vectors determines the third direction up to
    sign (the primitive cross product); the triple is kept when that third
    direction also fits within inf-norm k.
    """
    dirs = enumerate_directions(k).directions
    seen = set()
    n = len(dirs)
    d = [tuple(int(x) for x in row) for row in dirs]
    for i in range(n):
        a = d[i]
        for j in range(i + 1, n):
            b = d[j]
            if a[0] * b[0] + a[1] * b[1] + a[2] * b[2] != 0:
                continue
            c = _cross(a, b)
            c = canonical_direction(c)
            if max(abs(c[0]), abs(c[1]), abs(c[2])) > k:
                continue
            seen.add(canonical_frame(a, b, c))
    frames = np.array(sorted(seen), dtype=np.int64)
    return FrameSet(k=k, frames=frames)


def frame_members(frameset: FrameSet) -> np.ndarray:
    """Distinct canonical vectors appearing in at least one frame, sorted."""
    members = {tuple(int(x) for x in v) for fr in frameset.frames for v in fr}
    return np.array(sorted(members), dtype=np.int64)


def line_angle(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between the lines spanned by u and v (sign-insensitive)."""
    c = abs(float(np.dot(u, v))) / (np.linalg.norm(u) * np.linalg.norm(v))
    return math.acos(min(1.0, c))


def estimate_angular_resolution(
    frameset: FrameSet, samples: int = 10_000, seed: int = 0
) -> float:
    """Monte Carlo estimate of the worst-case frame misalignment.

    Draws Haar-random orthonormal frames, matches each against the closest
    frame in the set (over member permutations, angles taken between lines),
    and returns the largest of the per-sample best worst-member angles.
    """
    if samples < 100:
        raise ValueError("need at least 100 samples")
    rng = np.random.default_rng(seed)
    units = frameset.unit()  # (M, 3, 3)
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    worst = 0.0
    batch = 256
    done = 0
    while done < samples:
        m = min(batch, samples - done)
        g = rng.standard_normal((m, 3, 3))
        q, _ = np.linalg.qr(g)
        # |cos| between sample axis i and frame member j: (m, M, 3, 3)
        dots = np.abs(np.einsum("sia,fja->sfij", q, units))
        dots = np.clip(dots, 0.0, 1.0)
        ang = np.arccos(dots)
        best = np.full(m, np.inf)
        for p in perms:
            worst_member = np.max(ang[:, :, (0, 1, 2), p], axis=2)  # (m, M)
            best = np.minimum(best, worst_member.min(axis=1))
        worst = max(worst, float(best.max()))
        done += m
    return worst


@dataclass
class FrameHierarchy:
    """Frame sets for k = 1..k_max plus five-nearest alignment maps.

    ``map1[(k, v1)]`` lists the five level-(k+1) member vectors most closely
    aligned with v1.  ``map2[(k, mu, v2)]`` lists the five vectors orthogonal to
    ``mu`` at level k+1 most closely aligned with v2, restricted to vectors that
    complete ``mu`` to a valid level-(k+1) frame.
    """

    k_max: int
    levels: dict[int, FrameSet] = field(default_factory=dict)
    members: dict[int, np.ndarray] = field(default_factory=dict)
    map1: dict[tuple[int, tuple[int, int, int]], np.ndarray] = field(default_factory=dict)
    map2: dict[
        tuple[int, tuple[int, int, int], tuple[int, int, int]], np.ndarray
    ] = field(default_factory=dict)

    def frame_set(self, k: int) -> FrameSet:
        return self.levels[k]


def _top_aligned(target: np.ndarray, candidates: np.ndarray, count: int = 5) -> np.ndarray:
    """The ``count`` candidates most closely aligned with target.

    Ties break on (angle, squared norm, lexicographic order); candidates are
    assumed lexicographically sorted so index order settles the final tie.
    """
    t = target.astype(float)
    c = candidates.astype(float)
    cosv = np.abs(c @ t) / (np.linalg.norm(c, axis=1) * np.linalg.norm(t))
    ang = np.arccos(np.clip(cosv, 0.0, 1.0))
    norm2 = np.einsum("ij,ij->i", candidates, candidates)
    order = np.lexsort((np.arange(len(candidates)), norm2, np.round(ang, 12)))
    return candidates[order[: min(count, len(candidates))]]


def orthogonal_members(members: np.ndarray, mu, k: int) -> np.ndarray:
    """Members orthogonal to mu whose frame with mu closes within inf-norm k."""
    mu_t = tuple(int(x) for x in mu)
    out = []
    for v in members:
        vt = tuple(int(x) for x in v)
        if mu_t[0] * vt[0] + mu_t[1] * vt[1] + mu_t[2] * vt[2] != 0:
            continue
        third = canonical_direction(_cross(mu_t, vt))
        if max(abs(third[0]), abs(third[1]), abs(third[2])) <= k:
            out.append(vt)
    return np.array(sorted(out), dtype=np.int64)


def build_hierarchy(k_max: int) -> FrameHierarchy:
    """Enumerate frame sets for k = 1..k_max and the alignment maps between levels."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    hier = FrameHierarchy(k_max=k_max)
    for k in range(1, k_max + 1):
        fs = enumerate_frames(k)
        hier.levels[k] = fs
        hier.members[k] = frame_members(fs)
    for k in range(1, k_max):
        fine = hier.members[k + 1]
        for v1 in hier.members[k]:
            hier.map1[(k, tuple(int(x) for x in v1))] = _top_aligned(v1, fine)
        # map2 is keyed by every fine-level mu reachable through map1 paired
        # with every coarse-level member that may play the second slot.
        mus = {tuple(int(x) for x in m) for tgt in hier.map1 for m in hier.map1[tgt] if tgt[0] == k}
        for mu in sorted(mus):
            ortho = orthogonal_members(fine, mu, k + 1)
            if len(ortho) == 0:
                continue
            for v2 in hier.members[k]:
                key = (k, mu, tuple(int(x) for x in v2))
                hier.map2[key] = _top_aligned(v2, ortho)
    return hier


def expand_frame(hierarchy: FrameHierarchy, frame: np.ndarray, k: int) -> np.ndarray:
    """Level-(k+1) candidate frames aligned with a level-k argmax frame.

    Combines the five vectors aligned with the first member and, for each, the
    five completions aligned with the second member (at most 25 frames after
    canonicalization and deduplication).
    """
    v1 = tuple(int(x) for x in frame[0])
    v2 = tuple(int(x) for x in frame[1])
    out = []
    seen = set()
    for mu in hierarchy.map1[(k, v1)]:
        mu_t = tuple(int(x) for x in mu)
        key = (k, mu_t, v2)
        if key not in hierarchy.map2:
            continue
        for rho in hierarchy.map2[key]:
            cf = canonical_frame(mu_t, tuple(int(x) for x in rho), _cross(mu_t, rho))
            if cf not in seen:
                seen.add(cf)
                out.append(cf)
    if not out:
        raise RuntimeError(f"no candidate frames for {frame} at level {k}")
    return np.array(sorted(out), dtype=np.int64)


def multilevel_argmax(score, hierarchy: FrameHierarchy, k_star: int):
    """Maximize a frame score by walking the alignment hierarchy.

    Level 1 scans every width-1 frame; each later level scans only the <= 25
    frames aligned with the current argmax.  Returns ``(frame, value)`` for the
    final level.  The value is nondecreasing in the level because each
    candidate set contains the previous argmax.
    """
    if k_star > hierarchy.k_max:
        raise ValueError(f"k_star={k_star} exceeds hierarchy k_max={hierarchy.k_max}")
    candidates = hierarchy.levels[1].frames
    best_frame, best_value = None, -math.inf
    for k in range(1, k_star + 1):
        if len(candidates) == 0:
            raise RuntimeError("empty candidate frame set")
        values = [score(f) for f in candidates]
        idx = int(np.argmax(values))
        best_frame, best_value = candidates[idx], float(values[idx])
        if k < k_star:
            candidates = expand_frame(hierarchy, best_frame, k)
    return best_frame, best_value


def _write_triples(out: list[str], rows: np.ndarray) -> None:
    for row in rows.reshape(len(rows), -1):
        out.append(" ".join(str(int(x)) for x in row))


def serialize_hierarchy(hierarchy: FrameHierarchy) -> str:
    out = [f"{_FORMAT_HEADER} kmax={hierarchy.k_max}"]
    for k in range(1, hierarchy.k_max + 1):
        out.append(f"[E {k}]")
        _write_triples(out, enumerate_directions(k).directions)
        out.append(f"[V {k}]")
        _write_triples(out, hierarchy.levels[k].frames)
    for k in range(1, hierarchy.k_max):
        out.append(f"[T1 {k}]")
        for v1, targets in sorted(hierarchy.map1.items()):
            if v1[0] != k:
                continue
            row = list(v1[1]) + [int(x) for x in targets.reshape(-1)]
            out.append(" ".join(str(x) for x in row))
        out.append(f"[T2 {k}]")
        for key, targets in sorted(hierarchy.map2.items()):
            if key[0] != k:
                continue
            row = list(key[1]) + list(key[2]) + [int(x) for x in targets.reshape(-1)]
            out.append(" ".join(str(x) for x in row))
    return "\n".join(out) + "\n"


def save_hierarchy(hierarchy: FrameHierarchy, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_hierarchy(hierarchy))


def load_hierarchy(path) -> FrameHierarchy:
    with open(path) as fh:
        text = fh.read()
    return deserialize_hierarchy(text)


def deserialize_hierarchy(text: str) -> FrameHierarchy:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_FORMAT_HEADER):
        raise FrameCacheError("missing or unsupported frame-cache header")
    try:
        k_max = int(lines[0].split("kmax=")[1])
    except (IndexError, ValueError) as exc:
        raise FrameCacheError("malformed frame-cache header") from exc
    hier = FrameHierarchy(k_max=k_max)
    section, level = None, 0
    frames_acc: dict[int, list] = {}
    try:
        for line in lines[1:]:
            line = line.strip()
            if not line:
                continue
            if line.startswith("["):
                tag, num = line[1:-1].split()
                section, level = tag, int(num)
                continue
            vals = [int(x) for x in line.split()]
            if section == "E":
                continue  # direction sets are regenerated on demand
            if section == "V":
                frames_acc.setdefault(level, []).append(np.array(vals).reshape(3, 3))
            elif section == "T1":
                v1 = tuple(vals[:3])
                hier.map1[(level, v1)] = np.array(vals[3:], dtype=np.int64).reshape(-1, 3)
            elif section == "T2":
                mu, v2 = tuple(vals[:3]), tuple(vals[3:6])
                hier.map2[(level, mu, v2)] = np.array(vals[6:], dtype=np.int64).reshape(-1, 3)
            else:
                raise FrameCacheError(f"unknown section {section!r}")
    except (ValueError, IndexError) as exc:
        raise FrameCacheError("malformed frame-cache body") from exc
    for k in range(1, k_max + 1):
        if k not in frames_acc:
            raise FrameCacheError(f"frame-cache missing level {k}")
        fs = FrameSet(k=k, frames=np.array(frames_acc[k], dtype=np.int64))
        hier.levels[k] = fs
        hier.members[k] = frame_members(fs)
    return hier
