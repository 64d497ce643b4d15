"""Per-node nonlinear schemes assembled from monotone stencils.

Every scheme is of the form F(x, u(x), u(x) - u(.)) and is nondecreasing in its
last two arguments.  Interior operators are either a maximum of affine branches
(each branch a signed combination of directional-derivative stencils) or a sum
of eigenvalue terms max_frames G(sum_j phi(D_jj u)); boundary conditions are
Dirichlet values, Neumann derivative matches, or the optimal-transport
condition max_n (D_n u - H*(n)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import stencil as st

LOG_CLAMP = 1e-12  # floor inside log max(x, .) keeping the product map finite


class ConfigurationError(Exception):
    """Raised when a problem is assembled from incompatible pieces."""


class NonmonotoneLocal(Exception):
    """Scalar local inverse failed to bracket a root of a monotone scheme."""


# --- eigenvalue operator ingredients ----------------------------------------


@dataclass(frozen=True)
class PhiG:
    """A concave phi and nonincreasing G defining G(sum_j phi(lambda_j)).

    ``concave_domain`` bounds the interval where phi is smooth and concave;
    clamped maps (logmax) are constant below it, which keeps them monotone but
    introduces a convex kink that the concavity check must not straddle.
    """

    code: str
    phi: Callable[[float], float]
    dphi: Callable[[float], float]
    G: Callable[[float], float]
    dG: Callable[[float], float]
    concave_domain: tuple[float, float] = (-3.0, 3.0)


PHI_LINEAR = PhiG(
    code="linear",
    phi=lambda x: x,
    dphi=lambda x: 1.0,
    G=lambda s: -s,
    dG=lambda s: -1.0,
)

PHI_LOGMAX = PhiG(
    code="logmax",
    phi=lambda x: math.log(max(x, LOG_CLAMP)),
    dphi=lambda x: 1.0 / x if x > LOG_CLAMP else 0.0,
    G=lambda s: -math.exp(s),
    dG=lambda s: -math.exp(s),
    concave_domain=(1e-6, 3.0),
)

PHI_MIN0 = PhiG(
    code="min0",
    phi=lambda x: min(x, 0.0),
    dphi=lambda x: 1.0 if x < 0.0 else 0.0,
    G=lambda s: -s,
    dG=lambda s: -1.0,
)

PHI_ATAN = PhiG(
    code="atan",
    phi=lambda x: math.atan(max(x, 0.0)) + min(x, 0.0),
    dphi=lambda x: 1.0 / (1.0 + x * x) if x > 0.0 else 1.0,
    G=lambda s: -s,
    dG=lambda s: -1.0,
)

_PHI_BY_CODE = {p.code: p for p in (PHI_LINEAR, PHI_LOGMAX, PHI_MIN0, PHI_ATAN)}


@dataclass
class EigenFunctionSpec:
    """Operator on Hessian eigenvalues: G(sum phi) plus an optional addend pair.

    ``source`` maps a point to the inhomogeneous term added to the operator
    value.  The two-pair form covers determinant-type splittings where the
    convex and concave parts carry separate (phi, G) factorizations.
    """

    pair: PhiG
    addend: PhiG | None = None
    source: Callable[[np.ndarray], float] | None = None

    def validate(self, samples: int = 200) -> None:
        """Numeric concavity / monotonicity check on a 1D sample grid."""
        for pair in (self.pair, self.addend):
            if pair is None:
                continue
            xs = np.linspace(*pair.concave_domain, samples)
            phi = np.array([pair.phi(x) for x in xs])
            if np.any(np.diff(phi, 2) > 1e-8):
                raise ConfigurationError(f"phi[{pair.code}] is not concave on samples")
            if np.any(np.diff(phi) < -1e-8):
                raise ConfigurationError(f"phi[{pair.code}] is not nondecreasing on samples")
            g = np.array([pair.G(x) for x in np.linspace(-3.0, 3.0, samples)])
            if np.any(np.diff(g) > 1e-8):
                raise ConfigurationError(f"G[{pair.code}] is not nonincreasing on samples")


@dataclass
class OTBoundarySpec:
    """Support function of the optimal-transport target set.

    ``support(n)`` returns H*(n) for a unit vector n; directions are admissible
    at a boundary point when they make a positive dot with the outward normal.
    """

    support: Callable[[np.ndarray], float]
    name: str = "target"


def ball_target_support(center, radius: float) -> OTBoundarySpec:
    c = np.asarray(center, dtype=float)

    def support(n):
        return float(c @ n) + radius

    return OTBoundarySpec(support=support, name=f"ball({radius:g})@{tuple(c)}")


def sampled_support(points: np.ndarray) -> OTBoundarySpec:
    """Support function from a dense sample of the target boundary.

    H*(n) = max_p p.n over the samples; accuracy is quadratic in the sample
    angular spacing for smooth convex targets.
    """
    pts = np.asarray(points, dtype=float)

    def support(n):
        return float(np.max(pts @ np.asarray(n, dtype=float)))

    return OTBoundarySpec(support=support, name=f"sampled({len(pts)})")


def sphere_samples(center, radius: float, count: int = 10_000, seed: int = 0) -> np.ndarray:
    """Deterministic quasi-uniform sample of a sphere (Fibonacci lattice)."""
    i = np.arange(count, dtype=float) + 0.5
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    dirs = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    return np.asarray(center, dtype=float) + radius * dirs


# --- scheme containers --------------------------------------------------------


@dataclass
class Branch:
    """One affine candidate: u_coeff*u(x) + sum_t scale_t * D~u + const + c_coeff*c."""

    stencils: list
    scales: np.ndarray
    u_coeff: float = 0.0
    const: float = 0.0
    c_coeff: float = 0.0

    def value(self, node: int, u: np.ndarray, c: float) -> float:
        v = self.u_coeff * u[node] + self.const + self.c_coeff * c
        for scale, sten in zip(self.scales, self.stencils):
            v += scale * st.apply_stencil(sten, u)
        return v

    def u_derivative(self) -> float:
        p = self.u_coeff
        for scale, sten in zip(self.scales, self.stencils):
            p -= scale * float(np.sum(sten.coefficients))
        return p


@dataclass
class EigenTerm:
    """max over candidate frames of scale * G(sum_j phi(D_jj u))."""

    pair: PhiG
    frames: np.ndarray          # (F, 3, 3) integer frames
    stencils: list              # per frame: [s1, s2, s3]
    scale: float = 1.0

    def frame_value(self, fidx: int, u: np.ndarray, u_ref: float | None = None) -> float:
        s = 0.0
        for sten in self.stencils[fidx]:
            q = float(
                sten.coefficients @ (u[sten.neighbors])
                - np.sum(sten.coefficients) * (u_ref if u_ref is not None else u[sten.reference])
            )
            s += self.pair.phi(q)
        return self.scale * self.pair.G(s)

    def value(self, u: np.ndarray):
        vals = [self.frame_value(f, u) for f in range(len(self.frames))]
        fidx = int(np.argmax(vals))
        return vals[fidx], fidx


@dataclass
class NodeScheme:
    """Discrete equation owned by one node.

    ``kind`` is one of dirichlet / branches / eigen / custom; ``frozen_choice``
    records the active branch (or per-term frame indices) between argmax
    refreshes and is written only by the solver sweep that owns the scheme.
    """

    node: int
    kind: str
    g: float = 0.0
    branches: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    const: float = 0.0
    c_coeff: float = 0.0
    F: Callable | None = None
    stencils: list = field(default_factory=list)
    x: np.ndarray | None = None
    frames: np.ndarray | None = None  # candidate frames behind branches/terms
    frozen_choice: object = None


def local_residual(scheme: NodeScheme, u: np.ndarray, c: float = 0.0) -> float:
    """Value of the scheme at the node (fresh maxima, not the frozen choice)."""
    if scheme.kind == "dirichlet":
        return float(u[scheme.node] - scheme.g)
    if scheme.kind == "branches":
        return max(b.value(scheme.node, u, c) for b in scheme.branches)
    if scheme.kind == "eigen":
        total = scheme.const + scheme.c_coeff * c
        for term in scheme.terms:
            v, _ = term.value(u)
            total += v
        return float(total)
    if scheme.kind == "custom":
        derivs = [st.apply_stencil(s, u) for s in scheme.stencils]
        return float(scheme.F(scheme.x, u[scheme.node], derivs))
    raise ConfigurationError(f"unknown scheme kind {scheme.kind!r}")


def refresh_choice(scheme: NodeScheme, u: np.ndarray, c: float = 0.0) -> float:
    """Recompute the argmax branch / frames; returns the residual as a byproduct."""
    if scheme.kind == "dirichlet":
        return float(u[scheme.node] - scheme.g)
    if scheme.kind == "branches":
        vals = [b.value(scheme.node, u, c) for b in scheme.branches]
        scheme.frozen_choice = int(np.argmax(vals))
        return float(vals[scheme.frozen_choice])
    if scheme.kind == "eigen":
        total = scheme.const + scheme.c_coeff * c
        choice = []
        for term in scheme.terms:
            v, fidx = term.value(u)
            choice.append(fidx)
            total += v
        scheme.frozen_choice = tuple(choice)
        return float(total)
    if scheme.kind == "custom":
        return local_residual(scheme, u, c)
    raise ConfigurationError(f"unknown scheme kind {scheme.kind!r}")


def newton_bisect(
    fn: Callable[[float], float],
    dfn: Callable[[float], float] | None,
    t0: float,
    rel_tol: float = 1e-12,
    max_newton: int = 20,
) -> float:
    """Root of a nondecreasing scalar function, Newton with a bisection bracket.

    The bracket is found by doubling steps around t0; Newton proposals outside
    the current bracket fall back to bisection.  Raises NonmonotoneLocal when
    no sign change can be bracketed.
    """
    lo = hi = t0
    flo = fhi = fn(t0)
    step = 1.0 + abs(t0)
    for _ in range(80):
        if flo <= 0.0:
            break
        lo -= step
        flo = fn(lo)
        step *= 2.0
    else:
        raise NonmonotoneLocal("no lower bracket for scalar local inverse")
    step = 1.0 + abs(t0)
    for _ in range(80):
        if fhi >= 0.0:
            break
        hi += step
        fhi = fn(hi)
        step *= 2.0
    else:
        raise NonmonotoneLocal("no upper bracket for scalar local inverse")
    t = 0.5 * (lo + hi)
    for it in range(max_newton + 60):
        f = fn(t)
        if f > 0.0:
            hi = t
        elif f < 0.0:
            lo = t
        else:
            return t
        proposal = None
        if dfn is not None and it < max_newton:
            d = dfn(t)
            if d > 0.0 and math.isfinite(d):
                proposal = t - f / d
        if proposal is None or not (lo < proposal < hi):
            proposal = 0.5 * (lo + hi)
        if abs(proposal - t) <= rel_tol * (1.0 + abs(t)):
            return proposal
        t = proposal
    return t


def local_inverse(scheme: NodeScheme, u: np.ndarray, c: float = 0.0) -> float:
    """Value of u at the node zeroing the frozen scheme with neighbors fixed.

    Affine schemes (Dirichlet, frozen affine branch) solve in closed form; the
    eigenvalue and custom kinds run a safeguarded scalar Newton iteration.
    """
    if scheme.kind == "dirichlet":
        return float(scheme.g)
    if scheme.kind == "branches":
        if scheme.frozen_choice is None:
            raise ConfigurationError("frozen_choice not set; run an argmax refresh first")
        br = scheme.branches[scheme.frozen_choice]
        p = br.u_derivative()
        v = br.value(scheme.node, u, c)
        if p <= 0.0:
            raise NonmonotoneLocal(f"branch at node {scheme.node} has u-derivative {p:g}")
        return float(u[scheme.node] - v / p)
    if scheme.kind == "eigen":
        if scheme.frozen_choice is None:
            raise ConfigurationError("frozen_choice not set; run an argmax refresh first")

        def fn(t: float) -> float:
            total = scheme.const + scheme.c_coeff * c
            for term, fidx in zip(scheme.terms, scheme.frozen_choice):
                total += term.frame_value(fidx, u, u_ref=t)
            return total

        def dfn(t: float) -> float:
            d = 0.0
            for term, fidx in zip(scheme.terms, scheme.frozen_choice):
                s = 0.0
                dsums = []
                for sten in term.stencils[fidx]:
                    asum = float(np.sum(sten.coefficients))
                    q = float(sten.coefficients @ u[sten.neighbors]) - asum * t
                    s += term.pair.phi(q)
                    dsums.append((q, asum))
                gprime = term.pair.dG(s)
                inner = sum(term.pair.dphi(q) * (-asum) for q, asum in dsums)
                d += term.scale * gprime * inner
            return d

        return newton_bisect(fn, dfn, float(u[scheme.node]))
    if scheme.kind == "custom":

        def fn(t: float) -> float:
            derivs = []
            for sten in scheme.stencils:
                asum = float(np.sum(sten.coefficients))
                derivs.append(float(sten.coefficients @ u[sten.neighbors]) - asum * t)
            return float(scheme.F(scheme.x, t, derivs))

        return newton_bisect(fn, None, float(u[scheme.node]))
    raise ConfigurationError(f"unknown scheme kind {scheme.kind!r}")


# --- assemblers ---------------------------------------------------------------

second_stencil = st.second_stencil
first_stencil = st.first_stencil


def assemble_dirichlet(cloud, g: Callable[[np.ndarray], float]) -> list[NodeScheme]:
    """Boundary scheme u(x) - g(x)."""
    return [
        NodeScheme(node=cloud.n_interior + i, kind="dirichlet", g=float(g(p)))
        for i, p in enumerate(cloud.boundary)
    ]


def assemble_neumann(cloud, g: Callable[[np.ndarray], float]) -> list[NodeScheme]:
    """Boundary scheme D_n u - g(x) along the outward normal."""
    st.ensure_first_stencils(
        cloud,
        np.arange(cloud.n_interior, len(cloud.points)),
        cloud.normals,
    )
    out = []
    for i, p in enumerate(cloud.boundary):
        node = cloud.n_interior + i
        sten = first_stencil(cloud, node, cloud.normal(node))
        br = Branch(stencils=[sten], scales=np.array([1.0]), const=-float(g(p)))
        out.append(NodeScheme(node=node, kind="branches", branches=[br]))
    return out


def assemble_ot_boundary(cloud, spec: OTBoundarySpec, directions) -> list[NodeScheme]:
    """Boundary scheme max_n (D_n u - H*(n)) over admissible lattice directions.

    Each primitive direction is tried with both signs; only the sign pointing
    outward (positive dot with the normal) is admissible.  Directions whose ray
    fails to reach the interior lattice are skipped.
    """
    dirs = directions.directions if hasattr(directions, "directions") else np.asarray(directions)
    units = dirs.astype(float)
    units /= np.linalg.norm(units, axis=1, keepdims=True)

    # admissible (node, signed direction) rows, vectorized over the cloud
    dots = cloud.normals @ units.T  # (n_boundary, n_dirs)
    usable = np.abs(dots) > 1e-12  # tangent rays are sign-ambiguous and useless
    brow, dcol = np.nonzero(usable)
    signed = np.where(dots[brow, dcol][:, None] > 0.0, units[dcol], -units[dcol])
    node_ids = cloud.n_interior + brow
    st.ensure_first_stencils(cloud, node_ids, signed)

    one = np.array([1.0])
    out = []
    cache = cloud._stencil_cache
    rounded = np.round(signed, 12)
    row = 0
    for i, p in enumerate(cloud.boundary):
        node = cloud.n_interior + i
        branches = []
        while row < len(node_ids) and node_ids[row] == node:
            sten = cache[("first", node, rounded[row].tobytes())]
            if not isinstance(sten, st.StencilError):
                branches.append(
                    Branch(stencils=[sten], scales=one, const=-spec.support(signed[row]))
                )
            row += 1
        if not branches:
            raise ConfigurationError(
                f"no admissible transport direction at boundary point {p}"
            )
        out.append(NodeScheme(node=node, kind="branches", branches=branches))
    return out


def assemble_directional(cloud, directions, F: Callable) -> list[NodeScheme]:
    """Interior scheme F(x, u(x), D_nn u(x); nu in directions) with prebuilt stencils.

    F must be nondecreasing in u and nonincreasing in each derivative argument.
    """
    units = [np.asarray(d, dtype=float) / np.linalg.norm(d) for d in directions]
    out = []
    for node in range(cloud.n_interior):
        try:
            stencils = [second_stencil(cloud, node, nu) for nu in units]
        except st.StencilError as exc:
            raise ConfigurationError(f"stencil failure at interior node {node}: {exc}") from exc
        out.append(
            NodeScheme(
                node=node,
                kind="custom",
                F=F,
                stencils=stencils,
                x=cloud.points[node],
            )
        )
    return out


def assemble_directional_max(
    cloud,
    directions,
    source: Callable[[np.ndarray], float] | None = None,
    obstacle: Callable[[np.ndarray], float] | None = None,
) -> list[NodeScheme]:
    """Interior scheme max_nu(-D_nn u) - f(x), optionally max'ed with u - g(x).

    This is the structured form of the directional operators: one affine branch
    per direction (coefficient signs make each branch monotone), plus an
    obstacle branch when given.
    """
    units = [np.asarray(d, dtype=float) / np.linalg.norm(d) for d in directions]
    keys = [st.ensure_second_stencils(cloud, nu) for nu in units]
    cache = cloud._stencil_cache
    neg_one = np.array([-1.0])
    none_sc = np.empty(0)
    out = []
    for node in range(cloud.n_interior):
        p = cloud.points[node]
        f = float(source(p)) if source is not None else 0.0
        branches = []
        for dkey in keys:
            sten = cache[("second", node, dkey)]
            if isinstance(sten, st.StencilError):
                raise ConfigurationError(
                    f"stencil failure at interior node {node}: {sten}"
                ) from sten
            branches.append(Branch(stencils=[sten], scales=neg_one, const=-f))
        if obstacle is not None:
            branches.append(
                Branch(stencils=[], scales=none_sc, u_coeff=1.0, const=-float(obstacle(p)))
            )
        out.append(NodeScheme(node=node, kind="branches", branches=branches))
    return out


def _frames_for(node: int, frames) -> np.ndarray:
    if isinstance(frames, dict):
        return frames[node]
    if hasattr(frames, "frames"):
        return frames.frames
    return np.asarray(frames)


def assemble_eigen(
    cloud,
    spec: EigenFunctionSpec,
    frames,
    scale: Callable[[np.ndarray], float] | None = None,
    c_coeff: float = 0.0,
) -> list[NodeScheme]:
    """Interior eigenvalue-operator schemes with per-node candidate frames.

    ``frames`` is a FrameSet, an (F, 3, 3) array shared by all nodes, or a dict
    node -> array (the multilevel policy).  ``scale`` multiplies every term
    (must be positive to preserve monotonicity); ``c_coeff`` couples the scheme
    to the global eigenvalue unknown.
    """
    spec.validate()

    # group the needed (direction -> nodes) so stencils build in batches
    by_dir: dict[tuple, list[int]] = {}
    key_of: dict[tuple, tuple] = {}
    for node in range(cloud.n_interior):
        for fr in _frames_for(node, frames):
            for v in fr:
                vt = (int(v[0]), int(v[1]), int(v[2]))
                key = key_of.get(vt)
                if key is None:
                    key = st.direction_key(np.asarray(vt, dtype=float))
                    key_of[vt] = key
                by_dir.setdefault(key, []).append(node)
    for key, nodes in by_dir.items():
        vt = next(v for v, k in key_of.items() if k == key)
        st.ensure_second_stencils(cloud, np.asarray(vt, dtype=float), nodes)

    lower_affine = spec.pair.code == "linear" and spec.addend is None
    cache = cloud._stencil_cache
    out = []
    for node in range(cloud.n_interior):
        p = cloud.points[node]
        node_frames = np.asarray(_frames_for(node, frames))
        sc = float(scale(p)) if scale is not None else 1.0
        if sc <= 0.0:
            raise ConfigurationError(f"nonpositive scheme scale {sc:g} at node {node}")
        stencils_per_frame = []
        for fr in node_frames:
            row = []
            for v in fr:
                sten = cache[("second", node, key_of[(int(v[0]), int(v[1]), int(v[2]))])]
                if isinstance(sten, st.StencilError):
                    raise ConfigurationError(
                        f"stencil failure at interior node {node} along {v}: {sten}"
                    ) from sten
                row.append(sten)
            stencils_per_frame.append(row)
        const = float(spec.source(p)) * sc if spec.source is not None else 0.0
        if lower_affine:
            # -(q1 + q2 + q3) per frame is affine: one monotone branch per frame
            scales = np.full(3, -sc)
            branches = [
                Branch(stencils=row, scales=scales, const=const, c_coeff=c_coeff)
                for row in stencils_per_frame
            ]
            out.append(
                NodeScheme(
                    node=node, kind="branches", branches=branches, frames=node_frames
                )
            )
            continue
        pairs = [spec.pair] + ([spec.addend] if spec.addend is not None else [])
        terms = [
            EigenTerm(pair=pair, frames=node_frames, stencils=stencils_per_frame, scale=sc)
            for pair in pairs
        ]
        out.append(
            NodeScheme(
                node=node,
                kind="eigen",
                terms=terms,
                const=const,
                c_coeff=c_coeff,
                frames=node_frames,
            )
        )
    return out
