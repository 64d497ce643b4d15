"""Nonlinear solver: argmax freezing plus Gauss-Seidel sweeps.

Each outer iteration refreshes the active branch (or frames) of every node at
the current iterate, then runs a fixed number of symmetric Gauss-Seidel passes
applying the frozen local inverses.  Eigenvalue problems carry an extra scalar
unknown updated by projecting the mean interior residual, with the pin value
re-imposed by a global shift (all schemes except Dirichlet are translation
invariant).  Structured schemes are compiled to flat arrays and iterated in
numba kernels; schemes with a generic callable fall back to a pure-Python loop.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels, operators

logger = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    tolerance: float = 1e-8
    max_outer: int = 5000
    inner_sweeps: int = 10
    sweep_order: str = "lex"  # interior in lattice order, then boundary
    c_relaxation: float = 1.0
    log_every: int = 25

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.inner_sweeps < 1:
            raise ValueError("inner_sweeps must be >= 1")


@dataclass
class SolveState:
    u: np.ndarray
    c: float | None = None
    residual_history: list = field(default_factory=list)
    converged: bool = False
    outer_iterations: int = 0

    @property
    def residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else np.inf


class CompiledSystem:
    """Flat-array form of a scheme list, ready for the numba kernels."""

    def __init__(self, schemes, n_nodes: int):
        nodes_seen = np.zeros(n_nodes, dtype=bool)
        for s in schemes:
            if nodes_seen[s.node]:
                raise operators.ConfigurationError(f"node {s.node} has two schemes")
            nodes_seen[s.node] = True
        if not nodes_seen.all():
            missing = int(np.flatnonzero(~nodes_seen)[0])
            raise operators.ConfigurationError(f"node {missing} has no scheme")

        self.schemes = sorted(schemes, key=lambda s: s.node)
        self.n = n_nodes
        kind = np.zeros(n_nodes, dtype=np.int8)
        gval = np.zeros(n_nodes)
        nconst = np.zeros(n_nodes)
        nccoef = np.zeros(n_nodes)
        nbp = np.zeros(n_nodes + 1, dtype=np.int64)
        ntp = np.zeros(n_nodes + 1, dtype=np.int64)
        bp, bconst, bccoef = [], [], []
        bep = [0]
        ben, bew = [], []
        tphi, tscale = [], []
        tfp = [0]
        fsp = [0]
        fsn, fsa, fasum = [], [], []
        phis = {"logmax": _kernels.PHI_CODE_LOGMAX, "min0": _kernels.PHI_CODE_MIN0,
                "atan": _kernels.PHI_CODE_ATAN}

        for s in self.schemes:
            i = s.node
            if s.kind == "dirichlet":
                kind[i] = _kernels.KIND_DIRICHLET
                gval[i] = s.g
            elif s.kind == "branches":
                kind[i] = _kernels.KIND_BRANCHES
                for br in s.branches:
                    p = br.u_coeff
                    for scale, sten in zip(br.scales, br.stencils):
                        p -= scale * float(np.sum(sten.coefficients))
                        for nb_id, a in zip(sten.neighbors, sten.coefficients):
                            ben.append(nb_id)
                            bew.append(scale * a)
                    if p < -1e-12:
                        raise operators.ConfigurationError(
                            f"branch at node {i} decreases in u(x) (p={p:g})"
                        )
                    bp.append(p)
                    bconst.append(br.const)
                    bccoef.append(br.c_coeff)
                    bep.append(len(ben))
                nbp[i + 1] = len(bp)
            elif s.kind == "eigen":
                kind[i] = _kernels.KIND_EIGEN
                nconst[i] = s.const
                nccoef[i] = s.c_coeff
                for term in s.terms:
                    if term.pair.code == "linear":
                        raise operators.ConfigurationError(
                            "linear eigenvalue terms should be lowered to branches"
                        )
                    tphi.append(phis[term.pair.code])
                    tscale.append(term.scale)
                    for row in term.stencils:
                        for sten in row:
                            for nb_id, a in zip(sten.neighbors, sten.coefficients):
                                fsn.append(nb_id)
                                fsa.append(a)
                            fasum.append(float(np.sum(sten.coefficients)))
                            fsp.append(len(fsn))
                    tfp.append(tfp[-1] + len(term.stencils))
                ntp[i + 1] = len(tphi)
            else:
                raise operators.ConfigurationError(
                    f"cannot compile scheme kind {s.kind!r}"
                )
        # pointers are cumulative; fill the gaps for nodes without entries
        np.maximum.accumulate(nbp, out=nbp)
        np.maximum.accumulate(ntp, out=ntp)

        self.kind = kind
        self.gval = gval
        self.nconst = nconst
        self.nccoef = nccoef
        self.nbp = nbp
        self.bp = np.asarray(bp)
        self.bconst = np.asarray(bconst)
        self.bccoef = np.asarray(bccoef)
        self.bep = np.asarray(bep, dtype=np.int64)
        self.ben = np.asarray(ben, dtype=np.int64)
        self.bew = np.asarray(bew)
        self.ntp = ntp
        self.tphi = np.asarray(tphi, dtype=np.int8)
        self.tscale = np.asarray(tscale)
        self.tfp = np.asarray(tfp, dtype=np.int64)
        self.fsp = np.asarray(fsp, dtype=np.int64)
        self.fsn = np.asarray(fsn, dtype=np.int64)
        self.fsa = np.asarray(fsa)
        self.fasum = np.asarray(fasum)
        self.order = np.arange(n_nodes, dtype=np.int64)
        self.frozen_branch = np.full(n_nodes, -1, dtype=np.int64)
        self.frozen_frame = np.full(len(self.tphi), -1, dtype=np.int64)
        # effective per-node coefficient on the eigenvalue unknown
        ccoef_eff = nccoef.copy()
        for i in range(n_nodes):
            if kind[i] == _kernels.KIND_BRANCHES and self.nbp[i + 1] > self.nbp[i]:
                cc = self.bccoef[self.nbp[i] : self.nbp[i + 1]]
                if np.any(cc != 0.0):
                    if not np.all(cc == cc[0]):
                        raise operators.ConfigurationError(
                            f"node {i} mixes branches with different c coefficients"
                        )
                    ccoef_eff[i] = cc[0]
        self.ccoef_eff = ccoef_eff
        self.c_nodes = np.flatnonzero(ccoef_eff != 0.0)
        self.all_affine = not np.any(kind == _kernels.KIND_EIGEN)

    def evaluate(self, u, c, write_frozen=False):
        res = np.empty(self.n)
        _kernels.evaluate_system(
            u, c, self.kind, self.gval, self.nconst, self.nccoef,
            self.nbp, self.bp, self.bconst, self.bccoef, self.bep, self.ben, self.bew,
            self.ntp, self.tphi, self.tscale, self.tfp, self.fsp, self.fsn, self.fsa,
            self.fasum, res, self.frozen_branch, self.frozen_frame, write_frozen,
        )
        return res

    def sweep(self, u, c, forward=True):
        status = _kernels.gs_sweep(
            u, c, self.order, forward, self.kind, self.gval, self.nconst, self.nccoef,
            self.nbp, self.bp, self.bconst, self.bccoef, self.bep, self.ben, self.bew,
            self.ntp, self.tphi, self.tscale, self.tfp, self.fsp, self.fsn, self.fsa,
            self.fasum, self.frozen_branch, self.frozen_frame,
        )
        if status != 0:
            raise operators.NonmonotoneLocal(
                f"local inverse failed to bracket at node {-status - 1}"
            )

    def writeback_frozen(self):
        """Copy the frozen argmax choices back onto the scheme objects."""
        for s in self.schemes:
            if s.kind == "branches":
                b = self.frozen_branch[s.node]
                if b >= 0:
                    s.frozen_choice = int(b - self.nbp[s.node])
            elif s.kind == "eigen":
                lo = self.ntp[s.node]
                choice = []
                for t in range(lo, self.ntp[s.node + 1]):
                    f = self.frozen_frame[t]
                    choice.append(int(f - self.tfp[t]) if f >= 0 else None)
                s.frozen_choice = tuple(choice)


def _n_nodes(schemes) -> int:
    return max(s.node for s in schemes) + 1


def _initial_state(schemes, n_nodes, init, eigen):
    if init is not None:
        u = np.array(init.u, dtype=float, copy=True)
        c = init.c if init.c is not None else 0.0
    else:
        u = np.zeros(n_nodes)
        for s in schemes:
            if s.kind == "dirichlet":
                u[s.node] = s.g
        c = 0.0
    return u, (c if eigen else None)


def solve(schemes, config: SolverConfig | None = None, init: SolveState | None = None) -> SolveState:
    """Iterate argmax refreshes and Gauss-Seidel sweeps until the residual drops.

    Returns a state flagged converged when the max-norm residual reaches the
    tolerance; hitting the iteration cap returns the state unconverged rather
    than raising.
    """
    config = config or SolverConfig()
    if any(s.kind == "custom" for s in schemes):
        return _solve_python(schemes, config, init)
    n_nodes = _n_nodes(schemes)
    system = CompiledSystem(schemes, n_nodes)
    u, _ = _initial_state(schemes, n_nodes, init, eigen=False)
    state = SolveState(u=u, c=None)
    _iterate(system, state, config, pin=None)
    system.writeback_frozen()
    return state


def solve_eigenvalue(
    schemes,
    pin: int,
    config: SolverConfig | None = None,
    init: SolveState | None = None,
) -> SolveState:
    """Solve a problem with an unknown scalar shift and the pin value u(pin) = 0.

    After each sweep block the scalar is moved by the mean unshifted interior
    residual and the pin is re-imposed by subtracting u(pin) from all nodes,
    which leaves every non-Dirichlet scheme invariant.
    """
    config = config or SolverConfig()
    if any(s.kind == "dirichlet" for s in schemes):
        raise operators.ConfigurationError(
            "eigenvalue problems cannot contain Dirichlet schemes "
            "(the pin shift would violate them)"
        )
    n_nodes = _n_nodes(schemes)
    system = CompiledSystem(schemes, n_nodes)
    if len(system.c_nodes) == 0:
        raise operators.ConfigurationError("no scheme couples to the eigenvalue unknown")
    u, c = _initial_state(schemes, n_nodes, init, eigen=True)
    u -= u[pin]
    state = SolveState(u=u, c=c)
    _iterate(system, state, config, pin=pin)
    system.writeback_frozen()
    return state


def _iterate(system: CompiledSystem, state: SolveState, config: SolverConfig, pin):
    u = state.u
    c = state.c if state.c is not None else 0.0
    eigen = pin is not None
    prev_residual = np.inf
    t0 = time.time()
    for outer in range(1, config.max_outer + 1):
        system.evaluate(u, c, write_frozen=True)
        for _ in range(config.inner_sweeps):
            system.sweep(u, c, forward=True)
            system.sweep(u, c, forward=False)
        dc = 0.0
        res = system.evaluate(u, c)
        if eigen:
            # project the scalar so the mean interior residual vanishes, then
            # re-impose the pin by a global shift (translation invariance)
            w = system.ccoef_eff[system.c_nodes]
            dc = -float(res[system.c_nodes] @ w) / float(w @ w)
            dc *= config.c_relaxation
            c += dc
            res[system.c_nodes] += w * dc
            u -= u[pin]
        residual = float(np.abs(res).max())
        state.residual_history.append(residual)
        state.outer_iterations = outer
        if system.all_affine and residual > prev_residual + 1e-12:
            logger.debug(
                "residual increased on an affine system: %.3e -> %.3e", prev_residual, residual
            )
        prev_residual = residual
        if outer % config.log_every == 0 or residual <= config.tolerance:
            logger.info(
                "iter=%d residual=%.6e c=%s",
                outer,
                residual,
                f"{c:.12g}" if eigen else "-",
            )
        if residual <= config.tolerance and (not eigen or abs(dc) <= config.tolerance):
            state.converged = True
            break
    state.c = c if eigen else None
    logger.info(
        "%s after %d iterations, residual=%.3e, %.2fs",
        "converged" if state.converged else "NOT converged",
        state.outer_iterations,
        state.residual,
        time.time() - t0,
    )
    return state


def _solve_python(schemes, config: SolverConfig, init: SolveState | None) -> SolveState:
    """Reference path for scheme lists containing generic callables."""
    n_nodes = _n_nodes(schemes)
    ordered = sorted(schemes, key=lambda s: s.node)
    u, _ = _initial_state(schemes, n_nodes, init, eigen=False)
    state = SolveState(u=u, c=None)
    for outer in range(1, config.max_outer + 1):
        for s in ordered:
            operators.refresh_choice(s, u)
        for _ in range(config.inner_sweeps):
            for s in ordered:
                u[s.node] = operators.local_inverse(s, u)
            for s in reversed(ordered):
                u[s.node] = operators.local_inverse(s, u)
        residual = max(abs(operators.local_residual(s, u)) for s in ordered)
        state.residual_history.append(residual)
        state.outer_iterations = outer
        if residual <= config.tolerance:
            state.converged = True
            break
    return state


def prolong(coarse: SolveState, coarse_cloud, fine_cloud) -> SolveState:
    """Transfer a coarse solution to a finer cloud of the same domain.

    Fine points inside a complete coarse lattice cell interpolate trilinearly;
    all others (boundary points, cells cut by the domain) take a local affine
    least squares fit through nearby coarse values, which reproduces affine
    data exactly.  The eigenvalue estimate carries over unchanged.
    """
    lo, _ = coarse_cloud.domain.bounding_cube
    h = coarse_cloud.params.h
    n = coarse_cloud.params.n
    ijk = coarse_cloud.lattice_ijk
    id_grid = np.full((n + 1, n + 1, n + 1), -1, dtype=np.int64)
    id_grid[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = np.arange(coarse_cloud.n_interior)

    fine_u = np.empty(len(fine_cloud.points))
    tree = cKDTree(coarse_cloud.points)
    uc = coarse.u
    for i, p in enumerate(fine_cloud.points):
        cell = np.floor((p - lo) / h).astype(np.int64)
        cell = np.clip(cell, 0, n - 1)
        corners = []
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    corners.append(id_grid[cell[0] + di, cell[1] + dj, cell[2] + dk])
        if all(cid >= 0 for cid in corners):
            f = (p - (lo + cell * h)) / h
            wx, wy, wz = f
            vals = uc[np.asarray(corners)]
            # corners ordered with k fastest: (di, dj, dk) lexicographic
            c00 = vals[0] * (1 - wz) + vals[1] * wz
            c01 = vals[2] * (1 - wz) + vals[3] * wz
            c10 = vals[4] * (1 - wz) + vals[5] * wz
            c11 = vals[6] * (1 - wz) + vals[7] * wz
            fine_u[i] = ((c00 * (1 - wy) + c01 * wy) * (1 - wx)
                         + (c10 * (1 - wy) + c11 * wy) * wx)
        else:
            radius = 2.5 * h
            for _ in range(6):
                near = tree.query_ball_point(p, radius)
                if len(near) >= 8:
                    break
                radius *= 1.6
            near = np.sort(np.asarray(near, dtype=np.int64))
            A = np.column_stack(
                [np.ones(len(near)), coarse_cloud.points[near] - p]
            )
            coef, *_ = np.linalg.lstsq(A, uc[near], rcond=None)
            fine_u[i] = coef[0]
    return SolveState(u=fine_u, c=coarse.c)


def solve_multilevel(
    problem,
    cloud,
    hierarchy,
    k_star: int,
    config: SolverConfig | None = None,
    init: SolveState | None = None,
) -> SolveState:
    """Solve an eigen-operator problem over a growing frame hierarchy.

    Level 1 uses every width-1 frame at every node; each later level restricts
    a node to the frames aligned with its previous argmax (union over operator
    terms when there are two).  Every level warm-starts from the last.
    """
    from . import frames as fr

    config = config or SolverConfig()
    k_star = max(1, min(k_star, hierarchy.k_max))
    frames_per_node = hierarchy.levels[1].frames
    state = init
    for k in range(1, k_star + 1):
        schemes = problem.assemble(cloud, frames_per_node)
        if problem.eigenvalue:
            state = solve_eigenvalue(schemes, problem.pin_node(cloud), config, init=state)
        else:
            state = solve(schemes, config, init=state)
        if k == k_star:
            break
        nxt = {}
        for s in schemes:
            if s.frames is None or s.frozen_choice is None:
                continue
            idxs = s.frozen_choice if s.kind == "eigen" else (s.frozen_choice,)
            seen = set()
            rows = []
            for fidx in idxs:
                if fidx is None:
                    continue
                for fr_row in fr.expand_frame(hierarchy, s.frames[fidx], k):
                    key = tuple(int(x) for x in fr_row.reshape(-1))
                    if key not in seen:
                        seen.add(key)
                        rows.append(fr_row)
            nxt[s.node] = np.array(rows, dtype=np.int64)
        frames_per_node = nxt
    return state
