"""Convergence-study harness: orchestration, CSV output, convergence figures.

A study runs one benchmark problem over an increasing list of lattice counts,
warm-starting each resolution from the previous one, and records max errors
against the exact solution together with a least-squares convergence rate in h.
The CSV layout is the machine-readable contract; a log-log error figure is
rendered next to it for quick inspection.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import frames as fr
from . import problems as pb
from . import solver as sv
from .operators import ConfigurationError

logger = logging.getLogger(__name__)

CSV_HEADER = "n,h,interior,boundary,max_error,rate_running,iters,seconds,c"
DEFAULT_NS = (8, 12, 16, 20)
DEFAULT_KMAX = 5


@dataclass
class StudyConfig:
    problem: str
    ns: tuple = DEFAULT_NS
    tolerance: float = 1e-8
    max_outer: int = 5000
    k_max: int = DEFAULT_KMAX
    out: str | None = None
    seed: int = 0
    warm_start: bool = True
    cache: str | None = None
    plot: bool = True
    timings: bool = False

    def __post_init__(self):
        self.ns = tuple(int(n) for n in self.ns)
        if any(n < 6 for n in self.ns):
            raise ConfigurationError("lattice counts must be >= 6")
        if any(b <= a for a, b in zip(self.ns, self.ns[1:])):
            raise ConfigurationError("lattice counts must be strictly increasing")
        if self.problem not in pb.PROBLEM_NAMES:
            raise ConfigurationError(
                f"unknown problem {self.problem!r}; known: {', '.join(pb.PROBLEM_NAMES)}"
            )


@dataclass
class StudyRecord:
    n: int
    h: float
    interior: int
    boundary: int
    max_error: float
    converged: bool
    iters: int
    seconds: float
    c: float | None = None


@dataclass
class StudyResult:
    problem: str
    records: list[StudyRecord] = field(default_factory=list)
    rate: float | None = None

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.records)

    def fit_rate(self) -> float | None:
        """Least-squares slope of log max error against log h (>= 3 points)."""
        pts = [(r.h, r.max_error) for r in self.records if r.max_error > 0]
        if len(pts) < 3:
            return None
        hs, es = zip(*pts)
        self.rate = float(np.polyfit(np.log(hs), np.log(es), 1)[0])
        return self.rate


def default_cache_path(k_max: int) -> str:
    env = os.environ.get("ELLIPT3D_CACHE")
    if env:
        return env
    return os.path.join(
        os.path.expanduser("~"), ".cache", "ellipt3d", f"frames-k{k_max}.txt"
    )


def precompute_frames(k_max: int, cache_path: str | None = None) -> str:
    """Build the frame hierarchy and store it; returns the cache path."""
    path = cache_path or default_cache_path(k_max)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    hier = fr.build_hierarchy(k_max)
    fr.save_hierarchy(hier, path)
    logger.info("wrote frame cache k_max=%d to %s", k_max, path)
    return path


def load_or_build_hierarchy(k_max: int, cache_path: str | None = None) -> fr.FrameHierarchy:
    """Load the frame cache, rebuilding (with a warning) when unusable."""
    path = cache_path or default_cache_path(k_max)
    if os.path.exists(path):
        try:
            hier = fr.load_hierarchy(path)
            if hier.k_max >= k_max:
                return hier
            logger.warning(
                "frame cache %s has k_max=%d < %d; rebuilding", path, hier.k_max, k_max
            )
        except fr.FrameCacheError as exc:
            logger.warning("frame cache %s unusable (%s); rebuilding", path, exc)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    hier = fr.build_hierarchy(k_max)
    fr.save_hierarchy(hier, path)
    return hier


def _solve_once(problem, cloud, hierarchy, config, init):
    solver_cfg = sv.SolverConfig(tolerance=config.tolerance, max_outer=config.max_outer)
    if problem.uses_frames:
        k_star = min(pb.stencil_width_cap(cloud), config.k_max)
        return sv.solve_multilevel(
            problem, cloud, hierarchy, k_star, solver_cfg, init=init
        )
    schemes = problem.assemble(cloud, None)
    if problem.eigenvalue:
        return sv.solve_eigenvalue(schemes, problem.pin_node(cloud), solver_cfg, init=init)
    return sv.solve(schemes, solver_cfg, init=init)


def max_error(problem, cloud, state) -> float:
    """Max-norm error against the exact solution over every cloud point."""
    uex = problem.exact(cloud.points)
    if problem.eigenvalue:
        uex = uex - uex[problem.pin_node(cloud)]
    return float(np.abs(state.u - uex).max())


def run_study(config: StudyConfig) -> StudyResult:
    """Run one problem over all lattice counts, fitting the convergence rate.

    Non-converged resolutions are recorded and the study continues.  Outputs
    (CSV and figure) are written when an output path is configured.
    """
    problem = pb.problem(config.problem)
    hierarchy = None
    if problem.uses_frames:
        # the width cap floor(eps/h) equals floor(sqrt(n)) for every domain
        k_need = min(max(math.isqrt(n) for n in config.ns), config.k_max)
        hierarchy = load_or_build_hierarchy(max(k_need, 1), config.cache)

    result = StudyResult(problem=config.problem)
    state = None
    prev_cloud = None
    for n in config.ns:
        t0 = time.time()
        cloud = problem.build_cloud(n)
        init = None
        if config.warm_start and state is not None:
            init = sv.prolong(state, prev_cloud, cloud)
        state = _solve_once(problem, cloud, hierarchy, config, init)
        err = max_error(problem, cloud, state)
        record = StudyRecord(
            n=n,
            h=cloud.params.h,
            interior=cloud.n_interior,
            boundary=cloud.n_boundary,
            max_error=err,
            converged=state.converged,
            iters=state.outer_iterations,
            seconds=time.time() - t0,
            c=state.c,
        )
        result.records.append(record)
        logger.info(
            "%s n=%d: err=%.6g converged=%s iters=%d c=%s (%.1fs)",
            config.problem, n, err, state.converged, state.outer_iterations,
            record.c, record.seconds,
        )
        prev_cloud = cloud
    result.fit_rate()
    if config.out:
        emit_csv(result, config.out, include_timings=config.timings)
        if config.plot:
            render_convergence_figure(result, os.path.splitext(config.out)[0] + ".png")
    return result


def _fmt(x) -> str:
    return f"{x:.17g}"


def emit_csv(result: StudyResult, path, include_timings: bool = False) -> None:
    """Write one row per lattice count with deterministic formatting.

    The running rate column holds the fit over the rows so far (blank on the
    first row).  Timing cells stay blank unless requested, keeping the bytes
    reproducible across identical runs.
    """
    lines = [CSV_HEADER]
    for i, r in enumerate(result.records):
        sub = StudyResult(problem=result.problem, records=result.records[: i + 1])
        rate = sub.fit_rate()
        cells = [
            str(r.n),
            _fmt(r.h),
            str(r.interior),
            str(r.boundary),
            _fmt(r.max_error),
            _fmt(rate) if rate is not None else "",
            str(r.iters),
            _fmt(r.seconds) if include_timings else "",
            _fmt(r.c) if r.c is not None else "",
        ]
        lines.append(",".join(cells))
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ConfigurationError(f"cannot write CSV to {path}: {exc}") from exc


def parse_csv(path) -> StudyResult:
    """Read back a study CSV (used by tests for round-trip checks)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ConfigurationError(f"unrecognized CSV header in {path}")
    result = StudyResult(problem="")
    for ln in lines[1:]:
        cells = ln.split(",")
        result.records.append(
            StudyRecord(
                n=int(cells[0]),
                h=float(cells[1]),
                interior=int(cells[2]),
                boundary=int(cells[3]),
                max_error=float(cells[4]),
                converged=True,
                iters=int(cells[6]),
                seconds=float(cells[7]) if cells[7] else 0.0,
                c=float(cells[8]) if cells[8] else None,
            )
        )
    result.fit_rate()
    return result


def render_convergence_figure(result: StudyResult, path) -> None:
    """Log-log max error against h with the fitted slope annotated."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    hs = np.array([r.h for r in result.records])
    es = np.array([r.max_error for r in result.records])
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    ax.loglog(hs, es, "o-", label="max error")
    if len(hs) >= 2:
        ref = es[-1] * np.sqrt(hs / hs[-1])
        ax.loglog(hs, ref, "k--", alpha=0.5, label=r"slope $\frac{1}{2}$")
    title = result.problem
    if result.rate is not None:
        title += f"  (fitted rate {result.rate:.2f})"
    ax.set_title(title)
    ax.set_xlabel("h")
    ax.set_ylabel("max error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
