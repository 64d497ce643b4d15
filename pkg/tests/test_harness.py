import subprocess
import sys

import numpy as np
import pytest

from ellipt3d import frames as fr
from ellipt3d import harness
from ellipt3d.cli import main as cli_main
from ellipt3d.operators import ConfigurationError


def small_study(tmp_path, name="two-operator", ns=(8, 10, 12), **kw):
    tmp_path.mkdir(parents=True, exist_ok=True)
    out = tmp_path / f"{name}.csv"
    config = harness.StudyConfig(problem=name, ns=ns, out=str(out), plot=False, **kw)
    return harness.run_study(config), out


def test_registry_covers_all_benchmarks():
    from ellipt3d.problems import PROBLEM_NAMES, problem

    assert set(PROBLEM_NAMES) == {
        "linear-degenerate",
        "two-operator",
        "convex-envelope",
        "monge-ampere",
        "poisson-neumann-eig",
        "minimal-lagrangian",
    }
    for name in PROBLEM_NAMES:
        p = problem(name)
        pts = np.array([[0.05, -0.02, 0.01], [0.1, 0.0, -0.1]])
        assert np.all(np.isfinite(p.exact(pts)))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        harness.StudyConfig(problem="two-operator", ns=(8, 8))
    with pytest.raises(ConfigurationError):
        harness.StudyConfig(problem="two-operator", ns=(4, 8))
    with pytest.raises(ConfigurationError):
        harness.StudyConfig(problem="unknown", ns=(8, 12))


def test_study_runs_and_fits_rate(tmp_path):
    result, out = small_study(tmp_path)
    assert result.all_converged
    assert len(result.records) == 3
    assert result.rate is not None and result.rate > 0
    assert out.exists()


def test_csv_format_and_determinism(tmp_path):
    r1, out1 = small_study(tmp_path / "a")
    r2, out2 = small_study(tmp_path / "b")
    b1, b2 = out1.read_bytes(), out2.read_bytes()
    assert b1 == b2
    lines = b1.decode().splitlines()
    assert lines[0] == harness.CSV_HEADER
    assert len(lines) == 4
    first = lines[1].split(",")
    assert first[0] == "8"
    assert first[5] == ""  # running rate blank on the first row
    assert first[7] == ""  # timings stay blank by default
    third = lines[3].split(",")
    assert third[5] != ""


def test_csv_roundtrip(tmp_path):
    result, out = small_study(tmp_path)
    back = harness.parse_csv(out)
    for a, b in zip(result.records, back.records):
        assert a.n == b.n
        assert a.h == b.h
        assert a.interior == b.interior
        assert a.boundary == b.boundary
        assert a.max_error == b.max_error
        assert a.iters == b.iters
    assert back.rate == pytest.approx(result.rate, abs=1e-15)


def test_csv_empty_study(tmp_path):
    path = tmp_path / "empty.csv"
    harness.emit_csv(harness.StudyResult(problem="x"), path)
    assert path.read_text() == harness.CSV_HEADER + "\n"


def test_timings_column_opt_in(tmp_path):
    result, out = small_study(tmp_path, ns=(8, 10, 12), timings=True)
    rows = out.read_text().splitlines()[1:]
    assert all(r.split(",")[7] != "" for r in rows)


def test_figure_rendering(tmp_path):
    out = tmp_path / "study.csv"
    config = harness.StudyConfig(
        problem="two-operator", ns=(8, 10, 12), out=str(out), plot=True
    )
    harness.run_study(config)
    assert (tmp_path / "study.png").stat().st_size > 5_000


def test_frame_cache_roundtrip_and_rebuild(tmp_path, caplog):
    path = tmp_path / "frames.txt"
    harness.precompute_frames(2, str(path))
    first = path.read_bytes()
    hier = harness.load_or_build_hierarchy(2, str(path))
    assert hier.k_max == 2
    assert path.read_bytes() == first
    # corrupted cache rebuilds with a warning
    path.write_text("garbage\n")
    import logging

    with caplog.at_level(logging.WARNING, logger="ellipt3d.harness"):
        hier = harness.load_or_build_hierarchy(2, str(path))
    assert hier.k_max == 2
    assert any("rebuild" in r.getMessage() for r in caplog.records)
    assert path.read_bytes() == first
    # a cache built for smaller k_max also rebuilds
    harness.precompute_frames(1, str(path))
    hier = harness.load_or_build_hierarchy(2, str(path))
    assert hier.k_max == 2


def test_frame_cache_kmax1_serves_level1(tmp_path):
    path = tmp_path / "frames1.txt"
    harness.precompute_frames(1, str(path))
    hier = harness.load_or_build_hierarchy(1, str(path))
    assert len(hier.levels[1]) == len(fr.enumerate_frames(1))


def test_env_var_cache_path(tmp_path, monkeypatch):
    monkeypatch.setenv("ELLIPT3D_CACHE", str(tmp_path / "envcache.txt"))
    assert harness.default_cache_path(3) == str(tmp_path / "envcache.txt")


def test_cli_exit_codes(tmp_path):
    out = tmp_path / "cli.csv"
    rc = cli_main(
        ["study", "--problem", "two-operator", "--ns", "8,10,12",
         "--out", str(out), "--no-plot", "-q"]
    )
    assert rc == 0
    assert out.exists()
    assert cli_main(["study", "--problem", "bogus", "--ns", "8,10", "-q"]) == 1
    assert cli_main(["study", "--problem", "two-operator", "--ns", "8,x", "-q"]) == 1
    assert cli_main(["bogus-command"]) == 1


def test_cli_nonconvergence_exit_code(tmp_path, monkeypatch):
    import ellipt3d.solver as sv

    orig = sv.SolverConfig

    def tiny(*args, **kw):
        kw["max_outer"] = 1
        kw["inner_sweeps"] = 1
        return orig(*args, **kw)

    monkeypatch.setattr("ellipt3d.harness.sv.SolverConfig", tiny)
    rc = cli_main(["solve", "--problem", "two-operator", "--n", "8", "-q", "--no-plot"])
    assert rc == 2


def test_cli_frames_subcommand(tmp_path):
    path = tmp_path / "cache.txt"
    rc = cli_main(["frames", "--kmax", "1", "--cache", str(path), "-q"])
    assert rc == 0
    assert path.exists()


def test_cli_study_subprocess_byte_identical(tmp_path):
    outs = []
    for tag in ("x", "y"):
        out = tmp_path / f"{tag}.csv"
        proc = subprocess.run(
            [
                sys.executable, "-m", "ellipt3d.cli", "study",
                "--problem", "linear-degenerate", "--ns", "8,10,12",
                "--out", str(out), "--no-plot", "-q",
            ],
            capture_output=True,
            text=True,
            timeout=300,
        )
        assert proc.returncode == 0, proc.stderr
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
