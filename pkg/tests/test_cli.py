import os

import numpy as np
import pytest

from monofem.cli import (EXIT_CONFIG, EXIT_IO, EXIT_OK, ConfigError, main,
                         parse_config, read_csv, run_command, write_csv)


def test_empty_config_gives_desk_defaults():
    cfg = parse_config("")
    assert cfg.mesh_n == 32
    assert cfg.tau == 0.05
    assert cfg.t_end == 2.0
    assert cfg.A == 8.0 and cfg.a == 0.15 and cfg.eps == 0.2 and cfg.M == 1.0
    assert cfg.tol == 1e-14
    assert cfg.sigma == 0.1
    assert cfg.probe == (0.5, 0.5)


def test_paper_preset():
    cfg = parse_config("[run]\npreset = paper-fig2-fine\n")
    assert (cfg.mesh_n, cfg.tau, cfg.t_end) == (80, 0.025, 16.0)


def test_explicit_keys_override_preset():
    cfg = parse_config("[run]\npreset = paper-fig2-fine\ntau = 0.05\n")
    assert cfg.mesh_n == 80
    assert cfg.tau == 0.05


def test_overrides_win_over_file():
    cfg = parse_config("[run]\nmesh_n = 16\n",
                       overrides=["run.mesh_n=64", "newton.tol=1e-12"])
    assert cfg.mesh_n == 64
    assert cfg.tol == 1e-12


def test_rejects_out_of_range_threshold():
    with pytest.raises(ConfigError, match="a must lie"):
        parse_config("[params]\na = 1.5\n")


def test_rejects_unknown_keys_and_sections():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[run]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError, match="unknown preset"):
        parse_config("[run]\npreset = nope\n")


def test_parse_error_carries_line_number():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("key before any section\n")


def test_validation_names_the_key():
    with pytest.raises(ConfigError, match="tau"):
        parse_config("[run]\ntau = -0.5\n")
    with pytest.raises(ConfigError, match="mode"):
        parse_config("[newton]\nmode = magic\n")
    with pytest.raises(ConfigError, match="ladder"):
        parse_config("[study]\nladder = 8:0.1,12:0.05\n")
    with pytest.raises(ConfigError, match="expected a number"):
        parse_config("[run]\ntau = fast\n")


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        parse_config("", overrides=["mesh_n=8"])
    with pytest.raises(ConfigError):
        parse_config("", overrides=["run.mesh_n"])


def test_csv_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    values = list(rng.standard_normal(20))
    values += [1e-308, 1.7976931348623157e308, 0.1, 2.0 / 3.0, -0.0]
    rows = [(i, float(v)) for i, v in enumerate(values)]
    path = tmp_path / "t.csv"
    write_csv(["i", "x"], rows, path)
    header, back = read_csv(path)
    assert header == ["i", "x"]
    for (i, v), (j, w) in zip(rows, back):
        assert i == j
        assert v == w and np.signbit(v) == np.signbit(w)


def test_csv_empty_table_writes_header_only(tmp_path):
    path = tmp_path / "e.csv"
    write_csv(["a", "b"], [], path)
    assert path.read_text().strip() == "a,b"


def test_csv_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        write_csv(["x"], [(float("nan"),)], tmp_path / "bad.csv")
    with pytest.raises(ValueError):
        write_csv(["x"], [(float("inf"),)], tmp_path / "bad.csv")


@pytest.fixture
def out_env(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv("MONOFEM_OUT", str(out))
    return out


def _mini(*extra):
    base = ["--set", "run.mesh_n=8", "--set", "run.tau=0.125",
            "--set", "run.t_end=0.25"]
    return base + list(extra)


def test_solve_command_artifacts(out_env):
    rc = main(["solve"] + _mini("--set", "output.vtk_every=1"))
    assert rc == EXIT_OK
    files = sorted(os.listdir(out_env))
    assert "trajectory.npz" in files
    assert "probe.csv" in files
    assert "state_000000.vtk" in files and "state_000002.vtk" in files
    header, rows = read_csv(out_env / "probe.csv")
    assert header == ["t", "u_probe", "w_probe"]
    assert len(rows) == 3
    assert rows[0][0] == 0.0 and rows[-1][0] == 0.25


def test_solve_default_step_count(out_env):
    # t_end/tau + 1 checkpoint states on the default schedule
    rc = main(["solve", "--set", "run.mesh_n=8"])
    assert rc == EXIT_OK
    from monofem.solver import TrajectorySolution
    traj = TrajectorySolution.load(out_env / "trajectory.npz")
    assert traj.U.shape[0] == 41


def test_solve_is_reproducible(tmp_path, monkeypatch):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        monkeypatch.setenv("MONOFEM_OUT", str(out))
        assert main(["solve"] + _mini()) == EXIT_OK
        outs.append((out / "probe.csv").read_bytes())
    assert outs[0] == outs[1]


def test_upperbound_command(out_env):
    rc = main(["upperbound"] + _mini("--set", "study.reference_n=32",
                                     "--set", "study.reference_tau=0.015625",
                                     "--set", "study.reference_tol=1e-13"))
    assert rc == EXIT_OK
    header, rows = read_csv(out_env / "upperbound.csv")
    assert header == ["t", "error", "estimator", "effectivity"]
    assert len(rows) == 2
    est = [r[2] for r in rows]
    assert est[1] >= est[0] >= 0.0
    for t, err, bound, eff in rows:
        assert bound >= err


def test_upperbound_rejects_non_power_reference(out_env):
    rc = main(["upperbound"] + _mini("--set", "study.reference_n=24"))
    assert rc == EXIT_CONFIG


def test_convergence_command(out_env):
    rc = main(["convergence",
               "--set", "run.t_end=0.25",
               "--set", "study.ladder=4:0.125,8:0.0625",
               "--set", "study.reference_n=16",
               "--set", "study.reference_tau=0.015625",
               "--set", "study.reference_tol=1e-13"])
    assert rc == EXIT_OK
    header, rows = read_csv(out_env / "convergence.csv")
    assert header == ["n", "h", "h_max", "tau", "error", "estimator",
                      "effectivity"]
    assert [r[0] for r in rows] == [4, 8]
    assert rows[0][2] == pytest.approx(np.sqrt(2) / 4)   # true max diameter
    _, orders = read_csv(out_env / "orders.csv")
    assert np.isfinite(orders[0][0]) and np.isfinite(orders[0][1])


def test_newton_study_command(out_env):
    rc = main(["newton-study",
               "--set", "study.newton_n=8",
               "--set", "study.newton_tau=0.125",
               "--set", "study.instants=0.25",
               "--set", "study.reference_tol=1e-15"])
    assert rc == EXIT_OK
    header, rows = read_csv(out_env / "newton_study.csv")
    assert header == ["t", "k", "gamma", "error_combined", "error_u_h1",
                      "error_w_l2"]
    assert all(r[0] == 0.25 for r in rows)
    ks = [r[1] for r in rows]
    assert ks == list(range(1, len(ks) + 1))


def test_missing_config_file_is_io_error(tmp_path):
    rc = main(["solve", "--config", str(tmp_path / "absent.ini")])
    assert rc == EXIT_IO


def test_config_file_is_read(tmp_path, out_env):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nmesh_n = 8\ntau = 0.125\nt_end = 0.125\n")
    assert main(["solve", "--config", str(ini)]) == EXIT_OK


def test_bad_config_exit_code(out_env):
    assert main(["solve", "--set", "params.a=2.0"]) == EXIT_CONFIG


def test_run_command_rejects_unknown():
    with pytest.raises(ConfigError):
        run_command("frobnicate", parse_config(""))
