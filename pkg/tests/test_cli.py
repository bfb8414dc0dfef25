import numpy as np
import pytest
from scipy.linalg import expm

from rcmwalk import UniformizationCache, homogeneous_environment
from rcmwalk.cli import main

FAST_CFG = """
[model]
d = 2
gamma = 2.0
p = 0.9

[grid]
t_min = 5.0
t_max = 60.0
points_per_decade = 8
window_t_min = 5.0
window_t_max = 60.0

[boxes]
N_list = 8

[ensemble]
n_environments = 2
n_paths = 200
master_seed = 42

[output]
directory = {out}
"""


class TestExact:
    def test_homog_matches_dense_oracle(self, tmp_path, capsys):
        code = main(["exact", "--t", "1", "--homog", "--d", "2", "--N", "2", "--out", str(tmp_path)])
        assert code == 0
        printed = float(capsys.readouterr().out.strip())
        env = homogeneous_environment(2, 3)
        cache = UniformizationCache(env, 2)
        L = cache.chain.P.toarray() - np.eye(25)
        oracle = expm(L)[cache.chain.origin, cache.chain.origin]
        assert abs(printed - oracle) <= 1e-10
        assert (tmp_path / "exact_curve.csv").is_file()
        assert (tmp_path / "manifest.txt").is_file()

    def test_needs_environment(self, tmp_path):
        assert main(["exact", "--t", "1", "--out", str(tmp_path)]) == 2


class TestGenerateDecompose:
    def test_pipeline(self, tmp_path):
        gen = tmp_path / "envs"
        assert main(["generate", "--d", "2", "--N", "8", "--gamma", "2.0", "--count", "2",
                     "--seed", "5", "--out", str(gen)]) == 0
        env_file = gen / "env_0000.rcmenv"
        assert env_file.is_file()
        dec = tmp_path / "dec"
        assert main(["decompose", "--env", str(env_file), "--p", "0.8", "--out", str(dec)]) == 0
        lines = (dec / "decomposition.csv").read_text().splitlines()
        assert lines[0] == "site_index,x_1,x_2,label"
        assert len(lines) == 17 * 17 + 1
        assert (dec / "holes_report.csv").is_file()

    def test_generate_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            main(["generate", "--d", "2", "--N", "6", "--gamma", "1.5", "--seed", "9", "--out", str(out)])
        assert (a / "env_0000.rcmenv").read_bytes() == (b / "env_0000.rcmenv").read_bytes()


class TestSpectrumSimulate:
    def test_spectrum_schema(self, tmp_path, capsys):
        gen = tmp_path / "envs"
        main(["generate", "--d", "2", "--N", "9", "--gamma", "2.0", "--seed", "3", "--out", str(gen)])
        out = tmp_path / "spec"
        assert main(["spectrum", "--env", str(gen / "env_0000.rcmenv"), "--out", str(out)]) == 0
        header = (out / "spectral_report.csv").read_text().splitlines()[0]
        assert header == "gamma,d,N,xi_hat,lambda,Lambda1,bound_m_N,pass,residual,iterations"
        assert "Lambda1" in capsys.readouterr().out

    def test_simulate_schema(self, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--homog", "--d", "2", "--N", "6", "--t-min", "1", "--t-max", "5",
                     "--n-paths", "100", "--seed", "3", "--out", str(out)]) == 0
        header = (out / "trajectory_summary.csv").read_text().splitlines()[0]
        assert header == "t,estimate,stderr,n_paths,seed"

    def test_simulate_dump_paths(self, tmp_path):
        out = tmp_path / "sim2"
        assert main(["simulate", "--homog", "--d", "2", "--N", "6", "--t-min", "1", "--t-max", "4",
                     "--n-paths", "50", "--seed", "3", "--dump-paths", "--out", str(out)]) == 0
        assert (out / "paths.npz").is_file()


class TestConfigCommands:
    def test_exponent_run(self, tmp_path, capsys):
        out = tmp_path / "expo"
        cfg = tmp_path / "demo.cfg"
        cfg.write_text(FAST_CFG.format(out=out))
        assert main(["exponent", "--config", str(cfg)]) == 0
        assert (out / "exponent_report.csv").is_file()
        assert (out / "manifest.txt").is_file()
        assert "quenched slope" in capsys.readouterr().out

    def test_missing_config_exit_code(self, tmp_path, capsys):
        assert main(["exponent", "--config", str(tmp_path / "absent.cfg")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_bounds_run(self, tmp_path, capsys):
        out = tmp_path / "bnd"
        cfg = tmp_path / "demo.cfg"
        cfg.write_text(FAST_CFG.format(out=out))
        assert main(["bounds", "--config", str(cfg)]) == 0
        assert (out / "spectral_report.csv").is_file()
        assert "pass rate" in capsys.readouterr().out

    def test_unknown_flag_exits_two(self):
        with pytest.raises(SystemExit) as err:
            main(["exact", "--frobnicate"])
        assert err.value.code == 2


class TestReport:
    def test_verifies_hashes(self, tmp_path, capsys):
        out = tmp_path / "expo"
        cfg = tmp_path / "demo.cfg"
        cfg.write_text(FAST_CFG.format(out=out))
        main(["exponent", "--config", str(cfg)])
        assert main(["report", "--out", str(tmp_path)]) == 0
        text = capsys.readouterr().out
        assert "ok" in text
        assert (tmp_path / "report.txt").is_file()
        # tamper with a file: the report flags it
        (out / "curves.csv").write_text("tampered\n")
        main(["report", "--out", str(tmp_path)])
        assert "HASH-MISMATCH" in capsys.readouterr().out

    def test_no_manifests(self, tmp_path):
        assert main(["report", "--out", str(tmp_path)]) == 2
