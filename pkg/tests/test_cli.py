import csv
import json

import pytest

from nlskam import cli
from nlskam import config as C
from nlskam.exceptions import ConfigError, DivergenceError

SMALL = """
[problem]
epsilon = 1e-3
nphi = 4
nx = 4
lambdas = [1.2247]

[measure]
samples = 41
n = 4

[reduce]
samples = 3
nu_max = 4

[stability]
t_max = 5.0
count = 6
field = "random"

[verify]
count = 20
suites = ["tame_product", "change_b"]
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "case.toml"
    path.write_text(SMALL)
    return path


def run(args, capsys=None):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


class TestConfig:
    def test_empty_file_lists_required(self, tmp_path):
        path = tmp_path / "empty.toml"
        path.write_text("")
        with pytest.raises(ConfigError) as exc:
            C.load(path)
        assert exc.value.problems == [f"{f}: required field missing" for f in C.required_fields()]
        assert C.required_fields() == ["problem.epsilon", "problem.nphi", "problem.nx"]

    def test_unknown_and_mistyped(self):
        with pytest.raises(ConfigError) as exc:
            C.from_dict({"problem": {"epsilon": "big", "nphi": 4, "nx": 4, "colour": 1}, "extra": {},
                         "solver": {"n0": 1.5}})
        probs = exc.value.problems
        assert "extra: unknown section" in probs
        assert "problem.colour: unknown key" in probs
        assert any(p.startswith("problem.epsilon: expected float") for p in probs)
        assert any(p.startswith("solver.n0: expected int") for p in probs)

    def test_semantic(self):
        with pytest.raises(ConfigError) as exc:
            C.from_dict({"problem": {"epsilon": 0.0, "nphi": 4, "nx": 4, "omega_bar": [1.0, 2.0]},
                         "measure": {"table": "other"}})
        assert any(p.startswith("problem.omega_bar") for p in exc.value.problems)
        assert any(p.startswith("measure.table") for p in exc.value.problems)

    def test_json_equivalent_to_toml(self, small, tmp_path):
        from_toml = C.load(small)
        path = tmp_path / "case.json"
        path.write_text(json.dumps(C.read_document(small)))
        assert C.load(path) == from_toml

    def test_ints_promoted(self):
        cfg = C.from_dict({"problem": {"epsilon": 0, "nphi": 4, "nx": 4}})
        assert isinstance(cfg.problem.epsilon, float)

    def test_newton_config(self):
        cfg = C.from_dict({"problem": {"epsilon": 1e-3, "nphi": 4, "nx": 4}, "solver": {"mu_loss": 2.0}})
        nm = cfg.newton()
        assert nm.eps == 1e-3 and nm.kappa1 == 6 * 2.0 + 12 * 2

    def test_bad_model(self):
        cfg = C.from_dict({"problem": {"epsilon": 1e-3, "nphi": 4, "nx": 4, "model": {"terms": [{"powers": {}}]}}})
        with pytest.raises(ConfigError):
            cfg.nonlinearity()


class TestCommands:
    def test_solve(self, small, tmp_path, capsys):
        code, out = run(["solve", "--config", small, "--out-dir", tmp_path / "r"], capsys)
        assert code == cli.EXIT_OK
        d = tmp_path / "r" / "solve"
        names = {p.name for p in d.iterdir()}
        assert {"config.json", "input.toml", "versions.json", "report.json", "residuals.csv", "timing.json",
                "fields"} <= names
        rep = json.loads((d / "report.json").read_text())
        assert "wall_time" not in rep["iterations"][0]
        rows = list(csv.DictReader(open(d / "residuals.csv")))
        assert float(rows[-1]["residual_s0"]) < 1e-8
        assert (d / "fields" / "u_0.json").exists()
        assert "converged" in out.out

    def test_solve_deterministic(self, small, tmp_path):
        files = ("report.json", "residuals.csv", "config.json", "fields/u_0.json")
        seen = []
        for _ in range(2):
            assert run(["solve", "--config", small, "--out-dir", tmp_path])[0] == 0
            seen.append([(tmp_path / "solve" / f).read_bytes() for f in files])
        assert seen[0] == seen[1]

    def test_empty_good_set(self, small, tmp_path, capsys):
        # lambda = 1 is resonant: lambda l = j^2 for l = j^2
        text = small.read_text().replace("lambdas = [1.2247]", "lambdas = [1.0]")
        small.write_text(text)
        code, out = run(["solve", "--config", small, "--out-dir", tmp_path, "--epsilon", "1e-2",
                         "--truncation", "8,8"], capsys)
        assert code == cli.EXIT_EMPTY and "empty parameter set" in out.err

    def test_divergence_exit(self, small, tmp_path, monkeypatch, capsys):
        def boom(*a, **k):
            raise DivergenceError("residual did not decrease")

        monkeypatch.setattr("nlskam.solver.nash_moser", boom)
        code, out = run(["solve", "--config", small, "--out-dir", tmp_path], capsys)
        assert code == cli.EXIT_DIVERGENCE and "[solver]" in out.err

    def test_config_error_exit(self, tmp_path, capsys):
        path = tmp_path / "empty.toml"
        path.write_text("")
        code, out = run(["solve", "--config", path, "--out-dir", tmp_path], capsys)
        assert code == cli.EXIT_CONFIG
        for name in ("problem.epsilon", "problem.nphi", "problem.nx"):
            assert name in out.err

    def test_module_attribution(self, small, tmp_path, monkeypatch, capsys):
        from nlskam.exceptions import DiffeoInvalidError

        def bad(*a, **k):
            raise DiffeoInvalidError("xi is not invertible")

        monkeypatch.setattr("nlskam.regularizer.regularize", bad)
        code, out = run(["reduce", "--config", small, "--out-dir", tmp_path], capsys)
        assert code == cli.EXIT_ERROR and "[regularizer]" in out.err

    def test_reduce(self, small, tmp_path):
        assert run(["reduce", "--config", small, "--out-dir", tmp_path])[0] == 0
        d = tmp_path / "reduce"
        rep = json.loads((d / "report.json").read_text())
        assert rep["real_part_defect"] < 1e-13 and len(rep["mask"]) == 3
        assert (d / "trace.csv").read_text().startswith("nu,N_nu")

    def test_measure_gamma_list(self, tmp_path, capsys):
        code, out = run(["measure", "--gamma-list", "0.1,0.05,0.025", "--out-dir", tmp_path], capsys)
        assert code == 0
        d = tmp_path / "measure"
        rep = json.loads((d / "report.json").read_text())
        assert [r["gamma"] for r in rep["rows"]] == [0.1, 0.05, 0.025]
        assert abs(rep["fit_exponent"] - 1) <= 0.2 and rep["constant_ok"]
        lines = (d / "measure.csv").read_text().splitlines()
        assert lines[0] == "gamma,excluded_measure,triple_count,fit_exponent" and len(lines) == 4
        assert "fit exponent" in out.out

    def test_measure_covering_is_empty(self, small, tmp_path):
        code, _ = run(["measure", "--config", small, "--gamma-list", "5.0", "--out-dir", tmp_path])
        assert code == cli.EXIT_EMPTY

    def test_stability(self, small, tmp_path):
        assert run(["stability", "--config", small, "--out-dir", tmp_path])[0] == 0
        rep = json.loads((tmp_path / "stability" / "report.json").read_text())
        assert len(rep["runs"]) == 2
        for r in rep["runs"]:
            assert r["diagonal_drift"] < 1e-12 and r["roundtrip"] < 1e-10
        assert (tmp_path / "stability" / "flow_eps0.01.csv").exists()

    def test_verify_norms(self, small, tmp_path):
        assert run(["verify-norms", "--config", small, "--out-dir", tmp_path, "--seed", "3"])[0] == 0
        rep = json.loads((tmp_path / "verify-norms" / "report.json").read_text())
        assert rep["passed"] and rep["seed"] == 3
        assert [r["suite"] for r in rep["suites"]] == ["tame_product", "change_b"]

    def test_unknown_suite(self, small, tmp_path):
        text = small.read_text().replace('"change_b"', '"nope"')
        small.write_text(text)
        assert run(["verify-norms", "--config", small, "--out-dir", tmp_path])[0] == cli.EXIT_CONFIG

    def test_overrides_recorded(self, tmp_path):
        run(["measure", "--out-dir", tmp_path, "--seed", "9", "--truncation", "4,6", "--gamma-list", "0.1,0.05"])
        snap = json.loads((tmp_path / "measure" / "config.json").read_text())
        assert snap["run"]["seed"] == 9 and (snap["problem"]["nphi"], snap["problem"]["nx"]) == (4, 6)
        versions = json.loads((tmp_path / "measure" / "versions.json").read_text())
        assert {"nlskam", "numpy", "scipy", "python"} <= set(versions)

    def test_bad_truncation_flag(self):
        with pytest.raises(SystemExit):
            cli.main(["solve", "--truncation", "8"])
