import json

import pytest

from helpers import contradictory_2sat
from robustcsp import cli
from robustcsp.core import dumps_instance, loads_instance


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def instance_file(tmp_path, capsys):
    path = tmp_path / "inst.json"
    code, _, _ = run(capsys, "gen", "--family", "2sat", "--num-vars", 8, "--num-constraints", 30,
                     "--eps", 0.1, "--seed", 3, "--out", path)
    assert code == 0
    return path


def write_language(tmp_path, text):
    path = tmp_path / "lang.txt"
    path.write_text(text)
    return path


def test_gen_is_reproducible(tmp_path, capsys, instance_file):
    planted = tmp_path / "planted.json"
    code, out, _ = run(capsys, "gen", "--num-vars", 8, "--num-constraints", 30, "--eps", 0.1, "--seed", 3,
                       "--planted", planted)
    assert code == 0
    assert out == instance_file.read_text()
    assert len(json.loads(planted.read_text())) == 8


def test_solve_sdp(capsys, instance_file):
    code, out, _ = run(capsys, "solve-sdp", "--input", instance_file)
    data = json.loads(out)
    assert code == 0 and data["schema"] == 1
    assert data["objective_value"] >= -1e-6


@pytest.mark.parametrize("command", ["round-nu", "round-dd"])
def test_round_commands(tmp_path, capsys, instance_file, command):
    report = tmp_path / "report.json"
    code, out, _ = run(capsys, command, "--input", instance_file, "--seed", 1, "--report", report)
    data = json.loads(out)
    assert code == 0
    assert len(data["assignment"]) == 8 and 0 <= data["satisfied_weight"] <= 1
    assert json.loads(report.read_text())["path"] == data["path"]
    code, again, _ = run(capsys, command, "--input", instance_file, "--seed", 1)
    assert again == out


def test_csv_output(capsys, instance_file):
    code, out, _ = run(capsys, "exact", "--input", instance_file, "--format", "csv")
    assert code == 0
    assert out.splitlines()[0] == "key,value"
    assert "satisfiable,False" in out


def test_exact_and_check_ipq(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(dumps_instance(contradictory_2sat()))
    code, out, _ = run(capsys, "exact", "--input", path)
    assert json.loads(out)["satisfiable"] is False
    code, out, _ = run(capsys, "check-ipq", "--input", path, "--cap", 4)
    assert code == 0 and json.loads(out)["status"] == "violated"
    code, out, _ = run(capsys, "check-ipq", "--input", path, "--pq", "--cap", 4)
    assert json.loads(out)["status"] == "violated"


def test_oracle(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(dumps_instance(contradictory_2sat()))
    code, out, _ = run(capsys, "oracle", "--input", path, "--delta", 1e-6)
    data = json.loads(out)
    assert code == 0 and data["sandwich_ok"]
    assert data["opt"] == pytest.approx(0.75)
    assert data["sdp_opt"] == pytest.approx(0.25, abs=1e-5)
    assert data["gap"] == pytest.approx(0.0, abs=1e-5)
    assert set(data) >= {"min_unsatisfied", "witness", "delta"}


def test_oracle_cap(tmp_path, capsys, instance_file):
    code, _, err = run(capsys, "oracle", "--input", instance_file, "--cap", 10)
    assert code == 1 and "error" in err


def test_analyze_examples(tmp_path, capsys):
    cells = ["0,0", "0,1", "1,0", "1,1"]
    lines = ["domain 2"]
    for bits in range(1, 16):
        lines.append(" ".join(c for i, c in enumerate(cells) if bits >> i & 1))
    code, out, _ = run(capsys, "analyze", write_language(tmp_path, "\n".join(lines)))
    data = json.loads(out)
    assert code == 0 and data["has_majority"] and data["has_dual_discriminator"]
    code, out, _ = run(capsys, "analyze", write_language(tmp_path, "domain 2\nxor: 0,0,0 0,1,1 1,0,1 1,1,0\n"))
    data = json.loads(out)
    assert data["has_majority"] is False and data["relations"][0]["2decomposable"] is False
    code, out, _ = run(capsys, "analyze", "--input", write_language(tmp_path, "# nothing\ndomain 3\n"))
    data = json.loads(out)
    assert data["has_majority"] and data["has_dual_discriminator"] and data["relations"] == []


def test_analyze_accepts_json_instance(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(dumps_instance(contradictory_2sat()))
    code, out, _ = run(capsys, "analyze", path)
    data = json.loads(out)
    assert code == 0 and len(data["relations"]) == 4
    assert all(r["01all"]["kind"] == "type1" for r in data["relations"])


@pytest.mark.parametrize("text,line", [
    ("domain 2\n0,0 0,1\nfoo: 0,x\n", 3),
    ("# header\n\n0,0\n", 3),
    ("domain 2\nr: 0,0 1,1,1\n", 2),
    ("domain 2\nr: 0,2\n", 2),
])
def test_analyze_parse_errors_name_the_line(tmp_path, capsys, text, line):
    code, _, err = run(capsys, "analyze", write_language(tmp_path, text))
    assert code == 1
    assert f"line {line}" in err


def test_usage_errors(tmp_path, capsys):
    assert run(capsys, "round-nu")[0] == 1
    assert run(capsys, "no-such-command")[0] == 1
    assert run(capsys, "exact", "--input", tmp_path / "missing.json")[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(capsys, "exact", "--input", bad)
    assert code == 1 and "line 1" in err


def test_contract_violation_dumps_instance(tmp_path, capsys, instance_file, monkeypatch):
    import robustcsp.nu as nu

    def broken(*args, **kwargs):
        raise nu.PipelineContractViolation("survivors are not satisfiable", args[0])

    monkeypatch.setattr(nu, "run_nu", broken)
    dump = tmp_path / "dump.json"
    code, _, err = run(capsys, "round-nu", "--input", instance_file, "--dump", dump)
    assert code == 2 and "contract violation" in err
    assert loads_instance(dump.read_text()) == loads_instance(instance_file.read_text())
    monkeypatch.chdir(tmp_path)
    assert run(capsys, "round-nu", "--input", instance_file)[0] == 2
    assert (tmp_path / "failing_instance.json").exists()


def test_experiment_is_deterministic_and_keeps_eps_zero(tmp_path, capsys):
    argv = ["experiment", "--family", "2sat", "--eps", 0, 0.05, "--trials", 2, "--num-vars", 8,
            "--num-constraints", 30, "--pipeline", "both", "--seed", 5]
    code, first, _ = run(capsys, *argv)
    assert code == 0
    code, second, _ = run(capsys, *argv, "--workers", 2)
    assert first == second
    data = json.loads(first)
    for pipeline in ("nu", "dd"):
        rows = data["aggregate"][pipeline]["median_loss"]
        assert [row["eps"] for row in rows] == [0.0, 0.05]
    assert len(data["trials"]) == 2 * 2 * 2
    code, out, _ = run(capsys, *argv, "--format", "csv")
    header = out.splitlines()[0]
    assert header == "pipeline,eps,median_loss,trials,slope,r_squared"
    assert len(out.splitlines()) == 1 + 4


def test_experiment_rejects_bad_grid(capsys):
    assert run(capsys, "experiment", "--eps", 1.5, "--trials", 1)[0] == 1
