import json

import pytest

import app.services.evaluation as evaluation
from app.main import EXIT_DOMAIN, EXIT_OK, EXIT_USAGE, main
from builders import E, W, corridor, scenario_from, train


@pytest.fixture
def scenario_file(tmp_path):
    scenario = scenario_from(corridor(10), [
        train((0, 1), E, (0, 8)),
        train((0, 8), W, (0, 1), ed=2),
    ])
    path = tmp_path / "head_on.json"
    scenario.save(path)
    return path


def _run(scenario_file, out, controller="full"):
    return main(["run", "--scenario", str(scenario_file), "--seed", "0",
                 "--controller", controller, "--out", str(out)])


def test_gen_is_reproducible(tmp_path, capsys):
    assert main(["gen", "--level", "0", "--seed", "3", "--out", str(tmp_path / "a.json")]) == EXIT_OK
    assert main(["gen", "--level", "0", "--seed", "3", "--out", str(tmp_path / "b.json")]) == EXIT_OK
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    hashes = capsys.readouterr().out.split()
    assert len(hashes) == 2 and hashes[0] == hashes[1]


def test_run_then_replay(tmp_path, scenario_file, capsys):
    assert _run(scenario_file, tmp_path) == EXIT_OK
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["success_rate"] == 1.0
    trace = tmp_path / "full" / "micro" / "seed0.jsonl"
    assert line["trace"] == str(trace)

    assert main(["replay", str(trace)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "OK"


def test_replay_reports_divergence(tmp_path, scenario_file, capsys):
    _run(scenario_file, tmp_path)
    trace = tmp_path / "full" / "micro" / "seed0.jsonl"
    lines = trace.read_text().splitlines()
    first = json.loads(lines[1])
    # первый поезд не отправляется на шаге 0
    first["actions"][0] = 0
    lines[1] = json.dumps(first)
    trace.write_text("\n".join(lines) + "\n")
    capsys.readouterr()

    assert main(["replay", str(trace)]) == EXIT_DOMAIN
    assert capsys.readouterr().out.strip() == "DIVERGED 0"


def test_replay_refuses_other_trace_version(tmp_path, scenario_file):
    _run(scenario_file, tmp_path)
    trace = tmp_path / "full" / "micro" / "seed0.jsonl"
    lines = trace.read_text().splitlines()
    header = json.loads(lines[0])
    header["version"] = "railflow-trace/0"
    lines[0] = json.dumps(header)
    trace.write_text("\n".join(lines) + "\n")
    assert main(["replay", str(trace)]) == EXIT_DOMAIN


def test_usage_errors(tmp_path, scenario_file):
    assert _run(scenario_file, tmp_path, controller="oracle") == EXIT_USAGE
    assert main(["run", "--level", "0", "--seeds", "0..1", "--budget", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(["run", "--seed", "0"])
    with pytest.raises(SystemExit):
        main(["bench", "--seeds", "5..1"])


def test_bench_reuses_finished_episodes(tmp_path, monkeypatch, capsys):
    args = ["bench", "--level", "0", "--seeds", "0", "--controller", "greedy", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    first = capsys.readouterr().out
    assert (tmp_path / "greedy" / "report.csv").exists()
    assert (tmp_path / "greedy" / "level0" / "seed0.jsonl").exists()
    assert (tmp_path / "results.sqlite").exists()

    def fail(*_args, **_kwargs):
        raise AssertionError("finished episodes must not be recomputed")

    monkeypatch.setattr(evaluation, "run_episodes", fail)
    assert main(args) == EXIT_OK
    assert capsys.readouterr().out == first
