from __future__ import annotations

import csv
import json

import pytest

import support as S
from modelsmith import cli
from modelsmith import knowledge as ks
from modelsmith.orchestrator import DEFAULT_REPOS, InvalidInputError, run_task


def test_golden_run_produces_full_run_directory(tmp_path):
    out, data, kb_path, b = S.golden_run(tmp_path)
    assert out.status == "success" and out.source_repos == [1]
    assert b.remaining() == 0
    final = out.final_dir
    assert (final / "predictions.csv").read_bytes() == S.oracle_predictions(data)
    for name in ("report.md", "manifest.json", "repo_summary.tsv", "metric_trajectory.png", "inference.py"):
        assert (final / name).is_file(), name
    # parallel workers are numbered in completion order, so only the phases have fixed numbers
    names = {p.stem.rsplit("-", 1)[0]: int(p.stem.rsplit("-", 1)[1]) for p in (out.run_dir / "transcripts").iterdir()}
    assert set(names) == {"setup", "designer-1", "designer-2", "coder-1", "coder-2", "manager", "aggregator"}
    assert sorted(names.values()) == list(range(1, 8))
    assert (names["setup"], names["manager"], names["aggregator"]) == (1, 6, 7)
    assert out.ledger["agent_invocations"] == 7
    assert out.ledger["backend_calls"] == len(S.golden_entries())
    meta = json.loads((out.run_dir / "run.json").read_text())
    assert meta["status"] == "success" and meta["run_id"] == "run"


def test_golden_report_names_chosen_repository_and_summary_table(tmp_path):
    out, *_ = S.golden_run(tmp_path)
    report = out.report_path.read_text()
    assert "Source repositories: repo-1" in report
    rows = list(csv.DictReader(open(out.final_dir / "repo_summary.tsv"), delimiter="\t"))
    by = {r["repo"]: r for r in rows}
    assert by["repo-1"]["selected"] == "yes" and by["repo-2"]["selected"] == "no"
    assert float(by["repo-1"]["best_metric"]) < float(by["repo-2"]["best_metric"])


def test_setup_overrides_reach_worker_commands(tmp_path):
    entries = S.golden_entries()
    for e in entries:  # make repo-1's training run depend on the exported variable
        for c in e["response"].get("tool_calls") or []:
            if c["name"] == "execute_1":
                c["args"]["command"] = f'test "$GOLDEN_FLAG" = on && {S.PY} code/train.py'
    out, *_ = S.golden_run(tmp_path, entries)
    assert out.status == "success" and out.source_repos == [1]


def test_invalid_inputs_fail_before_any_backend_call(tmp_path):
    data = S.make_toy_data(tmp_path / "data")
    kb_path = S.save_fixture_kb(tmp_path / "kb")
    b = S.backend(S.golden_entries())
    total = b.remaining()
    with pytest.raises(InvalidInputError):
        run_task(S.toy_task(tmp_path / "missing"), kb_path, b, 2, run_dir=tmp_path / "r1")
    (kb_path / "categories" / "tabular" / "docs" / "tabular-0001.md").unlink()
    with pytest.raises(InvalidInputError, match="knowledge base"):
        run_task(S.toy_task(data), kb_path, b, 2, run_dir=tmp_path / "r2")
    busy = tmp_path / "r3"
    busy.mkdir()
    (busy / "x").write_text("x")
    with pytest.raises(InvalidInputError, match="not empty"):
        run_task(S.toy_task(data), S.save_fixture_kb(tmp_path / "kb2"), b, 2, run_dir=busy)
    assert b.remaining() == total
    assert not (tmp_path / "r1").exists() and not (tmp_path / "r2").exists()


def test_run_without_any_score_fails_with_report(tmp_path):
    entries = [S.entry("Agent: setup", text="nothing to do"), S.entry("Agent: manager", text="I stop here.")]
    out, *_ = S.golden_run(tmp_path, entries)
    assert out.status == "failed"
    report = out.report_path.read_text()
    assert "failed" in report and "no scored" in report
    assert not (tmp_path / "run" / "final" / "metric_trajectory.png").exists()


def test_scored_repo_without_inference_code_is_partial(tmp_path):
    entries = [
        S.entry("Agent: setup", text="ok"),
        S.entry("Agent: manager", calls=[S.call("invoke_designer_1")]),
        S.entry("Agent: designer", calls=[
            S.call("write_1", path="plan.md", content="# p\n"),
            S.call("write_1", path="code/score.py", content=(
                "import json; json.dump({'metric_name': 'mae', 'value': 1.5, 'higher_is_better': False}, "
                "open('metrics.json', 'w'))\n")),
            S.call("execute_1", command=f"{S.PY} code/score.py"),
        ]),
        S.entry("[designer@repo-1] execute_1 ->", text="scored"),
        S.entry("designer@repo-1 finished", text="done"),
        S.entry("Agent: aggregator", text="nothing to ship"),
    ]
    out, *_ = S.golden_run(tmp_path, entries, n_repos=1)
    assert out.status == "partial"


# -- command line ------------------------------------------------------------------------------


def test_parser_defaults_to_seven_repositories():
    args = cli.build_parser().parse_args(["run", "--task-file", "t", "--kb", "k", "--scripted", "s"])
    assert args.repos == DEFAULT_REPOS == 7


def test_cli_run_golden_exits_zero(tmp_path, capsys):
    data = S.make_toy_data(tmp_path / "data")
    task = S.write_task_file(tmp_path / "task.json", data)
    kb = S.save_fixture_kb(tmp_path / "kb")
    script = S.write_script(tmp_path / "script.jsonl", S.golden_entries())
    code = cli.main(["run", "--task-file", str(task), "--kb", str(kb), "--repos", "2",
                     "--run-dir", str(tmp_path / "run"), "--scripted", str(script)])
    assert code == 0
    assert "status: success" in capsys.readouterr().out


def test_cli_invalid_input_exits_three(tmp_path):
    kb = S.save_fixture_kb(tmp_path / "kb")
    script = S.write_script(tmp_path / "s.jsonl", [])
    task = S.write_task_file(tmp_path / "task.json", tmp_path / "nowhere")
    assert cli.main(["run", "--task-file", str(task), "--kb", str(kb), "--scripted", str(script)]) == 3
    assert cli.main(["run", "--task-file", str(tmp_path / "absent.yaml"), "--kb", str(kb),
                     "--scripted", str(script)]) == 3
    data = S.make_toy_data(tmp_path / "data")
    task = S.write_task_file(tmp_path / "task2.json", data)
    assert cli.main(["run", "--task-file", str(task), "--kb", str(kb)]) == 3  # no backend


def test_cli_failed_run_exits_one(tmp_path):
    data = S.make_toy_data(tmp_path / "data")
    task = S.write_task_file(tmp_path / "task.json", data)
    kb = S.save_fixture_kb(tmp_path / "kb")
    script = S.write_script(tmp_path / "s.jsonl", [S.entry("Agent: setup", text="ok"),
                                                    S.entry("Agent: manager", text="stop")])
    assert cli.main(["run", "--task-file", str(task), "--kb", str(kb), "--repos", "1",
                     "--run-dir", str(tmp_path / "run"), "--scripted", str(script)]) == 1


def test_cli_kb_validate(tmp_path, capsys):
    kb = S.save_fixture_kb(tmp_path / "kb")
    assert cli.main(["kb-validate", "--kb", str(kb)]) == 0
    assert "strict: ok" in capsys.readouterr().out
    index = kb / "categories" / "tabular" / "index.json"
    index.write_text(json.dumps(json.loads(index.read_text())[:1]))
    assert cli.main(["kb-validate", "--kb", str(kb)]) == 1
    assert "orphan" in capsys.readouterr().out
    assert cli.main(["kb-validate", "--kb", str(kb), "--mode", ks.PENDING_EVOLUTION]) == 0
    assert cli.main(["kb-validate", "--kb", str(tmp_path / "none")]) == 3
