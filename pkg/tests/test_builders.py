from __future__ import annotations

import json

import pytest

import support as S
from modelsmith import builders as bd
from modelsmith import ingestion as ing
from modelsmith import knowledge as ks
from modelsmith.llm import RetryPolicy

NO_RETRY = RetryPolicy(max_attempts=1, base_delay=0.0)


# -- envelope ----------------------------------------------------------------------------


def test_parse_envelope_l2():
    env = bd.parse_envelope("Here you go:\n" + S.l2_reply("tabular", "Trees", "Body line.") + "\nthanks")
    assert env == bd.Envelope("tabular", "Trees", (), "Body line.\n")


def test_parse_envelope_uses_last_matching_fence():
    text = "```\nDESCRIPTION: d\n\nbefore\n```\nmiddle\n```\n"
    env = bd.parse_envelope(text)
    assert env.body == "before\n```\nmiddle\n"


def test_parse_envelope_longer_fence_allows_nested_code():
    text = "````markdown\nDESCRIPTION: d\n\nuse:\n```python\nx = 1\n```\n````"
    assert "x = 1" in bd.parse_envelope(text).body


@pytest.mark.parametrize("text,match", [
    ("no fence here", "no fenced"),
    ("```\nDESCRIPTION: x\n\nbody", "not closed"),
    ("```\nWHATEVER: x\n\nbody\n```", "unknown header"),
    ("```\nINDEX: tabular-0001 desc\n\nbody\n```", "malformed INDEX"),
    ("```\nDESCRIPTION: x\n\n   \n```", "empty"),
])
def test_parse_envelope_errors(text, match):
    with pytest.raises(bd.EnvelopeError, match=match):
        bd.parse_envelope(text)


# -- L2 from sources ---------------------------------------------------------------------


def texts():
    return {"a": ing.SourceDocument("a", "boosting notes"), "b": ing.SourceDocument("b", "more boosting")}


def test_build_l2_from_sources():
    b = S.backend([S.entry("group_id: g1\n", text=S.l2_reply("tabular", "Boosting", "Use boosting."))])
    key, doc = bd.build_l2_from_sources(ing.SourceGroup("g1", ("a", "b")), texts(), S.small_index(), b,
                                        now=lambda: S.FIXED_TIME, retry=NO_RETRY)
    assert key == "tabular"
    assert (doc.body, doc.provenance, doc.sources) == ("Use boosting.\n", "web_sources", ("a", "b"))


def test_out_of_taxonomy_category_gets_one_correction():
    b = S.backend([
        S.entry("group_id: g1\n", text=S.l2_reply("astrology", "Stars", "x")),
        # the correction names the bad key and lists the valid ones
        S.entry("CORRECTION: category 'astrology' is not in the taxonomy; valid keys: tabular",
                text=S.l2_reply("tabular", "Boosting", "Use boosting.")),
    ])
    key, _ = bd.build_l2_from_sources(ing.SourceGroup("g1", ("a",)), texts(), S.small_index(), b, retry=NO_RETRY)
    assert key == "tabular" and b.remaining() == 0


def test_second_invalid_answer_is_fatal():
    b = S.backend([S.entry("group_id: g1\n", text="nothing"), S.entry("CORRECTION", text="still nothing")])
    with pytest.raises(bd.BuilderError):
        bd.build_l2_from_sources(ing.SourceGroup("g1", ("a",)), texts(), S.small_index(), b, retry=NO_RETRY)


def test_empty_index_is_a_precondition_error():
    with pytest.raises(bd.PreconditionError):
        bd.build_l2_from_sources(ing.SourceGroup("g", ("a",)), texts(), (), S.backend([]))


# -- L1 builders -------------------------------------------------------------------------


def test_bootstrap_l1_requires_every_document_indexed():
    kb = S.fixture_kb(sentinels=False)
    del kb.l1_values["tabular"]
    b = S.backend([
        S.entry("category: tabular [", text=S.l1_reply([("tabular-0001", "d")], "guide")),
        S.entry("CORRECTION: index omits document(s) tabular-0002",
                text=S.l1_reply([("tabular-0001", "d1"), ("tabular-0002", "d2")], "guide")),
    ])
    value = bd.bootstrap_l1(kb, "tabular", b, retry=NO_RETRY)
    assert value.revision == 1 and value.doc_ids == ["tabular-0001", "tabular-0002"]
    assert ks.validate_integrity(kb, ks.STRICT).ok


def test_bootstrap_l1_of_empty_category_returns_none():
    kb = S.fixture_kb()
    assert bd.bootstrap_l1(kb, "vision-classification", S.backend([])) is None


def test_bootstrap_l1_refuses_built_category():
    with pytest.raises(bd.PreconditionError):
        bd.bootstrap_l1(S.fixture_kb(), "tabular", S.backend([]))


def test_evolve_l1_appends_and_bumps_revision():
    kb = S.fixture_kb()
    new_id = ks.insert_document(kb, "tabular", ks.L2Document("tabular", "new\n", "New", "run_takeaway", ("run:x",),
                                                             created_at=S.FIXED_TIME))
    index = [("tabular-0001", "a"), ("tabular-0002", "b"), (new_id, "Fresh takeaway")]
    b = S.backend([S.entry("## Current L1 value", text=S.l1_reply(index, "updated guide"))])
    value = bd.evolve_l1(kb, "tabular", new_id, b, retry=NO_RETRY)
    assert value.revision == 2
    # existing descriptions are kept; only the new item comes from the builder
    assert value.l2_index[:2] == kb.l1_values["tabular"].l2_index[:2]
    assert value.l2_index[-1] == ks.IndexItem(new_id, "Fresh takeaway")
    assert ks.validate_integrity(kb, ks.STRICT).ok


def test_evolve_l1_rejects_too_many_lines():
    kb = S.fixture_kb()
    new_id = ks.insert_document(kb, "tabular", ks.L2Document("tabular", "n\n", "N", "run_takeaway", ("run:x",),
                                                             created_at=S.FIXED_TIME))
    index = [("tabular-0001", "a"), ("tabular-0002", "b"), (new_id, "c")]
    long = "\n".join(f"l{i}" for i in range(5))
    b = S.backend([S.entry("## Current L1 value", text=S.l1_reply(index, long)),
                   S.entry("CORRECTION", text=S.l1_reply(index, long))])
    with pytest.raises(bd.BuilderError, match="limit is 3"):
        bd.evolve_l1(kb, "tabular", new_id, b, line_cap=3, retry=NO_RETRY)
    assert kb.l1_values["tabular"].revision == 1


# -- run digest ----------------------------------------------------------------------------


def fake_run(root, report=True):
    repo = root / "repos" / "repo-1"
    (repo / "results").mkdir(parents=True)
    (repo / "plan.md").write_text("# Plan\nboost\n")
    err = root / "err.txt"
    err.write_text("\n".join(f"err line {i}" for i in range(80)))
    results = [
        {"run_id": "run-0001", "command": "python train.py", "exit_code": 1, "timed_out": False,
         "stdout_path": str(root / "none"), "stderr_path": str(err), "parsed_metrics": None},
        {"run_id": "run-0002", "command": "python train.py", "exit_code": 0, "timed_out": False,
         "stdout_path": "", "stderr_path": "",
         "parsed_metrics": {"metric_name": "mae", "value": 0.5, "higher_is_better": False, "split": "validation"}},
    ]
    (repo / "results" / "index.json").write_text(json.dumps(results))
    (repo / "results" / "state.json").write_text(json.dumps({"status": "scored"}))
    (root / "run.json").write_text(json.dumps({"run_id": "run-xyz"}))
    (root / "task.json").write_text(json.dumps({"description": "predict y", "metric_name": "mae",
                                                "higher_is_better": False}))
    if report:
        (root / "final").mkdir()
        (root / "final" / "report.md").write_text("# Run report\nall good\n")
    return root


def test_digest_contents_and_failed_log_tail(tmp_path):
    digest = bd.assemble_run_digest(fake_run(tmp_path))
    assert digest.startswith("# Run run-xyz")
    assert "lower is better" in digest and "mae=0.5" in digest
    assert "err line 79" in digest and "err line 30" in digest and "err line 29" not in digest
    assert digest == bd.assemble_run_digest(tmp_path)


def test_digest_respects_cap(tmp_path):
    digest = bd.assemble_run_digest(fake_run(tmp_path), cap=300)
    assert len(digest) == 300 and digest.endswith("[... digest truncated ...]")


def test_digest_requires_finished_run(tmp_path):
    with pytest.raises(bd.PreconditionError):
        bd.assemble_run_digest(fake_run(tmp_path, report=False))


def test_build_l2_from_rundir_records_run_source(tmp_path):
    b = S.backend([S.entry("run_id: run-xyz", text=S.l2_reply("tabular", "Lesson", "Boost more."))])
    key, doc = bd.build_l2_from_rundir(fake_run(tmp_path), S.small_index(), b, retry=NO_RETRY)
    assert key == "tabular" and doc.sources == ("run:run-xyz",) and doc.provenance == "run_takeaway"


# -- bootstrap pipeline ---------------------------------------------------------------------


def test_bootstrap_pipeline_end_to_end(tmp_path):
    corpus = S.make_corpus(tmp_path / "corpus")
    b = S.backend(S.bootstrap_entries())
    kb, report = bd.bootstrap_knowledge_base(corpus, S.small_index(), b, ing.HashingEmbedder(256),
                                             out_path=tmp_path / "kb", now=lambda: S.FIXED_TIME)
    assert (report.ingested, report.deduped, report.dropped) == (5, 1, 1)
    assert (report.groups, report.docs, report.categories_built) == (2, 2, 2)
    assert report.failures == []
    assert b.remaining() == 0
    assert kb.l2["tabular"]["tabular-0001"].sources == ("s01", "s03")
    assert ks.load_knowledge_base(tmp_path / "kb").doc_count() == 2


def test_bootstrap_with_no_buildable_category_fails(tmp_path):
    corpus = S.make_corpus(tmp_path / "corpus")
    entries = [e for e in S.bootstrap_entries() if "category:" not in e["match"]["substring"]]
    with pytest.raises(bd.EmptyKnowledgeBaseError):
        bd.bootstrap_knowledge_base(corpus, S.small_index(), S.backend(entries), ing.HashingEmbedder(256),
                                    config=bd.BootstrapConfig(retry=NO_RETRY))
