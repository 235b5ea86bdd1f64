from __future__ import annotations

import pytest

import support as S
from modelsmith import builders as bd
from modelsmith import knowledge as ks
from modelsmith import ingestion as ing
from modelsmith.evolution import EvolutionRefused, evolve_from_web, post_run_evolve
from modelsmith.llm import RetryPolicy

NO_RETRY = RetryPolicy(max_attempts=1, base_delay=0.0)
EVOLVED_INDEX = [("tabular-0001", "a"), ("tabular-0002", "b"), ("tabular-0003", "Linear baselines win")]


def evolve_entries(category="tabular", index=EVOLVED_INDEX):
    return [
        S.entry("run_id: run\n", text=S.l2_reply(category, "Linear baselines win",
                                                  "A two-feature linear fit beat the single-feature one.")),
        S.entry("## Current L1 value", text=S.l1_reply(index, "Try a linear baseline before boosting.")),
    ]


@pytest.fixture(scope="module")
def golden(tmp_path_factory):
    out, _, kb_path, _ = S.golden_run(tmp_path_factory.mktemp("golden"))
    return out.run_dir, kb_path


def fresh_kb(tmp_path):
    return S.save_fixture_kb(tmp_path / "kb")


def test_run_takeaway_adds_one_document_and_one_revision(golden, tmp_path):
    run_dir, _ = golden
    kb_path = fresh_kb(tmp_path)
    before = ks.load_knowledge_base(kb_path)
    report = post_run_evolve(run_dir, kb_path, S.backend(evolve_entries()), retry=NO_RETRY)
    assert report.ok and len(report.changes) == 1
    change = report.changes[0]
    assert (change.key, change.doc_id, change.revision_before, change.revision_after) == (
        "tabular", "tabular-0003", 1, 2)
    after = ks.load_knowledge_base(kb_path)
    assert after.doc_count() == before.doc_count() + 1
    changed = {k for k in after.l1_values if after.l1_values[k] != before.l1_values.get(k)}
    assert changed == {"tabular"}
    assert after.l2["tabular"]["tabular-0003"].sources == ("run:run",)


def test_same_run_is_refused_the_second_time(golden, tmp_path):
    run_dir, _ = golden
    kb_path = fresh_kb(tmp_path)
    post_run_evolve(run_dir, kb_path, S.backend(evolve_entries()), retry=NO_RETRY)
    snapshot = S.tree_bytes(kb_path)
    with pytest.raises(EvolutionRefused):
        post_run_evolve(run_dir, kb_path, S.backend(evolve_entries()), retry=NO_RETRY)
    assert S.tree_bytes(kb_path) == snapshot


@pytest.mark.parametrize("failing", ["l2", "l1"])
def test_builder_failure_leaves_store_untouched(golden, tmp_path, failing):
    run_dir, _ = golden
    kb_path = fresh_kb(tmp_path)
    snapshot = S.tree_bytes(kb_path)
    entries = evolve_entries()
    bad = {"l2": 0, "l1": 1}[failing]
    entries[bad] = S.entry(entries[bad]["match"]["substring"], text="no envelope at all")
    entries.append(S.entry("CORRECTION", text="still no envelope"))
    report = post_run_evolve(run_dir, kb_path, S.backend(entries), retry=NO_RETRY)
    assert not report.ok and not report.changes
    assert S.tree_bytes(kb_path) == snapshot


def test_takeaway_for_unbuilt_category_bootstraps_it(golden, tmp_path):
    run_dir, _ = golden
    kb_path = fresh_kb(tmp_path)
    entries = [
        S.entry("run_id: run\n", text=S.l2_reply("vision-classification", "Oddity", "Images were absent.")),
        S.entry("category: vision-classification [",
                text=S.l1_reply([("vision-classification-0001", "Oddity")], "Check for images first.")),
    ]
    report = post_run_evolve(run_dir, kb_path, S.backend(entries), retry=NO_RETRY)
    assert report.changes[0].revision_before is None and report.changes[0].revision_after == 1
    assert ks.load_knowledge_base(kb_path).l1_values["vision-classification"].revision == 1


def test_unfinished_run_is_rejected(tmp_path):
    (tmp_path / "run").mkdir()
    with pytest.raises(bd.PreconditionError):
        post_run_evolve(tmp_path / "run", fresh_kb(tmp_path), S.backend([]))


# -- groups from the web -----------------------------------------------------------------------


def test_web_groups_are_isolated_from_each_other(tmp_path):
    corpus = S.make_corpus(tmp_path / "corpus")
    kb_path = fresh_kb(tmp_path)
    groups = tmp_path / "groups.json"
    ing.write_groups_file([ing.SourceGroup("group-0001", ("s01", "s03")),
                           ing.SourceGroup("group-0002", ("s04",)),
                           ing.SourceGroup("group-0003", ("s99",))], groups, str(corpus))
    entries = [
        S.entry("group_id: group-0001\nsources:", text=S.l2_reply("tabular", "Boosting recap", "Shallow trees.")),
        S.entry("category: tabular\n", text=S.l1_reply(
            [("tabular-0001", "a"), ("tabular-0002", "b"), ("tabular-0003", "Boosting recap")], "guide")),
        S.entry("group_id: group-0002\nsources:", text="garbage"),
        S.entry("CORRECTION", text="garbage again"),
    ]
    report = evolve_from_web(groups, kb_path, S.backend(entries), retry=NO_RETRY)
    assert [c.source for c in report.changes] == ["group-0001"]
    assert len(report.failures) == 2 and "s99" in report.failures[1]
    kb = ks.load_knowledge_base(kb_path)
    assert kb.doc_count() == 4 and kb.l1_values["tabular"].revision == 2
    assert kb.l1_values["ensembling"].revision == 1


def test_empty_groups_file_changes_nothing(tmp_path):
    kb_path = fresh_kb(tmp_path)
    snapshot = S.tree_bytes(kb_path)
    groups = tmp_path / "g.json"
    ing.write_groups_file([], groups, "")
    assert evolve_from_web(groups, kb_path, S.backend([])).changes == []
    assert S.tree_bytes(kb_path) == snapshot
