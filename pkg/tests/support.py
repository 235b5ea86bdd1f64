"""Shared fixtures for the test suite: knowledge bases, toy tasks, scripts."""

from __future__ import annotations

import csv
import hashlib
import json
import re
import sys
from pathlib import Path

import numpy as np

from modelsmith import knowledge as ks
from modelsmith.knowledge import IndexItem, KnowledgeBase, L1Value, L2Document
from modelsmith.llm import ScriptedBackend
from modelsmith.task import TaskSpec

PY = sys.executable
FIXED_TIME = "2026-01-01T00:00:00Z"


# -- script helpers ------------------------------------------------------------------


def call(name: str, **args) -> dict:
    return {"name": name, "args": args}


def entry(substring: str, *, text: str | None = None, calls: list | None = None,
          role: str | None = None, repeat: bool = False) -> dict:
    response = {"text": text} if text is not None else {"tool_calls": calls}
    rec = {"match": {"substring": substring}, "response": response}
    if role:
        rec["match"]["role"] = role
    if repeat:
        rec["repeat"] = True
    return rec


def write_script(path: Path, entries: list[dict]) -> Path:
    path.write_text("".join(json.dumps(e) + "\n" for e in entries), encoding="utf-8")
    return path


def backend(entries: list[dict]) -> ScriptedBackend:
    return ScriptedBackend.from_records(entries)


def l2_reply(category: str, description: str, body: str) -> str:
    return f"```\nCATEGORY: {category}\nDESCRIPTION: {description}\n\n{body}\n```"


def l1_reply(index: list[tuple[str, str]], instruction: str) -> str:
    head = "\n".join(f"INDEX: {d} :: {desc}" for d, desc in index)
    return f"```\n{head}\n\n{instruction}\n```"


# -- knowledge bases -----------------------------------------------------------------


def small_index() -> tuple[ks.L1IndexEntry, ...]:
    return (
        ks.L1IndexEntry("tabular", "Tabular data: feature work and tree models.", "modality_task"),
        ks.L1IndexEntry("vision", "Image tasks.", "modality_task"),
        ks.L1IndexEntry("ensembling", "Combining models.", "modeling_strategy"),
    )


def sentinel_l1(key: str) -> str:
    return f"SENTINEL-L1-{key}"


def sentinel_l2(doc_id: str) -> str:
    return f"SENTINEL-L2-{doc_id}"


def fixture_kb(index=None, sentinels: bool = True) -> KnowledgeBase:
    """Two built categories holding three documents; every other category unbuilt."""
    kb = KnowledgeBase(l1_index=index or ks.load_l1_index_file(ks.default_l1_index_path()))
    plan = {
        "tabular": [("Gradient boosting defaults", "Start from a shallow boosted tree model."),
                    ("Target encoding", "Encode high-cardinality categoricals out of fold.")],
        "ensembling": [("Rank blending", "Blend rank-transformed predictions.")],
    }
    for key, docs in plan.items():
        items = []
        for desc, body in docs:
            doc = L2Document(key, body, desc, "web_sources", ("src-" + key,), created_at=FIXED_TIME)
            doc_id = ks.insert_document(kb, key, doc)
            if sentinels:
                kb.l2[key][doc_id] = _with_body(kb.l2[key][doc_id], f"{body}\n{sentinel_l2(doc_id)}\n")
            items.append(IndexItem(doc_id, desc))
        instruction = f"Guidance for {key}."
        if sentinels:
            instruction += f"\n{sentinel_l1(key)}"
        ks.replace_l1_value(kb, key, L1Value(key, instruction, tuple(items), revision=1))
    return kb


def _with_body(doc: L2Document, body: str) -> L2Document:
    return L2Document(doc.key, body, doc.description, doc.provenance, doc.sources, doc.created_at, doc.doc_id)


def save_fixture_kb(root: Path, **kw) -> Path:
    ks.save_knowledge_base(fixture_kb(**kw), root)
    return root


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


_CREATED = re.compile(rb'"created_at": "[^"]*"')


def normalized_tree(root: Path) -> dict[str, bytes]:
    return {k: _CREATED.sub(b'"created_at": "T"', v) for k, v in tree_bytes(root).items()}


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for k, v in tree_bytes(root).items():
        h.update(k.encode() + b"\0" + v + b"\0")
    return h.hexdigest()


# -- toy tabular task --------------------------------------------------------------


def make_toy_data(root: Path, rows: int = 200, test_rows: int = 50, seed: int = 7) -> Path:
    """y = 3*x1 + 2*x2 + 1 + noise; the last ``test_rows`` rows form the unlabeled test split."""
    rng = np.random.default_rng(seed)
    x1 = np.round(rng.uniform(0, 10, rows), 3)
    x2 = np.round(rng.uniform(0, 5, rows), 3)
    y = np.round(3 * x1 + 2 * x2 + 1 + rng.normal(0, 0.5, rows), 4)
    (root / "train").mkdir(parents=True)
    (root / "test").mkdir()
    with open(root / "full.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x1", "x2", "y"])
        for i in range(rows):
            w.writerow([f"r{i:03d}", x1[i], x2[i], y[i]])
    n_train = rows - test_rows
    with open(root / "train" / "train.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x1", "x2", "y"])
        for i in range(n_train):
            w.writerow([f"r{i:03d}", x1[i], x2[i], y[i]])
    with open(root / "test" / "test.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x1", "x2"])
        for i in range(n_train, rows):
            w.writerow([f"r{i:03d}", x1[i], x2[i]])
    return root


def toy_task(data_dir: Path, metric: str = "mae", higher_is_better: bool = False) -> TaskSpec:
    return TaskSpec(
        task_id="toy-regression",
        description="Predict y from x1 and x2. Evaluation: mean absolute error on the test split.",
        data_dir=str(data_dir),
        metric_name=metric,
        higher_is_better=higher_is_better,
    )


def oracle_predictions(data_dir: Path, features=("x1", "x2")) -> bytes:
    """Ordinary least squares with numpy, formatted like the scripted solution."""
    with open(data_dir / "train" / "train.csv") as fh:
        train = list(csv.DictReader(fh))
    with open(data_dir / "test" / "test.csv") as fh:
        test = list(csv.DictReader(fh))
    X = np.array([[1.0] + [float(r[f]) for f in features] for r in train])
    y = np.array([float(r["y"]) for r in train])
    w, *_ = np.linalg.lstsq(X, y, rcond=None)
    lines = ["id,prediction"]
    for r in test:
        p = w[0] + sum(wi * float(r[f]) for wi, f in zip(w[1:], features))
        lines.append(f"{r['id']},{p:.4f}")
    return ("\n".join(lines) + "\n").encode()


TRAIN_SCRIPT = '''\
import csv, json, os
from pathlib import Path

FEATURES = {features!r}
rows = list(csv.DictReader(open(Path(os.environ["TASK_DATA_DIR"]) / "train" / "train.csv")))


def fit(rows):
    X = [[1.0] + [float(r[f]) for f in FEATURES] for r in rows]
    y = [float(r["y"]) for r in rows]
    n = len(X[0])
    A = [[sum(a[i] * a[j] for a in X) for j in range(n)] for i in range(n)]
    b = [sum(a[i] * t for a, t in zip(X, y)) for i in range(n)]
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(A[r][c]))
        A[c], A[p], b[c], b[p] = A[p], A[c], b[p], b[c]
        for r in range(c + 1, n):
            f = A[r][c] / A[c][c]
            for k in range(c, n):
                A[r][k] -= f * A[c][k]
            b[r] -= f * b[c]
    w = [0.0] * n
    for c in reversed(range(n)):
        w[c] = (b[c] - sum(A[c][k] * w[k] for k in range(c + 1, n))) / A[c][c]
    return w


def predict(w, r):
    return w[0] + sum(wi * float(r[f]) for wi, f in zip(w[1:], FEATURES))


oof = {{}}
for k in range(5):
    w = fit([r for i, r in enumerate(rows) if i % 5 != k])
    for i, r in enumerate(rows):
        if i % 5 == k:
            oof[r["id"]] = predict(w, r)
mae = sum(abs(oof[r["id"]] - float(r["y"])) for r in rows) / len(rows)
Path("code/model.json").write_text(json.dumps({{"features": FEATURES, "weights": fit(rows)}}))
with open("oof.csv", "w") as fh:
    fh.write("row_id,score\\n")
    fh.writelines(f"{{r['id']}},{{oof[r['id']]!r}}\\n" for r in rows)
with open("oof_labels.csv", "w") as fh:
    fh.write("row_id,target\\n")
    fh.writelines(f"{{r['id']}},{{r['y']}}\\n" for r in rows)
Path("metrics.json").write_text(json.dumps(
    {{"metric_name": "mae", "value": mae, "higher_is_better": False, "split": "validation"}}))
print(f"validation mae {{mae:.6f}}")
'''

INFERENCE_SCRIPT = '''\
import csv, json, sys
from pathlib import Path

model = json.loads((Path(__file__).resolve().parent / "model.json").read_text())
test_dir, out = Path(sys.argv[1]), Path(sys.argv[2])
w, features = model["weights"], model["features"]
with open(test_dir / "test.csv") as fh, open(out, "w") as dst:
    dst.write("id,prediction\\n")
    for r in csv.DictReader(fh):
        p = w[0] + sum(wi * float(r[f]) for wi, f in zip(w[1:], features))
        dst.write(f"{r['id']},{p:.4f}\\n")
'''


def train_script(features=("x1", "x2")) -> str:
    return TRAIN_SCRIPT.format(features=list(features))


def golden_entries(with_queries: bool = True) -> list[dict]:
    """A complete n=2 run: setup, designers, coders, aggregator selecting repo-1.

    repo-1 fits both features, repo-2 only x1, so repo-1 has the lower MAE.
    """
    e: list[dict] = [
        entry("Agent: setup", calls=[call("execute_env", command="echo ready")]),
        entry("[setup] execute_env ->", text="Environment ready.\nEXPORT GOLDEN_FLAG=on"),
        entry("Agent: manager", calls=[call("invoke_designer_1", instructions="linear baseline, both features"),
                                       call("invoke_designer_2", instructions="linear baseline, x1 only")]),
        entry("[manager] invoke_designer_", calls=[call("invoke_coder_1"), call("invoke_coder_2")]),
        entry("[manager] invoke_coder_", calls=[call("read_1", path="plan.md")]),
        entry("[manager] read_1 ->", text="Both repositories are scored; repo-1 leads."),
    ]
    for i, feats in ((1, ("x1", "x2")), (2, ("x1",))):
        tag = f"@repo-{i}]"
        if with_queries:
            e += [
                entry(f"Agent: designer | Repository: repo-{i}", calls=[call("query", key="tabular")]),
                entry(f"[designer{tag} query -> # Category", calls=[call("query", key="tabular", doc_id="tabular-0001")]),
                entry(f"[designer{tag} query -> Start from",
                      calls=[call(f"write_{i}", path="plan.md", content=f"# Linear model on {', '.join(feats)}\n")]),
            ]
        else:
            e.append(entry(f"Agent: designer | Repository: repo-{i}",
                           calls=[call(f"write_{i}", path="plan.md", content=f"# Linear model on {', '.join(feats)}\n")]))
        e += [
            entry(f"[designer{tag} write_{i} ->", text=f"Plan written for repo-{i}."),
            entry(f"Agent: coder | Repository: repo-{i}", calls=[
                call(f"write_{i}", path="code/train.py", content=train_script(feats)),
                call(f"write_{i}", path="code/inference.py", content=INFERENCE_SCRIPT),
                call(f"write_{i}", path="config.yaml", content=f"features: {list(feats)}\n"),
            ]),
            entry(f"[coder{tag} write_{i} ->", calls=[call(f"execute_{i}", command=f"{PY} code/train.py")]),
            entry(f"[coder{tag} execute_{i} ->", text=f"repo-{i} trains and reports validation MAE."),
        ]
    e += [
        entry("Agent: aggregator", calls=[
            call("write_final", path="inference.py", source_repo=1, source_path="code/inference.py"),
            call("write_final", path="model.json", source_repo=1, source_path="code/model.json"),
        ]),
        entry("[aggregator] write_final ->", calls=[
            call("execute_final", command=f'{PY} inference.py "$TASK_DATA_DIR/test" predictions.csv'),
        ]),
        entry("[aggregator] execute_final ->", text="Selected repo-1 (lowest validation MAE)."),
    ]
    return e


# -- bootstrap corpus ------------------------------------------------------------------


CORPUS_TEXTS = {
    "s01": "gradient boosting on tabular data works best with shallow trees small learning rate "
           "and early stopping on a validation fold lightgbm xgboost catboost",
    "s02": "gradient boosting on tabular data works best with shallow trees small learning rate "
           "and early stopping on a validation fold lightgbm xgboost catboost",
    "s03": "tabular data gradient boosting shallow trees learning rate early stopping validation fold "
           "lightgbm xgboost catboost tuning guide",
    "s04": "rank averaging blends models by converting predictions to ranks and weighting them "
           "hill climbing ensemble selection out of fold",
    "s05": "celebrity gossip and holiday recipes for the weekend",
}


def make_corpus(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for sid, text in CORPUS_TEXTS.items():
        (root / f"{sid}.txt").write_text(text + "\n", encoding="utf-8")
        lines.append(json.dumps({"source_id": sid, "origin": "blog", "path": f"{sid}.txt",
                                 "fetched_at": FIXED_TIME}))
    (root / "corpus.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def bootstrap_entries() -> list[dict]:
    """Script for bootstrapping ``make_corpus`` on ``small_index``.

    s02 duplicates s01; s05 is dropped as irrelevant; s01+s03 form one group
    and s04 another.
    """
    e = [entry(f"source_id: {sid}\n", text="VERDICT: keep\nREASON: relevant") for sid in ("s01", "s03", "s04")]
    e.append(entry("source_id: s05\n", text="VERDICT: drop\nREASON: off topic"))
    e.append(entry("group_id: group-0001\n\n", text="VERDICT: keep\nREASON: same topic"))
    e.append(entry("group_id: group-0001\nsources:", text=l2_reply(
        "tabular", "Boosted trees for tables", "Use shallow trees, a small learning rate and early stopping.")))
    e.append(entry("group_id: group-0002\nsources:", text=l2_reply(
        "ensembling", "Rank blending", "Convert predictions to ranks and hill-climb blend weights.")))
    e.append(entry("category: tabular [", text=l1_reply(
        [("tabular-0001", "Boosted trees for tables")], "Start with boosted trees.")))
    e.append(entry("category: ensembling [", text=l1_reply(
        [("ensembling-0001", "Rank blending")], "Blend ranks, not raw scores.")))
    return e


# -- whole runs --------------------------------------------------------------------------


def golden_run(root: Path, entries: list[dict] | None = None, n_repos: int = 2):
    """Run the scripted golden pipeline under ``root``; returns (output, data_dir, kb_path, backend)."""
    from modelsmith.agents import AgentSettings
    from modelsmith.llm import RetryPolicy
    from modelsmith.orchestrator import run_task

    data = make_toy_data(root / "data")
    kb_path = save_fixture_kb(root / "kb")
    b = backend(entries if entries is not None else golden_entries())
    out = run_task(toy_task(data), kb_path, b, n_repos, run_dir=root / "run",
                   settings=AgentSettings(retry=RetryPolicy(max_attempts=1, base_delay=0.0)))
    return out, data, kb_path, b


def write_task_file(path: Path, data_dir: Path, metric: str = "mae", higher_is_better: bool = False) -> Path:
    task = toy_task(data_dir, metric, higher_is_better)
    path.write_text(json.dumps(task.to_dict()), encoding="utf-8")
    return path
