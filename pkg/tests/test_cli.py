import hashlib
import json

import pytest

from memq.cli import main
from memq.store import Subtype, load_items, load_qa
from memq.synthesis import truncate_answer


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, idx, model = root / "data", root / "idx", root / "model.json"
    assert main(["gen", "--seed", "7", "--chars", "4", "--qa-per-char", "12", "-o", str(data)]) == 0
    assert main(["index", "build", "--corpus", str(data / "corpus.jsonl"), "-o", str(idx)]) == 0
    assert main(["classifier", "train", "--data", str(data / "questions.train.tsv"), "-o", str(model)]) == 0
    return root, data, idx, model


def test_gen_ingest_json(capsys, workspace):
    _, data, _, _ = workspace
    code, out, _ = run_cli(capsys, "ingest", "--corpus", data / "corpus.jsonl", "--qa", data / "qa.json", "--format", "json")
    assert code == 0
    obj = json.loads(out)
    assert obj["counts"]["characters"] == 4
    assert obj["unaligned"] == []


def test_classifier_eval(capsys, workspace):
    _, data, _, model = workspace
    code, out, _ = run_cli(capsys, "classifier", "eval", "--model", model, "--data", data / "questions.test.tsv", "--format", "json")
    assert code == 0 and json.loads(out)["accuracy"] >= 0.9


def answer(capsys, workspace, question, character, *extra):
    _, _, idx, model = workspace
    code, out, err = run_cli(
        capsys, "answer", "--index", idx, "--model", model, "--character", character, "--format", "json", *extra, question
    )
    return code, (json.loads(out) if code == 0 else None), err


def test_answer_for_relationship_question_is_that_memory(capsys, workspace):
    _, data, idx, _ = workspace
    items = {it.item_id: it for it in load_items(idx / "items.jsonl")}
    sr = [q for q in load_qa(data / "qa.json") if items[q.reference_item_ids[0]].subtype == Subtype.SR]
    assert sr
    for q in sr:
        code, obj, _ = answer(capsys, workspace, q.question, q.character_id)
        assert code == 0
        assert obj["answer"] == truncate_answer(items[q.reference_item_ids[0]].text)
        assert len(obj["pool"]) == 6 and len(obj["top"]) == 3


def test_answer_verbose_includes_prompt(capsys, workspace):
    _, data, _, _ = workspace
    q = load_qa(data / "qa.json")[0]
    code, obj, _ = answer(capsys, workspace, q.question, q.character_id, "--verbose")
    assert code == 0 and q.question in obj["prompt"]


def test_unknown_character_exit_3(capsys, workspace):
    code, _, err = answer(capsys, workspace, "谁?", "Nobody Here")
    assert code == 3 and "unknown character" in err


def test_no_classify_matches_uniform_top1(capsys, workspace, tmp_path):
    _, data, _, _ = workspace
    # a classifier trained on perfectly balanced, token-free evidence is uniform
    uniform = tmp_path / "uniform.json"
    (tmp_path / "u.tsv").write_text("semantic\tzzzz\nepisodic\tzzzz\n", encoding="utf-8")
    assert main(["classifier", "train", "--data", str(tmp_path / "u.tsv"), "-o", str(uniform)]) == 0
    capsys.readouterr()
    for q in load_qa(data / "qa.json")[:10]:
        _, a, _ = answer(capsys, workspace, q.question, q.character_id, "--k", "1", "--no-classify")
        _, _, idx, _ = workspace
        code, out, _ = run_cli(
            capsys, "answer", "--index", idx, "--model", uniform, "--character", q.character_id,
            "--format", "json", "--k", "1", q.question,
        )
        assert code == 0
        b = json.loads(out)
        assert b["distribution"] == {"p_semantic": 0.5, "p_episodic": 0.5}
        assert a["top"][0]["item_id"] == b["top"][0]["item_id"]


def test_missing_artifacts_exit_3(capsys, workspace, tmp_path):
    code, _, err = run_cli(capsys, "answer", "--index", tmp_path / "nope", "--model", "x", "--character", "c", "q")
    assert code == 3


def test_config_errors_exit_2(capsys, workspace, tmp_path):
    _, data, idx, model = workspace
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"rerank": {"alpha": 3}}), encoding="utf-8")
    code, _, _ = run_cli(capsys, "eval", "--config", bad, "--qa", data / "qa.json", "--index", idx, "--model", model)
    assert code == 2
    bad.write_text(json.dumps({"bogus": 1}), encoding="utf-8")
    assert run_cli(capsys, "eval", "--config", bad)[0] == 2
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"character_id": 5}\n', encoding="utf-8")
    assert run_cli(capsys, "ingest", "--corpus", broken)[0] == 2
    code, _, err = run_cli(capsys, "answer", "--index", idx, "--model", model, "--character", "c", "--backend", "chat", "q")
    assert code == 2


def test_eval_setting_all_and_determinism(capsys, workspace, tmp_path):
    _, data, idx, model = workspace
    common = ["--qa", data / "qa.json", "--index", idx, "--model", model, "--setting", "all", "--no-figures"]
    code, out, _ = run_cli(capsys, "eval", *common, "--run-dir", tmp_path / "r1", "--format", "json")
    assert code == 0
    reports = json.loads(out)["reports"]
    assert [(r["pipeline"], r["condition"]) for r in reports] == [
        ("w-mc+r", "retrieved"), ("w/o-mc+w-r", "retrieved"), ("w/o-mc+r", "retrieved")
    ]
    assert run_cli(capsys, "eval", *common, "--run-dir", tmp_path / "r2")[0] == 0
    for name in ("report.json", "table.tsv"):
        a = hashlib.sha256((tmp_path / "r1" / name).read_bytes()).hexdigest()
        b = hashlib.sha256((tmp_path / "r2" / name).read_bytes()).hexdigest()
        assert a == b
    for name in ("config.json", "timings.json", "artifacts.json", "table.txt"):
        assert (tmp_path / "r1" / name).exists()
    # an existing run directory is never touched again
    before = (tmp_path / "r1" / "report.json").read_bytes()
    assert run_cli(capsys, "eval", *common, "--run-dir", tmp_path / "r1")[0] == 2
    assert (tmp_path / "r1" / "report.json").read_bytes() == before


def test_eval_conditions_grid(capsys, workspace, tmp_path):
    _, data, idx, model = workspace
    code, out, _ = run_cli(
        capsys, "eval", "--qa", data / "qa.json", "--index", idx, "--model", model,
        "--setting", "w/o-mc+w-r", "--condition", "all", "--no-figures", "--run-dir", tmp_path / "r", "--format", "json",
    )
    assert code == 0
    maps = {r["condition"]: r["map"] for r in json.loads(out)["reports"]}
    assert maps["cr"] == 1.0 and maps["nr"] == 0.0
    assert maps["cr"] >= maps["retrieved"] >= maps["nr"]


def test_ablate_with_figures_and_refs(capsys, workspace, tmp_path):
    _, data, idx, model = workspace
    code, out, _ = run_cli(
        capsys, "ablate", "--qa", data / "qa.json", "--index", idx, "--model", model, "--paper-refs", "--run-dir", tmp_path / "a"
    )
    assert code == 0
    assert (tmp_path / "a" / "figures" / "recall_at_k.png").stat().st_size > 0
    assert (tmp_path / "a" / "figures" / "map.png").stat().st_size > 0
    header = (tmp_path / "a" / "table.tsv").read_text(encoding="utf-8").splitlines()[0]
    assert "ref" in header


def test_replay_backend_eval(capsys, workspace, tmp_path):
    _, data, idx, model = workspace
    rec = tmp_path / "rec"
    rec.mkdir()
    code, _, err = run_cli(
        capsys, "eval", "--qa", data / "qa.json", "--index", idx, "--model", model, "--backend", "replay",
        "--replay-dir", rec, "--no-figures", "--run-dir", tmp_path / "r",
    )
    # nothing was recorded, so every generation fails and the run says so
    assert code == 4 and "failed" in err
    assert (tmp_path / "r" / "report.json").exists()
