"""End-to-end pipeline through the CLI entry point."""

import hashlib
import io
import json
import sys

import pytest

from duolog.cli import main
from duolog.corpus import parse_unified
from duolog.manifest import verify_manifest


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full run: synth -> tokenizer -> teacher -> train -> eval -> generate."""
    root = tmp_path_factory.mktemp("pipeline")
    corpus = root / "corpus.jsonl"
    vocab = root / "tok.vocab"
    teacher = root / "teacher.bin"
    out = root / "run"
    report = root / "report.json"
    gen = root / "gen.jsonl"

    assert main(["corpus", "synth", "--seed", "3", "--n", "24",
                 "--out", str(corpus)]) == 0
    assert main(["tokenizer", "train", "--in", str(corpus),
                 "--vocab-size", "320", "--out", str(vocab)]) == 0
    assert main(["make-teacher", "--corpus", str(corpus), "--vocab", str(vocab),
                 "--out", str(teacher), "--steps", "2", "--batch-size", "4"]) == 0
    assert main(["train", "--corpus", str(corpus), "--vocab", str(vocab),
                 "--out-dir", str(out), "--steps", "4", "--batch-size", "4",
                 "--layers", "1", "--heads", "2", "--d-model", "16",
                 "--d-ff", "32", "--teacher-ckpt", str(teacher),
                 "--checkpoint-interval", "2"]) == 0
    assert main(["eval", "--corpus", str(corpus), "--vocab", str(vocab),
                 "--ckpt", str(out / "ckpt-final.bin"), "--out", str(report),
                 "--manifest", str(out / "manifest.json"),
                 "--max-new-tokens", "12"]) == 0
    assert main(["generate", "--corpus", str(corpus), "--vocab", str(vocab),
                 "--ckpt", str(out / "ckpt-final.bin"), "--out", str(gen),
                 "--strategy", "top_p", "--seed", "5",
                 "--max-new-tokens", "8"]) == 0
    return root


def test_pipeline_artifacts_exist(pipeline):
    out = pipeline / "run"
    assert (out / "ckpt-000002.bin").exists()
    assert (out / "ckpt-final.bin").exists()
    assert (out / "loss_log.jsonl").exists()
    assert (out / "manifest.json").exists()
    assert (pipeline / "report.json").exists()


def test_loss_log_schema(pipeline):
    lines = (pipeline / "run" / "loss_log.jsonl").read_text().strip().split("\n")
    assert len(lines) == 4
    for i, line in enumerate(lines, start=1):
        record = json.loads(line)
        assert record["step"] == i
        assert {"lm", "kl", "alpha", "total", "lr"} <= set(record)


def test_manifest_fingerprints_and_defaults(pipeline):
    problems = verify_manifest(pipeline / "run" / "manifest.json")
    assert problems == []
    m = json.loads((pipeline / "run" / "manifest.json").read_text())
    tc = m["train_config"]
    # untouched knobs surface the documented defaults
    assert tc["gamma"] == 0.95
    assert tc["alpha0"] == 0.1
    assert tc["lambda"] == 0.9999
    assert tc["learning_rate"] == 1e-4
    assert tc["warmup_fraction"] == 0.10
    assert tc["kl_direction"] == "student_to_teacher"
    assert tc["spr_enabled"] and tc["teacher_enabled"] and tc["discount_enabled"]
    assert m["metrics"], "eval --manifest should have attached metrics"
    assert m["tool_version"]


def test_manifest_catches_tampering(pipeline, tmp_path):
    src = pipeline / "run" / "manifest.json"
    m = json.loads(src.read_text())
    m["corpus_sha256"] = "0" * 64
    bad = pipeline / "run" / "tampered.json"
    bad.write_text(json.dumps(m))
    problems = verify_manifest(bad)
    assert any("corpus" in p for p in problems)


def test_eval_report_is_valid_json(pipeline):
    report = json.loads((pipeline / "report.json").read_text())
    assert set(report["bleu"]) == {"1", "2", "4"}
    assert report["dialog_count"] == 24
    assert report["perplexity"] > 1.0


def test_generate_output_schema_and_determinism(pipeline, tmp_path):
    gen = pipeline / "gen.jsonl"
    rows = [json.loads(l) for l in gen.read_text().strip().split("\n")]
    assert all(set(r) == {"generated", "id", "reference", "u"} for r in rows)
    again = tmp_path / "gen2.jsonl"
    assert main(["generate", "--corpus", str(pipeline / "corpus.jsonl"),
                 "--vocab", str(pipeline / "tok.vocab"),
                 "--ckpt", str(pipeline / "run" / "ckpt-final.bin"),
                 "--out", str(again), "--strategy", "top_p", "--seed", "5",
                 "--max-new-tokens", "8"]) == 0
    assert again.read_bytes() == gen.read_bytes()


def test_inputs_unmodified_by_training(pipeline):
    # the pipeline treats corpus and vocab as read-only inputs
    m = json.loads((pipeline / "run" / "manifest.json").read_text())
    assert sha(pipeline / "corpus.jsonl") == m["corpus_sha256"]
    assert sha(pipeline / "tok.vocab") == m["vocab_sha256"]


def test_corpus_stats_lists_every_field(pipeline, capfd):
    assert main(["corpus", "stats", "--in",
                 str(pipeline / "corpus.jsonl")]) == 0
    out = capfd.readouterr().out.strip().split("\n")
    keys = [line.split()[0] for line in out]
    assert keys == ["dialog_count", "avg_turns_per_dialog",
                    "avg_tokens_per_turn", "avg_tokens_per_dialog",
                    "unique_token_count"]


def test_corpus_validate_good_and_corrupt(pipeline, tmp_path, capfd):
    good = pipeline / "corpus.jsonl"
    assert main(["corpus", "validate", "--in", str(good)]) == 0
    capfd.readouterr()

    bad = tmp_path / "bad.jsonl"
    record = {"id": "x", "text": "A: fine\n\n\nB: cut off"}
    bad.write_text(json.dumps(record) + "\n", encoding="utf-8")
    assert main(["corpus", "validate", "--in", str(bad)]) == 1
    err = capfd.readouterr().err
    assert "invalid corpus" in err and "byte offset" in err

    mangled = tmp_path / "mangled.jsonl"
    mangled.write_text("{not json at all\n", encoding="utf-8")
    assert main(["corpus", "validate", "--in", str(mangled)]) == 1


def test_tokenizer_training_is_byte_deterministic(pipeline, tmp_path):
    again = tmp_path / "again.vocab"
    assert main(["tokenizer", "train", "--in", str(pipeline / "corpus.jsonl"),
                 "--vocab-size", "320", "--out", str(again)]) == 0
    assert again.read_bytes() == (pipeline / "tok.vocab").read_bytes()


def test_corpus_ingest_round_trip(tmp_path, capfd):
    tsv = tmp_path / "turns.tsv"
    tsv.write_text(
        "d1\t0\tcustomer\thello there\n"
        "d1\t1\tagent\thow can i help\n"
        "d2\t1\tagent\twelcome back\n"
        "d2\t0\tcustomer\thi again\n",
        encoding="utf-8")
    out = tmp_path / "ingested.jsonl"
    assert main(["corpus", "ingest", "--in", str(tsv),
                 "--role-map", "customer=A,agent=B", "--out", str(out)]) == 0
    rows = [json.loads(l) for l in out.read_text().strip().split("\n")]
    assert [r["id"] for r in rows] == ["d1", "d2"]
    assert rows[1]["text"] == "A: hi again\n\n\nB: welcome back\n\n\n"
    assert main(["corpus", "ingest", "--in", str(tsv),
                 "--role-map", "customer=A,agent=Q", "--out", str(out)]) == 1
    assert "error" in capfd.readouterr().err


def test_env_overrides_and_flag_precedence(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("DUOLOG_GAMMA", "0.5")
    monkeypatch.setenv("DUOLOG_TOTAL_STEPS", "2")
    out1 = tmp_path / "env_run"
    assert main(["train", "--corpus", str(pipeline / "corpus.jsonl"),
                 "--vocab", str(pipeline / "tok.vocab"),
                 "--out-dir", str(out1), "--batch-size", "2",
                 "--layers", "1", "--heads", "2", "--d-model", "16",
                 "--d-ff", "32", "--no-teacher"]) == 0
    m1 = json.loads((out1 / "manifest.json").read_text())
    assert m1["train_config"]["gamma"] == 0.5
    assert m1["train_config"]["total_steps"] == 2

    out2 = tmp_path / "flag_run"
    assert main(["train", "--corpus", str(pipeline / "corpus.jsonl"),
                 "--vocab", str(pipeline / "tok.vocab"),
                 "--out-dir", str(out2), "--batch-size", "2",
                 "--layers", "1", "--heads", "2", "--d-model", "16",
                 "--d-ff", "32", "--no-teacher", "--gamma", "0.7"]) == 0
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m2["train_config"]["gamma"] == 0.7


def test_gamma_one_equals_discount_disabled(pipeline, tmp_path):
    common = ["train", "--corpus", str(pipeline / "corpus.jsonl"),
              "--vocab", str(pipeline / "tok.vocab"),
              "--steps", "3", "--batch-size", "4", "--seed", "11",
              "--layers", "1", "--heads", "2", "--d-model", "16",
              "--d-ff", "32", "--no-teacher"]
    a, b = tmp_path / "g1", tmp_path / "nd"
    assert main(common + ["--out-dir", str(a), "--gamma", "1.0"]) == 0
    assert main(common + ["--out-dir", str(b), "--no-discount"]) == 0
    log_a = (a / "loss_log.jsonl").read_text().strip().split("\n")
    log_b = (b / "loss_log.jsonl").read_text().strip().split("\n")
    assert [json.loads(x)["lm"] for x in log_a] == \
        [json.loads(x)["lm"] for x in log_b]


def test_train_requires_teacher_checkpoint(pipeline, tmp_path, capfd):
    assert main(["train", "--corpus", str(pipeline / "corpus.jsonl"),
                 "--vocab", str(pipeline / "tok.vocab"),
                 "--out-dir", str(tmp_path / "x"), "--steps", "1"]) == 1
    assert "teacher" in capfd.readouterr().err


def test_vocab_budget_too_small_fails_cleanly(pipeline, tmp_path, capfd):
    assert main(["tokenizer", "train", "--in", str(pipeline / "corpus.jsonl"),
                 "--vocab-size", "10", "--out", str(tmp_path / "v")]) == 1
    assert "error" in capfd.readouterr().err


def test_missing_file_reports_and_exits_nonzero(tmp_path, capfd):
    assert main(["corpus", "stats", "--in", str(tmp_path / "ghost.jsonl")]) == 1
    assert "file error" in capfd.readouterr().err


def test_chat_round_trip(pipeline, tmp_path, monkeypatch, capfd):
    transcript = tmp_path / "chat.txt"
    monkeypatch.setattr(sys, "stdin", io.StringIO("hello there\n\n"))
    assert main(["chat", "--vocab", str(pipeline / "tok.vocab"),
                 "--ckpt", str(pipeline / "run" / "ckpt-final.bin"),
                 "--human-role", "A", "--strategy", "greedy",
                 "--max-new-tokens", "8",
                 "--transcript", str(transcript)]) == 0
    out = capfd.readouterr().out
    assert out.startswith("B: ")
    d = parse_unified(transcript.read_text(encoding="utf-8"), dialog_id="chat")
    assert len(d.utterances) == 2
    assert d.utterances[0].text == "hello there"


def test_version_flag(capfd):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capfd.readouterr().out.strip()
