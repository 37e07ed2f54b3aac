import json

import pytest
from pydantic import ValidationError

from behavior_data import SyntheticSpec
from cli import exit_code_for, main
from errors import ConfigError, DataFormatError, PipelineStageError, TrainingDivergenceError
from evaluation import load_report, report_summary

SMALL_SYNTH = ["--behaviors", "10", "--users", "30", "--samples", "1500", "--history-length", "4",
               "--aux-size", "40"]


def _run(*argv):
    return main([str(a) for a in argv])


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert _run("--seed", 7, "--out-dir", tmp_path / name, "synth", *SMALL_SYNTH) == 0
    first = (tmp_path / "a" / "events.jsonl").read_bytes()
    assert first == (tmp_path / "b" / "events.jsonl").read_bytes()
    manifest = json.loads((tmp_path / "a" / "synth_manifest.json").read_text())
    assert manifest["seed"] == 7
    assert set(manifest["outputs"]) == {"events", "rules", "aux_corpus"}


def test_synth_rejects_zero_zipf_exponent(tmp_path):
    assert _run("--out-dir", tmp_path, "synth", "--zipf", 0) == 2
    assert not (tmp_path / "events.jsonl").exists()


def test_missing_event_file(tmp_path, capsys):
    missing = tmp_path / "missing.jsonl"
    assert _run("--out-dir", tmp_path, "partition", "--events", missing) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key(tmp_path, config_file):
    payload = json.loads(config_file.read_text())
    payload["pipeline"]["learning_rate"] = 0.1
    config_file.write_text(json.dumps(payload))
    assert _run("--config", config_file, "--out-dir", tmp_path, "synth") == 2


def test_malformed_events_report_the_line(tmp_path, capsys):
    events = tmp_path / "events.jsonl"
    events.write_text('{"user": "u", "day": 1, "hour": 3, "location": "home", "behavior": "Music"}\n{oops\n')
    assert _run("--out-dir", tmp_path, "partition", "--events", events) == 2
    assert f"{events}:2" in capsys.readouterr().err


def test_stage_by_stage_chain(tmp_path, config_file):
    out = tmp_path / "out"
    base = ["--config", config_file, "--out-dir", out]
    assert _run(*base, "synth", *SMALL_SYNTH) == 0
    assert _run(*base, "partition", "--events", out / "events.jsonl", "--anchor-threshold", 0.02) == 0
    profile = json.loads((out / "profile.json").read_text())
    assert profile["thresholds"]["anchor"] == 0.02

    samples, profile_path = out / "samples", out / "profile.json"
    assert _run(*base, "export-prompts", "--samples", samples / "train.jsonl", "--profile", profile_path,
                "--aux-corpus", out / "aux_corpus.jsonl") == 0
    train_count = len((samples / "train.jsonl").read_text().splitlines())
    written = len((out / "instructions.jsonl").read_text().splitlines())
    assert written == train_count + train_count // 20

    assert _run(*base, "train-a", "--profile", profile_path, "--train", samples / "train.jsonl",
                "--validation", samples / "validation.jsonl", "--aux-corpus", out / "aux_corpus.jsonl") == 0
    reference = out / "stage_a" / "model.json"
    assert _run(*base, "score", "--checkpoint", reference, "--pool", samples / "train.jsonl",
                "--profile", profile_path, "--lambda", 0.3) == 0
    assert len((out / "difficulty.jsonl").read_text().splitlines()) == train_count

    assert _run(*base, "--threads", 2, "select", "--checkpoint", reference, "--pool", samples / "train.jsonl",
                "--profile", profile_path, "--per-class", 3) == 0
    selection = json.loads((out / "selection.json").read_text())
    pair_lines = (out / "pairs.jsonl").read_text().splitlines()
    assert len(pair_lines) == selection["total"] <= 30

    assert _run(*base, "pairs", "--checkpoint", reference, "--samples", out / "selected.jsonl",
                "--profile", profile_path) == 0
    assert (out / "pairs.jsonl").read_text().splitlines() == pair_lines

    assert _run(*base, "train-b", "--reference", reference, "--pairs", out / "pairs.jsonl",
                "--profile", profile_path, "--beta", 0.2) == 0
    for stage in ("stage_a", "stage_b"):
        assert _run(*base, "eval", "--checkpoint", out / stage / "model.json", "--testset",
                    samples / "test_balanced.jsonl", "--profile", profile_path, "--protocol", "balanced",
                    "--output", out / f"{stage}.json") == 0
    assert _run(*base, "compare", out / "stage_a.json", out / "stage_b.json",
                "--output", out / "comparison.json") == 0
    comparison = json.loads((out / "comparison.json").read_text())
    assert set(comparison["metrics"]) == {"prec_w", "rec_w", "overall", "head", "medium", "tail"}


def test_eval_reproduces_run_metrics(tmp_path, config_file):
    out = tmp_path / "run"
    assert _run("--config", config_file, "--out-dir", out, "run") == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert _run("--config", config_file, "--out-dir", out, "eval", "--checkpoint", out / "stage_b" / "model.json",
                "--testset", out / "samples" / "test_balanced.jsonl", "--profile", out / "profile.json",
                "--protocol", "balanced", "--output", out / "eval.json") == 0
    assert report_summary(load_report(out / "eval.json")) == manifest["metrics"]["stage_b/balanced"]


def test_checkpoint_from_another_vocabulary_is_rejected(tmp_path, config_file):
    out = tmp_path / "run"
    assert _run("--config", config_file, "--out-dir", out, "run") == 0
    profile = json.loads((out / "profile.json").read_text())
    profile["vocabulary"] = [name + "_x" for name in profile["vocabulary"]]
    for row in profile["behaviors"]:
        row["behavior"] += "_x"
    other = tmp_path / "other_profile.json"
    other.write_text(json.dumps(profile))
    assert _run("--out-dir", out, "eval", "--checkpoint", out / "stage_a" / "model.json",
                "--testset", out / "samples" / "test_real.jsonl", "--profile", other) == 2


def test_precondition_failures_exit_with_two(tmp_path, config_file):
    out = tmp_path / "run"
    assert _run("--config", config_file, "--out-dir", out, "run") == 0
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert _run("--out-dir", out, "eval", "--checkpoint", out / "stage_a" / "model.json",
                "--testset", empty, "--profile", out / "profile.json") == 2
    assert _run("--config", config_file, "--out-dir", out, "select", "--checkpoint", out / "stage_a" / "model.json",
                "--pool", out / "samples" / "train.jsonl", "--profile", out / "profile.json", "--per-class", 0) == 2


def test_exit_codes():
    try:
        SyntheticSpec(zipf_exponent=0)
    except ValidationError as e:
        validation_error = e
    assert exit_code_for(validation_error) == 2
    assert exit_code_for(DataFormatError("bad", path="x.jsonl", line=3)) == 2
    assert exit_code_for(TrainingDivergenceError("nan")) == 3
    assert exit_code_for(RuntimeError("boom")) == 3
    assert exit_code_for(ConfigError("per_class must be >= 1")) == 2

    wrapped = PipelineStageError("data", "bad input")
    wrapped.__cause__ = DataFormatError("bad")
    assert exit_code_for(wrapped) == 2
    assert exit_code_for(PipelineStageError("stage_b", "boom")) == 3


def test_subcommand_is_required():
    with pytest.raises(SystemExit):
        main([])
