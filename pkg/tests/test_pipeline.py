import json

import pytest

from vlforge.benchmark import BenchmarkManifest
from vlforge.config import PipelineConfig
from vlforge.pipeline import AwaitingReview, PipelineRunner
from vlforge.review import ReviewStore
from vlforge.store import read_jsonl

from conftest import build_pipeline_fixture


def run_fixture(config_path, auto_accept=True):
    config = PipelineConfig.from_file(config_path)
    runner = PipelineRunner(config, auto_accept=auto_accept)
    summary = runner.run()
    return config, runner, summary


def stage_counts(summary, stage, occurrence=0):
    matches = [s for s in summary["stages"] if s["stage"] == stage]
    return matches[occurrence]["counts"]


def test_pipeline_end_to_end_counts(pipeline_fixture):
    config, runner, summary = run_fixture(pipeline_fixture)
    assert summary["status"] == "complete"

    # Hand-reconciled stage arithmetic: 20 images, 4 labels x 5,
    # eval_fraction 0.4 -> 2 eval per label -> 8 eval / 12 train images.
    assert stage_counts(summary, "ingest")["ingested"] == 20
    assert stage_counts(summary, "split") == {
        "train": 12, "eval": 8, "quarantine": 0}
    # captions = accepted images
    assert stage_counts(summary, "caption")["accepted"] == 20
    # open items = 2 x accepted captions - skips; choice = 2 x images
    synth = stage_counts(summary, "synthesize")
    assert synth["open"] == 40 and synth["choice"] == 40
    assert synth["skipped_images"] == 0 and synth["flagged"] == 0
    refine = stage_counts(summary, "refine")
    assert refine["accepted"] == 80
    assert refine["evaluate_calls"] == refine["iterations_total"] == 80
    assert stage_counts(summary, "filter")["kept"] == 80
    assert stage_counts(summary, "dedup", 0)["removed_items"] == 0
    review = stage_counts(summary, "review")
    assert review["enqueued"] == review["accepted"] == 32  # 8 images x 4 items
    bench = stage_counts(summary, "benchmark")
    assert bench["paired_images"] == 8
    assert bench["single_choice"] == 16  # choice items = 2 x paired images
    assert bench["open_ended"] == 16
    # cross-split verification finds nothing to remove
    assert stage_counts(summary, "dedup", 1)["leaks"] == 0

    # ledger shape: exactly 10 entries, one per stage in order
    ledger = runner.store.read_ledger()
    assert [e.stage for e in ledger] == [
        "ingest", "split", "caption", "synthesize", "refine",
        "filter", "dedup", "review", "benchmark", "dedup"]
    assert all(e.config_hash == config.hash() for e in ledger)

    manifest = BenchmarkManifest.load(
        runner.workspace / summary["benchmark"])
    manifest.verify()
    assert len(manifest.pair_index) == 8


def test_pipeline_every_manifest_in_exactly_one_ledger_entry(pipeline_fixture):
    _, runner, summary = run_fixture(pipeline_fixture)
    ledger = runner.store.read_ledger()
    outputs = [e.output_manifest for e in ledger]
    assert len(outputs) == len(set(outputs))
    manifest_dir = runner.workspace / "manifests" / runner.run_id
    on_disk = {p.relative_to(runner.workspace).as_posix()
               for p in manifest_dir.iterdir()}
    assert on_disk == set(outputs)


def test_pipeline_eval_stems_differ_from_train_stems(pipeline_fixture):
    _, runner, summary = run_fixture(pipeline_fixture)
    records = {row["image_id"]: row for row in read_jsonl(
        runner.workspace / "manifests" / runner.run_id / "split.jsonl")}
    items = list(read_jsonl(
        runner.workspace / "manifests" / runner.run_id / "filter.jsonl"))
    train_stems = {it["question"] for it in items
                   if it["kind"] == "single_choice"
                   and records[it["image_id"]]["split"] == "train"}
    eval_stems = {it["question"] for it in items
                  if it["kind"] == "single_choice"
                  and records[it["image_id"]]["split"] == "eval"}
    assert train_stems and eval_stems
    assert not (train_stems & eval_stems)


def test_pipeline_determinism_across_workspaces(tmp_path):
    cfg1 = build_pipeline_fixture(tmp_path / "one")
    cfg2 = build_pipeline_fixture(tmp_path / "two")
    _, runner1, summary1 = run_fixture(cfg1)
    _, runner2, summary2 = run_fixture(cfg2)
    assert summary1["checksum"] == summary2["checksum"]
    bench1 = (runner1.workspace / summary1["benchmark"]).read_bytes()
    bench2 = (runner2.workspace / summary2["benchmark"]).read_bytes()
    assert bench1 == bench2


def test_pipeline_rerun_skips_everything(pipeline_fixture):
    config, runner, first = run_fixture(pipeline_fixture)
    runner2 = PipelineRunner(config, auto_accept=True)
    second = runner2.run()
    assert all(stage["skipped"] for stage in second["stages"])
    assert second["model_calls"] == 0
    assert second["checksum"] == first["checksum"]
    # no new ledger entries were appended
    assert len(runner2.store.read_ledger()) == 10


def test_pipeline_without_auto_accept_pauses_then_resumes(pipeline_fixture):
    config = PipelineConfig.from_file(pipeline_fixture)
    runner = PipelineRunner(config, auto_accept=False)
    with pytest.raises(AwaitingReview):
        runner.run()
    # stages before review are done; the review stage has no ledger entry yet
    stages = [e.stage for e in runner.store.read_ledger()]
    assert stages == ["ingest", "split", "caption", "synthesize", "refine",
                      "filter", "dedup"]

    # a human (here: two synthetic reviewers talking to the same store)
    # resolves every task, then the re-run finishes and reuses prior stages
    store = ReviewStore(runner.workspace / "review" / "events.jsonl")
    store.register_reviewer("r1", {"reviewer"})
    store.register_reviewer("r2", {"reviewer"})
    for reviewer in ("r1", "r2"):
        while True:
            task = store.next_task(reviewer)
            if task is None:
                break
            store.submit_verdict(task.task_id, reviewer, "correct", "ok")

    resumed = PipelineRunner(config, auto_accept=False)
    summary = resumed.run()
    assert summary["status"] == "complete"
    skipped = {s["stage"]: s["skipped"] for s in summary["stages"]}
    assert skipped["ingest"] and skipped["filter"]
    assert stage_counts(summary, "review")["accepted"] == 32
    assert resumed.gateway.call_count() == 0  # no new model calls on resume


def test_pipeline_stage_failure_is_recorded(tmp_path):
    config_path = build_pipeline_fixture(tmp_path)
    text = config_path.read_text().replace("stub_script = ", "stub_script_missing = ")
    broken = tmp_path / "broken.toml"
    # without a stub script the gateway wants remote credentials -> config error
    broken.write_text(text)
    config = PipelineConfig.from_file(broken)
    from vlforge.gateway import ConfigurationError
    with pytest.raises(ConfigurationError):
        PipelineRunner(config, auto_accept=True)
