"""End-to-end pipeline: ingest -> split -> caption -> synth -> refine -> filter
-> dedup(within) -> review gate -> benchmark -> dedup(cross) verification.

Each stage appends a run-ledger entry; re-runs skip any stage whose
(input_manifest, config_hash) pair already has an output on disk, so an
interrupted (e.g. awaiting-review) run resumes where it stopped. The run_id
derives from the config hash, making two runs of one config byte-comparable.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

from .benchmark import BenchmarkManifest, Lexicon, build_benchmark
from .config import PipelineConfig
from .dedup import (
    DedupRecord,
    ImageSignature,
    LeakageThresholds,
    cross_split_leakage,
    find_image_duplicates,
    find_text_duplicates,
    phash,
)
from .gateway import ModelGateway, build_gateway
from .generation import (
    CaptionParseError,
    CaptionRecord,
    GenerationContext,
    GenerationError,
    KIND_CHOICE,
    KIND_OPEN,
    PromptSet,
    STATUS_REFINED,
    SynthesisError,
    VQAItem,
    filter_instruction,
    generate_caption,
    synthesize_choice_pair,
    synthesize_vqa,
)
from .refinement import RefinementContext, refine
from .review import ReviewStore
from .store import (
    CorpusStore,
    ImageRecord,
    RunLedgerEntry,
    SPLIT_EVAL,
    SPLIT_QUARANTINE,
    SPLIT_TRAIN,
    read_jsonl,
    utc_now,
    write_jsonl,
)

logger = logging.getLogger(__name__)

AUTO_REVIEWERS = ("auto-reviewer-1", "auto-reviewer-2")


class StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


class AwaitingReview(Exception):
    """The run stopped at the review gate; re-run once verdicts are in."""


class PipelineRunner:
    def __init__(self, config: PipelineConfig, auto_accept: bool = False):
        self.config = config
        self.auto_accept = auto_accept
        self.cfg_hash = config.hash()
        self.run_id = f"run-{self.cfg_hash[:12]}"
        self.workspace = config.workspace_path()
        self.workspace.mkdir(parents=True, exist_ok=True)
        self.store = CorpusStore(self.workspace)
        self.reports_dir = self.workspace / "reports"
        self.gateway: ModelGateway = build_gateway(
            stub_script=config.stub_script or None,
            api_base=config.api_base or None,
            image_loader=self.store.open_image_bytes,
            cache_dir=self.workspace / "cache" if config.cache_enabled else None,
            attempts=config.attempts,
            backoff_base_ms=config.backoff_base_ms,
            backoff_cap_ms=config.backoff_cap_ms,
            rate_limit=config.rate_limit,
            rate_burst=config.rate_burst,
            parallelism_cap=max(16, config.parallelism),
        )
        self.prompts = PromptSet.load(config.prompts_dir or None)
        if config.lexicon:
            self.lexicon = Lexicon.load(config.lexicon)
        else:
            with resources.as_file(
                    resources.files("vlforge").joinpath("data/lexicon.tsv")) as p:
                self.lexicon = Lexicon.load(p)
        self.blocklist = _load_blocklist(config.stem_blocklist)
        self.summary: dict = {"run_id": self.run_id, "stages": []}

    # -- plumbing ---------------------------------------------------------

    def _manifest(self, stage_file: str) -> str:
        return f"manifests/{self.run_id}/{stage_file}"

    def _abs(self, rel: str) -> Path:
        return self.workspace / rel

    def _run_stage(self, stage: str, input_manifest: str, output_manifest: str,
                   fn) -> str:
        """Skip when this (stage, input, config) already produced an output;
        otherwise run fn() -> item_counts and append a ledger entry."""
        prior = self.store.find_ledger_entry(stage, input_manifest, self.cfg_hash)
        if prior is not None and self._abs(prior.output_manifest).exists():
            logger.info("stage %s: skipped (output %s exists)",
                        stage, prior.output_manifest)
            self.summary["stages"].append(
                {"stage": stage, "skipped": True, "counts": prior.item_counts})
            return prior.output_manifest
        started = utc_now()
        try:
            counts = fn()
        except AwaitingReview:
            raise
        except Exception as exc:
            self.store.append_ledger(RunLedgerEntry(
                run_id=self.run_id, stage=stage, input_manifest=input_manifest,
                output_manifest=output_manifest, config_hash=self.cfg_hash,
                started=started, finished=utc_now(),
                item_counts={"failed": 1, "error": str(exc)[:200]}))
            raise StageFailure(stage, exc) from exc
        self.store.append_ledger(RunLedgerEntry(
            run_id=self.run_id, stage=stage, input_manifest=input_manifest,
            output_manifest=output_manifest, config_hash=self.cfg_hash,
            started=started, finished=utc_now(), item_counts=counts))
        self.summary["stages"].append(
            {"stage": stage, "skipped": False, "counts": counts})
        return output_manifest

    def _pmap(self, fn, items):
        if not items:
            return []
        with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
            return list(pool.map(fn, items))

    # -- stages ---------------------------------------------------------------

    def run(self) -> dict:
        cfg = self.config
        ingest_out = self._run_stage(
            "ingest", str(cfg.source_dir), self._manifest("ingest.jsonl"),
            lambda: self._stage_ingest())
        split_out = self._run_stage(
            "split", ingest_out, self._manifest("split.jsonl"),
            lambda: self._stage_split(ingest_out))
        caption_out = self._run_stage(
            "caption", split_out, self._manifest("caption.jsonl"),
            lambda: self._stage_caption(split_out))
        synth_out = self._run_stage(
            "synthesize", caption_out, self._manifest("synthesize.jsonl"),
            lambda: self._stage_synthesize(split_out, caption_out))
        refine_out = self._run_stage(
            "refine", synth_out, self._manifest("refine.jsonl"),
            lambda: self._stage_refine(synth_out, caption_out))
        filter_out = self._run_stage(
            "filter", refine_out, self._manifest("filter.jsonl"),
            lambda: self._stage_filter(refine_out, caption_out))
        dedup_out = self._run_stage(
            "dedup", filter_out, self._manifest("dedup.jsonl"),
            lambda: self._stage_dedup_within(filter_out))
        review_out = self._run_stage(
            "review", dedup_out, self._manifest("review.jsonl"),
            lambda: self._stage_review(dedup_out))
        bench_out = self._run_stage(
            "benchmark", review_out, self._manifest("benchmark.json"),
            lambda: self._stage_benchmark(dedup_out, review_out))
        self._run_stage(
            "dedup", bench_out, self._manifest("dedup_cross.json"),
            lambda: self._stage_dedup_cross(filter_out, bench_out))

        manifest = BenchmarkManifest.load(self._abs(bench_out))
        self.summary["benchmark"] = bench_out
        self.summary["checksum"] = manifest.checksum
        self.summary["model_calls"] = self.gateway.call_count()
        self.summary["status"] = "complete"
        return self.summary

    def _stage_ingest(self) -> dict:
        report = self.store.ingest_images(
            self.config.source_dir, self.config.source_tag,
            self.config.label_map or None, self.run_id,
            workers=self.config.parallelism)
        counts = report.to_dict()
        counts.pop("manifest", None)
        return counts

    def _stage_split(self, ingest_rel: str) -> dict:
        return self.store.assign_splits(
            self._abs(ingest_rel), self.config.eval_fraction, self.config.seed,
            self._abs(self._manifest("split.jsonl")))

    def _load_records(self, split_rel: str) -> dict[str, ImageRecord]:
        return {
            row["image_id"]: ImageRecord.from_dict(row)
            for row in read_jsonl(self._abs(split_rel))
        }

    def _gen_ctx(self) -> GenerationContext:
        cfg = self.config
        return GenerationContext(
            gateway=self.gateway, prompts=self.prompts, run_id=self.run_id,
            caption_model=cfg.caption_model, synth_model=cfg.synth_model,
            filter_model=cfg.filter_model,
            caption_temperature=cfg.caption_temperature,
            synth_temperature=cfg.synth_temperature,
            filter_temperature=cfg.filter_temperature,
            max_tokens=cfg.max_tokens)

    def _stage_caption(self, split_rel: str) -> dict:
        records = [r for r in self._load_records(split_rel).values()
                   if r.split in (SPLIT_TRAIN, SPLIT_EVAL)]
        ctx = self._gen_ctx()

        def one(record: ImageRecord):
            try:
                return generate_caption(record, ctx)
            except CaptionParseError:
                logger.warning("caption rejected for image %s", record.image_id)
                return None

        captions = [c for c in self._pmap(one, records) if c is not None]
        captions.sort(key=lambda c: c.image_id)
        write_jsonl(self._abs(self._manifest("caption.jsonl")),
                    (c.to_dict() for c in captions))
        return {"accepted": len(captions),
                "rejected": len(records) - len(captions),
                "quarantined_images_skipped": sum(
                    1 for r in self._load_records(split_rel).values()
                    if r.split == SPLIT_QUARANTINE)}

    def _stage_synthesize(self, split_rel: str, caption_rel: str) -> dict:
        records = self._load_records(split_rel)
        captions = [CaptionRecord.from_dict(row)
                    for row in read_jsonl(self._abs(caption_rel))]
        ctx = self._gen_ctx()

        # Distractor mining: same-family = same source dataset; attribute
        # pools come from the other captions of the family (co-occurring
        # conditions).
        labels_by_family: dict[str, set[str]] = {}
        attrs_by_family: dict[str, set[str]] = {}
        all_labels: set[str] = set()
        for cap in captions:
            rec = records[cap.image_id]
            labels_by_family.setdefault(rec.source_dataset, set()).add(
                rec.category_label)
            all_labels.add(rec.category_label)
            for key in ("color_or_lesion", "maturity_or_morphology"):
                value = cap.structured_fields.get(key, "unknown")
                if value and value != "unknown":
                    attrs_by_family.setdefault(rec.source_dataset, set()).add(value)

        counts = {"open": 0, "choice": 0, "skipped_images": 0, "flagged": 0}
        items: list[VQAItem] = []

        def synth_open(cap: CaptionRecord):
            try:
                return synthesize_vqa(cap, ctx)
            except SynthesisError:
                return None

        open_results = self._pmap(synth_open, captions)
        for cap, result in zip(captions, open_results):
            if result is None:
                counts["skipped_images"] += 1
                logger.warning("synthesis skipped for image %s", cap.image_id)
                continue
            items.extend(result)
            counts["open"] += len(result)

        for cap in captions:
            rec = records[cap.image_id]
            family = rec.source_dataset
            try:
                # Eval-split images draw a different stem variant than train
                # images so benchmark stems never overlap training templates.
                pair = synthesize_choice_pair(
                    rec, cap, labels_by_family.get(family, set()),
                    seed=self.config.seed, run_id=self.run_id,
                    prompts=self.prompts,
                    attribute_pool=attrs_by_family.get(family, set()),
                    cross_group_pool=all_labels,
                    stem_blocklist=self.blocklist,
                    stem_pick=1 if rec.split == SPLIT_EVAL else 0)
            except GenerationError as exc:
                counts["skipped_images"] += 1
                logger.warning("choice synthesis failed for %s: %s",
                               cap.image_id, exc)
                continue
            counts["flagged"] += sum(1 for it in pair if it.flags)
            items.extend(pair)
            counts["choice"] += len(pair)

        items.sort(key=lambda it: it.item_id)
        write_jsonl(self._abs(self._manifest("synthesize.jsonl")),
                    (it.to_dict() for it in items))
        return counts

    def _caption_lookup(self, caption_rel: str) -> dict[str, CaptionRecord]:
        return {
            row["image_id"]: CaptionRecord.from_dict(row)
            for row in read_jsonl(self._abs(caption_rel))
        }

    def _stage_refine(self, synth_rel: str, caption_rel: str) -> dict:
        captions = self._caption_lookup(caption_rel)
        items = [VQAItem.from_dict(row)
                 for row in read_jsonl(self._abs(synth_rel))]
        ctx = RefinementContext(
            gateway=self.gateway, run_id=self.run_id,
            model_id=self.config.refine_model,
            temperature=self.config.refine_temperature,
            max_tokens=self.config.max_tokens)
        traces_dir = self.workspace / "traces"

        def one(item: VQAItem):
            refined, trace = refine(
                item, captions[item.image_id], ctx,
                threshold=self.config.threshold,
                max_iterations=self.config.max_iterations)
            trace.save(traces_dir)
            return refined, trace

        results = self._pmap(one, items)
        refined_items = sorted((it for it, _ in results), key=lambda it: it.item_id)
        write_jsonl(self._abs(self._manifest("refine.jsonl")),
                    (it.to_dict() for it in refined_items))
        accepted = sum(1 for _, t in results if t.outcome == "accepted")
        return {
            "accepted": accepted,
            "rejected_max_iters": len(results) - accepted,
            "evaluate_calls": ctx.counters.get("evaluate_calls", 0),
            "iterations_total": sum(t.iterations_used for _, t in results),
        }

    def _stage_filter(self, refine_rel: str, caption_rel: str) -> dict:
        captions = self._caption_lookup(caption_rel)
        items = [VQAItem.from_dict(row)
                 for row in read_jsonl(self._abs(refine_rel))]
        ctx = self._gen_ctx()
        candidates = [it for it in items if it.status == STATUS_REFINED]

        decisions = self._pmap(
            lambda it: filter_instruction(it, captions[it.image_id], ctx),
            candidates)
        items.sort(key=lambda it: it.item_id)
        write_jsonl(self._abs(self._manifest("filter.jsonl")),
                    (it.to_dict() for it in items))
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        write_jsonl(self.reports_dir / "filter_decisions.jsonl",
                    (d.to_dict() for d in sorted(decisions, key=lambda d: d.item_id)))
        counts = {"kept": 0, "dropped": 0}
        for decision in decisions:
            counts["kept" if decision.verdict == "keep" else "dropped"] += 1
            reason_key = f"reason_{decision.reason}"
            counts[reason_key] = counts.get(reason_key, 0) + 1
        return counts

    def _bench_candidates(self, items: list[VQAItem],
                          records: dict[str, ImageRecord]) -> list[VQAItem]:
        return [it for it in items
                if it.status == STATUS_REFINED
                and records[it.image_id].split == SPLIT_EVAL]

    def _stage_dedup_within(self, filter_rel: str) -> dict:
        records = self._load_records(self._manifest("split.jsonl"))
        items = [VQAItem.from_dict(row)
                 for row in read_jsonl(self._abs(filter_rel))]
        candidates = self._bench_candidates(items, records)
        thresholds = self._thresholds()

        eval_image_ids = sorted({it.image_id for it in candidates})
        signatures = [
            ImageSignature(image_id=i, phash=phash(self.store.open_image_bytes(i)))
            for i in eval_image_ids
        ]
        image_report = find_image_duplicates(signatures, thresholds.max_hamming)
        removed_images = set(image_report.removed_ids)

        # Text-level within-eval dedup covers open-ended items; single-choice
        # stems are templated by design, so their near-dupness is already
        # captured by the image level plus option integrity.
        text_records = [
            DedupRecord(item_id=it.item_id, image_id=it.image_id,
                        text=f"{it.question} {it.answer}")
            for it in candidates
            if it.kind == KIND_OPEN and it.image_id not in removed_images
        ]
        text_report = find_text_duplicates(text_records, thresholds)

        removed_item_ids = set(text_report.removed_ids)
        removed_item_ids.update(
            it.item_id for it in candidates if it.image_id in removed_images)
        survivors = [it for it in items if it.item_id not in removed_item_ids]
        write_jsonl(self._abs(self._manifest("dedup.jsonl")),
                    (it.to_dict() for it in survivors))
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        report = {
            "image": image_report.to_dict(),
            "text": text_report.to_dict(),
            "removed_item_ids": sorted(removed_item_ids),
        }
        (self.reports_dir / "dedup_within.json").write_text(
            json.dumps(report, indent=1), encoding="utf-8")
        return {
            "image_clusters": len(image_report.clusters),
            "text_clusters": len(text_report.clusters),
            "removed_items": len(removed_item_ids),
        }

    def _thresholds(self) -> LeakageThresholds:
        return LeakageThresholds(
            max_hamming=self.config.max_hamming,
            min_jaccard=self.config.min_jaccard,
            min_cosine=self.config.min_cosine)

    def _stage_review(self, dedup_rel: str) -> dict:
        records = self._load_records(self._manifest("split.jsonl"))
        items = [VQAItem.from_dict(row)
                 for row in read_jsonl(self._abs(dedup_rel))]
        candidates = self._bench_candidates(items, records)
        review_store = ReviewStore(self.workspace / "review" / "events.jsonl")
        enqueue_result = review_store.enqueue([
            {
                "item_id": it.item_id,
                "image_id": it.image_id,
                "payload": {
                    "kind": it.kind, "question": it.question,
                    "answer": it.answer, "options": it.options,
                },
            }
            for it in sorted(candidates, key=lambda it: it.item_id)
        ])
        if self.auto_accept:
            logger.warning(
                "--auto-accept is set: synthesizing two agreeing 'correct' "
                "verdicts per task; FOR UNATTENDED RUNS ONLY")
            for reviewer in AUTO_REVIEWERS:
                review_store.register_reviewer(reviewer, {"reviewer"})
            for reviewer in AUTO_REVIEWERS:
                while True:
                    task = review_store.next_task(reviewer)
                    if task is None:
                        break
                    review_store.submit_verdict(
                        task.task_id, reviewer, "correct", "auto-accepted")
        accepted = review_store.export_accepted()
        stats = review_store.stats()
        pending = stats["tasks"] - stats["by_state"].get("accepted", 0) \
            - stats["by_state"].get("rejected", 0)
        if pending > 0:
            raise AwaitingReview(
                f"{pending} review tasks outstanding; run `vlforge serve` and "
                "re-run the pipeline after verdicts are in")
        write_jsonl(self._abs(self._manifest("review.jsonl")),
                    ({"item_id": i} for i in accepted))
        return {"enqueued": enqueue_result["enqueued"],
                "duplicates": enqueue_result["duplicates"],
                "accepted": len(accepted),
                "rejected": stats["by_state"].get("rejected", 0)}

    def _rubric_sums(self) -> dict[str, int]:
        sums: dict[str, int] = {}
        traces_dir = self.workspace / "traces"
        if not traces_dir.is_dir():
            return sums
        for path in traces_dir.glob("*.json"):
            data = json.loads(path.read_text(encoding="utf-8"))
            if data["iterations"]:
                sums[data["item_id"]] = sum(
                    data["iterations"][-1]["scores"].values())
        return sums

    def _stage_benchmark(self, dedup_rel: str, review_rel: str) -> dict:
        records = self._load_records(self._manifest("split.jsonl"))
        items = [VQAItem.from_dict(row)
                 for row in read_jsonl(self._abs(dedup_rel))]
        candidates = self._bench_candidates(items, records)
        accepted = {row["item_id"] for row in read_jsonl(self._abs(review_rel))}
        manifest, counts = build_benchmark(
            self.config.bench_name, candidates,
            accepted_ids=accepted,
            rubric_sums=self._rubric_sums(),
            lexicon=self.lexicon)
        manifest.save(self._abs(self._manifest("benchmark.json")))
        counts["paired_images"] = len(manifest.pair_index)
        counts["checksum"] = manifest.checksum
        return counts

    def _stage_dedup_cross(self, filter_rel: str, bench_rel: str) -> dict:
        records = self._load_records(self._manifest("split.jsonl"))
        items = [VQAItem.from_dict(row)
                 for row in read_jsonl(self._abs(filter_rel))]
        train_items = [it for it in items
                       if it.status == STATUS_REFINED
                       and records[it.image_id].split == SPLIT_TRAIN]
        manifest = BenchmarkManifest.load(self._abs(bench_rel))

        hash_cache: dict[str, int] = {}

        def phash_of(image_id: str) -> int:
            if image_id not in hash_cache:
                hash_cache[image_id] = phash(self.store.open_image_bytes(image_id))
            return hash_cache[image_id]

        train_records = [
            DedupRecord(item_id=it.item_id, image_id=it.image_id,
                        text=f"{it.question} {it.answer}",
                        phash=phash_of(it.image_id))
            for it in train_items
        ]
        bench_records = [
            DedupRecord(item_id=row["item_id"], image_id=row["image_id"],
                        text=f"{row['question']} {row.get('gold_answer', '')}",
                        phash=phash_of(row["image_id"]))
            for row in manifest.open_ended
        ] + [
            DedupRecord(item_id=row["item_id"], image_id=row["image_id"],
                        text=row["question"], phash=phash_of(row["image_id"]))
            for row in manifest.single_choice
        ]
        report = cross_split_leakage(train_records, bench_records,
                                     self._thresholds())
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        (self.reports_dir / "dedup_cross.json").write_text(
            json.dumps(report.to_dict(), indent=1), encoding="utf-8")
        out = self._abs(self._manifest("dedup_cross.json"))
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")

        if report.removed_ids:
            logger.warning(
                "cross-split verification flagged %d leaked benchmark items; "
                "rebuilding the benchmark without them", len(report.removed_ids))
            self._rebuild_benchmark_without(set(report.removed_ids))
        return {"leaks": len(report.removed_ids)}

    def _rebuild_benchmark_without(self, removed: set[str]) -> None:
        path = self._abs(self._manifest("benchmark.json"))
        manifest = BenchmarkManifest.load(path)
        open_rows = [r for r in manifest.open_ended if r["item_id"] not in removed]
        choice_by_image: dict[str, list[dict]] = {}
        for row in manifest.single_choice:
            if row["item_id"] not in removed:
                choice_by_image.setdefault(row["image_id"], []).append(row)
        choice_rows, pair_index = [], {}
        for image_id, rows in sorted(choice_by_image.items()):
            if len(rows) != 2:
                continue  # leak broke the pair; the image leaves the benchmark
            pair_index[image_id] = sorted(r["item_id"] for r in rows)
            choice_rows.extend(rows)
        rebuilt = BenchmarkManifest(
            name=manifest.name, open_ended=open_rows,
            single_choice=sorted(choice_rows, key=lambda r: r["item_id"]),
            pair_index=pair_index).seal()
        rebuilt.verify()
        rebuilt.save(path)


def _load_blocklist(path: str) -> list[str]:
    if not path:
        return []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]
