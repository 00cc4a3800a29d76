"""vlforge command line: one subcommand per pipeline stage plus run/serve.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .benchmark import BenchmarkError, BenchmarkManifest, Lexicon, build_benchmark
from .config import ConfigError, PipelineConfig
from .dedup import (
    DedupRecord,
    ImageSignature,
    LeakageThresholds,
    cross_split_leakage,
    find_image_duplicates,
    find_text_duplicates,
    phash,
)
from .gateway import GatewayError
from .generation import VQAItem
from .judging import JudgeContext, judge_run
from .metrics import evaluate_run, load_predictions
from .pipeline import AwaitingReview, PipelineRunner, StageFailure
from .refinement import (
    RefinementContext,
    RefinementTrace,
    TraceIteration,
    RubricScores,
    annotate_reward,
    select_expert_pool,
)
from .review import ReviewStore, create_app, load_roster
from .store import CorpusStore, StoreError, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlforge",
        description="vision-language dataset pipeline, benchmark builder, evaluator")
    parser.add_argument("--config", default="vlforge.toml",
                        help="pipeline config file (TOML-like key/value)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="hash and store a directory of images")
    p.add_argument("--source", help="image directory (default: config paths.source_dir)")
    p.add_argument("--tag", help="source dataset tag")
    p.add_argument("--label-map", help="JSON file of name -> category label")
    p.add_argument("--run-id", default=None)

    p = sub.add_parser("split", help="assign train/eval splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    for name, help_text in (
            ("caption", "generate structured captions"),
            ("synth", "synthesize open-ended and single-choice drafts"),
            ("filter", "keep/drop filtering of refined items"),
            ("refine", "run the feedback/evaluation/rethinking loop")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--manifest", required=True, help="input manifest (JSONL)")
        p.add_argument("--out", required=True, help="output manifest (JSONL)")
        if name in ("synth", "refine", "filter"):
            p.add_argument("--captions", required=name != "synth",
                           help="caption manifest (JSONL)")
        if name == "synth":
            p.add_argument("--records", required=True,
                           help="split manifest with image records")
        if name == "refine":
            p.add_argument("--threshold", type=int, default=None)
            p.add_argument("--max-iters", type=int, default=None)
            p.add_argument("--traces", default=None, help="trace output directory")

    p = sub.add_parser("expert-pool", help="select and polish the expert subset")
    p.add_argument("--manifest", required=True, help="refined items (JSONL)")
    p.add_argument("--captions", required=True)
    p.add_argument("--traces", required=True, help="trace directory")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("reward", help="annotate GRPO reward components")
    p.add_argument("--manifest", required=True, help="refined/expert items (JSONL)")
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True, help="reward manifest (JSONL)")

    p = sub.add_parser("dedup", help="near-duplicate detection")
    p.add_argument("--mode", choices=("within", "cross"), required=True)
    p.add_argument("--manifest", help="items manifest (within mode)")
    p.add_argument("--train", help="train items manifest (cross mode)")
    p.add_argument("--eval", dest="eval_manifest", help="eval items manifest (cross mode)")
    p.add_argument("--max-hamming", type=int, default=None)
    p.add_argument("--min-jaccard", type=float, default=None)
    p.add_argument("--min-cosine", type=float, default=None)
    p.add_argument("--report", required=True)

    p = sub.add_parser("bench", help="benchmark assembly")
    bench_sub = p.add_subparsers(dest="bench_command", required=True)
    pb = bench_sub.add_parser("build")
    pb.add_argument("--name", default=None)
    pb.add_argument("--manifest", required=True, help="candidate items (JSONL)")
    pb.add_argument("--accepted", default=None, help="review export (JSONL of item_id)")
    pb.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score predictions against a benchmark")
    p.add_argument("--bench", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("judge", help="pairwise swap-debiased judging")
    p.add_argument("--bench", required=True)
    p.add_argument("--pred-a", required=True)
    p.add_argument("--pred-b", required=True)
    p.add_argument("--judge-model", default=None)
    p.add_argument("--report", required=True)

    p = sub.add_parser("serve", help="host the review service")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")

    p = sub.add_parser("run", help="run the full pipeline from the config")
    p.add_argument("--auto-accept", action="store_true",
                   help="synthesize agreeing review verdicts (unattended runs only)")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = PipelineConfig.from_file(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _dispatch(args, config)
    except (ConfigError, StoreError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AwaitingReview as exc:
        print(f"pipeline paused: {exc}")
        return EXIT_OK
    except (StageFailure, BenchmarkError, GatewayError, OSError, ValueError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


def _dispatch(args, config: PipelineConfig) -> int:
    handler = {
        "ingest": _cmd_ingest,
        "split": _cmd_split,
        "caption": _cmd_caption,
        "synth": _cmd_synth,
        "refine": _cmd_refine,
        "filter": _cmd_filter,
        "expert-pool": _cmd_expert_pool,
        "reward": _cmd_reward,
        "dedup": _cmd_dedup,
        "bench": _cmd_bench,
        "eval": _cmd_eval,
        "judge": _cmd_judge,
        "serve": _cmd_serve,
        "run": _cmd_run,
    }[args.command]
    return handler(args, config)


def _runner(config: PipelineConfig, auto_accept: bool = False) -> PipelineRunner:
    return PipelineRunner(config, auto_accept=auto_accept)


def _cmd_run(args, config: PipelineConfig) -> int:
    summary = _runner(config, auto_accept=args.auto_accept).run()
    print(json.dumps({k: v for k, v in summary.items() if k != "stages"}, indent=1))
    return EXIT_OK


def _cmd_ingest(args, config: PipelineConfig) -> int:
    store = CorpusStore(config.workspace_path())
    report = store.ingest_images(
        args.source or config.source_dir,
        args.tag or config.source_tag,
        args.label_map or config.label_map or None,
        args.run_id or f"run-{config.hash()[:12]}",
        workers=config.parallelism)
    print(json.dumps(report.to_dict(), indent=1))
    return EXIT_OK


def _cmd_split(args, config: PipelineConfig) -> int:
    store = CorpusStore(config.workspace_path())
    counts = store.assign_splits(
        args.manifest,
        args.eval_fraction if args.eval_fraction is not None else config.eval_fraction,
        args.seed if args.seed is not None else config.seed,
        args.out)
    print(json.dumps(counts, indent=1))
    return EXIT_OK


def _load_items(path) -> list[VQAItem]:
    return [VQAItem.from_dict(row) for row in read_jsonl(Path(path))]


def _load_captions(path) -> dict:
    from .generation import CaptionRecord
    return {row["image_id"]: CaptionRecord.from_dict(row)
            for row in read_jsonl(Path(path))}


def _cmd_caption(args, config: PipelineConfig) -> int:
    from .generation import CaptionParseError, generate_caption
    from .store import ImageRecord, SPLIT_EVAL, SPLIT_TRAIN

    runner = _runner(config)
    records = [ImageRecord.from_dict(row) for row in read_jsonl(Path(args.manifest))]
    ctx = runner._gen_ctx()
    captions = []
    rejected = 0
    for record in records:
        if record.split not in (SPLIT_TRAIN, SPLIT_EVAL):
            continue
        try:
            captions.append(generate_caption(record, ctx))
        except CaptionParseError:
            rejected += 1
    captions.sort(key=lambda c: c.image_id)
    write_jsonl(Path(args.out), (c.to_dict() for c in captions))
    print(json.dumps({"accepted": len(captions), "rejected": rejected}, indent=1))
    return EXIT_OK


def _cmd_synth(args, config: PipelineConfig) -> int:
    from .generation import (
        GenerationError, SynthesisError, synthesize_choice_pair, synthesize_vqa)
    from .store import ImageRecord

    runner = _runner(config)
    ctx = runner._gen_ctx()
    records = {row["image_id"]: ImageRecord.from_dict(row)
               for row in read_jsonl(Path(args.records))}
    captions = list(_load_captions(args.manifest).values())
    labels_by_family: dict[str, set[str]] = {}
    attrs_by_family: dict[str, set[str]] = {}
    all_labels: set[str] = set()
    for cap in captions:
        rec = records[cap.image_id]
        labels_by_family.setdefault(rec.source_dataset, set()).add(rec.category_label)
        all_labels.add(rec.category_label)
        for key in ("color_or_lesion", "maturity_or_morphology"):
            value = cap.structured_fields.get(key, "unknown")
            if value and value != "unknown":
                attrs_by_family.setdefault(rec.source_dataset, set()).add(value)

    items, skipped = [], 0
    for cap in sorted(captions, key=lambda c: c.image_id):
        rec = records[cap.image_id]
        try:
            items.extend(synthesize_vqa(cap, ctx))
        except SynthesisError:
            skipped += 1
        try:
            items.extend(synthesize_choice_pair(
                rec, cap, labels_by_family.get(rec.source_dataset, set()),
                seed=config.seed, run_id=ctx.run_id, prompts=runner.prompts,
                attribute_pool=attrs_by_family.get(rec.source_dataset, set()),
                cross_group_pool=all_labels, stem_blocklist=runner.blocklist))
        except GenerationError:
            skipped += 1
    items.sort(key=lambda it: it.item_id)
    write_jsonl(Path(args.out), (it.to_dict() for it in items))
    print(json.dumps({"items": len(items), "skipped": skipped}, indent=1))
    return EXIT_OK


def _cmd_refine(args, config: PipelineConfig) -> int:
    from .refinement import refine

    runner = _runner(config)
    captions = _load_captions(args.captions)
    items = _load_items(args.manifest)
    ctx = RefinementContext(
        gateway=runner.gateway, run_id=runner.run_id,
        model_id=config.refine_model, temperature=config.refine_temperature,
        max_tokens=config.max_tokens)
    threshold = args.threshold if args.threshold is not None else config.threshold
    max_iters = args.max_iters if args.max_iters is not None else config.max_iterations
    traces_dir = Path(args.traces) if args.traces else runner.workspace / "traces"
    out_items = []
    accepted = 0
    for item in items:
        refined, trace = refine(item, captions[item.image_id], ctx,
                                threshold=threshold, max_iterations=max_iters)
        trace.save(traces_dir)
        out_items.append(refined)
        accepted += trace.outcome == "accepted"
    out_items.sort(key=lambda it: it.item_id)
    write_jsonl(Path(args.out), (it.to_dict() for it in out_items))
    print(json.dumps({"accepted": accepted,
                      "rejected_max_iters": len(out_items) - accepted}, indent=1))
    return EXIT_OK


def _cmd_filter(args, config: PipelineConfig) -> int:
    from .generation import STATUS_REFINED, filter_instruction

    runner = _runner(config)
    captions = _load_captions(args.captions)
    items = _load_items(args.manifest)
    ctx = runner._gen_ctx()
    kept = dropped = 0
    for item in items:
        if item.status != STATUS_REFINED:
            continue
        decision = filter_instruction(item, captions[item.image_id], ctx)
        if decision.verdict == "keep":
            kept += 1
        else:
            dropped += 1
    items.sort(key=lambda it: it.item_id)
    write_jsonl(Path(args.out), (it.to_dict() for it in items))
    print(json.dumps({"kept": kept, "dropped": dropped}, indent=1))
    return EXIT_OK


def _load_traces(traces_dir: Path, item_ids) -> dict[str, RefinementTrace]:
    traces = {}
    for item_id in item_ids:
        path = traces_dir / f"{item_id}.json"
        if not path.is_file():
            continue
        data = json.loads(path.read_text(encoding="utf-8"))
        traces[item_id] = RefinementTrace(
            item_id=data["item_id"],
            iterations=[
                TraceIteration(
                    feedback_notes=it["feedback_notes"],
                    scores=RubricScores(**it["scores"]),
                    revised_question=it["revised_question"],
                    revised_answer=it["revised_answer"])
                for it in data["iterations"]],
            outcome=data["outcome"],
            iterations_used=data["iterations_used"])
    return traces


def _cmd_expert_pool(args, config: PipelineConfig) -> int:
    runner = _runner(config)
    captions = _load_captions(args.captions)
    items = [it for it in _load_items(args.manifest) if it.status == "refined"]
    traces = _load_traces(Path(args.traces), [it.item_id for it in items])
    pairs = [(it, traces[it.item_id]) for it in items if it.item_id in traces]
    ctx = RefinementContext(
        gateway=runner.gateway, run_id=runner.run_id,
        model_id=config.refine_model, temperature=config.refine_temperature,
        max_tokens=config.max_tokens)
    selected = select_expert_pool(pairs, args.k, ctx,
                                  caption_lookup=lambda i: captions.get(i))
    write_jsonl(Path(args.out), (it.to_dict() for it in selected))
    print(json.dumps({"selected": len(selected)}, indent=1))
    return EXIT_OK


def _cmd_reward(args, config: PipelineConfig) -> int:
    runner = _runner(config)
    captions = _load_captions(args.captions)
    items = [it for it in _load_items(args.manifest)
             if it.status in ("refined", "expert")]
    ctx = RefinementContext(
        gateway=runner.gateway, run_id=runner.run_id,
        model_id=config.refine_model, temperature=config.refine_temperature,
        max_tokens=config.max_tokens)
    rows, excluded = [], 0
    for item in sorted(items, key=lambda it: it.item_id):
        rewarded = annotate_reward(item, captions[item.image_id], ctx)
        if rewarded is None:
            excluded += 1
            continue
        row = rewarded.to_dict()
        row["subset"] = "single_choice" if item.kind == "single_choice" else "open_ended"
        rows.append(row)
    write_jsonl(Path(args.out), rows)
    print(json.dumps({"rewarded": len(rows), "excluded": excluded}, indent=1))
    return EXIT_OK


def _cmd_dedup(args, config: PipelineConfig) -> int:
    thresholds = LeakageThresholds(
        max_hamming=args.max_hamming if args.max_hamming is not None
        else config.max_hamming,
        min_jaccard=args.min_jaccard if args.min_jaccard is not None
        else config.min_jaccard,
        min_cosine=args.min_cosine if args.min_cosine is not None
        else config.min_cosine)
    store = CorpusStore(config.workspace_path())

    def records_of(path) -> list[DedupRecord]:
        return [DedupRecord(item_id=it.item_id, image_id=it.image_id,
                            text=f"{it.question} {it.answer}",
                            phash=phash(store.open_image_bytes(it.image_id)))
                for it in _load_items(path)]

    if args.mode == "within":
        if not args.manifest:
            raise ConfigError("--manifest is required in within mode")
        items = records_of(args.manifest)
        signatures = [ImageSignature(image_id=i, phash=h) for i, h in sorted(
            {r.image_id: r.phash for r in items}.items())]
        image_report = find_image_duplicates(signatures, thresholds.max_hamming)
        text_report = find_text_duplicates(items, thresholds)
        report = {"image": image_report.to_dict(), "text": text_report.to_dict()}
    else:
        if not args.train or not args.eval_manifest:
            raise ConfigError("--train and --eval are required in cross mode")
        report = cross_split_leakage(
            records_of(args.train), records_of(args.eval_manifest),
            thresholds).to_dict()
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(json.dumps(report, indent=1), encoding="utf-8")
    print(json.dumps(report, indent=1))
    return EXIT_OK


def _cmd_bench(args, config: PipelineConfig) -> int:
    runner = _runner(config)
    items = [it for it in _load_items(args.manifest)
             if it.status in ("refined", "expert")]
    accepted = None
    if args.accepted:
        accepted = {row["item_id"] for row in read_jsonl(Path(args.accepted))}
    manifest, counts = build_benchmark(
        args.name or config.bench_name, items,
        accepted_ids=accepted, rubric_sums=runner._rubric_sums(),
        lexicon=runner.lexicon)
    manifest.save(args.out)
    print(json.dumps({"checksum": manifest.checksum, **counts}, indent=1))
    return EXIT_OK


def _cmd_eval(args, config: PipelineConfig) -> int:
    runner = _runner(config)
    manifest = BenchmarkManifest.load(args.bench)  # refuses on checksum mismatch
    report = evaluate_run(load_predictions(args.pred), manifest,
                          lexicon=runner.lexicon)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(
        json.dumps(report.to_dict(), indent=1), encoding="utf-8")
    print(report.render_table())
    return EXIT_OK


def _cmd_judge(args, config: PipelineConfig) -> int:
    runner = _runner(config)
    manifest = BenchmarkManifest.load(args.bench)
    ctx = JudgeContext(
        gateway=runner.gateway, prompts=runner.prompts,
        model_id=args.judge_model or config.judge_model,
        temperature=config.judge_temperature)
    report = judge_run(manifest, load_predictions(args.pred_a),
                       load_predictions(args.pred_b), ctx)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(json.dumps(report, indent=1), encoding="utf-8")
    wr = report["win_rate"]
    print(f"WR (ties excluded): {'null' if wr is None else f'{wr:.1f}%'} "
          f"({report['wins']}W/{report['ties']}T/{report['losses']}L)")
    return EXIT_OK


def _cmd_serve(args, config: PipelineConfig) -> int:
    import uvicorn

    if not config.reviewers:
        raise ConfigError("paths.reviewers (roster TSV) is required for serve")
    roster = load_roster(config.reviewers)
    store = ReviewStore(config.workspace_path() / "review" / "events.jsonl")
    app = create_app(store, roster)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
