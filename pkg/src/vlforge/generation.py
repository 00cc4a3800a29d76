"""Data Generator stages: structured captions, VQA synthesis, instruction filtering.

Model replies are exchanged as fenced ``key: value`` blocks so parsing stays
deterministic across backends; a single retry with a stricter format reminder
is allowed before an item is rejected or skipped.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .gateway import GatewayError, ModelGateway, ModelRequest
from .store import ImageRecord, _derive_seed

KIND_OPEN = "open_ended"
KIND_CHOICE = "single_choice"

CATEGORIES = ("recognition", "attribute", "diagnosis", "management", "multi_hop")
REASONING_CATEGORIES = {"diagnosis", "management", "multi_hop"}

STATUS_DRAFT = "draft"
STATUS_REFINED = "refined"
STATUS_EXPERT = "expert"
STATUS_REJECTED = "rejected"

FILTER_REASONS = ("ungrounded", "hallucinated", "generic", "duplicate_stem", "ok")

STRUCTURED_KEYS = (
    "subject", "growth_stage", "color_or_lesion", "maturity_or_morphology", "context")

_FENCE_RE = re.compile(r"```[a-zA-Z]*\n?(.*?)```", re.DOTALL)

_FORMAT_REMINDER = (
    "\n\nYour previous reply could not be parsed. Respond ONLY with the fenced "
    "block of key: value lines requested above, nothing else.")

# Generic condition phrases used to pad attribute-question distractors when
# too few co-occurring caption attributes are available.
_FALLBACK_CONDITIONS = (
    "uniform healthy green tissue",
    "yellowing along the veins",
    "powdery white coating",
    "wilting and curled margins",
    "dark water-soaked spots",
    "dry necrotic edges",
)


class GenerationError(Exception):
    """Base class for generation-stage failures."""


class CaptionParseError(GenerationError):
    """Caption reply unparseable after the retry; the image is rejected."""


class SynthesisError(GenerationError):
    """Synthesis produced fewer than two valid QA pairs; the image is skipped."""


# -- domain types -------------------------------------------------------------


@dataclass
class CaptionRecord:
    image_id: str
    caption_text: str
    structured_fields: dict[str, str]
    generator_model: str
    run_id: str

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "caption_text": self.caption_text,
            "structured_fields": dict(self.structured_fields),
            "generator_model": self.generator_model,
            "run_id": self.run_id,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "CaptionRecord":
        return cls(
            image_id=row["image_id"],
            caption_text=row["caption_text"],
            structured_fields=dict(row["structured_fields"]),
            generator_model=row["generator_model"],
            run_id=row["run_id"],
        )


@dataclass
class VQAItem:
    item_id: str
    image_id: str
    kind: str
    question: str
    answer: str
    options: list[str] = field(default_factory=list)
    category: str = "recognition"
    status: str = STATUS_DRAFT
    provenance: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.kind == KIND_CHOICE:
            if len(self.options) != 4 or len(set(self.options)) != 4:
                raise ValueError(
                    f"{self.item_id}: single_choice needs exactly 4 distinct options")
            if self.answer not in ("A", "B", "C", "D"):
                raise ValueError(f"{self.item_id}: answer must be one of A-D")
        elif self.kind == KIND_OPEN:
            if self.options:
                raise ValueError(f"{self.item_id}: open_ended items have no options")
        else:
            raise ValueError(f"{self.item_id}: unknown kind {self.kind!r}")
        if self.category not in CATEGORIES:
            raise ValueError(f"{self.item_id}: unknown category {self.category!r}")

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "image_id": self.image_id,
            "kind": self.kind,
            "question": self.question,
            "answer": self.answer,
            "options": list(self.options),
            "category": self.category,
            "status": self.status,
            "provenance": list(self.provenance),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, row: dict) -> "VQAItem":
        item = cls(
            item_id=row["item_id"],
            image_id=row["image_id"],
            kind=row["kind"],
            question=row["question"],
            answer=row["answer"],
            options=list(row.get("options", [])),
            category=row.get("category", "recognition"),
            status=row.get("status", STATUS_DRAFT),
            provenance=list(row.get("provenance", [])),
            flags=list(row.get("flags", [])),
        )
        item.validate()
        return item


@dataclass
class FilterDecision:
    item_id: str
    verdict: str  # keep | drop
    reason: str
    judge_model: str

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "verdict": self.verdict,
            "reason": self.reason,
            "judge_model": self.judge_model,
        }


# -- prompts -------------------------------------------------------------------


@dataclass
class PromptSet:
    caption: str
    synth_open: str
    synth_choice: str
    filter: str
    judge: str

    _NAMES = ("caption", "synth_open", "synth_choice", "filter", "judge")

    @classmethod
    def load(cls, prompts_dir: Path | str | None = None) -> "PromptSet":
        """Load templates from a directory, falling back to packaged defaults."""
        texts = {}
        for name in cls._NAMES:
            path = Path(prompts_dir) / f"{name}.txt" if prompts_dir else None
            if path is not None and path.is_file():
                texts[name] = path.read_text(encoding="utf-8")
            else:
                texts[name] = (
                    resources.files("vlforge").joinpath(f"prompts/{name}.txt")
                    .read_text(encoding="utf-8"))
        return cls(**texts)

    def choice_stems(self) -> dict[str, list[str]]:
        """The synth_choice template holds one stem per line as 'facet: stem'."""
        stems: dict[str, list[str]] = {"identity": [], "condition": []}
        for line in self.synth_choice.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or ":" not in line:
                continue
            facet, _, stem = line.partition(":")
            facet = facet.strip()
            if facet in stems:
                stems[facet].append(stem.strip())
        if not stems["identity"] or not stems["condition"]:
            raise GenerationError("synth_choice template must define identity and "
                                  "condition stems")
        return stems


def render(template: str, **values: str) -> str:
    for key, val in values.items():
        template = template.replace("{" + key + "}", str(val))
    return template


def parse_kv_block(text: str) -> dict[str, str] | None:
    """Extract the first fenced block and parse its key: value lines."""
    match = _FENCE_RE.search(text)
    if not match:
        return None
    out: dict[str, str] = {}
    for line in match.group(1).splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, _, value = line.partition(":")
        out[key.strip().lower()] = value.strip()
    return out or None


@dataclass
class GenerationContext:
    """Bundles the gateway, templates and per-stage model settings."""

    gateway: ModelGateway
    prompts: PromptSet
    run_id: str
    caption_model: str = "stub-caption"
    synth_model: str = "stub-synth"
    filter_model: str = "stub-filter"
    caption_temperature: float = 0.2
    synth_temperature: float = 0.7
    filter_temperature: float = 0.2
    max_tokens: int = 512

    def ask(self, model_id: str, prompt: str, image_ref: str | None,
            temperature: float) -> str:
        request = ModelRequest(
            model_id=model_id,
            system_prompt="You are a careful agricultural vision-language assistant.",
            user_text=prompt,
            image_ref=image_ref,
            temperature=temperature,
            max_tokens=self.max_tokens,
        )
        return self.gateway.complete(request).text


# -- stage (1): caption generation ---------------------------------------------


def generate_caption(record: ImageRecord, ctx: GenerationContext) -> CaptionRecord:
    """Structured caption for one image; raises CaptionParseError after the
    single retry with a format reminder fails."""
    prompt = render(ctx.prompts.caption, label=record.category_label,
                    image_id=record.image_id)
    for text in _ask_twice(ctx, ctx.caption_model, prompt, record.image_id,
                           ctx.caption_temperature):
        fields = parse_kv_block(text)
        if fields is None:
            continue
        caption_text = fields.get("caption", "").strip()
        structured = {k: (fields.get(k, "").strip() or "unknown")
                      for k in STRUCTURED_KEYS}
        if caption_text and structured["subject"] != "unknown":
            return CaptionRecord(
                image_id=record.image_id,
                caption_text=caption_text,
                structured_fields=structured,
                generator_model=ctx.caption_model,
                run_id=ctx.run_id,
            )
    raise CaptionParseError(f"caption reply unparseable for image {record.image_id}")


def _ask_twice(ctx: GenerationContext, model: str, prompt: str,
               image_ref: str | None, temperature: float) -> Iterable[str]:
    yield ctx.ask(model, prompt, image_ref, temperature)
    yield ctx.ask(model, prompt + _FORMAT_REMINDER, image_ref, temperature)


# -- stage (2): instruction synthesis -------------------------------------------


def synthesize_vqa(caption: CaptionRecord, ctx: GenerationContext) -> list[VQAItem]:
    """Two open-ended drafts per caption: one recognition and one reasoning
    question; raises SynthesisError when the retry also fails."""
    prompt = render(
        ctx.prompts.synth_open,
        caption=caption.caption_text,
        subject=caption.structured_fields.get("subject", "unknown"),
    )
    for text in _ask_twice(ctx, ctx.synth_model, prompt, caption.image_id,
                           ctx.synth_temperature):
        fields = parse_kv_block(text)
        if fields is None:
            continue
        items = _parse_qa_pairs(fields, caption, ctx.run_id)
        if items is not None:
            return items
    raise SynthesisError(f"synthesis unparseable for image {caption.image_id}")


def _parse_qa_pairs(fields: dict[str, str], caption: CaptionRecord,
                    run_id: str) -> list[VQAItem] | None:
    pairs = []
    for idx in ("1", "2"):
        question = fields.get(f"q{idx}", "").strip()
        answer = fields.get(f"a{idx}", "").strip()
        category = fields.get(f"c{idx}", "").strip().lower()
        if not question or not answer or category not in CATEGORIES:
            return None
        pairs.append((question, answer, category))
    if pairs[0][0] == pairs[1][0]:
        return None  # question texts for one image must differ
    categories = {p[2] for p in pairs}
    if "recognition" not in categories or not (categories & REASONING_CATEGORIES):
        return None
    pairs.sort(key=lambda p: p[2] != "recognition")  # recognition first
    items = []
    for i, (question, answer, category) in enumerate(pairs, start=1):
        item = VQAItem(
            item_id=f"{caption.image_id[:16]}-open-{i}",
            image_id=caption.image_id,
            kind=KIND_OPEN,
            question=question,
            answer=answer,
            category=category,
            status=STATUS_DRAFT,
            provenance=[run_id],
        )
        item.validate()
        items.append(item)
    return items


def synthesize_choice_pair(
    record: ImageRecord,
    caption: CaptionRecord,
    distractor_pool: Iterable[str],
    *,
    seed: int,
    run_id: str,
    prompts: PromptSet,
    attribute_pool: Iterable[str] | None = None,
    cross_group_pool: Iterable[str] | None = None,
    stem_blocklist: Sequence[str] = (),
    stem_pick: int = 0,
) -> list[VQAItem]:
    """Two single-choice drafts per image: an identity question whose correct
    option is the fine category label with three same-family distractors, and
    a condition/attribute question grounded in the caption. Option order is
    shuffled with an RNG seeded from (seed, image_id); an undersized pool
    falls back to cross-group distractors and flags the items.

    ``stem_pick`` selects among the non-blocklisted stem variants; eval-split
    items use a different pick than train-split items so benchmark stems never
    reuse training question templates."""
    gold = record.category_label
    pool = sorted(set(distractor_pool) - {gold})
    flags: list[str] = []
    if len(pool) < 3:
        extra = sorted(set(cross_group_pool or ()) - {gold} - set(pool))
        pool = pool + extra
        flags.append("cross_group_distractors")
    if len(pool) < 3:
        raise GenerationError(
            f"distractor pool too small for {gold!r}: need 3, have {len(pool)}")

    rng = random.Random(_derive_seed(seed, record.image_id))
    blockers = [re.compile(p) for p in stem_blocklist]
    stems = prompts.choice_stems()
    subject = caption.structured_fields.get("subject", gold)

    identity_stem = _pick_stem(stems["identity"], blockers, subject, stem_pick)
    condition_stem = _pick_stem(stems["condition"], blockers, subject, stem_pick)

    distractors = rng.sample(pool, 3)
    identity_item = _make_choice_item(
        record, identity_stem, gold, distractors, "recognition",
        index=1, rng=rng, run_id=run_id, flags=flags)

    correct_attr = _condition_value(caption)
    attr_pool = sorted(
        {a for a in (attribute_pool or ()) if a and a != "unknown"} - {correct_attr})
    for fallback in _FALLBACK_CONDITIONS:
        if len(attr_pool) >= 3:
            break
        if fallback != correct_attr and fallback not in attr_pool:
            attr_pool.append(fallback)
    attr_distractors = rng.sample(attr_pool, 3)
    condition_item = _make_choice_item(
        record, condition_stem, correct_attr, attr_distractors, "attribute",
        index=2, rng=rng, run_id=run_id, flags=flags)

    return [identity_item, condition_item]


def _pick_stem(stems: list[str], blockers: list[re.Pattern], subject: str,
               pick: int = 0) -> str:
    allowed = []
    for stem in stems:
        rendered = render(stem, subject=subject)
        if not any(b.search(rendered) for b in blockers):
            allowed.append(rendered)
    if not allowed:
        raise GenerationError("every stem template is blocklisted")
    return allowed[pick % len(allowed)]


def _condition_value(caption: CaptionRecord) -> str:
    fields = caption.structured_fields
    for key in ("color_or_lesion", "maturity_or_morphology", "growth_stage", "context"):
        value = fields.get(key, "unknown")
        if value and value != "unknown":
            return value
    return "typical appearance"


def _make_choice_item(record: ImageRecord, question: str, correct: str,
                      distractors: list[str], category: str, *, index: int,
                      rng: random.Random, run_id: str,
                      flags: list[str]) -> VQAItem:
    options = [correct] + list(distractors)
    rng.shuffle(options)
    item = VQAItem(
        item_id=f"{record.image_id[:16]}-choice-{index}",
        image_id=record.image_id,
        kind=KIND_CHOICE,
        question=question,
        answer=chr(ord("A") + options.index(correct)),
        options=options,
        category=category,
        status=STATUS_DRAFT,
        provenance=[run_id],
        flags=list(flags),
    )
    item.validate()
    return item


# -- stage (4): instruction filtering -------------------------------------------


def filter_instruction(item: VQAItem, caption: CaptionRecord,
                       ctx: GenerationContext) -> FilterDecision:
    """Keep/drop verdict for one item; a drop sets status=rejected. Question
    and answer text are never edited here. Unparseable or inconsistent
    verdicts become a conservative drop with reason=ungrounded."""
    answer_display = item.answer
    if item.kind == KIND_CHOICE:
        lettered = ", ".join(
            f"{chr(ord('A') + i)}: {o}" for i, o in enumerate(item.options))
        answer_display = f"{item.answer} (options: {lettered})"
    prompt = render(
        ctx.prompts.filter,
        caption=caption.caption_text,
        question=item.question,
        answer=answer_display,
    )
    try:
        text = ctx.ask(ctx.filter_model, prompt, item.image_id,
                       ctx.filter_temperature)
    except GatewayError:
        text = ""
    fields = parse_kv_block(text) or {}
    verdict = fields.get("verdict", "").strip().lower()
    reason = fields.get("reason", "").strip().lower()
    consistent = (
        (verdict == "keep" and reason == "ok")
        or (verdict == "drop" and reason in FILTER_REASONS and reason != "ok"))
    if not consistent:
        verdict, reason = "drop", "ungrounded"
    if verdict == "drop":
        item.status = STATUS_REJECTED
    return FilterDecision(
        item_id=item.item_id, verdict=verdict, reason=reason,
        judge_model=ctx.filter_model)
