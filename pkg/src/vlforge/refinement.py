"""Feedback -> Evaluation -> Rethinking loop, expert-pool selection, reward annotation.

The loop is evaluate-first: items already above threshold cost one call. Each
iteration is one evaluation pass; failing passes (except the last) trigger
feedback and a rewrite with a self-consistency check. Everything that happens
is recorded in a per-item trace.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .gateway import GatewayError, ModelGateway, ModelRequest
from .generation import (
    STATUS_DRAFT,
    STATUS_EXPERT,
    STATUS_REFINED,
    STATUS_REJECTED,
    CaptionRecord,
    KIND_CHOICE,
    VQAItem,
    parse_kv_block,
)

logger = logging.getLogger(__name__)

RUBRIC_DIMENSIONS = (
    "factual_consistency", "image_grounding", "question_clarity", "answer_correctness")

_SCORES_RE = re.compile(r"(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)")
_TRIPLE_RE = re.compile(r"(\d+)\s*,\s*(\d+)\s*,\s*(\d+)")

_GENERIC_FEEDBACK = "improve grounding and factual consistency"

_EVALUATE_PROMPT = """Score the question-answer pair against the caption.
Caption: {caption}
Question: {question}
Answer: {answer}
Rate factual_consistency, image_grounding, question_clarity, answer_correctness,
each an integer from 1 to 5. Reply with exactly four comma-separated integers,
e.g. 4,5,3,4 and nothing else."""

_FEEDBACK_PROMPT = """Suggest revisions for the question-answer pair below.
It scored low on: {deficient}.
Caption: {caption}
Question: {question}
Answer: {answer}
Reply with short revision notes."""

_RETHINK_PROMPT = """Rewrite the question-answer pair using the revision notes.
Caption: {caption}
Question: {question}
Answer: {answer}
Notes: {notes}
Reply with one fenced block:
```
question: <revised question>
answer: <revised answer>
```"""

_CONSISTENCY_PROMPT = """Does the answer follow from the caption? Reply yes or no.
Caption: {caption}
Question: {question}
Answer: {answer}"""

_POLISH_PROMPT = """Polish the question-answer pair for expert-level quality,
keeping its meaning. Caption: {caption}
Question: {question}
Answer: {answer}
Reply with one fenced block:
```
question: <polished question>
answer: <polished answer>
```"""

_REWARD_PROMPT = """Rate the rewarded aspects of the question-answer pair against
the caption: image-text consistency, internal logic, verifiable terminology.
Caption: {caption}
Question: {question}
Answer: {answer}
Reply with exactly three comma-separated integers from 0 to 100, e.g. 90,80,70."""


class RefinementError(Exception):
    pass


@dataclass(frozen=True)
class RubricScores:
    factual_consistency: int
    image_grounding: int
    question_clarity: int
    answer_correctness: int

    def __post_init__(self):
        for name in RUBRIC_DIMENSIONS:
            value = getattr(self, name)
            if not (1 <= value <= 5):
                raise ValueError(f"{name} must be in [1,5], got {value}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.factual_consistency, self.image_grounding,
                self.question_clarity, self.answer_correctness)

    def total(self) -> int:
        return sum(self.as_tuple())

    def meets(self, threshold: int) -> bool:
        return all(v >= threshold for v in self.as_tuple())

    def deficient(self, threshold: int) -> list[str]:
        return [name for name, v in zip(RUBRIC_DIMENSIONS, self.as_tuple())
                if v < threshold]

    def to_dict(self) -> dict:
        return dict(zip(RUBRIC_DIMENSIONS, self.as_tuple()))


@dataclass
class TraceIteration:
    feedback_notes: str
    scores: RubricScores
    revised_question: str
    revised_answer: str

    def to_dict(self) -> dict:
        return {
            "feedback_notes": self.feedback_notes,
            "scores": self.scores.to_dict(),
            "revised_question": self.revised_question,
            "revised_answer": self.revised_answer,
        }


@dataclass
class RefinementTrace:
    item_id: str
    iterations: list[TraceIteration] = field(default_factory=list)
    outcome: str = "accepted"  # accepted | rejected_max_iters
    iterations_used: int = 0

    def final_scores(self) -> RubricScores:
        return self.iterations[-1].scores

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "iterations": [it.to_dict() for it in self.iterations],
            "outcome": self.outcome,
            "iterations_used": self.iterations_used,
        }

    def save(self, traces_dir: Path | str) -> Path:
        path = Path(traces_dir) / f"{self.item_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1),
                        encoding="utf-8")
        return path


@dataclass
class RewardedItem:
    item_id: str
    reward_components: dict[str, float]
    scalar_reward: float

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "reward_components": dict(self.reward_components),
            "scalar_reward": self.scalar_reward,
        }


@dataclass
class RefinementContext:
    gateway: ModelGateway
    run_id: str
    model_id: str = "stub-refine"
    temperature: float = 0.0
    max_tokens: int = 512
    counters: dict = field(default_factory=dict)
    _counter_lock: object = field(default_factory=threading.Lock, repr=False)

    def count(self, key: str) -> None:
        with self._counter_lock:
            self.counters[key] = self.counters.get(key, 0) + 1

    def ask(self, prompt: str, image_ref: str | None) -> str:
        request = ModelRequest(
            model_id=self.model_id,
            system_prompt="You are a strict reviewer of visual question answering data.",
            user_text=prompt,
            image_ref=image_ref,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
        )
        try:
            return self.gateway.complete(request).text
        except GatewayError as exc:
            logger.warning("refinement call failed (%s); treating as empty reply", exc)
            return ""


def _fill(template: str, **values: str) -> str:
    for key, val in values.items():
        template = template.replace("{" + key + "}", str(val))
    return template


# -- the three agents ------------------------------------------------------------


def evaluate_item(item: VQAItem, caption: CaptionRecord,
                  ctx: RefinementContext) -> RubricScores:
    """Four integer rubric scores, strictly parsed; one retry with a format
    reminder, then the all-1 default (forcing a feedback iteration)."""
    ctx.count("evaluate_calls")
    prompt = _fill(_EVALUATE_PROMPT, caption=caption.caption_text,
                   question=item.question, answer=item.answer)
    for attempt in range(2):
        suffix = "" if attempt == 0 else (
            "\n\nReply with exactly four comma-separated integers between 1 and 5.")
        reply = ctx.ask(prompt + suffix, item.image_id)
        scores = _parse_scores(reply)
        if scores is not None:
            return scores
    return RubricScores(1, 1, 1, 1)


def _parse_scores(reply: str) -> RubricScores | None:
    match = _SCORES_RE.search(reply)
    if not match:
        return None
    values = [int(g) for g in match.groups()]
    if any(not (1 <= v <= 5) for v in values):
        return None
    return RubricScores(*values)


def feedback(item: VQAItem, scores: RubricScores, caption: CaptionRecord,
             ctx: RefinementContext, threshold: int) -> str:
    """Revision notes naming the deficient dimensions; an empty model reply is
    replaced by generic notes."""
    deficient = scores.deficient(threshold)
    prompt = _fill(_FEEDBACK_PROMPT, deficient=", ".join(deficient),
                   caption=caption.caption_text, question=item.question,
                   answer=item.answer)
    reply = ctx.ask(prompt, item.image_id).strip()
    if not reply:
        reply = _GENERIC_FEEDBACK
    return f"deficient: {', '.join(deficient)}. {reply}"


def rethink(item: VQAItem, feedback_notes: str, caption: CaptionRecord,
            ctx: RefinementContext) -> tuple[str, str]:
    """Revised (question, answer); the revision is discarded when the
    self-consistency check answers no; unparseable rewrites keep the prior
    text. Single-choice items only ever revise the question (options and the
    answer letter are fixed)."""
    if not feedback_notes:
        raise RefinementError("rethink requires non-empty feedback notes")
    prompt = _fill(_RETHINK_PROMPT, caption=caption.caption_text,
                   question=item.question, answer=item.answer,
                   notes=feedback_notes)
    fields = parse_kv_block(ctx.ask(prompt, item.image_id)) or {}
    question = fields.get("question", "").strip()
    answer = fields.get("answer", "").strip()
    if not question or not answer:
        return item.question, item.answer
    if item.kind == KIND_CHOICE:
        answer = item.answer
    check = _fill(_CONSISTENCY_PROMPT, caption=caption.caption_text,
                  question=question, answer=answer)
    verdict = ctx.ask(check, item.image_id).strip().lower()
    if verdict.startswith("yes"):
        return question, answer
    return item.question, item.answer


# -- the loop -----------------------------------------------------------------


def refine(item: VQAItem, caption: CaptionRecord, ctx: RefinementContext,
           threshold: int = 4, max_iterations: int = 3) -> tuple[VQAItem, RefinementTrace]:
    """Iterate evaluate -> feedback -> rethink until every dimension reaches
    the threshold or max_iterations passes fail; the item ends refined or
    rejected and the full trace is returned."""
    if not (1 <= threshold <= 5):
        raise ValueError(f"threshold must be in [1,5], got {threshold}")
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    if item.status != STATUS_DRAFT:
        raise RefinementError(f"{item.item_id}: only draft items refine "
                              f"(status={item.status})")

    trace = RefinementTrace(item_id=item.item_id)
    accepted = False
    for iteration in range(1, max_iterations + 1):
        scores = evaluate_item(item, caption, ctx)
        if scores.meets(threshold):
            trace.iterations.append(TraceIteration(
                feedback_notes="", scores=scores,
                revised_question=item.question, revised_answer=item.answer))
            accepted = True
            break
        if iteration < max_iterations:
            notes = feedback(item, scores, caption, ctx, threshold)
            question, answer = rethink(item, notes, caption, ctx)
            item.question, item.answer = question, answer
            trace.iterations.append(TraceIteration(
                feedback_notes=notes, scores=scores,
                revised_question=question, revised_answer=answer))
        else:
            trace.iterations.append(TraceIteration(
                feedback_notes="", scores=scores,
                revised_question=item.question, revised_answer=item.answer))

    trace.iterations_used = len(trace.iterations)
    trace.outcome = "accepted" if accepted else "rejected_max_iters"
    item.status = STATUS_REFINED if accepted else STATUS_REJECTED
    item.provenance.append(ctx.run_id)
    return item, trace


# -- expert pool -----------------------------------------------------------------


def select_expert_pool(
    pairs: Sequence[tuple[VQAItem, RefinementTrace]],
    k: int,
    ctx: RefinementContext,
    caption_lookup=None,
) -> list[VQAItem]:
    """Rank refined items by final rubric sum (ties: fewer iterations, then
    item_id), verify-and-polish the top k, and promote them to expert."""
    if k <= 0:
        logger.error("expert pool requested with k=%d; returning empty manifest", k)
        return []
    for item, _ in pairs:
        if item.status != STATUS_REFINED:
            raise RefinementError(
                f"{item.item_id}: expert pool draws from refined items only")
    if k > len(pairs):
        logger.warning("expert pool k=%d exceeds %d available; selecting all",
                       k, len(pairs))
    ranked = sorted(
        pairs,
        key=lambda p: (-p[1].final_scores().total(), p[1].iterations_used, p[0].item_id),
    )
    selected = []
    for item, _ in ranked[:k]:
        caption = caption_lookup(item.image_id) if caption_lookup else None
        if caption is not None:
            _polish(item, caption, ctx)
        item.status = STATUS_EXPERT
        item.provenance.append(ctx.run_id)
        selected.append(item)
    return selected


def _polish(item: VQAItem, caption: CaptionRecord, ctx: RefinementContext) -> None:
    prompt = _fill(_POLISH_PROMPT, caption=caption.caption_text,
                   question=item.question, answer=item.answer)
    fields = parse_kv_block(ctx.ask(prompt, item.image_id)) or {}
    question = fields.get("question", "").strip()
    answer = fields.get("answer", "").strip()
    if question and answer:
        item.question = question
        if item.kind != KIND_CHOICE:
            item.answer = answer


# -- GRPO reward annotation ---------------------------------------------------------


def annotate_reward(item: VQAItem, caption: CaptionRecord,
                    ctx: RefinementContext) -> RewardedItem | None:
    """Three 0-100 component scores parsed and scaled to [0,1]; the scalar
    reward is their equal-weight mean. Parse failure excludes the item."""
    if item.status not in (STATUS_REFINED, STATUS_EXPERT):
        raise RefinementError(
            f"{item.item_id}: rewards only apply to refined/expert items")
    prompt = _fill(_REWARD_PROMPT, caption=caption.caption_text,
                   question=item.question, answer=item.answer)
    match = _TRIPLE_RE.search(ctx.ask(prompt, item.image_id))
    if not match:
        return None
    raw = [int(g) for g in match.groups()]
    if any(not (0 <= v <= 100) for v in raw):
        return None
    components = {
        "image_text_consistency": raw[0] / 100.0,
        "internal_logic": raw[1] / 100.0,
        "verifiable_terminology": raw[2] / 100.0,
    }
    return RewardedItem(
        item_id=item.item_id,
        reward_components=components,
        scalar_reward=sum(components.values()) / 3.0,
    )
