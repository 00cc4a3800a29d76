"""Pairwise LLM-as-a-judge with left/right position swapping and win rates.

Answers are shown to the judge under blind numeric labels; every query is
judged twice with the positions swapped and the two outcomes averaged, which
cancels pure position bias into ties. Win rate excludes ties.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterable, Mapping

from .benchmark import BenchmarkManifest
from .gateway import GatewayError, ModelGateway, ModelRequest
from .generation import PromptSet, render

logger = logging.getLogger(__name__)

_PICK_RE = re.compile(r"^\s*(1|2|tie)\s*\.?\s*$", re.IGNORECASE)

_ORIENTATION_SCORE = {"left": 1.0, "tie": 0.5, "right": 0.0}


@dataclass
class JudgeVerdict:
    query_id: str
    left_system: str
    right_system: str
    raw_reply: str
    pick: str  # left | right | tie

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "left_system": self.left_system,
            "right_system": self.right_system,
            "raw_reply": self.raw_reply,
            "pick": self.pick,
        }


@dataclass
class JudgeOutcome:
    query_id: str
    system_a: str
    system_b: str
    score_a: float  # in {0, 0.25, 0.5, 0.75, 1}
    verdicts: list[JudgeVerdict]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "system_a": self.system_a,
            "system_b": self.system_b,
            "score_a": self.score_a,
            "verdicts": [v.to_dict() for v in self.verdicts],
        }


@dataclass
class JudgeContext:
    gateway: ModelGateway
    prompts: PromptSet
    model_id: str = "stub-judge"
    temperature: float = 0.0
    max_tokens: int = 16

    def ask(self, prompt: str, image_ref: str | None) -> str:
        request = ModelRequest(
            model_id=self.model_id,
            system_prompt=("You are an impartial judge of answer quality. "
                           "Reply with 1, 2, or tie only."),
            user_text=prompt,
            image_ref=image_ref,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
        )
        try:
            return self.gateway.complete(request).text
        except GatewayError as exc:
            logger.warning("judge call failed (%s); recording tie", exc)
            return ""


def judge_pair(query_id: str, question: str, answer_left: str, answer_right: str,
               ctx: JudgeContext, *, left_system: str = "left",
               right_system: str = "right",
               image_ref: str | None = None) -> JudgeVerdict:
    """One blind comparison: answers labeled 1 and 2, reply constrained to
    '1', '2', or 'tie'; unparseable after one retry ends as a tie."""
    prompt = render(ctx.prompts.judge, question=question,
                    answer_1=answer_left, answer_2=answer_right)
    raw = ""
    for attempt in range(2):
        suffix = "" if attempt == 0 else "\n\nReply with exactly 1, 2, or tie."
        raw = ctx.ask(prompt + suffix, image_ref)
        match = _PICK_RE.match(raw)
        if match:
            token = match.group(1).lower()
            pick = {"1": "left", "2": "right", "tie": "tie"}[token]
            return JudgeVerdict(query_id=query_id, left_system=left_system,
                                right_system=right_system, raw_reply=raw, pick=pick)
    return JudgeVerdict(query_id=query_id, left_system=left_system,
                        right_system=right_system, raw_reply=raw, pick="tie")


def judge_swapped(query_id: str, question: str, answer_a: str, answer_b: str,
                  ctx: JudgeContext, *, system_a: str = "a", system_b: str = "b",
                  image_ref: str | None = None) -> JudgeOutcome:
    """Judge both orientations (a,b) and (b,a); score_a is the mean of the two
    per-orientation scores for system_a (win 1, tie 0.5, loss 0)."""
    first = judge_pair(query_id, question, answer_a, answer_b, ctx,
                       left_system=system_a, right_system=system_b,
                       image_ref=image_ref)
    second = judge_pair(query_id, question, answer_b, answer_a, ctx,
                        left_system=system_b, right_system=system_a,
                        image_ref=image_ref)
    s1 = _ORIENTATION_SCORE[first.pick]
    s2 = 1.0 - _ORIENTATION_SCORE[second.pick]  # a sits on the right here
    return JudgeOutcome(
        query_id=query_id, system_a=system_a, system_b=system_b,
        score_a=(s1 + s2) / 2.0, verdicts=[first, second])


def win_rate(outcomes: Iterable[JudgeOutcome]) -> float | None:
    """WR for system_a in percent, ties excluded; None when every query tied."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("win_rate requires at least one outcome")
    wins = sum(1 for o in outcomes if o.score_a > 0.5)
    losses = sum(1 for o in outcomes if o.score_a < 0.5)
    if wins + losses == 0:
        return None
    return 100.0 * wins / (wins + losses)


def judge_run(
    manifest: BenchmarkManifest,
    predictions_a: Mapping[str, str],
    predictions_b: Mapping[str, str],
    ctx: JudgeContext,
    *,
    system_a: str = "system_a",
    system_b: str = "system_b",
) -> dict:
    """Swap-debiased judging of two systems over a benchmark's open-ended
    queries; reports WR plus raw win/tie/loss counts and the mean score
    (the counts and mean are artifact additions beyond WR)."""
    outcomes = []
    for row in manifest.open_ended:
        query_id = row["item_id"]
        outcomes.append(judge_swapped(
            query_id, row["question"],
            predictions_a.get(query_id, ""), predictions_b.get(query_id, ""),
            ctx, system_a=system_a, system_b=system_b,
            image_ref=row["image_id"]))
    wins = sum(1 for o in outcomes if o.score_a > 0.5)
    losses = sum(1 for o in outcomes if o.score_a < 0.5)
    ties = len(outcomes) - wins - losses
    return {
        "system_a": system_a,
        "system_b": system_b,
        "win_rate": win_rate(outcomes) if outcomes else None,
        "wins": wins,
        "ties": ties,
        "losses": losses,
        "mean_score_a": (sum(o.score_a for o in outcomes) / len(outcomes)
                         if outcomes else None),
        "outcomes": [o.to_dict() for o in outcomes],
    }
