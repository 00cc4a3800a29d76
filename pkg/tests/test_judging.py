import random

import pytest

from vlforge.benchmark import BenchmarkManifest
from vlforge.gateway import ModelGateway, StubBackend
from vlforge.generation import PromptSet
from vlforge.judging import (
    JudgeContext,
    JudgeOutcome,
    judge_pair,
    judge_run,
    judge_swapped,
    win_rate,
)

PROMPTS = PromptSet.load(None)


def make_ctx(rules):
    gateway = ModelGateway(StubBackend(rules), sleep=lambda s: None)
    return JudgeContext(gateway=gateway, prompts=PROMPTS)


class ScriptedJudge(StubBackend):
    """pick_fn(answer_1, answer_2) -> '1' | '2' | 'tie'."""

    def __init__(self, pick_fn):
        super().__init__([])
        self.pick_fn = pick_fn

    def send(self, request):
        self.calls.append((0.0, request.model_id, request.request_key))
        text = request.user_text
        answer_1 = text.split("Answer 1:")[1].split("Answer 2:")[0].strip()
        answer_2 = text.split("Answer 2:")[1].split("Judge factual")[0].strip()
        return self.pick_fn(answer_1, answer_2)


def scripted_ctx(pick_fn):
    gateway = ModelGateway(ScriptedJudge(pick_fn), sleep=lambda s: None)
    return JudgeContext(gateway=gateway, prompts=PROMPTS)


# -- judge_pair -----------------------------------------------------------------------


def test_judge_pair_picks_left():
    ctx = make_ctx([{"match": "pick the better one", "response": "1"}])
    verdict = judge_pair("q1", "which crop?", "maize", "rice", ctx)
    assert verdict.pick == "left"
    assert verdict.raw_reply == "1"


def test_judge_pair_tie():
    ctx = make_ctx([{"match": "pick the better one", "response": "tie"}])
    assert judge_pair("q1", "q?", "a", "b", ctx).pick == "tie"


def test_judge_pair_garbage_twice_is_tie():
    ctx = make_ctx([{"match": "pick the better one",
                     "response": "answer 1 seems nicer overall"}])
    verdict = judge_pair("q1", "q?", "a", "b", ctx)
    assert verdict.pick == "tie"
    assert ctx.gateway.call_count() == 2  # one retry with the reminder


def test_judge_pair_accepts_trailing_period():
    ctx = make_ctx([{"match": "pick the better one", "response": " 2. "}])
    assert judge_pair("q1", "q?", "a", "b", ctx).pick == "right"


# -- judge_swapped ----------------------------------------------------------------------


def test_position_bias_cancels_to_half():
    ctx = scripted_ctx(lambda a1, a2: "1")  # always prefers position 1
    outcome = judge_swapped("q1", "which crop?", "maize", "rice", ctx)
    assert outcome.score_a == 0.5
    assert len(outcome.verdicts) == 2


def test_content_preference_wins_both_orientations():
    ctx = scripted_ctx(lambda a1, a2: "1" if a1 == "good" else "2")
    outcome = judge_swapped("q1", "q?", "good", "bad", ctx)
    assert outcome.score_a == 1.0
    outcome = judge_swapped("q1", "q?", "bad", "good", ctx)
    assert outcome.score_a == 0.0


def test_win_plus_tie_is_three_quarters():
    picks = iter(["1", "tie"])
    ctx = scripted_ctx(lambda a1, a2: next(picks))
    outcome = judge_swapped("q1", "q?", "a-text", "b-text", ctx)
    assert outcome.score_a == 0.75


def test_score_in_allowed_grid():
    rng = random.Random(5)
    for _ in range(50):
        ctx = scripted_ctx(lambda a1, a2: rng.choice(["1", "2", "tie"]))
        outcome = judge_swapped("q", "q?", "x", "y", ctx)
        assert outcome.score_a in (0.0, 0.25, 0.5, 0.75, 1.0)


def test_anti_symmetry_of_scores():
    rng = random.Random(77)
    for trial in range(200):
        table = {}

        def pick(a1, a2, table=table):
            key = (a1, a2)
            if key not in table:
                table[key] = rng.choice(["1", "2", "tie"])
            return table[key]

        ctx = scripted_ctx(pick)
        ab = judge_swapped("q", "q?", f"ans{trial}a", f"ans{trial}b", ctx)
        ba = judge_swapped("q", "q?", f"ans{trial}b", f"ans{trial}a", ctx)
        assert ab.score_a + ba.score_a == pytest.approx(1.0)


# -- win rate ---------------------------------------------------------------------------


def outcome(score):
    return JudgeOutcome(query_id="q", system_a="a", system_b="b",
                        score_a=score, verdicts=[])


def test_win_rate_definition():
    outcomes = [outcome(1.0)] * 3 + [outcome(0.0)] + [outcome(0.5)] * 2
    assert win_rate(outcomes) == pytest.approx(75.0)


def test_win_rate_all_ties_is_null():
    assert win_rate([outcome(0.5)] * 4) is None


def test_win_rate_rejects_empty():
    with pytest.raises(ValueError):
        win_rate([])


def test_win_rate_permutation_invariant():
    rng = random.Random(3)
    outcomes = [outcome(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]))
                for _ in range(30)]
    shuffled = outcomes[:]
    rng.shuffle(shuffled)
    assert win_rate(outcomes) == win_rate(shuffled)


def test_position_only_judge_yields_null_wr():
    ctx = scripted_ctx(lambda a1, a2: "1")
    outcomes = [judge_swapped(f"q{i}", "q?", f"a{i}", f"b{i}", ctx)
                for i in range(10)]
    assert win_rate(outcomes) is None


# -- judge_run over a benchmark -----------------------------------------------------------


def small_manifest():
    return BenchmarkManifest(
        name="bench",
        open_ended=[
            {"item_id": f"o{i}", "image_id": f"img{i}",
             "question": f"question {i}?", "gold_answer": "g",
             "normalized_gold": "g"}
            for i in range(4)
        ],
        single_choice=[], pair_index={}).seal()


def test_judge_run_content_preferring():
    ctx = scripted_ctx(lambda a1, a2: "1" if "good" in a1 else "2")
    preds_a = {f"o{i}": f"good answer {i}" for i in range(4)}
    preds_b = {f"o{i}": f"weak answer {i}" for i in range(4)}
    report = judge_run(small_manifest(), preds_a, preds_b, ctx)
    assert report["win_rate"] == 100.0
    assert report["wins"] == 4
    assert report["losses"] == 0
    assert report["mean_score_a"] == 1.0
    assert len(report["outcomes"]) == 4
