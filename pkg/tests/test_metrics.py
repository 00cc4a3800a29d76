import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlforge.benchmark import BenchmarkManifest
from vlforge.metrics import (
    INVALID,
    acc_plus,
    accuracy,
    bleu,
    evaluate_run,
    extract_choice,
    meteor,
    rouge,
    tokenize,
)

from oracles import oracle_bleu, oracle_meteor, oracle_rouge

VOCAB = ["leaf", "pest", "ripe", "crop", "spot", "vine", "root", "stem"]


def random_sentence(rng, max_len=7):
    return " ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, max_len)))


# -- tokenizer -----------------------------------------------------------------


def test_tokenizer_lowercases_and_splits_punctuation():
    assert tokenize("Tomato late blight.") == ["tomato", "late", "blight", "."]
    assert tokenize("  A b)  c ") == ["a", "b", ")", "c"]


def test_metrics_ignore_case_and_trailing_whitespace():
    assert bleu("The Cat Sat ", "the cat sat") == pytest.approx(100.0)
    assert meteor("RIPE FRUIT", "ripe fruit  ") == meteor("ripe fruit", "ripe fruit")
    assert rouge("Leaf SPOT\t", "leaf spot", 1)["f"] == pytest.approx(100.0)


# -- BLEU -----------------------------------------------------------------------


def test_bleu_identical_long_enough():
    assert bleu("the cat sat on a mat", "the cat sat on a mat") == pytest.approx(100.0)


def test_bleu_empty_candidate():
    assert bleu("", "anything at all") == 0.0


def test_bleu_hand_computed_short_candidate():
    # cand "the cat" vs ref "the cat sat": p1 = 2/2, p2 = 1/1, p3 and p4 have
    # no n-grams so smoothing gives eps/eps = 1; BP = exp(1 - 3/2).
    expected = 100.0 * math.exp(1.0 - 3.0 / 2.0)
    assert bleu("the cat", "the cat sat") == pytest.approx(expected, abs=1e-9)
    assert oracle_bleu("the cat", "the cat sat") == pytest.approx(expected, abs=1e-9)


def test_bleu_zero_overlap_is_tiny_not_zero():
    # p1 ~ eps/2, p2 ~ eps, p3 = p4 = eps/eps = 1; the fourth root keeps the
    # smoothed score small but nonzero.
    score = bleu("vine root", "leaf spot")
    assert 0.0 < score < 0.01
    assert score == pytest.approx(oracle_bleu("vine root", "leaf spot"), abs=1e-9)


# -- METEOR ----------------------------------------------------------------------


def test_meteor_identical_three_words():
    # m=3, chunks=1, Fmean=1, penalty = 0.5 * (1/3)^3
    expected = 100.0 * (1.0 - 0.5 / 27.0)
    assert meteor("the cat sat", "the cat sat") == pytest.approx(expected, abs=1e-9)


def test_meteor_single_identical_word():
    assert meteor("ripe", "ripe") == pytest.approx(50.0, abs=1e-9)


def test_meteor_disjoint_strings():
    assert meteor("leaf spot", "vine root") == 0.0


def test_meteor_prefers_fewer_chunks():
    # "a b" vs "a b": one chunk of 2, not two chunks of 1.
    # m=2, chunks=1, penalty=0.5*(1/2)^3=1/16
    expected = 100.0 * (1.0 - 0.0625)
    assert meteor("leaf pest", "leaf pest") == pytest.approx(expected, abs=1e-9)


def test_meteor_greedy_path_matches_exhaustive_m():
    # Long strings route through the greedy aligner; matches stay maximal.
    cand = " ".join(["leaf"] * 12)
    ref = " ".join(["leaf"] * 12)
    assert meteor(cand, ref) == pytest.approx(
        100.0 * (1.0 - 0.5 * (1.0 / 12.0) ** 3), abs=1e-9)


# -- ROUGE ------------------------------------------------------------------------


def test_rouge_identical():
    for variant in (1, 2, "L"):
        assert rouge("ripe crop near vine", "ripe crop near vine", variant)["f"] \
            == pytest.approx(100.0)


def test_rouge_l_hand_lcs():
    # "a b c d" vs "a c b d": LCS length 3 -> p = r = f = 75
    scores = rouge("a b c d", "a c b d", "L")
    assert scores["p"] == pytest.approx(75.0, abs=1e-9)
    assert scores["r"] == pytest.approx(75.0, abs=1e-9)
    assert scores["f"] == pytest.approx(75.0, abs=1e-9)


def test_rouge_disjoint_and_empty_reference():
    assert rouge("leaf", "vine", 1)["f"] == 0.0
    assert rouge("leaf", "", 1) == {"p": 0.0, "r": 0.0, "f": 0.0}


def test_rouge_l_symmetric_under_equal_lengths():
    a, b = "leaf pest ripe crop", "pest leaf crop ripe"
    fwd = rouge(a, b, "L")
    rev = rouge(b, a, "L")
    assert fwd["f"] == pytest.approx(rev["f"], abs=1e-9)
    assert fwd["p"] == pytest.approx(rev["r"], abs=1e-9)


# -- oracle equivalence -------------------------------------------------------------


def test_oracle_equivalence_100_random_pairs():
    rng = random.Random(20240917)
    for _ in range(100):
        cand = random_sentence(rng)
        ref = random_sentence(rng)
        assert bleu(cand, ref) == pytest.approx(
            oracle_bleu(cand, ref), abs=1e-9), (cand, ref)
        assert meteor(cand, ref) == pytest.approx(
            oracle_meteor(cand, ref), abs=1e-9), (cand, ref)
        for variant in (1, 2, "L"):
            ours = rouge(cand, ref, variant)
            theirs = oracle_rouge(cand, ref, variant)
            for key in ("p", "r", "f"):
                assert ours[key] == pytest.approx(theirs[key], abs=1e-9), \
                    (cand, ref, variant)


# -- choice extraction ----------------------------------------------------------------


@pytest.mark.parametrize("raw,expected", [
    ("The answer is B.", "B"),
    ("b) aphid", "B"),
    ("I cannot tell", INVALID),
    ("(C)", "C"),
    ("Option D: rust", "D"),
    ("", INVALID),
    ("cabbage and dill", INVALID),  # letters embedded in words don't count
])
def test_extract_choice(raw, expected):
    assert extract_choice(raw) == expected


# -- Acc / Acc+ -------------------------------------------------------------------------


def pattern_manifest():
    """4 images x 2 questions; answers are all 'A'."""
    single = []
    pair_index = {}
    for i in range(4):
        image = f"img{i}"
        ids = [f"q{i}a", f"q{i}b"]
        pair_index[image] = ids
        for item_id in ids:
            single.append({
                "item_id": item_id, "image_id": image,
                "question": "which?", "options": ["x", "y", "z", "w"],
                "answer_letter": "A",
            })
    return BenchmarkManifest(
        name="fixture", open_ended=[], single_choice=single,
        pair_index=pair_index).seal()


def predictions_for(pattern):
    preds = {}
    for i, (first, second) in enumerate(pattern):
        preds[f"q{i}a"] = "A" if first else "B"
        preds[f"q{i}b"] = "A" if second else "B"
    return preds


def test_acc_and_acc_plus_pattern():
    manifest = pattern_manifest()
    preds = predictions_for([(1, 1), (1, 0), (0, 1), (1, 1)])
    assert accuracy(preds, manifest) == pytest.approx(75.0)
    assert acc_plus(preds, manifest) == pytest.approx(50.0)


def test_acc_all_correct():
    manifest = pattern_manifest()
    preds = predictions_for([(1, 1)] * 4)
    assert accuracy(preds, manifest) == 100.0
    assert acc_plus(preds, manifest) == 100.0


def test_unknown_item_id_rejected():
    manifest = pattern_manifest()
    with pytest.raises(ValueError):
        accuracy({"nope": "A"}, manifest)


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=12))
@settings(max_examples=200, deadline=None)
def test_acc_plus_never_exceeds_acc(pattern):
    single = []
    pair_index = {}
    preds = {}
    for i, (first, second) in enumerate(pattern):
        image = f"img{i}"
        ids = [f"q{i}a", f"q{i}b"]
        pair_index[image] = ids
        for item_id, ok in zip(ids, (first, second)):
            single.append({
                "item_id": item_id, "image_id": image, "question": "?",
                "options": ["x", "y", "z", "w"], "answer_letter": "A",
            })
            preds[item_id] = "A" if ok else "D"
    manifest = BenchmarkManifest(name="prop", open_ended=[],
                                 single_choice=single, pair_index=pair_index).seal()
    assert acc_plus(preds, manifest) <= accuracy(preds, manifest) + 1e-12


# -- evaluate_run -------------------------------------------------------------------------


def full_manifest():
    manifest = pattern_manifest()
    manifest.open_ended = [
        {"item_id": "open1", "image_id": "img0",
         "question": "what is shown?", "gold_answer": "Ripe crop.",
         "normalized_gold": "ripe crop"},
        {"item_id": "open2", "image_id": "img1",
         "question": "what pest?", "gold_answer": "Leaf spot.",
         "normalized_gold": "leaf spot"},
    ]
    return manifest.seal()


def test_evaluate_run_verbatim_gold():
    manifest = full_manifest()
    preds = predictions_for([(1, 1)] * 4)
    preds["open1"] = "ripe crop"
    preds["open2"] = "leaf spot"
    report = evaluate_run(preds, manifest)
    assert report.acc == 100.0
    assert report.acc_plus == 100.0
    assert report.bleu == pytest.approx(100.0)
    assert report.rouge1_f == pytest.approx(100.0)
    assert report.rouge2_f == pytest.approx(100.0)
    assert report.rougeL_f == pytest.approx(100.0)
    assert report.counts["invalid_extractions"] == 0


def test_evaluate_run_empty_predictions():
    manifest = full_manifest()
    report = evaluate_run({}, manifest)
    assert report.acc == 0.0
    assert report.acc_plus == 0.0
    assert report.bleu == 0.0
    assert report.meteor == 0.0
    assert report.rougeL_f == 0.0
    assert report.counts["invalid_extractions"] == report.counts["questions"] == 8


def test_evaluate_run_pattern_fixture():
    manifest = full_manifest()
    preds = predictions_for([(1, 1), (1, 0), (0, 1), (1, 1)])
    preds["open1"] = "ripe crop"
    preds["open2"] = "leaf spot"
    report = evaluate_run(preds, manifest)
    assert report.acc == pytest.approx(75.0)
    assert report.acc_plus == pytest.approx(50.0)
    assert report.counts["images"] == 4
    table = report.render_table()
    assert "Acc" in table and "75.00" in table
