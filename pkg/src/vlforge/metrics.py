"""Discriminative and generation metrics: Acc, Acc+, BLEU, METEOR, ROUGE-1/2/L.

All generation metrics share one tokenizer (lowercase, punctuation split off,
whitespace tokens) and are reported x100. Per-item scores are averaged over
the open-ended items of a run (per-item convention, not corpus-level counts).
METEOR uses exact-match alignment only: no stemming or synonym resources.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .benchmark import BenchmarkManifest, Lexicon, normalize_answer

INVALID = "INVALID"

_EPS = 1e-9
_PUNCT_RE = re.compile(r"([^\w\s])")
_CHOICE_RE = re.compile(r"(?<![A-Za-z0-9'])([ABCDabcd])(?:[).:\]])?(?![A-Za-z0-9])")

# Exhaustive METEOR alignment is used when both sides are at most this long.
_EXHAUSTIVE_LIMIT = 10
_EXHAUSTIVE_NODE_CAP = 200_000


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation into separate tokens, split on whitespace."""
    return _PUNCT_RE.sub(r" \1 ", text.lower()).split()


def ngrams(tokens: list[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


# -- BLEU -------------------------------------------------------------------

def bleu(candidate: str, reference: str) -> float:
    """BLEU-4, uniform 1/4 weights, add-epsilon smoothing, in [0, 100].

    Precisions with zero matches (or no n-grams at all) get epsilon added to
    both numerator and denominator; brevity penalty is exp(1 - r/c) for c < r.
    """
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand_counts = Counter(ngrams(cand, n))
        ref_counts = Counter(ngrams(ref, n))
        total = sum(cand_counts.values())
        matches = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        if matches == 0:
            p = (matches + _EPS) / (total + _EPS)
        else:
            p = matches / total
        log_sum += math.log(p)
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return 100.0 * bp * math.exp(log_sum / 4.0)


# -- METEOR -----------------------------------------------------------------

def meteor(candidate: str, reference: str) -> float:
    """Exact-match METEOR in [0, 100].

    Alignment maximizes unigram matches, then minimizes chunks: exhaustive
    search for short strings, greedy left-to-right (preferring to extend the
    current chunk) otherwise. The greedy path always attains the maximum match
    count; its chunk count is a heuristic upper bound.
    """
    cand = tokenize(candidate)
    ref = tokenize(reference)
    m, chunks = _align(cand, ref)
    if m == 0:
        return 0.0
    precision = m / len(cand)
    recall = m / len(ref)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (chunks / m) ** 3
    return 100.0 * f_mean * (1.0 - penalty)


def _align(cand: list[str], ref: list[str]) -> tuple[int, int]:
    cand_counts = Counter(cand)
    ref_counts = Counter(ref)
    m_max = sum(min(c, ref_counts[t]) for t, c in cand_counts.items())
    if m_max == 0:
        return 0, 0
    if len(cand) <= _EXHAUSTIVE_LIMIT and len(ref) <= _EXHAUSTIVE_LIMIT:
        chunks = _min_chunks_exhaustive(cand, ref, m_max)
        if chunks is not None:
            return m_max, chunks
    return m_max, _chunks_greedy(cand, ref)


def _min_chunks_exhaustive(cand: list[str], ref: list[str], m_max: int) -> int | None:
    """Minimum chunk count over all maximum matchings; None if the search
    exceeds its node budget (caller falls back to greedy)."""
    ref_positions: dict[str, list[int]] = defaultdict(list)
    for j, tok in enumerate(ref):
        ref_positions[tok].append(j)

    best = [m_max + 1]
    nodes = [0]

    def dfs(i: int, used: frozenset, matches: int, chunks: int, prev: tuple[int, int] | None) -> bool:
        nodes[0] += 1
        if nodes[0] > _EXHAUSTIVE_NODE_CAP:
            return False
        if chunks >= best[0]:
            return True
        if matches + (len(cand) - i) < m_max:
            return True
        if i == len(cand):
            if matches == m_max:
                best[0] = min(best[0], chunks)
            return True
        ok = True
        for j in ref_positions.get(cand[i], ()):  # match i -> j
            if j in used:
                continue
            extends = prev is not None and prev == (i - 1, j - 1)
            ok &= dfs(i + 1, used | {j}, matches + 1,
                      chunks if extends else chunks + 1, (i, j))
        ok &= dfs(i + 1, used, matches, chunks, prev)  # leave i unmatched
        return ok

    completed = dfs(0, frozenset(), 0, 0, None)
    if not completed and best[0] > m_max:
        return None
    return best[0]


def _chunks_greedy(cand: list[str], ref: list[str]) -> int:
    available: dict[str, list[int]] = defaultdict(list)
    for j, tok in enumerate(ref):
        available[tok].append(j)
    used: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for i, tok in enumerate(cand):
        free = [j for j in available.get(tok, ()) if j not in used]
        if not free:
            continue
        if (pairs and pairs[-1][0] == i - 1 and (pairs[-1][1] + 1) in free):
            j = pairs[-1][1] + 1
        else:
            j = free[0]
        used.add(j)
        pairs.append((i, j))
    return _count_chunks(pairs)


def _count_chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for ci, ri in pairs:
        if prev is None or ci != prev[0] + 1 or ri != prev[1] + 1:
            chunks += 1
        prev = (ci, ri)
    return chunks


# -- ROUGE ------------------------------------------------------------------

def rouge(candidate: str, reference: str, variant: str) -> dict[str, float]:
    """ROUGE-1/2 (clipped n-gram overlap) or ROUGE-L (LCS), {p, r, f} x100."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not ref:
        return {"p": 0.0, "r": 0.0, "f": 0.0}
    if variant == "L":
        overlap = _lcs_length(cand, ref)
        cand_total, ref_total = len(cand), len(ref)
    elif variant in (1, 2, "1", "2"):
        n = int(variant)
        cand_counts = Counter(ngrams(cand, n))
        ref_counts = Counter(ngrams(ref, n))
        overlap = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        cand_total = sum(cand_counts.values())
        ref_total = sum(ref_counts.values())
    else:
        raise ValueError(f"unknown ROUGE variant: {variant!r}")
    p = overlap / cand_total if cand_total else 0.0
    r = overlap / ref_total if ref_total else 0.0
    f = 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0
    return {"p": 100.0 * p, "r": 100.0 * r, "f": 100.0 * f}


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        curr = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                curr[j] = prev[j - 1] + 1
            else:
                curr[j] = max(prev[j], curr[j - 1])
        prev = curr
    return prev[len(b)]


# -- discriminative ----------------------------------------------------------

def extract_choice(raw_output: str) -> str:
    """First standalone A-D letter (optionally followed by ')', '.', ':');
    INVALID when none is present."""
    match = _CHOICE_RE.search(raw_output)
    return match.group(1).upper() if match else INVALID


def accuracy(predictions: Mapping[str, str], manifest: BenchmarkManifest) -> float:
    """Per-question single-choice accuracy, in percent."""
    correct, total = _choice_outcomes(predictions, manifest)[:2]
    return 100.0 * correct / total if total else 0.0


def acc_plus(predictions: Mapping[str, str], manifest: BenchmarkManifest) -> float:
    """Image-level cross-consistency: both questions of an image must be
    correct; a missing prediction fails the pair. In percent."""
    outcomes = _choice_outcomes(predictions, manifest)[2]
    pairs = manifest.pair_index
    if not pairs:
        return 0.0
    both = sum(
        1 for ids in pairs.values() if all(outcomes.get(i, False) for i in ids))
    return 100.0 * both / len(pairs)


def _choice_outcomes(
    predictions: Mapping[str, str], manifest: BenchmarkManifest
) -> tuple[int, int, dict[str, bool], int]:
    known = {row["item_id"] for row in manifest.single_choice}
    known.update(row["item_id"] for row in manifest.open_ended)
    unknown = set(predictions) - known
    if unknown:
        raise ValueError(f"predictions reference unknown item_ids: {sorted(unknown)[:5]}")
    outcomes: dict[str, bool] = {}
    correct = invalid = 0
    for row in manifest.single_choice:
        raw = predictions.get(row["item_id"], "")
        letter = extract_choice(raw) if raw else INVALID
        ok = letter == row["answer_letter"]
        outcomes[row["item_id"]] = ok
        correct += int(ok)
        invalid += int(letter == INVALID)
    return correct, len(manifest.single_choice), outcomes, invalid


# -- run evaluation -----------------------------------------------------------

@dataclass
class EvalReport:
    acc: float
    acc_plus: float
    bleu: float
    meteor: float
    rouge1_f: float
    rouge2_f: float
    rougeL_f: float
    per_item: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "acc_plus": self.acc_plus,
            "bleu": self.bleu,
            "meteor": self.meteor,
            "rouge1_f": self.rouge1_f,
            "rouge2_f": self.rouge2_f,
            "rougeL_f": self.rougeL_f,
            "counts": self.counts,
            "per_item": self.per_item,
        }

    def render_table(self) -> str:
        header = ("Acc", "Acc+", "BLEU", "Meteor", "Rouge-1-f", "Rouge-2-f", "Rouge-L-f")
        values = (self.acc, self.acc_plus, self.bleu, self.meteor,
                  self.rouge1_f, self.rouge2_f, self.rougeL_f)
        widths = [max(len(h), 9) for h in header]
        head = " | ".join(h.rjust(w) for h, w in zip(header, widths))
        rule = "-+-".join("-" * w for w in widths)
        row = " | ".join(f"{v:.2f}".rjust(w) for v, w in zip(values, widths))
        return "\n".join((head, rule, row))


def load_predictions(path: Path | str) -> dict[str, str]:
    """Predictions JSONL: one {item_id, raw_output} per line."""
    preds: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            preds[str(row["item_id"])] = str(row.get("raw_output", ""))
    return preds


def evaluate_run(
    predictions: Mapping[str, str] | Path | str,
    manifest: BenchmarkManifest,
    lexicon: Lexicon | None = None,
) -> EvalReport:
    """Score one model run against a verified benchmark manifest.

    Open-ended candidates are normalized the same way the gold answers were;
    corpus scores are unweighted means over open-ended items.
    """
    if isinstance(predictions, (str, Path)):
        predictions = load_predictions(predictions)

    correct, total, outcomes, invalid = _choice_outcomes(predictions, manifest)
    acc = 100.0 * correct / total if total else 0.0
    pairs = manifest.pair_index
    both = sum(1 for ids in pairs.values() if all(outcomes.get(i, False) for i in ids))
    plus = 100.0 * both / len(pairs) if pairs else 0.0

    per_item: dict[str, dict] = {}
    for row in manifest.single_choice:
        raw = predictions.get(row["item_id"], "")
        per_item[row["item_id"]] = {
            "extracted": extract_choice(raw) if raw else INVALID,
            "correct": outcomes[row["item_id"]],
        }

    sums = {"bleu": 0.0, "meteor": 0.0, "rouge1_f": 0.0, "rouge2_f": 0.0, "rougeL_f": 0.0}
    for row in manifest.open_ended:
        raw = predictions.get(row["item_id"], "")
        cand = normalize_answer(raw, lexicon)
        gold = row["normalized_gold"]
        scores = {
            "bleu": bleu(cand, gold),
            "meteor": meteor(cand, gold),
            "rouge1_f": rouge(cand, gold, 1)["f"],
            "rouge2_f": rouge(cand, gold, 2)["f"],
            "rougeL_f": rouge(cand, gold, "L")["f"],
        }
        per_item[row["item_id"]] = scores
        for k, v in scores.items():
            sums[k] += v
    n_open = len(manifest.open_ended)
    means = {k: (v / n_open if n_open else 0.0) for k, v in sums.items()}

    return EvalReport(
        acc=acc,
        acc_plus=plus,
        bleu=means["bleu"],
        meteor=means["meteor"],
        rouge1_f=means["rouge1_f"],
        rouge2_f=means["rouge2_f"],
        rougeL_f=means["rougeL_f"],
        per_item=per_item,
        counts={
            "questions": total,
            "images": len(pairs),
            "invalid_extractions": invalid,
            "open_ended": n_open,
        },
    )
