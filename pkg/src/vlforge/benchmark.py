"""Benchmark assembly: paired single-choice questions, answer normalization,
and a checksummed canonical manifest.

The manifest serializes canonically (sorted keys, sorted item ids, LF) and
carries a SHA-256 checksum over that form, so identical inputs always produce
an identical benchmark identity.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .generation import KIND_CHOICE, KIND_OPEN, STATUS_EXPERT, STATUS_REFINED, VQAItem

logger = logging.getLogger(__name__)

_TERMINAL_PUNCT = ".,;:!?"
_NUMBER_RE = re.compile(r"^\d+(\.\d+)?$")


class BenchmarkError(ValueError):
    """Raised for invalid benchmark inputs or a failed checksum."""


# -- answer normalization -----------------------------------------------------


@dataclass
class Lexicon:
    """Synonym table (word sequences -> canonical words) plus unit rules.

    Loaded from TSV: two-column rows are synonym mappings; rows of the form
    ``unit<TAB>week<TAB>day<TAB>7`` convert "2 weeks" to "14 day". Canonical
    forms may not themselves appear as surfaces, which makes normalization
    idempotent by construction.
    """

    synonyms: dict[tuple[str, ...], tuple[str, ...]] = field(default_factory=dict)
    units: dict[str, tuple[str, float]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path | str) -> "Lexicon":
        synonyms: dict[tuple[str, ...], tuple[str, ...]] = {}
        units: dict[str, tuple[str, float]] = {}
        with open(path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split("\t")
                if parts[0] == "unit" and len(parts) == 4:
                    units[parts[1].strip().lower()] = (
                        parts[2].strip().lower(), float(parts[3]))
                elif len(parts) == 2:
                    surface = tuple(parts[0].strip().lower().split())
                    canonical = tuple(parts[1].strip().lower().split())
                    if not surface or not canonical:
                        raise BenchmarkError(f"lexicon line {lineno}: empty mapping")
                    synonyms[surface] = canonical
                else:
                    raise BenchmarkError(
                        f"lexicon line {lineno}: expected 2 columns or a unit rule")
        lex = cls(synonyms=synonyms, units=units)
        lex._check_idempotent()
        return lex

    def _check_idempotent(self) -> None:
        surfaces = set(self.synonyms)
        for canonical in self.synonyms.values():
            for i in range(len(canonical)):
                for j in range(i + 1, len(canonical) + 1):
                    if canonical[i:j] in surfaces:
                        raise BenchmarkError(
                            "lexicon is not idempotent: canonical form "
                            f"{' '.join(canonical)!r} contains surface "
                            f"{' '.join(canonical[i:j])!r}")
        for unit, (target, _) in self.units.items():
            if target in self.units or f"{target}s" in self.units:
                raise BenchmarkError(
                    f"unit rule target {target!r} is itself a unit surface")
            if unit == target:
                raise BenchmarkError(f"unit rule {unit!r} maps to itself")


def normalize_answer(text: str, lexicon: Lexicon | None = None) -> str:
    """Lowercase, trim, collapse whitespace, strip terminal punctuation, apply
    longest-match synonym substitution, then canonicalize units. Unknown
    tokens pass through; the result is a fixpoint of this function."""
    words = text.lower().split()
    while words and words[-1] and all(c in _TERMINAL_PUNCT for c in words[-1]):
        words.pop()
    if words:
        words[-1] = words[-1].rstrip(_TERMINAL_PUNCT)
        if not words[-1]:
            words.pop()
    if lexicon is None:
        return " ".join(words)
    # Iterate to a fixpoint so the whole function is idempotent even when a
    # substitution recombines with following words into a new surface form.
    for _ in range(10):
        before = list(words)
        words = _apply_synonyms(words, lexicon)
        words = _apply_units(words, lexicon)
        if words == before:
            break
    else:
        raise BenchmarkError("lexicon substitution did not converge in 10 rounds")
    return " ".join(words)


def _apply_synonyms(words: list[str], lexicon: Lexicon) -> list[str]:
    if not lexicon.synonyms:
        return words
    max_len = max(len(s) for s in lexicon.synonyms)
    out: list[str] = []
    i = 0
    while i < len(words):
        for length in range(min(max_len, len(words) - i), 0, -1):
            chunk = tuple(words[i:i + length])
            if chunk in lexicon.synonyms:
                out.extend(lexicon.synonyms[chunk])
                i += length
                break
        else:
            out.append(words[i])
            i += 1
    return out


def _apply_units(words: list[str], lexicon: Lexicon) -> list[str]:
    if not lexicon.units:
        return words
    out: list[str] = []
    i = 0
    while i < len(words):
        word = words[i]
        nxt = words[i + 1] if i + 1 < len(words) else None
        rule = None
        if nxt is not None and _NUMBER_RE.match(word):
            rule = lexicon.units.get(nxt) or (
                lexicon.units.get(nxt[:-1]) if nxt.endswith("s") else None)
        if rule is not None:
            target, factor = rule
            value = float(word) * factor
            rendered = f"{value:g}"
            out.extend((rendered, target))
            i += 2
        else:
            out.append(word)
            i += 1
    return out


# -- manifest -----------------------------------------------------------------


@dataclass
class BenchmarkManifest:
    """Frozen benchmark: open-ended items, paired single-choice items, and a
    checksum over the canonical serialization."""

    name: str
    open_ended: list[dict] = field(default_factory=list)
    single_choice: list[dict] = field(default_factory=list)
    pair_index: dict[str, list[str]] = field(default_factory=dict)
    checksum: str = ""

    def canonical_body(self) -> str:
        body = {
            "name": self.name,
            "open_ended": sorted(self.open_ended, key=lambda r: r["item_id"]),
            "single_choice": sorted(self.single_choice, key=lambda r: r["item_id"]),
            "pair_index": {k: sorted(v) for k, v in sorted(self.pair_index.items())},
        }
        return json.dumps(body, sort_keys=True, ensure_ascii=False,
                          separators=(",", ":"))

    def compute_checksum(self) -> str:
        return hashlib.sha256(self.canonical_body().encode("utf-8")).hexdigest()

    def seal(self) -> "BenchmarkManifest":
        self.checksum = self.compute_checksum()
        return self

    def verify(self) -> None:
        if self.checksum != self.compute_checksum():
            raise BenchmarkError("benchmark checksum mismatch")
        for image_id, ids in self.pair_index.items():
            if len(ids) != 2:
                raise BenchmarkError(f"image {image_id} is not paired with 2 questions")
        counted: dict[str, int] = {}
        for row in self.single_choice:
            counted[row["image_id"]] = counted.get(row["image_id"], 0) + 1
        if set(counted) != set(self.pair_index) or any(v != 2 for v in counted.values()):
            raise BenchmarkError("pair_index does not cover the single-choice section")
        if len(self.single_choice) != 2 * len(self.pair_index):
            raise BenchmarkError("single-choice count must be twice the paired images")
        open_ids = {r["item_id"] for r in self.open_ended}
        choice_ids = {r["item_id"] for r in self.single_choice}
        if open_ids & choice_ids:
            raise BenchmarkError("an item_id appears in both sections")

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = json.loads(self.canonical_body())
        body["checksum"] = self.checksum
        path.write_text(
            json.dumps(body, sort_keys=True, ensure_ascii=False, indent=1) + "\n",
            encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "BenchmarkManifest":
        body = json.loads(Path(path).read_text(encoding="utf-8"))
        manifest = cls(
            name=body["name"],
            open_ended=body["open_ended"],
            single_choice=body["single_choice"],
            pair_index=body["pair_index"],
            checksum=body.get("checksum", ""),
        )
        manifest.verify()
        return manifest


def build_benchmark(
    name: str,
    items: Iterable[VQAItem],
    *,
    accepted_ids: set[str] | None = None,
    removed_ids: set[str] | None = None,
    rubric_sums: Mapping[str, int] | None = None,
    lexicon: Lexicon | None = None,
) -> tuple[BenchmarkManifest, dict]:
    """Assemble a benchmark from refined/expert items that survived dedup and
    review. Single-choice items are paired per image; images without exactly
    two surviving questions are excluded and counted; an image with three or
    more keeps the two highest rubric sums."""
    accepted = accepted_ids
    removed = removed_ids or set()
    sums = rubric_sums or {}

    kept: list[VQAItem] = []
    counts = {
        "open_ended": 0, "single_choice": 0, "excluded_images": 0,
        "review_rejected": 0, "dedup_removed": 0, "cut_extra_questions": 0,
    }
    for item in items:
        if item.status not in (STATUS_REFINED, STATUS_EXPERT):
            raise BenchmarkError(
                f"{item.item_id}: status {item.status!r} may not enter a benchmark")
        if item.item_id in removed:
            counts["dedup_removed"] += 1
            continue
        if accepted is not None and item.item_id not in accepted:
            counts["review_rejected"] += 1
            continue
        kept.append(item)
    if not kept:
        raise BenchmarkError("no items survive for benchmark assembly")

    open_rows: list[dict] = []
    by_image: dict[str, list[VQAItem]] = {}
    for item in kept:
        if item.kind == KIND_OPEN:
            open_rows.append({
                "item_id": item.item_id,
                "image_id": item.image_id,
                "question": item.question,
                "gold_answer": item.answer,
                "normalized_gold": normalize_answer(item.answer, lexicon),
            })
        elif item.kind == KIND_CHOICE:
            by_image.setdefault(item.image_id, []).append(item)

    choice_rows: list[dict] = []
    pair_index: dict[str, list[str]] = {}
    for image_id in sorted(by_image):
        group = by_image[image_id]
        if len(group) > 2:
            group.sort(key=lambda it: (-sums.get(it.item_id, 0), it.item_id))
            cut = group[2:]
            group = group[:2]
            counts["cut_extra_questions"] += len(cut)
            logger.info("image %s: cut %d extra single-choice questions",
                        image_id, len(cut))
        if len(group) != 2:
            counts["excluded_images"] += 1
            continue
        pair_index[image_id] = sorted(it.item_id for it in group)
        for item in group:
            choice_rows.append({
                "item_id": item.item_id,
                "image_id": item.image_id,
                "question": item.question,
                "options": list(item.options),
                "answer_letter": item.answer,
            })

    counts["open_ended"] = len(open_rows)
    counts["single_choice"] = len(choice_rows)
    manifest = BenchmarkManifest(
        name=name,
        open_ended=sorted(open_rows, key=lambda r: r["item_id"]),
        single_choice=sorted(choice_rows, key=lambda r: r["item_id"]),
        pair_index=pair_index,
    ).seal()
    manifest.verify()
    return manifest, counts
