"""Near-duplicate removal at image and text level, within and across splits.

The perceptual hash is pinned bit-exactly: ITU-R 601 luma, 32x32 area-average
resize, unnormalized type-II DCT, the top-left 8x8 coefficient block with the
DC term dropped and [8,0] appended to reach 64 values, thresholded at their
median (strictly above = 1), packed row-major MSB-first into a 64-bit value.
"""

from __future__ import annotations

import hashlib
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

_EMBED_DIM = 256

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


# -- perceptual hash -----------------------------------------------------------


def phash(image_bytes: bytes) -> int:
    """64-bit perceptual hash of decoded pixel content (container-invariant)."""
    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    except Exception as exc:
        raise ValueError(f"undecodable image: {exc}") from exc
    gray = rgb @ _LUMA
    small = _area_resize(gray, 32, 32)
    coeffs = _dct2(small)
    block = coeffs[:8, :8].ravel()
    values = np.concatenate([block[1:], coeffs[8:9, 0]])
    # Coefficients below numerical noise (relative to the DC term) are exact
    # zeros, so constant inputs hash to 0 instead of float-noise patterns.
    tolerance = 1e-8 * max(1.0, abs(float(coeffs[0, 0])))
    values[np.abs(values) <= tolerance] = 0.0
    median = np.median(values)
    bits = values > median
    out = 0
    for bit in bits:
        out = (out << 1) | int(bit)
    return out


def _area_resize(gray: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-weighted averaging onto an out_h x out_w grid."""
    return _area_weights(out_h, gray.shape[0]) @ gray @ _area_weights(out_w, gray.shape[1]).T


def _area_weights(out_n: int, in_n: int) -> np.ndarray:
    # weights[i, j] = overlap of source cell j with target interval i, / (in_n/out_n)
    weights = np.zeros((out_n, in_n), dtype=np.float64)
    scale = in_n / out_n
    for i in range(out_n):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, in_n)):
            weights[i, j] = min(hi, j + 1) - max(lo, j)
    return weights / scale


def _dct2(a: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D type-II DCT: y[k] = 2 * sum_n x[n] cos(pi k (2n+1) / 2N)."""
    n = a.shape[0]
    grid = np.arange(n, dtype=np.float64)
    basis = 2.0 * np.cos(np.pi * np.outer(grid, 2.0 * grid + 1.0) / (2.0 * n))
    return basis @ a @ basis.T


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


@dataclass
class ImageSignature:
    image_id: str
    phash: int

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "phash": f"{self.phash:016x}"}

    @classmethod
    def from_dict(cls, row: dict) -> "ImageSignature":
        return cls(image_id=row["image_id"], phash=int(row["phash"], 16))


# -- clustering -----------------------------------------------------------------


@dataclass
class DupCluster:
    representative_id: str
    member_ids: list[str]
    level: str  # image | text
    evidence: dict

    def to_dict(self) -> dict:
        return {
            "representative_id": self.representative_id,
            "member_ids": list(self.member_ids),
            "level": self.level,
            "evidence": dict(self.evidence),
        }


@dataclass
class DuplicateReport:
    clusters: list[DupCluster] = field(default_factory=list)
    removed_ids: list[str] = field(default_factory=list)
    mode: str = "within_split"

    def to_dict(self) -> dict:
        return {
            "clusters": [c.to_dict() for c in self.clusters],
            "removed_ids": list(self.removed_ids),
            "mode": self.mode,
        }


def find_image_duplicates(
    signatures: Sequence[ImageSignature], max_hamming: int
) -> DuplicateReport:
    """Union-find clustering of signatures within Hamming <= max_hamming; the
    lexicographically smallest image_id represents each cluster, the rest are
    removed."""
    if not (0 <= max_hamming <= 64):
        raise ValueError(f"max_hamming must be in [0,64], got {max_hamming}")
    sigs = sorted(signatures, key=lambda s: s.image_id)
    parent = list(range(len(sigs)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pair_distance: dict[tuple[int, int], int] = {}
    for i in range(len(sigs)):
        for j in range(i + 1, len(sigs)):
            d = hamming(sigs[i].phash, sigs[j].phash)
            if d <= max_hamming:
                pair_distance[(i, j)] = d
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(len(sigs)):
        groups.setdefault(find(i), []).append(i)

    clusters: list[DupCluster] = []
    removed: list[str] = []
    for root in sorted(groups):
        members = groups[root]
        if len(members) < 2:
            continue
        ids = [sigs[i].image_id for i in members]
        max_d = max(
            (d for (i, j), d in pair_distance.items() if i in members and j in members),
            default=0)
        clusters.append(DupCluster(
            representative_id=ids[0],
            member_ids=ids,
            level="image",
            evidence={"hamming": max_d},
        ))
        removed.extend(ids[1:])
    return DuplicateReport(clusters=clusters, removed_ids=sorted(removed),
                           mode="within_split")


# -- text similarity --------------------------------------------------------------


class EmbeddingUnavailable(RuntimeError):
    """Raised by an embedder that cannot produce a vector."""


class HashingEmbedder:
    """Deterministic offline bag-of-words embedder: fixed dimension 256,
    term-frequency weights, index = stable word hash mod 256."""

    dim = _EMBED_DIM

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for word, count in Counter(text.lower().split()).items():
            vec[_word_bucket(word)] += count
        return vec


def _word_bucket(word: str) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % _EMBED_DIM


class RemoteEmbedder:
    """OpenAI-compatible /embeddings endpoint; failures raise
    EmbeddingUnavailable so callers can fall back to the offline embedder."""

    def __init__(self, api_base: str, api_key: str, model: str, timeout: float = 30.0):
        self.api_base = api_base.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.timeout = timeout

    def embed(self, text: str) -> np.ndarray:
        import requests

        try:
            resp = requests.post(
                f"{self.api_base}/embeddings",
                json={"model": self.model, "input": text},
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            return np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        except Exception as exc:
            raise EmbeddingUnavailable(str(exc)) from exc


_DEFAULT_EMBEDDER = HashingEmbedder()


def _word_ngrams(text: str) -> tuple[set, bool]:
    words = text.lower().split()
    if len(words) < 3:
        return set(words), True
    return {tuple(words[i:i + 3]) for i in range(len(words) - 2)}, False


def text_similarity(a: str, b: str, embedder=None) -> dict[str, float]:
    """Jaccard over lowercase word 3-gram sets (unigrams when either side is
    shorter than 3 words) plus embedding cosine. Embedding failures fall back
    to the offline hashing embedder with a warning."""
    grams_a, uni_a = _word_ngrams(a)
    grams_b, uni_b = _word_ngrams(b)
    if uni_a or uni_b:
        grams_a = set(a.lower().split())
        grams_b = set(b.lower().split())
    union = grams_a | grams_b
    jaccard = (len(grams_a & grams_b) / len(union)) if union else 1.0

    embedder = embedder or _DEFAULT_EMBEDDER
    try:
        va, vb = embedder.embed(a), embedder.embed(b)
    except EmbeddingUnavailable as exc:
        logger.warning("embedding endpoint failed (%s); using offline embedder", exc)
        va, vb = _DEFAULT_EMBEDDER.embed(a), _DEFAULT_EMBEDDER.embed(b)
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    cosine = float(va @ vb / (na * nb)) if na > 0 and nb > 0 else 0.0
    return {"jaccard": jaccard, "cosine": cosine}


# -- cross-split leakage ------------------------------------------------------------


@dataclass
class DedupRecord:
    """What leakage checks need to know about one item."""

    item_id: str
    image_id: str
    text: str
    phash: int | None = None


@dataclass
class LeakageThresholds:
    max_hamming: int = 8
    min_jaccard: float = 0.8
    min_cosine: float = 0.92


def find_text_duplicates(
    records: Sequence[DedupRecord], thresholds: LeakageThresholds, embedder=None
) -> DuplicateReport:
    """Within-split text clustering: union-find over pairs whose jaccard or
    cosine crosses its threshold; the smallest item_id represents a cluster."""
    recs = sorted(records, key=lambda r: r.item_id)
    parent = list(range(len(recs)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    evidence: dict[tuple[int, int], dict] = {}
    for i in range(len(recs)):
        for j in range(i + 1, len(recs)):
            sim = text_similarity(recs[i].text, recs[j].text, embedder)
            if (sim["jaccard"] >= thresholds.min_jaccard
                    or sim["cosine"] >= thresholds.min_cosine):
                evidence[(i, j)] = sim
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(len(recs)):
        groups.setdefault(find(i), []).append(i)

    clusters: list[DupCluster] = []
    removed: list[str] = []
    for root in sorted(groups):
        members = groups[root]
        if len(members) < 2:
            continue
        ids = [recs[i].item_id for i in members]
        sims = [evidence[(i, j)] for (i, j) in evidence
                if i in members and j in members]
        clusters.append(DupCluster(
            representative_id=ids[0],
            member_ids=ids,
            level="text",
            evidence={
                "jaccard": max(s["jaccard"] for s in sims),
                "cosine": max(s["cosine"] for s in sims),
            },
        ))
        removed.extend(ids[1:])
    return DuplicateReport(clusters=clusters, removed_ids=sorted(removed),
                           mode="within_split")


def cross_split_leakage(
    train_items: Iterable[DedupRecord],
    eval_items: Iterable[DedupRecord],
    thresholds: LeakageThresholds,
    embedder=None,
) -> DuplicateReport:
    """Remove any eval item whose image near-matches a train image (Hamming)
    or whose question+answer text near-matches a train string (jaccard OR
    cosine). Train items are never modified; removals carry evidence."""
    train = list(train_items)
    clusters: list[DupCluster] = []
    removed: list[str] = []
    for item in sorted(eval_items, key=lambda r: r.item_id):
        hit = _find_leak(item, train, thresholds, embedder)
        if hit is None:
            continue
        train_item, level, evidence = hit
        clusters.append(DupCluster(
            representative_id=train_item.item_id,
            member_ids=[train_item.item_id, item.item_id],
            level=level,
            evidence=evidence,
        ))
        removed.append(item.item_id)
    return DuplicateReport(clusters=clusters, removed_ids=sorted(removed),
                           mode="cross_split")


def _find_leak(item, train, thresholds, embedder):
    if item.phash is not None:
        for t in train:
            if t.phash is None:
                continue
            d = hamming(item.phash, t.phash)
            if d <= thresholds.max_hamming:
                return t, "image", {"hamming": d}
    for t in train:
        sim = text_similarity(item.text, t.text, embedder)
        if (sim["jaccard"] >= thresholds.min_jaccard
                or sim["cosine"] >= thresholds.min_cosine):
            return t, "text", sim
    return None
