import io
import itertools
import random

import numpy as np
import pytest
from PIL import Image
from hypothesis import given, settings
from hypothesis import strategies as st

from vlforge.dedup import (
    DedupRecord,
    EmbeddingUnavailable,
    HashingEmbedder,
    ImageSignature,
    LeakageThresholds,
    _area_resize,
    _dct2,
    cross_split_leakage,
    find_image_duplicates,
    find_text_duplicates,
    hamming,
    phash,
    text_similarity,
)

from conftest import make_image_bytes, reencode_jpeg, resize_image


def solid_png(color=(128, 128, 128), size=(64, 64)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", size, color).save(buf, "PNG")
    return buf.getvalue()


# -- phash ------------------------------------------------------------------------


def test_phash_constant_image_is_zero():
    # All AC coefficients are 0, the median is 0, and no value is strictly
    # above it, so every bit is 0.
    assert phash(solid_png()) == 0
    assert phash(solid_png(color=(3, 200, 77))) == 0


def test_phash_deterministic():
    data = make_image_bytes(42)
    assert phash(data) == phash(data)


def test_phash_container_invariance():
    # Decode a jpeg, rewrap the identical pixels as png: same hash.
    jpeg = make_image_bytes(3, fmt="JPEG")
    with Image.open(io.BytesIO(jpeg)) as img:
        buf = io.BytesIO()
        img.convert("RGB").save(buf, "PNG")
    assert phash(jpeg) == phash(buf.getvalue())


def test_phash_reencode_distance_within_bound():
    # Fixture pair: seed-4 synthetic photo vs its quality-60 jpeg re-encode.
    # Observed distance on this fixture: 4 (recorded); the planted-duplicate
    # bound is 8.
    original = make_image_bytes(4)
    distance = hamming(phash(original), phash(reencode_jpeg(original, 60)))
    assert distance == 4
    assert distance <= 8


def test_phash_rejects_undecodable():
    with pytest.raises(ValueError):
        phash(b"not an image at all")


def test_area_resize_constant_preserved():
    block = _area_resize(np.full((50, 70), 9.25), 32, 32)
    assert block.shape == (32, 32)
    assert np.allclose(block, 9.25)


def test_area_resize_preserves_mean():
    rng = np.random.default_rng(7)
    img = rng.uniform(0, 255, size=(45, 61))
    out = _area_resize(img, 32, 32)
    assert out.mean() == pytest.approx(img.mean(), abs=1e-9)


def test_dct2_matches_scipy():
    scipy_fft = pytest.importorskip("scipy.fft")
    rng = np.random.default_rng(0)
    a = rng.normal(size=(32, 32))
    ours = _dct2(a)
    theirs = scipy_fft.dct(scipy_fft.dct(a, type=2, axis=0), type=2, axis=1)
    assert np.abs(ours - theirs).max() < 1e-9


# -- clustering -------------------------------------------------------------------


def sig(image_id: str, value: int) -> ImageSignature:
    return ImageSignature(image_id=image_id, phash=value)


def flip_bits(value: int, positions) -> int:
    for p in positions:
        value ^= 1 << p
    return value


def test_identical_images_cluster_of_two():
    report = find_image_duplicates([sig("b", 5), sig("a", 5)], max_hamming=0)
    assert len(report.clusters) == 1
    cluster = report.clusters[0]
    assert cluster.representative_id == "a"
    assert cluster.member_ids == ["a", "b"]
    assert cluster.evidence == {"hamming": 0}
    assert report.removed_ids == ["b"]


def test_distinct_signatures_no_clusters():
    rng = random.Random(1)
    sigs = [sig(f"i{k}", rng.getrandbits(64)) for k in range(20)]
    report = find_image_duplicates(sigs, max_hamming=0)
    assert report.clusters == []
    assert report.removed_ids == []


def test_chain_transitivity():
    # A~B at distance 4, B~C at distance 4, A-C at distance 8; threshold 4
    # still merges all three through B.
    a = 0
    b = flip_bits(a, [0, 1, 2, 3])
    c = flip_bits(b, [10, 11, 12, 13])
    assert hamming(a, b) == 4 and hamming(b, c) == 4 and hamming(a, c) == 8
    report = find_image_duplicates(
        [sig("A", a), sig("B", b), sig("C", c)], max_hamming=4)
    assert len(report.clusters) == 1
    assert report.clusters[0].member_ids == ["A", "B", "C"]
    assert sorted(report.removed_ids) == ["B", "C"]


def test_max_hamming_bounds():
    with pytest.raises(ValueError):
        find_image_duplicates([], max_hamming=65)


@given(st.lists(st.integers(min_value=0, max_value=2 ** 64 - 1),
                min_size=2, max_size=10, unique=True),
       st.integers(min_value=0, max_value=16),
       st.integers(min_value=0, max_value=16))
@settings(max_examples=50, deadline=None)
def test_raising_threshold_never_shrinks_clusters(values, t1, t2):
    low, high = sorted((t1, t2))
    sigs = [sig(f"i{k:02d}", v) for k, v in enumerate(values)]
    report_low = find_image_duplicates(sigs, low)
    report_high = find_image_duplicates(sigs, high)
    clusters_low = {frozenset(c.member_ids) for c in report_low.clusters}
    clusters_high = {frozenset(c.member_ids) for c in report_high.clusters}
    for cluster in clusters_low:
        assert any(cluster <= big for big in clusters_high)


# -- text similarity -----------------------------------------------------------------


def test_text_similarity_identical():
    sim = text_similarity("what pest is on the leaf", "what pest is on the leaf")
    assert sim["jaccard"] == 1.0
    assert sim["cosine"] == pytest.approx(1.0)


def test_text_similarity_disjoint():
    sim = text_similarity("alpha beta gamma delta", "epsilon zeta eta theta")
    assert sim["jaccard"] == 0.0
    assert sim["cosine"] == pytest.approx(0.0)


def test_text_similarity_hand_counted_trigrams():
    # A: (what pest is) (pest is on) (is on the) (on the leaf)
    # B: (what pest is) (pest is on) (is on this) (on this leaf)
    # shared 2, union 6
    sim = text_similarity("what pest is on the leaf", "what pest is on this leaf")
    assert sim["jaccard"] == pytest.approx(2 / 6)


def test_text_similarity_unigram_fallback_for_short_strings():
    sim = text_similarity("leaf spot", "leaf spot disease")
    # either side < 3 words -> unigrams for both: shared {leaf, spot}, union 3
    assert sim["jaccard"] == pytest.approx(2 / 3)


def test_text_similarity_symmetry():
    a = "ripe tomato fruit on the vine"
    b = "a vine with ripe tomato fruit"
    assert text_similarity(a, b) == text_similarity(b, a)


def test_embedder_fallback_on_failure(caplog):
    class Broken:
        def embed(self, text):
            raise EmbeddingUnavailable("endpoint down")

    with caplog.at_level("WARNING"):
        sim = text_similarity("same words", "same words", embedder=Broken())
    assert sim["cosine"] == pytest.approx(1.0)
    assert any("offline embedder" in r.message for r in caplog.records)


def test_hashing_embedder_deterministic():
    embedder = HashingEmbedder()
    a = embedder.embed("ripe fruit on the vine")
    b = embedder.embed("ripe fruit on the vine")
    assert np.array_equal(a, b)
    assert a.shape == (256,)
    assert a.sum() == 5  # term frequencies


# -- cross-split leakage ----------------------------------------------------------------


def record(item_id, image_id="", text="", ph=None):
    return DedupRecord(item_id=item_id, image_id=image_id, text=text, phash=ph)


def test_cross_split_removes_reencoded_image():
    original = make_image_bytes(11)
    train = [record("t1", "img-t", "what crop is this", phash(original))]
    evals = [record("e1", "img-e", "a completely different question",
                    phash(reencode_jpeg(original, 60)))]
    report = cross_split_leakage(train, evals, LeakageThresholds())
    assert report.removed_ids == ["e1"]
    assert report.mode == "cross_split"
    cluster = report.clusters[0]
    assert cluster.level == "image"
    assert cluster.representative_id == "t1"
    assert cluster.evidence["hamming"] <= 8


def test_cross_split_retains_unique_item():
    train = [record("t1", "a", "what crop appears in this image",
                    phash(make_image_bytes(21)))]
    evals = [record("e1", "b", "which insect damages maize stems overnight",
                    phash(make_image_bytes(22)))]
    report = cross_split_leakage(train, evals, LeakageThresholds())
    assert report.removed_ids == []


def test_cross_split_removes_planted_paraphrase():
    # B appends one word to A's 8: A has 6 trigrams, all shared; union 7.
    text_a = "what pest is on the upper leaf surface"
    text_b = "what pest is on the upper leaf surface today"
    sim = text_similarity(text_a, text_b)
    assert sim["jaccard"] == pytest.approx(6 / 7)
    assert sim["jaccard"] >= 0.8
    train = [record("t1", "a", text_a, phash(make_image_bytes(31)))]
    evals = [record("e1", "b", text_b, phash(make_image_bytes(32)))]
    report = cross_split_leakage(train, evals, LeakageThresholds())
    assert report.removed_ids == ["e1"]
    assert report.clusters[0].level == "text"
    assert report.clusters[0].evidence["jaccard"] >= 0.8


def test_cross_split_rerun_reports_zero():
    original = make_image_bytes(41)
    train = [record("t1", "a", "what crop is this", phash(original)),
             record("t2", "b", "is the fruit ripe", phash(make_image_bytes(42)))]
    evals = [record("e1", "c", "what crop is this exactly",
                    phash(reencode_jpeg(original, 60))),
             record("e2", "d", "how many beetles are visible on the stem",
                    phash(make_image_bytes(43)))]
    report = cross_split_leakage(train, evals, LeakageThresholds())
    survivors = [e for e in evals if e.item_id not in set(report.removed_ids)]
    again = cross_split_leakage(train, survivors, LeakageThresholds())
    assert again.removed_ids == []


# -- within-split text clustering ----------------------------------------------------


def test_find_text_duplicates_clusters_paraphrases():
    records = [
        record("q1", text="which disease shows on the lower tomato leaves here"),
        record("q2", text="which disease shows on the lower tomato leaves"),
        record("q3", text="how tall does the maize plant grow by august"),
    ]
    report = find_text_duplicates(records, LeakageThresholds())
    assert len(report.clusters) == 1
    assert report.clusters[0].member_ids == ["q1", "q2"]
    assert report.removed_ids == ["q2"]
    assert report.mode == "within_split"
