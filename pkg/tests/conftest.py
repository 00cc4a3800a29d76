import io
import json
import random

import pytest
from PIL import Image, ImageDraw


def make_image_bytes(seed: int, size=(96, 72), fmt="PNG", quality=90) -> bytes:
    """Deterministic synthetic 'photo': smooth gradient plus a few shapes.

    Smooth content keeps perceptual hashes stable under re-encoding while
    different seeds give clearly distinct images.
    """
    rng = random.Random(seed)
    w, h = size
    base = (rng.randrange(30, 220), rng.randrange(30, 220), rng.randrange(30, 220))
    img = Image.new("RGB", size)
    pixels = img.load()
    gx = rng.uniform(-1.2, 1.2)
    gy = rng.uniform(-1.2, 1.2)
    for y in range(h):
        for x in range(w):
            pixels[x, y] = (
                max(0, min(255, int(base[0] + gx * x + gy * y))),
                max(0, min(255, int(base[1] - gy * x + gx * y))),
                max(0, min(255, int(base[2] + gx * x - gy * y))),
            )
    draw = ImageDraw.Draw(img)
    for _ in range(rng.randrange(2, 5)):
        x0, y0 = rng.randrange(0, w - 24), rng.randrange(0, h - 24)
        x1, y1 = x0 + rng.randrange(12, 24), y0 + rng.randrange(12, 24)
        color = tuple(rng.randrange(0, 256) for _ in range(3))
        if rng.random() < 0.5:
            draw.ellipse((x0, y0, x1, y1), fill=color)
        else:
            draw.rectangle((x0, y0, x1, y1), fill=color)
    buf = io.BytesIO()
    img.save(buf, format=fmt, quality=quality)
    return buf.getvalue()


def reencode_jpeg(data: bytes, quality=60) -> bytes:
    with Image.open(io.BytesIO(data)) as img:
        buf = io.BytesIO()
        img.convert("RGB").save(buf, format="JPEG", quality=quality)
        return buf.getvalue()


def resize_image(data: bytes, scale=0.6, fmt="PNG") -> bytes:
    with Image.open(io.BytesIO(data)) as img:
        new = img.resize((max(8, int(img.width * scale)),
                          max(8, int(img.height * scale))))
        buf = io.BytesIO()
        new.save(buf, format=fmt)
        return buf.getvalue()


def write_stub_script(path, rules) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rule in rules:
            f.write(json.dumps(rule) + "\n")


@pytest.fixture
def image_factory():
    return make_image_bytes


@pytest.fixture
def stub_script(tmp_path):
    def write(rules, name="stub.jsonl"):
        path = tmp_path / name
        write_stub_script(path, rules)
        return path
    return write


# -- end-to-end pipeline fixture -------------------------------------------------

FIXTURE_LABELS = {
    "tomato_blight": ("tomato leaf", "brown lesions spreading"),
    "wheat_rust": ("wheat stem", "orange pustules scattered"),
    "apple_scab": ("apple fruit", "dark scab patches"),
    "corn_smut": ("corn ear", "gray smut galls"),
}

# Words shared across the fixture's question-answer strings (including the
# punctuation-bearing variants the dedup tokenizer produces).
_BASE_TEXT_WORDS = (
    "what species grows at the site? by how should grower treat plot? remove "
    "infected tissue near and rotate crops tomato blight wheat rust apple "
    "scab corn smut").split()

_MARKER_CANDIDATES = (
    "alder birch cedar dogwood elm fir hazel juniper laurel maple oak pine "
    "quince rowan spruce walnut willow yew aspen beech bend gate ridge hollow "
    "crossing terrace brook knoll ditch rise paddock furrow arbor verge basin "
    "levee shoal margin swale spur larch poplar sumac teak alcove bluff cairn "
    "dale escarp fen glade heath inlet jetty kame loch mesa notch outcrop "
    "quarry reef scarp tarn upland vale weir xeric yard zone bank cove dune "
    "marsh creek gully berm copse").split()


def fixture_markers():
    """20 two-word site markers whose words occupy hashing-embedder buckets
    distinct from each other and from the shared fixture words, so offline
    cosine scores reflect real word overlap rather than bucket collisions."""
    from vlforge.dedup import _word_bucket

    used = {_word_bucket(w) for w in _BASE_TEXT_WORDS}
    chosen = []
    for word in _MARKER_CANDIDATES:
        bucket = _word_bucket(word)
        if bucket in used:
            continue
        used.add(bucket)
        chosen.append(word)
        if len(chosen) == 40:
            break
    assert len(chosen) == 40, "not enough collision-free marker words"
    return [f"{chosen[2 * i]} {chosen[2 * i + 1]}" for i in range(20)]


_MARKERS = fixture_markers()


def build_pipeline_fixture(root, eval_fraction=0.4, seed=7):
    """20 images (4 labels x 5), a fully cooperative stub script with
    per-image caption/synthesis rules, and a pipeline config. Returns the
    config file path."""
    import hashlib

    source = root / "source"
    image_ids = {}
    index = 0
    for label in FIXTURE_LABELS:
        subdir = source / label
        subdir.mkdir(parents=True, exist_ok=True)
        for k in range(5):
            data = make_image_bytes(9000 + index)
            (subdir / f"{label}_{k}.png").write_bytes(data)
            image_ids[index] = hashlib.sha256(data).hexdigest()
            index += 1

    label_map = root / "labels.json"
    label_map.write_text(json.dumps({label: label for label in FIXTURE_LABELS}))

    # Refinement and filter prompts embed the caption text (markers included),
    # so their rules must precede the per-image marker rules.
    rules = [
        {"match": "Score the question-answer pair", "response": "5,5,5,5"},
        {"match": "faithful to the image caption",
         "response": "```\nverdict: keep\nreason: ok\n```"},
    ]
    index = 0
    for label, (subject, condition) in FIXTURE_LABELS.items():
        for _ in range(5):
            marker = _MARKERS[index]
            image_id = image_ids[index]
            caption = (
                f"caption: A {subject} with {condition} beside the {marker}.\n"
                f"subject: {subject}\n"
                "growth_stage: mature\n"
                f"color_or_lesion: {condition}\n"
                "maturity_or_morphology: unknown\n"
                "context: field")
            rules.append({"match": f"Image: {image_id}",
                          "response": f"```\n{caption}\n```"})
            synth = (
                f"q1: What species grows at the {marker} site?\n"
                f"a1: {label.replace('_', ' ')} by the {marker}\n"
                "c1: recognition\n"
                f"q2: How should the grower treat the {marker} plot?\n"
                f"a2: remove infected tissue near the {marker} and rotate crops\n"
                "c2: management")
            rules.append({"match": marker, "response": f"```\n{synth}\n```"})
            index += 1
    stub = root / "stub.jsonl"
    write_stub_script(stub, rules)

    workspace = root / "ws"
    config = root / "vlforge.toml"
    config.write_text(
        "[paths]\n"
        f"workspace = {workspace}\n"
        f"source_dir = {source}\n"
        "source_tag = plants\n"
        f"label_map = {label_map}\n"
        f"stub_script = {stub}\n"
        "[gateway]\n"
        "parallelism = 4\n"
        "rate_limit = 500.0\n"
        "rate_burst = 50\n"
        "[stages]\n"
        f"eval_fraction = {eval_fraction}\n"
        f"seed = {seed}\n")
    return config


@pytest.fixture
def pipeline_fixture(tmp_path):
    return build_pipeline_fixture(tmp_path)
