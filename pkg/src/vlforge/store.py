"""Content-addressed image storage, JSONL manifests, split assignment, run ledger.

Layout inside a workspace root:

    store/<first 2 hex>/<image_id>.<ext>   deduplicated image bytes
    manifests/<run_id>/<stage>.jsonl       per-stage record manifests
    ledger.jsonl                           append-only run ledger
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

from PIL import Image

logger = logging.getLogger(__name__)

SPLIT_TRAIN = "train"
SPLIT_EVAL = "eval"
SPLIT_QUARANTINE = "quarantine"
SPLIT_UNASSIGNED = "unassigned"

_IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}

LEDGER_STAGES = (
    "ingest", "split", "caption", "synthesize", "refine",
    "filter", "dedup", "review", "benchmark", "evaluate", "judge",
)


class StoreError(ValueError):
    """Raised for invalid store operations (e.g. split reassignment)."""


def sha256_bytes(data: bytes) -> str:
    """64-hex content hash; the identity of an image is this digest of its bytes."""
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path, chunk_size: int = 1 << 20) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class ImageRecord:
    """One stored source image; keys serialize in this exact order."""

    image_id: str
    source_dataset: str
    category_label: str
    split: str = SPLIT_UNASSIGNED
    width: int = 0
    height: int = 0
    format: str = "png"

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "source_dataset": self.source_dataset,
            "category_label": self.category_label,
            "split": self.split,
            "width": self.width,
            "height": self.height,
            "format": self.format,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "ImageRecord":
        return cls(**{k: row[k] for k in (
            "image_id", "source_dataset", "category_label",
            "split", "width", "height", "format")})


@dataclass
class IngestReport:
    ingested: int = 0
    collapsed: int = 0
    skipped: int = 0
    quarantined: int = 0
    manifest: str = ""

    def to_dict(self) -> dict:
        return {
            "ingested": self.ingested,
            "collapsed": self.collapsed,
            "skipped": self.skipped,
            "quarantined": self.quarantined,
            "manifest": self.manifest,
        }


@dataclass
class RunLedgerEntry:
    run_id: str
    stage: str
    input_manifest: str
    output_manifest: str
    config_hash: str
    started: str
    finished: str
    item_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "stage": self.stage,
            "input_manifest": self.input_manifest,
            "output_manifest": self.output_manifest,
            "config_hash": self.config_hash,
            "started": self.started,
            "finished": self.finished,
            "item_counts": self.item_counts,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "RunLedgerEntry":
        return cls(**{k: row[k] for k in (
            "run_id", "stage", "input_manifest", "output_manifest",
            "config_hash", "started", "finished", "item_counts")})


def write_jsonl(path: Path, rows: Iterable[dict]) -> int:
    """Write one JSON object per line, UTF-8, preserving key order."""
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False))
            f.write("\n")
            count += 1
    return count


def read_jsonl(path: Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


class CorpusStore:
    """Workspace-rooted image store plus manifest and ledger helpers."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.store_dir = self.root / "store"
        self.manifests_dir = self.root / "manifests"
        self.ledger_path = self.root / "ledger.jsonl"
        self._ledger_lock = threading.Lock()

    # -- image bytes ---------------------------------------------------

    def image_path(self, image_id: str, fmt: str) -> Path:
        ext = "jpg" if fmt == "jpeg" else fmt
        return self.store_dir / image_id[:2] / f"{image_id}.{ext}"

    def open_image_bytes(self, image_id: str) -> bytes:
        for fmt in ("jpeg", "png"):
            path = self.image_path(image_id, fmt)
            if path.is_file():
                return path.read_bytes()
        raise FileNotFoundError(f"image {image_id} not in store")

    def manifest_path(self, run_id: str, stage: str) -> Path:
        return self.manifests_dir / run_id / f"{stage}.jsonl"

    # -- ingestion -----------------------------------------------------

    def ingest_images(
        self,
        source_dir: Path | str,
        source_tag: str,
        label_map: Path | str | None,
        run_id: str,
        workers: int = 4,
    ) -> IngestReport:
        """Hash, decode-check and store every jpeg/png under source_dir.

        Byte-identical duplicates collapse onto one stored file and count as
        ``collapsed``; undecodable files are skipped with a warning; files with
        no label mapping land in the quarantine split.
        """
        source_dir = Path(source_dir)
        labels = _load_label_map(label_map)
        files = sorted(
            p for p in source_dir.rglob("*")
            if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES
        )

        report = IngestReport()
        seen: dict[str, ImageRecord] = {}

        def probe(path: Path) -> tuple[Path, str, bytes, dict | None]:
            data = path.read_bytes()
            image_id = sha256_bytes(data)
            try:
                with Image.open(io.BytesIO(data)) as img:
                    img.load()
                    meta = {
                        "width": img.width,
                        "height": img.height,
                        "format": (img.format or "png").lower(),
                    }
            except Exception:
                meta = None
            return path, image_id, data, meta

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            probed = list(pool.map(probe, files))

        for path, image_id, data, meta in probed:
            if meta is None or meta["format"] not in ("jpeg", "png"):
                logger.warning("skipping undecodable file: %s", path)
                report.skipped += 1
                continue
            if image_id in seen:
                report.collapsed += 1
                continue
            stored = self.image_path(image_id, meta["format"])
            if stored.is_file():
                report.collapsed += 1
            else:
                stored.parent.mkdir(parents=True, exist_ok=True)
                stored.write_bytes(data)

            label = _lookup_label(labels, path, source_dir)
            record = ImageRecord(
                image_id=image_id,
                source_dataset=source_tag,
                category_label=label if label is not None else "unlabeled",
                split=SPLIT_UNASSIGNED if label is not None else SPLIT_QUARANTINE,
                width=meta["width"],
                height=meta["height"],
                format=meta["format"],
            )
            if label is None:
                report.quarantined += 1
            seen[image_id] = record

        report.ingested = len(seen)
        out = self.manifest_path(run_id, "ingest")
        write_jsonl(out, (seen[i].to_dict() for i in sorted(seen)))
        report.manifest = str(out)
        return report

    # -- splits ----------------------------------------------------------

    def assign_splits(
        self,
        manifest: Path | str,
        eval_fraction: float,
        seed: int,
        out_path: Path | str,
    ) -> dict:
        """Deterministically assign train/eval, stratified by category label.

        Per label with n unassigned images, eval gets floor(n*f + 0.5) of
        them, capped at n-1 so every label with >=2 images keeps a train
        exemplar; singleton labels go to train. Quarantined records are left
        untouched; an already-assigned record is an error.
        """
        if not (0.0 < eval_fraction < 1.0):
            raise StoreError(f"eval_fraction must be in (0,1), got {eval_fraction}")
        records = [ImageRecord.from_dict(row) for row in read_jsonl(Path(manifest))]

        by_label: dict[str, list[ImageRecord]] = {}
        for rec in records:
            if rec.split == SPLIT_QUARANTINE:
                continue
            if rec.split != SPLIT_UNASSIGNED:
                raise StoreError(
                    f"image {rec.image_id} already assigned to {rec.split}; "
                    "reassignment is an error")
            by_label.setdefault(rec.category_label, []).append(rec)

        counts = {"train": 0, "eval": 0, "quarantine": 0}
        for label in sorted(by_label):
            group = sorted(by_label[label], key=lambda r: r.image_id)
            n = len(group)
            n_eval = int(n * eval_fraction + 0.5)
            n_eval = min(n_eval, n - 1) if n >= 2 else 0
            rng = random.Random(_derive_seed(seed, label))
            rng.shuffle(group)
            for i, rec in enumerate(group):
                rec.split = SPLIT_EVAL if i < n_eval else SPLIT_TRAIN
                counts[rec.split] += 1
        counts["quarantine"] = sum(1 for r in records if r.split == SPLIT_QUARANTINE)

        ordered = sorted(records, key=lambda r: r.image_id)
        write_jsonl(Path(out_path), (r.to_dict() for r in ordered))
        return counts

    # -- ledger ----------------------------------------------------------

    def append_ledger(self, entry: RunLedgerEntry) -> None:
        with self._ledger_lock:
            self.ledger_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.ledger_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry.to_dict(), ensure_ascii=False))
                f.write("\n")

    def read_ledger(self) -> list[RunLedgerEntry]:
        if not self.ledger_path.is_file():
            return []
        return [RunLedgerEntry.from_dict(row) for row in read_jsonl(self.ledger_path)]

    def find_ledger_entry(
        self, stage: str, input_manifest: str, config_hash: str
    ) -> RunLedgerEntry | None:
        """Most recent entry matching (stage, input, config); drives re-run skips."""
        found = None
        for entry in self.read_ledger():
            if (entry.stage == stage
                    and entry.input_manifest == input_manifest
                    and entry.config_hash == config_hash):
                found = entry
        return found


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _load_label_map(label_map: Path | str | None) -> dict[str, str]:
    if not label_map:
        return {}
    with open(label_map, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise StoreError("label_map must be a JSON object of name -> label")
    return {str(k): str(v) for k, v in raw.items()}


def _lookup_label(labels: dict[str, str], path: Path, source_dir: Path) -> str | None:
    """Match a file against the label map by relative path, then by
    enclosing directory (nearest first), then by bare file name."""
    rel = path.relative_to(source_dir)
    if rel.as_posix() in labels:
        return labels[rel.as_posix()]
    for parent in rel.parents:
        if parent.name and parent.name in labels:
            return labels[parent.name]
        if parent.as_posix() in labels and parent.as_posix() != ".":
            return labels[parent.as_posix()]
    return labels.get(path.name)
