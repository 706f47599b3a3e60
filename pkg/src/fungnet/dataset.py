"""Image corpus manifest, stratified splitting and epoch batching.

On disk the corpus is two folders under one root::

    root/edible/*.jpg
    root/poisonous/*.jpg

Poisonous is label 1, the positive class everywhere downstream.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .preprocess import IMAGENET, NormalizationConstants, image_rng, preprocess_eval, preprocess_train
from .tensor import Tensor

log = logging.getLogger(__name__)

LABELS = ("edible", "poisonous")
SPLITS = ("train", "val", "test", "unassigned")
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp", ".tif", ".tiff"}


@dataclass(frozen=True)
class Record:
    path: str
    label: int
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    records: list
    skipped: int = 0

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")
        for r in self.records:
            if r.label not in (0, 1):
                raise ValueError(f"{r.path}: label must be 0 or 1, got {r.label}")
            if r.split not in SPLITS:
                raise ValueError(f"{r.path}: unknown split {r.split!r}")

    def __len__(self):
        return len(self.records)

    def fingerprint(self) -> dict:
        return {name: sum(r.label == i for r in self.records) for i, name in enumerate(LABELS)}

    def subset(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        for r in self.records:
            w.writerow([r.path, LABELS[r.label], r.split])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DatasetManifest":
        rows = list(csv.DictReader(io.StringIO(text)))
        if rows and set(rows[0]) != {"path", "label", "split"}:
            raise ValueError(f"manifest header must be path,label,split, got {','.join(rows[0])}")
        records = []
        for r in rows:
            if r["label"] not in LABELS:
                raise ValueError(f"{r['path']}: label must be edible or poisonous, got {r['label']!r}")
            records.append(Record(r["path"], LABELS.index(r["label"]), r["split"]))
        return cls(records)


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def ingest(root) -> DatasetManifest:
    """One record per decodable image under ``root/edible`` and ``root/poisonous``."""
    root = Path(root)
    records, skipped = [], 0
    for label, name in enumerate(LABELS):
        folder = root / name
        if not folder.is_dir():
            raise FileNotFoundError(f"missing class folder {folder}")
        for path in sorted(p for p in folder.iterdir() if p.is_file()):
            if path.suffix.lower() in IMAGE_SUFFIXES and _decodable(path):
                records.append(Record(str(path), label))
            else:
                skipped += 1
    if skipped:
        log.warning("skipped %d file(s) that are not decodable images", skipped)
    if not records:
        raise ValueError(f"no decodable images under {root}")
    return DatasetManifest(records, skipped)


@dataclass
class SplitSpec:
    test_count: Optional[int] = None
    val_count: Optional[int] = None
    stratified: bool = True
    seed: int = 0

    def resolve(self, total: int) -> tuple[int, int]:
        """Fill unset counts from the default ratios (20% test, 8.9% val)."""
        test = self.test_count if self.test_count is not None else int(round(0.2 * total))
        val = self.val_count if self.val_count is not None else int(round(0.089 * total))
        if test < 0 or val < 0 or test + val >= total:
            raise ValueError(f"infeasible split: test {test} + val {val} must be below {total} records")
        return test, val


def _allocate(count: int, class_sizes: Sequence[int]) -> list:
    """Largest-remainder apportionment of ``count`` across classes."""
    total = sum(class_sizes)
    exact = [count * n / total for n in class_sizes]
    alloc = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(exact)), key=lambda k: (-(exact[k] - alloc[k]), k))
    for k in order[:count - sum(alloc)]:
        alloc[k] += 1
    return alloc


def split(manifest: DatasetManifest, spec: SplitSpec) -> DatasetManifest:
    """Assign test first, then val from the remainder; the rest is train."""
    n = len(manifest)
    test_count, val_count = spec.resolve(n)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5D17]))
    labels = np.array([r.label for r in manifest.records])
    remaining = np.arange(n)
    assignment = np.array(["train"] * n, dtype=object)

    for name, count in (("test", test_count), ("val", val_count)):
        if spec.stratified:
            groups = [remaining[labels[remaining] == c] for c in (0, 1)]
            take = _allocate(count, [len(g) for g in groups])
            chosen = np.concatenate([rng.permutation(g)[:k] for g, k in zip(groups, take)])
        else:
            chosen = rng.permutation(remaining)[:count]
        assignment[chosen] = name
        remaining = np.setdiff1d(remaining, chosen)

    records = [replace(r, split=s) for r, s in zip(manifest.records, assignment)]
    return DatasetManifest(records, manifest.skipped)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def iter_epoch_batches(manifest: DatasetManifest, split_name: str, batch_size: int, seed: int,
                       epoch_index: int, norm: NormalizationConstants = IMAGENET,
                       resize: int = 256, size: int = 224, loader=load_image) -> Iterator:
    """Yield ``(images, labels)`` batches; train order is reshuffled per epoch."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    recs = manifest.subset(split_name)
    if not recs:
        raise ValueError(f"split {split_name!r} is empty")
    order = np.arange(len(recs))
    train = split_name == "train"
    if train:
        order = np.random.default_rng(np.random.SeedSequence([seed, epoch_index])).permutation(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images = []
        for i in idx:
            img = loader(recs[i].path)
            if train:
                t = preprocess_train(img, image_rng(seed, epoch_index, int(i)), norm, resize, size)
            else:
                t = preprocess_eval(img, norm, resize, size)
            images.append(t.data)
        yield Tensor(np.stack(images)), np.array([recs[i].label for i in idx], dtype=np.int64)


def epoch_batches(manifest, split_name, batch_size, seed, epoch_index, **kw) -> list:
    return list(iter_epoch_batches(manifest, split_name, batch_size, seed, epoch_index, **kw))


@dataclass
class ManifestData:
    """Manifest-backed batch source for :func:`fungnet.training.train_model`."""

    manifest: DatasetManifest
    batch_size: int = 4
    seed: int = 0
    norm: NormalizationConstants = IMAGENET
    resize: int = 256
    size: int = 224

    def batches(self, split_name: str, epoch: int = 0) -> Iterator:
        return iter_epoch_batches(self.manifest, split_name, self.batch_size, self.seed, epoch,
                                  self.norm, self.resize, self.size)

    def with_seed(self, seed: int) -> "ManifestData":
        return replace(self, seed=seed)


@dataclass
class ArrayData:
    """In-memory batch source over already-preprocessed (N, C, H, W) arrays."""

    splits: dict = field(default_factory=dict)  # name -> (images, labels)
    batch_size: int = 4
    seed: int = 0

    def batches(self, split_name: str, epoch: int = 0) -> Iterator:
        if split_name not in self.splits or len(self.splits[split_name][1]) == 0:
            raise ValueError(f"split {split_name!r} is empty")
        x, y = self.splits[split_name]
        order = np.arange(len(y))
        if split_name == "train":
            order = np.random.default_rng(np.random.SeedSequence([self.seed, epoch])).permutation(order)
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            yield Tensor(x[idx]), np.asarray(y)[idx].astype(np.int64)

    def with_seed(self, seed: int) -> "ArrayData":
        return replace(self, seed=seed)
