"""Dataset containers and on-disk ingestion.

A dataset maps class id -> impression id -> item, where an item is either
a uint8 (H, W, 3) image or a float64 embedding vector.  Two disk formats
are supported: a directory tree ``root/<class_id>/<impression>.png`` and a
UTF-8 embedding table CSV with header ``class_id,impression_id,e0,...``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset",
    "DatasetError",
    "load_image_dir",
    "load_embeddings",
    "save_embeddings",
    "split_classes",
]


class DatasetError(Exception):
    """Raised for malformed or missing dataset inputs."""


@dataclass
class Dataset:
    """In-memory impression store.

    kind is "images" (uint8 HxWx3 arrays) or "embeddings" (float64 vectors
    of uniform length ``dim``).
    """

    kind: str
    items: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def class_ids(self) -> list[str]:
        return sorted(self.items)

    def impression_ids(self, class_id: str) -> list[str]:
        return sorted(self.items[class_id])

    def get(self, class_id: str, impression_id: str) -> np.ndarray:
        return self.items[class_id][impression_id]

    @property
    def num_classes(self) -> int:
        return len(self.items)

    @property
    def dim(self) -> int:
        """Embedding length (embeddings kind only)."""
        if self.kind != "embeddings":
            raise DatasetError("dim is only defined for embedding datasets")
        first = next(iter(self.items.values()))
        return len(next(iter(first.values())))

    def restricted_to(self, class_ids: list[str]) -> "Dataset":
        missing = [c for c in class_ids if c not in self.items]
        if missing:
            raise DatasetError(f"classes not in dataset: {missing}")
        return Dataset(self.kind, {c: self.items[c] for c in class_ids})


def load_image_dir(root: str) -> Dataset:
    """Read ``root/<class_id>/<impression>.png`` into an image dataset."""
    from PIL import Image

    if not os.path.isdir(root):
        raise DatasetError(f"image root is not a directory: {root}")
    items: dict[str, dict[str, np.ndarray]] = {}
    for class_id in sorted(os.listdir(root)):
        cdir = os.path.join(root, class_id)
        if not os.path.isdir(cdir):
            continue
        imps: dict[str, np.ndarray] = {}
        for fname in sorted(os.listdir(cdir)):
            if not fname.endswith(".png"):
                continue
            with Image.open(os.path.join(cdir, fname)) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            imps[fname[:-4]] = arr
        if imps:
            items[class_id] = imps
    if not items:
        raise DatasetError(f"no class directories with .png files under {root}")
    shapes = {v.shape for c in items.values() for v in c.values()}
    if len(shapes) > 1:
        raise DatasetError(f"inconsistent image shapes: {sorted(shapes)}")
    return Dataset("images", items)


def load_embeddings(path: str) -> Dataset:
    """Read an embedding table CSV; validates dimension and key uniqueness."""
    if not os.path.isfile(path):
        raise DatasetError(f"embedding table not found: {path}")
    items: dict[str, dict[str, np.ndarray]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file")
        if header[:2] != ["class_id", "impression_id"]:
            raise DatasetError(f"{path}: bad header {header[:2]}")
        dim = len(header) - 2
        expected = [f"e{i}" for i in range(dim)]
        if header[2:] != expected:
            raise DatasetError(f"{path}: embedding columns must be e0..e{dim - 1}")
        if dim < 1:
            raise DatasetError(f"{path}: no embedding columns")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise DatasetError(
                    f"{path}:{lineno}: expected {dim + 2} fields, got {len(row)}")
            class_id, impression_id = row[0], row[1]
            try:
                vec = np.array([float(v) for v in row[2:]], dtype=np.float64)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric embedding value")
            bucket = items.setdefault(class_id, {})
            if impression_id in bucket:
                raise DatasetError(
                    f"{path}:{lineno}: duplicate key ({class_id}, {impression_id})")
            bucket[impression_id] = vec
    if not items:
        raise DatasetError(f"{path}: no data rows")
    return Dataset("embeddings", items)


def save_embeddings(path: str, dataset: Dataset) -> None:
    if dataset.kind != "embeddings":
        raise DatasetError("save_embeddings needs an embedding dataset")
    dim = dataset.dim
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class_id", "impression_id"] + [f"e{i}" for i in range(dim)])
        for class_id in dataset.class_ids():
            for imp_id in dataset.impression_ids(class_id):
                vec = dataset.get(class_id, imp_id)
                writer.writerow([class_id, imp_id] + [repr(float(v)) for v in vec])
    os.replace(tmp, path)


def split_classes(dataset: Dataset, seed: int,
                  fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
                  ) -> dict[str, list[str]]:
    """Class-disjoint train/val/test split.

    Fractions are (train, val, test); val and test get at least one class
    each (floor of their fraction, minimum 1), train takes the remainder.
    """
    classes = dataset.class_ids()
    c = len(classes)
    if c < 3:
        raise DatasetError(f"need at least 3 classes to split, got {c}")
    n_val = max(1, int(c * fractions[1]))
    n_test = max(1, int(c * fractions[2]))
    if n_val + n_test >= c:
        raise DatasetError(f"split leaves no training classes (C={c})")
    order = list(classes)
    np.random.default_rng(np.random.SeedSequence([seed, 0x5EED])).shuffle(order)
    train = sorted(order[: c - n_val - n_test])
    val = sorted(order[c - n_val - n_test: c - n_test])
    test = sorted(order[c - n_test:])
    return {"train": train, "val": val, "test": test, "eval": sorted(val + test)}
