"""Dataset ingestion, augmentation and the in-memory dataset container."""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .model import IMAGE_SIZE

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".webp"}

# preprocessing applied to every decoded image: scale to [0,1], then
# center with mean 0.5 / std 0.5 per channel
NORM_MEAN = 0.5
NORM_STD = 0.5


@dataclass
class DatasetManifest:
    """Enumerated folder-per-class dataset."""

    root: str
    classes: list[dict]  # [{"name": str, "images": [relative paths]}]
    split: str = "train"
    image_size: int = IMAGE_SIZE
    augment: bool = False

    @property
    def class_names(self) -> list[str]:
        return [c["name"] for c in self.classes]

    def image_count(self) -> int:
        return sum(len(c["images"]) for c in self.classes)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for c in self.classes:
            for p in c["images"]:
                h.update(f"{c['name']}:{p}\n".encode())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "schema": "dataset-manifest/1",
            "root": self.root,
            "split": self.split,
            "image_size": self.image_size,
            "augment": self.augment,
            "classes": self.classes,
            "hash": self.content_hash(),
        }


def _is_decodable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except Exception:
        return False


def ingest_dataset(root, split: str = "train", csv_manifest=None) -> DatasetManifest:
    """Enumerate a folder-per-class directory (or a CSV of path,label rows).

    Corrupt or undecodable files are skipped with a warning. Needs at
    least two classes.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root does not exist: {root}")

    by_class: dict[str, list[str]] = {}
    if csv_manifest is not None:
        with open(csv_manifest, newline="") as fh:
            for row in csv.DictReader(fh):
                by_class.setdefault(row["label"], []).append(row["path"])
    else:
        for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            by_class[class_dir.name] = sorted(
                str(p.relative_to(root))
                for p in class_dir.iterdir()
                if p.suffix.lower() in IMAGE_EXTENSIONS
            )

    classes = []
    for name in sorted(by_class):
        kept = []
        for rel in sorted(by_class[name]):
            if _is_decodable(root / rel):
                kept.append(rel)
            else:
                warnings.warn(f"skipping undecodable image: {rel}")
        if not kept:
            raise ValueError(f"class '{name}' has no decodable images")
        classes.append({"name": name, "images": kept})
    if len(classes) < 2:
        raise ValueError(f"need at least 2 class folders, found {len(classes)}")
    return DatasetManifest(root=str(root), classes=classes, split=split)


def augment(image: np.ndarray, seed: int) -> np.ndarray:
    """Random rotation / skew / shear / distortion, then resize to 224x224.

    Deterministic per seed. Input and output are HWC uint8.
    """
    rng = np.random.default_rng(seed)
    img = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")

    angle = float(rng.uniform(-15, 15))
    shear_x = float(rng.uniform(-0.15, 0.15))
    shear_y = float(rng.uniform(-0.15, 0.15))
    img = img.rotate(angle, resample=Image.BILINEAR)
    w, h = img.size
    # affine skew/shear around the center
    img = img.transform(
        (w, h),
        Image.AFFINE,
        (1.0, shear_x, -shear_x * w / 2, shear_y, 1.0, -shear_y * h / 2),
        resample=Image.BILINEAR,
    )
    # mild random distortion: jittered corner crop acts as a cheap
    # perspective warp
    jitter = (rng.uniform(0, 0.06, size=4) * [w, h, w, h]).astype(int)
    img = img.crop((jitter[0], jitter[1], w - jitter[2], h - jitter[3]))
    img = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def resize_only(image: np.ndarray) -> np.ndarray:
    img = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    return np.asarray(img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR), dtype=np.uint8)


def preprocess(images: np.ndarray) -> torch.Tensor:
    """uint8 [N, H, W, 3] -> normalized float32 [N, 3, H, W]."""
    x = np.asarray(images, dtype=np.float32) / 255.0
    x = (x - NORM_MEAN) / NORM_STD
    return torch.from_numpy(x.transpose(0, 3, 1, 2)).contiguous()


@dataclass
class ArrayDataset:
    """Decoded, preprocessed dataset held in memory."""

    images: torch.Tensor  # [N, 3, 224, 224] float32
    labels: torch.Tensor  # [N] long
    image_ids: list[str]
    class_names: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices_of_class(self, c: int) -> list[int]:
        return [i for i, y in enumerate(self.labels.tolist()) if y == c]

    def subset(self, indices) -> "ArrayDataset":
        idx = list(indices)
        return ArrayDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            image_ids=[self.image_ids[i] for i in idx],
            class_names=self.class_names,
        )


def load_dataset(
    manifest: DatasetManifest,
    augment_data: bool | None = None,
    augment_copies: int = 1,
    seed: int = 0,
) -> ArrayDataset:
    """Decode a manifest into an ArrayDataset.

    With augmentation on, each image contributes its resized original
    plus ``augment_copies`` augmented variants (ids suffixed ``#aug<k>``).
    """
    if augment_data is None:
        augment_data = manifest.augment
    root = Path(manifest.root)
    arrays, labels, ids = [], [], []
    for label, entry in enumerate(manifest.classes):
        for rel in entry["images"]:
            with Image.open(root / rel) as img:
                raw = np.asarray(img.convert("RGB"), dtype=np.uint8)
            arrays.append(resize_only(raw))
            labels.append(label)
            ids.append(rel)
            if augment_data:
                for k in range(augment_copies):
                    aug_seed = int.from_bytes(
                        hashlib.sha256(f"{seed}:{rel}:{k}".encode()).digest()[:4], "little"
                    )
                    arrays.append(augment(raw, aug_seed))
                    labels.append(label)
                    ids.append(f"{rel}#aug{k}")
    return ArrayDataset(
        images=preprocess(np.stack(arrays)),
        labels=torch.tensor(labels, dtype=torch.long),
        image_ids=ids,
        class_names=manifest.class_names,
    )


# ---------------------------------------------------------------------------
# synthetic desk-scale data: two visually distinct, intra-class diverse
# pattern families, drawn at 32x32 and upscaled to 224x224
# ---------------------------------------------------------------------------


def _blob_image(rng: np.random.Generator) -> np.ndarray:
    """Warm-toned disks on a dark background."""
    img = np.zeros((32, 32, 3), dtype=np.float32)
    img += rng.uniform(0.0, 0.08)
    yy, xx = np.mgrid[0:32, 0:32]
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(6, 26, size=2)
        r = rng.uniform(3, 8)
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r**2
        color = np.array([rng.uniform(0.7, 1.0), rng.uniform(0.2, 0.5), rng.uniform(0.0, 0.2)])
        img[disk] = color
    return img


def _stripe_image(rng: np.random.Generator) -> np.ndarray:
    """Cool-toned diagonal stripes."""
    yy, xx = np.mgrid[0:32, 0:32]
    period = rng.uniform(4, 9)
    phase = rng.uniform(0, period)
    angle = rng.uniform(0.6, 1.0) * (1 if rng.random() < 0.5 else -1)
    wave = ((xx + angle * yy + phase) % period) < period / 2
    color = np.array([rng.uniform(0.0, 0.2), rng.uniform(0.3, 0.6), rng.uniform(0.7, 1.0)])
    img = np.zeros((32, 32, 3), dtype=np.float32)
    img[wave] = color
    img[~wave] = color * rng.uniform(0.1, 0.3)
    return img


_PATTERNS = [_blob_image, _stripe_image]


def synthetic_dataset(
    num_classes: int = 2, per_class: int = 100, seed: int = 0
) -> ArrayDataset:
    """Deterministic synthetic dataset for desk-scale runs and tests."""
    if num_classes > len(_PATTERNS):
        raise ValueError(f"at most {len(_PATTERNS)} synthetic classes available")
    rng = np.random.default_rng(seed)
    arrays, labels, ids = [], [], []
    for c in range(num_classes):
        for i in range(per_class):
            small = _PATTERNS[c](rng)
            small = np.clip(small + rng.normal(0, 0.02, small.shape), 0, 1)
            big = np.kron(small, np.ones((7, 7, 1), dtype=np.float32))
            arrays.append((big * 255).astype(np.uint8))
            labels.append(c)
            ids.append(f"synthetic/{c}/{i:04d}")
    return ArrayDataset(
        images=preprocess(np.stack(arrays)),
        labels=torch.tensor(labels, dtype=torch.long),
        image_ids=ids,
        class_names=[f"class_{c}" for c in range(num_classes)],
    )


def write_image_folder(dataset_root, num_classes: int = 2, per_class: int = 6, seed: int = 0):
    """Materialize a synthetic folder-per-class dataset on disk (for the CLI)."""
    rng = np.random.default_rng(seed)
    root = Path(dataset_root)
    names = []
    for c in range(num_classes):
        name = f"class_{c}"
        names.append(name)
        (root / name).mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            small = _PATTERNS[c % len(_PATTERNS)](rng)
            img = Image.fromarray((np.clip(small, 0, 1) * 255).astype(np.uint8))
            img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.NEAREST).save(
                root / name / f"img_{i:04d}.png"
            )
    return names
