"""Prototype-concept network: backbone, add-on layers, basis bank, classifier.

The network maps a 224x224 image to a sigmoid-bounded feature map
[batch, D, 7, 7], compares every spatial patch against a bank of
per-class concept basis vectors by cosine similarity, pools each
similarity map to a scalar with global max pooling, and classifies with
a weight-clamped linear head followed by softmax.

Each basis vector acts as a 1x1 convolution kernel on the normalized
feature map, so the bank defines C*M similarity channels; channel index
``c * M + m`` belongs to class ``c``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .validation import check_basis_bank, check_feature_map, check_image_batch

IMAGE_SIZE = 224
FEATURE_GRID = 7

HEAD_MIN = -0.5
HEAD_MAX = 1.0


class SmallConvBackbone(nn.Module):
    """Strided conv stack mapping [b, 3, 224, 224] -> [b, out_channels, 7, 7].

    Desk-scale stand-in for a deep pretrained backbone; the only contract
    is the output shape. GroupNorm keeps activations alive at init and,
    unlike BatchNorm, carries no running statistics, so feature
    extraction never mutates the model.
    """

    def __init__(self, out_channels: int = 64):
        super().__init__()
        self.out_channels = out_channels

        def block(cin, cout, kernel, stride):
            conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2)
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
            return [conv, nn.GroupNorm(min(8, cout), cout), nn.ReLU(inplace=True)]

        self.net = nn.Sequential(
            *block(3, 32, 5, 4),
            *block(32, 64, 3, 2),
            *block(64, 64, 3, 2),
            *block(64, out_channels, 3, 2),
        )

    def forward(self, x):
        return self.net(x)


class VGG19Backbone(nn.Module):
    """torchvision VGG-19 feature trunk (512 channels, 7x7 on 224 input).

    Weights start random; load finetuned weights from a checkpoint. Kept
    behind a lazy import so the small backbone has no torchvision cost.
    """

    def __init__(self, out_channels: int = 512):
        super().__init__()
        if out_channels != 512:
            raise ValueError("vgg19 backbone emits 512 channels")
        from torchvision.models import vgg19

        self.out_channels = 512
        self.net = vgg19(weights=None).features

    def forward(self, x):
        return self.net(x)


BACKBONES = {
    "small": SmallConvBackbone,
    "vgg19": VGG19Backbone,
}


class AddOnLayers(nn.Module):
    """Two 1x1 convolutions after the backbone: ReLU then sigmoid.

    The sigmoid bounds every output entry to (0, 1), so no patch vector
    is ever zero.
    """

    def __init__(self, in_channels: int, out_channels: int = 128):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=1)

    def forward(self, x):
        x = torch.relu(self.conv1(x))
        return torch.sigmoid(self.conv2(x))


def cosine_similarity_maps(fmap: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every spatial patch against every basis vector.

    fmap: [batch, D, H, W]; vectors: [K, D] or [C, M, D] (flattened to
    rows). Returns [batch, K, H, W] with entries in [-1, 1]. A zero patch
    or zero vector yields similarity 0 so the map stays finite.
    """
    check_feature_map(fmap)
    if vectors.ndim == 3:
        vectors = vectors.reshape(-1, vectors.shape[-1])
    if vectors.shape[-1] != fmap.shape[1]:
        raise ValueError(
            f"vector dim {vectors.shape[-1]} != feature channels {fmap.shape[1]}"
        )
    patch_norm = fmap.norm(dim=1, keepdim=True)
    unit_fmap = fmap / torch.where(patch_norm == 0, torch.ones_like(patch_norm), patch_norm)
    vec_norm = vectors.norm(dim=1, keepdim=True)
    unit_vec = vectors / torch.where(vec_norm == 0, torch.ones_like(vec_norm), vec_norm)
    return torch.einsum("bdhw,kd->bkhw", unit_fmap, unit_vec)


def global_max_pool(simmaps: torch.Tensor) -> torch.Tensor:
    """Max over the spatial dimensions: [b, K, H, W] -> [b, K]."""
    if simmaps.ndim != 4 or simmaps.shape[2] < 1 or simmaps.shape[3] < 1:
        raise ValueError(f"expected non-empty [b, K, H, W], got {tuple(simmaps.shape)}")
    return simmaps.amax(dim=(2, 3))


def init_classifier(num_classes: int, per_class: int) -> torch.Tensor:
    """Head weight matrix [C, C*M]: +1.0 to own-class channels, -0.5 across."""
    if num_classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 vector per class")
    weights = torch.full((num_classes, num_classes * per_class), HEAD_MIN)
    for c in range(num_classes):
        weights[c, c * per_class : (c + 1) * per_class] = HEAD_MAX
    return weights


def clamp_head_(weights: torch.Tensor) -> torch.Tensor:
    """In-place clamp of head weights to [-0.5, +1.0]."""
    with torch.no_grad():
        weights.clamp_(HEAD_MIN, HEAD_MAX)
    return weights


def classify(scores: torch.Tensor, head_weights: torch.Tensor) -> torch.Tensor:
    """Softmax class probabilities from pooled similarity scores.

    scores: [b, C*M]; head_weights: [C, C*M]. Rows of the result sum to 1.
    """
    if scores.shape[1] != head_weights.shape[1]:
        raise ValueError(
            f"score dim {scores.shape[1]} != head input dim {head_weights.shape[1]}"
        )
    logits = scores @ head_weights.T
    return torch.softmax(logits, dim=1)


@dataclass
class BasisBank:
    """Per-class concept basis vectors plus class names."""

    vectors: torch.Tensor  # [C, M, D]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        check_basis_bank(self.vectors)
        if self.class_names and len(self.class_names) != self.vectors.shape[0]:
            raise ValueError("class_names length must match the class dimension")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def per_class(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def flat(self) -> torch.Tensor:
        """[C*M, D] view; row c*M+m is vector m of class c."""
        return self.vectors.reshape(-1, self.dim)


class ProtoConceptNet(nn.Module):
    """Backbone + add-on + basis bank + clamped linear head."""

    def __init__(
        self,
        num_classes: int,
        per_class: int = 100,
        feature_channels: int = 128,
        backbone: str = "small",
        backbone_channels: int = 64,
        class_names: list[str] | None = None,
    ):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.num_classes = num_classes
        self.per_class = per_class
        self.feature_channels = feature_channels
        self.backbone_name = backbone
        self.backbone_channels = backbone_channels
        self.class_names = list(class_names) if class_names else [
            f"class_{c}" for c in range(num_classes)
        ]

        self.backbone = BACKBONES[backbone](out_channels=backbone_channels)
        self.add_on = AddOnLayers(backbone_channels, feature_channels)
        # standard-normal init; vectors are trained, then projected onto
        # real patch features
        self.basis = nn.Parameter(torch.randn(num_classes, per_class, feature_channels))
        self.head = nn.Parameter(init_classifier(num_classes, per_class))
        # provenance per flat vector index after projection:
        # {"image_id": str, "row": int, "col": int}
        self.projection_provenance: list[dict] | None = None

    def bank(self) -> BasisBank:
        return BasisBank(self.basis.detach(), self.class_names)

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        """[b, 3, 224, 224] -> [b, D, 7, 7] with entries in (0, 1)."""
        images = check_image_batch(images, IMAGE_SIZE)
        return self.add_on(self.backbone(images))

    def similarity_maps(self, fmap: torch.Tensor, vectors: torch.Tensor | None = None):
        """Cosine maps against the bank (or an explicit vector set)."""
        if vectors is None:
            vectors = self.basis
        return cosine_similarity_maps(fmap, vectors)

    def similarity_scores(self, images: torch.Tensor) -> torch.Tensor:
        """Pooled per-channel similarity scores [b, C*M]."""
        return global_max_pool(self.similarity_maps(self.extract_features(images)))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Softmax probabilities [b, C]."""
        return classify(self.similarity_scores(images), self.head)

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.similarity_scores(images) @ self.head.T

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(images).argmax(dim=1)


# ---------------------------------------------------------------------------
# checkpoint IO
#
# A checkpoint directory holds:
#   model.pt        backbone + add-on weights (torch-native state dict)
#   basis_bank.bin  little-endian float32, header [C:u32][M:u32][D:u32]
#   head.bin        little-endian float32, header [C:u32][CM:u32]
#   meta.json       class names, model hyperparameters, config hash, stage log
# ---------------------------------------------------------------------------


def write_basis_bank(path, vectors: np.ndarray):
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 3:
        raise ValueError("basis bank array must be [C, M, D]")
    c, m, d = vectors.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", c, m, d))
        fh.write(vectors.tobytes(order="C"))


def read_basis_bank(path) -> np.ndarray:
    with open(path, "rb") as fh:
        c, m, d = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(4 * c * m * d), dtype="<f4")
    if data.size != c * m * d:
        raise ValueError(f"truncated basis bank file: {path}")
    return data.reshape(c, m, d).copy()


def write_head(path, weights: np.ndarray):
    weights = np.asarray(weights, dtype="<f4")
    if weights.ndim != 2:
        raise ValueError("head array must be [C, C*M]")
    c, cm = weights.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", c, cm))
        fh.write(weights.tobytes(order="C"))


def read_head(path) -> np.ndarray:
    with open(path, "rb") as fh:
        c, cm = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * c * cm), dtype="<f4")
    if data.size != c * cm:
        raise ValueError(f"truncated head file: {path}")
    return data.reshape(c, cm).copy()


def save_checkpoint(
    directory,
    model: ProtoConceptNet,
    config_hash: str = "",
    stage_log: list | None = None,
):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"backbone": model.backbone.state_dict(), "add_on": model.add_on.state_dict()},
        directory / "model.pt",
    )
    write_basis_bank(directory / "basis_bank.bin", model.basis.detach().numpy())
    write_head(directory / "head.bin", model.head.detach().numpy())
    meta = {
        "schema": "checkpoint-meta/1",
        "class_names": model.class_names,
        "model": {
            "num_classes": model.num_classes,
            "per_class": model.per_class,
            "feature_channels": model.feature_channels,
            "backbone": model.backbone_name,
            "backbone_channels": model.backbone_channels,
        },
        "config_hash": config_hash,
        "stage_log": stage_log or [],
        "projection_provenance": model.projection_provenance,
    }
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory) -> tuple[ProtoConceptNet, dict]:
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    spec = meta["model"]
    model = ProtoConceptNet(
        num_classes=spec["num_classes"],
        per_class=spec["per_class"],
        feature_channels=spec["feature_channels"],
        backbone=spec["backbone"],
        backbone_channels=spec["backbone_channels"],
        class_names=meta["class_names"],
    )
    state = torch.load(directory / "model.pt", weights_only=True)
    model.backbone.load_state_dict(state["backbone"])
    model.add_on.load_state_dict(state["add_on"])
    with torch.no_grad():
        model.basis.copy_(torch.from_numpy(read_basis_bank(directory / "basis_bank.bin")))
        model.head.copy_(torch.from_numpy(read_head(directory / "head.bin")))
    model.projection_provenance = meta.get("projection_provenance")
    return model, meta
