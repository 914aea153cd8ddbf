"""Patch-feature extraction for CXR images.

The backbone is a pluggable adapter: a deterministic stub for tests and
desk-scale runs, or a real ResNet-101 trunk when torchvision weights are
available. Both emit a (S, 2048) patch grid with S = (side/32)^2.
"""

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

FEAT_DIM = 2048

ROLES = ("image_prev", "image_curr", "text_prev", "longitudinal", "decoder")


class VisionError(RuntimeError):
    pass


@dataclass
class FeatureSeq:
    data: np.ndarray  # (length, width)
    role: str

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise VisionError(f"feature matrix must be (length>=1, width), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise VisionError("non-finite feature values")

    @property
    def length(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


def _grid_side(image_side):
    side = image_side // 32
    if side < 1:
        raise VisionError(f"image side {image_side} too small for a patch grid")
    return side


class StubBackend:
    """Pure deterministic backend: features are a seeded hash of the image bytes."""

    name = "stub"
    trainable = False

    def __init__(self, seed=0):
        self.seed = seed

    def extract(self, image):
        side = _grid_side(image.shape[0])
        digest = hashlib.sha256(
            struct.pack("<q", self.seed) + np.ascontiguousarray(image, dtype=np.float32).tobytes()
        ).digest()
        rng = np.random.RandomState(np.frombuffer(digest[:4], dtype=np.uint32)[0])
        return rng.standard_normal((side * side, FEAT_DIM)).astype(np.float32)

    def parameters(self):
        return []


class ResNetBackend:
    """ResNet-101 final-stage features; weights loaded from a local checkpoint."""

    name = "resnet101"
    trainable = True

    def __init__(self, weights_path=None):
        try:
            from torchvision.models import resnet101
        except ImportError as exc:
            raise VisionError(
                "torchvision unavailable; use the stub backend instead"
            ) from exc
        model = resnet101(weights=None)
        if weights_path is not None:
            model.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.trunk = nn.Sequential(*list(model.children())[:-2])
        self.trunk.eval()

    def extract(self, image):
        # grayscale replicated to 3 channels for the pretrained trunk
        if image.ndim == 2:
            image = np.stack([image] * 3, axis=-1)
        x = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            fmap = self.trunk(x)[0]  # (2048, side, side)
        return fmap.reshape(FEAT_DIM, -1).T.contiguous().numpy()

    def parameters(self):
        return list(self.trunk.parameters())


def load_image(path, image_size=224):
    from PIL import Image

    try:
        with Image.open(path) as img:
            img = img.convert("L").resize((image_size, image_size))
            return np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise VisionError(f"cannot read image {path}: {exc}") from exc


def synthetic_image(image_ref, image_size=224):
    """Deterministic raster for an image id; stands in for real files at desk scale."""
    digest = hashlib.sha256(image_ref.encode()).digest()
    rng = np.random.RandomState(np.frombuffer(digest[:4], dtype=np.uint32)[0])
    return rng.rand(image_size, image_size).astype(np.float32)


def extract_patch_features(image, backend, role="image_curr"):
    """Run the backbone on one square raster, returning a (S, 2048) FeatureSeq."""
    if image.ndim not in (2, 3):
        raise VisionError(f"expected 2-D or 3-channel raster, got shape {image.shape}")
    feats = backend.extract(image)
    if feats.shape[1] != FEAT_DIM:
        raise VisionError(f"backend produced width {feats.shape[1]}, expected {FEAT_DIM}")
    return FeatureSeq(data=feats, role=role)


class FeatureProjector(nn.Module):
    """Linear 2048 -> model-width interface in front of the image encoder."""

    def __init__(self, hidden, feat_dim=FEAT_DIM):
        super().__init__()
        self.proj = nn.Linear(feat_dim, hidden)

    def forward(self, feats):
        if feats.shape[-1] != self.proj.in_features:
            raise VisionError(
                f"feature width {feats.shape[-1]} != projector input {self.proj.in_features}"
            )
        return self.proj(feats)


class FeatureCache:
    """On-disk feature store: raw float32 blobs plus a JSON index.

    Keyed by (image id, backend id).
    """

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.index_path = self.dir / "index.json"
        self.data_path = self.dir / "features.bin"
        self.index = json.loads(self.index_path.read_text()) if self.index_path.exists() else {}

    @staticmethod
    def _key(image_ref, backend_name):
        return f"{backend_name}:{image_ref}"

    def get(self, image_ref, backend_name):
        entry = self.index.get(self._key(image_ref, backend_name))
        if entry is None:
            return None
        with open(self.data_path, "rb") as fh:
            fh.seek(entry["offset"])
            buf = fh.read(entry["nbytes"])
        return np.frombuffer(buf, dtype=np.float32).reshape(entry["shape"]).copy()

    def put(self, image_ref, backend_name, feats):
        feats = np.ascontiguousarray(feats, dtype=np.float32)
        offset = self.data_path.stat().st_size if self.data_path.exists() else 0
        with open(self.data_path, "ab") as fh:
            fh.write(feats.tobytes())
        self.index[self._key(image_ref, backend_name)] = {
            "offset": offset,
            "nbytes": feats.nbytes,
            "shape": list(feats.shape),
        }
        self.index_path.write_text(json.dumps(self.index, sort_keys=True))


def make_backend(name, seed=0, weights_path=None):
    if name == "stub":
        return StubBackend(seed=seed)
    if name == "resnet101":
        return ResNetBackend(weights_path=weights_path)
    raise VisionError(f"unknown vision backend {name!r}")
