"""Feature providers: a toy siamese backbone and precomputed feature files.

Precomputed features live in a tensor store: one UTF-8 manifest with one
``key=value`` record per tensor, plus one raw little-endian float32 payload
file per tensor::

    # facornet tensors v1
    id=F003_M1 kind=X shape=4,4,8 dtype=float32 path=payload/000012.X.f32
    id=F003_M1 kind=r shape=8 dtype=float32 path=payload/000012.r.f32

Real backbones are not bundled; export ``X`` (middle-layer map, channel
last) and ``r`` (final embedding) per image into this layout instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import ConfigurationError, DataError, MissingEntryError, ParseError
from .model import FaCoRConfig

MANIFEST_HEADER = "# facornet tensors v1"
PAYLOAD_DTYPE = np.dtype("<f4")


class BackboneOutput(NamedTuple):
    X: Tensor
    r: Tensor


@dataclass(frozen=True)
class ManifestEntry:
    shape: tuple
    dtype: str
    path: Path


@dataclass
class FeatureManifest:
    root: Path
    entries: dict = field(default_factory=dict)  # (id, kind) -> ManifestEntry

    def ids(self, kind: str | None = None) -> list:
        seen = dict.fromkeys(i for i, k in self.entries if kind is None or k == kind)
        return list(seen)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def read(self, image_id: str, kind: str) -> np.ndarray:
        try:
            entry = self.entries[(image_id, kind)]
        except KeyError:
            raise MissingEntryError(f"no {kind!r} tensor for id {image_id!r} in {self.root}") from None
        raw = entry.path.read_bytes()
        expected = int(np.prod(entry.shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        if len(raw) != expected:
            raise DataError(
                f"payload for id {image_id!r} ({kind}) has {len(raw)} bytes, "
                f"expected {expected} for shape {entry.shape}"
            )
        return np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(entry.shape)


def write_tensor_store(directory, tensors: dict, filename: str = "features.manifest") -> Path:
    """Write ``{(id, kind): array}`` as a manifest plus payload files."""
    directory = Path(directory)
    (directory / "payload").mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    index = {}
    for (image_id, kind), value in tensors.items():
        if any(c.isspace() or c == "=" for c in image_id + kind):
            raise DataError(f"ids and kinds may not contain whitespace or '=': {image_id!r}/{kind!r}")
        n = index.setdefault(image_id, len(index))
        arr = np.array(value.detach().cpu().numpy() if torch.is_tensor(value) else value,
                       dtype=PAYLOAD_DTYPE, order="C")
        rel = f"payload/{n:06d}.{kind}.f32"
        (directory / rel).write_bytes(arr.tobytes())
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"id={image_id} kind={kind} shape={shape} dtype=float32 path={rel}")
    path = directory / filename
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> FeatureManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ParseError(path, 1, "not a facornet tensor manifest")
    manifest = FeatureManifest(root=path.parent)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            rec = dict(tok.split("=", 1) for tok in line.split())
            key = (rec["id"], rec["kind"])
            shape = tuple(int(s) for s in rec["shape"].split(",")) if rec["shape"] else ()
            entry = ManifestEntry(shape, rec["dtype"], path.parent / rec["path"])
        except (KeyError, ValueError) as exc:
            raise ParseError(path, lineno, f"malformed record ({exc})") from None
        if entry.dtype != "float32":
            raise ParseError(path, lineno, f"unsupported dtype {entry.dtype!r}")
        if key in manifest.entries:
            raise ParseError(path, lineno, f"duplicate record for {key}")
        manifest.entries[key] = entry
    return manifest


def save_features(directory, outputs: dict, filename: str = "features.manifest") -> Path:
    """Persist ``{image_id: BackboneOutput}``."""
    tensors = {}
    for image_id, out in outputs.items():
        tensors[(image_id, "X")] = out.X
        tensors[(image_id, "r")] = out.r
    return write_tensor_store(directory, tensors, filename)


def load_precomputed(manifest: FeatureManifest, image_id: str, config: FaCoRConfig | None = None) -> BackboneOutput:
    X = torch.from_numpy(manifest.read(image_id, "X").copy())
    r = torch.from_numpy(manifest.read(image_id, "r").copy())
    if config is not None:
        if tuple(X.shape) != (config.H, config.W, config.C) or tuple(r.shape) != (config.D,):
            raise DataError(
                f"features for id {image_id!r} have shapes {tuple(X.shape)}/{tuple(r.shape)}, "
                f"config expects ({config.H}, {config.W}, {config.C})/({config.D},)"
            )
    return BackboneOutput(X, r)


class ToyBackbone(nn.Module):
    """Small conv stack emitting a channel-last map ``X`` and a vector ``r``.

    Bias free with tanh activations, so a zero image maps to zero outputs
    and the whole stack is smooth for finite-difference checks.
    """

    def __init__(self, config: FaCoRConfig, image_size: int = 16):
        super().__init__()
        if image_size < 1 or image_size % config.H or image_size % config.W:
            raise ConfigurationError(
                f"image_size {image_size} must be a positive multiple of H={config.H} and W={config.W}"
            )
        self.config = config
        self.image_size = image_size
        self.conv1 = nn.Conv2d(3, config.C, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(config.C, config.C, 1, bias=False)
        self.fc = nn.Linear(config.C, config.D, bias=False)

    def forward(self, img: Tensor) -> BackboneOutput:
        s = self.image_size
        if img.dim() < 3 or tuple(img.shape[-3:]) != (s, s, 3):
            raise ConfigurationError(f"image has shape {tuple(img.shape)}, expected (..., {s}, {s}, 3)")
        lead = img.shape[:-3]
        x = img.reshape(-1, s, s, 3).permute(0, 3, 1, 2)
        fmap = torch.tanh(F.adaptive_avg_pool2d(self.conv1(x), (self.config.H, self.config.W)))
        r = self.fc(torch.tanh(self.conv2(fmap)).mean(dim=(2, 3)))
        X = fmap.permute(0, 2, 3, 1)
        return BackboneOutput(X.reshape(*lead, *X.shape[1:]), r.reshape(*lead, -1))


def init_toy_backbone(config: FaCoRConfig, seed: int, image_size: int = 16, zero: bool = False) -> ToyBackbone:
    net = ToyBackbone(config, image_size)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for p in net.parameters():
            if zero:
                p.zero_()
            else:
                nn.init.kaiming_uniform_(p, a=5 ** 0.5, generator=gen)
    return net


def toy_backbone_forward(img: Tensor, params: ToyBackbone, config: FaCoRConfig | None = None) -> BackboneOutput:
    if config is not None and config != params.config:
        raise ConfigurationError("backbone parameters were built for a different configuration")
    return params(img)


class PrecomputedFeatures:
    """Feature source backed by a manifest; tensors are cached after first load."""

    trainable = False

    def __init__(self, manifest: FeatureManifest, config: FaCoRConfig | None = None):
        self.manifest = manifest
        self.config = config
        self._cache = {}

    def get(self, image_id: str) -> BackboneOutput:
        if image_id not in self._cache:
            self._cache[image_id] = load_precomputed(self.manifest, image_id, self.config)
        return self._cache[image_id]

    def fetch(self, ids: Iterable[str], dtype=torch.float32) -> BackboneOutput:
        outs = [self.get(i) for i in ids]
        return BackboneOutput(
            torch.stack([o.X for o in outs]).to(dtype), torch.stack([o.r for o in outs]).to(dtype)
        )

    def parameters(self) -> list:
        return []


class ToyBackboneSource:
    """Runs the toy backbone over raw image tensors stored with kind ``image``."""

    def __init__(self, backbone: ToyBackbone, images: FeatureManifest, trainable: bool = False):
        self.backbone = backbone
        self.images = images
        self.trainable = trainable
        self._cache = {}

    def image(self, image_id: str) -> Tensor:
        if image_id not in self._cache:
            self._cache[image_id] = torch.from_numpy(self.images.read(image_id, "image").copy())
        return self._cache[image_id]

    def fetch(self, ids: Iterable[str], dtype=torch.float32) -> BackboneOutput:
        imgs = torch.stack([self.image(i) for i in ids]).to(dtype)
        with torch.set_grad_enabled(self.trainable and torch.is_grad_enabled()):
            return self.backbone.to(dtype)(imgs)

    def parameters(self) -> list:
        return list(self.backbone.parameters()) if self.trainable else []


def open_source(data_dir, config: FaCoRConfig, backbone: ToyBackbone | None = None, trainable: bool = False):
    """Pick the feature source for a synthetic/exported data directory."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / "features.manifest")
    kinds = {k for _, k in manifest.entries}
    if "X" in kinds:
        return PrecomputedFeatures(manifest, config)
    if "image" in kinds:
        if backbone is None:
            raise ConfigurationError("image data needs a toy backbone")
        return ToyBackboneSource(backbone, manifest, trainable)
    raise DataError(f"{data_dir} holds neither features nor images")
