"""In-memory data model and on-disk interchange formats.

Tensors travel between tools as flat binary files with a tiny self-describing
header (magic ``CFXT``), so that files written by any producer parse
bit-identically everywhere. Datasets are described by a JSON manifest listing
instances, their attribution files and optional per-instance extras.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError, TensorFormatError

TENSOR_MAGIC = b"CFXT"
TENSOR_VERSION = 1
DTYPE_F32 = 1

# header layout: magic[0:4], version[4], dtype[5], ndims[6], dims from byte 7
_OFF_MAGIC = 0
_OFF_VERSION = 4
_OFF_DTYPE = 5
_OFF_NDIMS = 6
_OFF_DIMS = 7


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    out.flags.writeable = False
    return out


def write_tensor(tensor, path) -> None:
    """Write a tensor (or any float array) to `path` in the CFXT format.

    Layout: magic "CFXT", version byte, dtype byte (1 = float32), ndims byte,
    ndims little-endian u32 dims, then the row-major float32 little-endian
    payload. Round-trips are bit-identical.
    """
    arr = tensor.data if hasattr(tensor, "data") and isinstance(getattr(tensor, "data"), np.ndarray) else tensor
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError(f"unsupported ndims {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"empty dimension in shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite value in tensor payload")
    header = TENSOR_MAGIC + struct.pack(
        "<BBB", TENSOR_VERSION, DTYPE_F32, arr.ndim
    ) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f4", copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a CFXT file back into a float32 array.

    Raises TensorFormatError (with the failing byte offset) on bad magic,
    unknown version/dtype, or payloads that disagree with the declared dims.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _OFF_DIMS:
        raise TensorFormatError("file shorter than fixed header", byte_offset=len(blob))
    if blob[_OFF_MAGIC:_OFF_MAGIC + 4] != TENSOR_MAGIC:
        raise TensorFormatError(f"bad magic {blob[:4]!r}", byte_offset=_OFF_MAGIC)
    if blob[_OFF_VERSION] != TENSOR_VERSION:
        raise TensorFormatError(f"unsupported version {blob[_OFF_VERSION]}", byte_offset=_OFF_VERSION)
    if blob[_OFF_DTYPE] != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype code {blob[_OFF_DTYPE]}", byte_offset=_OFF_DTYPE)
    ndims = blob[_OFF_NDIMS]
    if ndims < 1:
        raise TensorFormatError("ndims must be >= 1", byte_offset=_OFF_NDIMS)
    dims_end = _OFF_DIMS + 4 * ndims
    if len(blob) < dims_end:
        raise TensorFormatError("truncated dimension list", byte_offset=len(blob))
    dims = struct.unpack(f"<{ndims}I", blob[_OFF_DIMS:dims_end])
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"zero-sized dimension in {dims}", byte_offset=_OFF_DIMS)
    expected = int(np.prod(dims)) * 4
    payload = blob[dims_end:]
    if len(payload) < expected:
        raise TensorFormatError(
            f"payload shorter than dims imply ({len(payload)} < {expected} bytes)",
            byte_offset=dims_end + len(payload),
        )
    if len(payload) > expected:
        raise TensorFormatError(
            f"trailing bytes after payload ({len(payload) - expected} extra)",
            byte_offset=dims_end + expected,
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """A single instance: channels x height x width of finite float values.

    Values are expected to be pre-normalized by the dataset's mean/std; under
    that convention a zero baseline corresponds to the mean pixel.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = _freeze(self.data)
        if arr.ndim != 3:
            raise ValueError(f"image tensor must be (C,H,W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value in image tensor")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def save(self, path) -> None:
        write_tensor(self.data, path)

    @classmethod
    def load(cls, path) -> "ImageTensor":
        arr = read_tensor(path)
        if arr.ndim != 3:
            raise TensorFormatError(f"expected 3 dims for an image tensor, got {arr.ndim}")
        return cls(arr)


@dataclass(frozen=True, eq=False)
class AttributionMap:
    """Per-pixel attribution scores aligned to one image (channel-aggregated)."""

    data: np.ndarray

    def __post_init__(self):
        arr = _freeze(self.data)
        if arr.ndim != 2:
            raise ValueError(f"attribution map must be (H,W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value in attribution map")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def save(self, path) -> None:
        write_tensor(self.data, path)

    @classmethod
    def load(cls, path) -> "AttributionMap":
        arr = read_tensor(path)
        if arr.ndim != 2:
            raise TensorFormatError(f"expected 2 dims for an attribution map, got {arr.ndim}")
        return cls(arr)


@dataclass(frozen=True, eq=False)
class PredictionVector:
    """Class scores (probabilities or logits) for one input.

    `predicted_class` is the lowest index attaining the maximum score, which
    makes equality checks between full and masked predictions deterministic.
    """

    class_scores: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.class_scores, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("class_scores must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite class score")
        arr.flags.writeable = False
        object.__setattr__(self, "class_scores", arr)

    @property
    def num_classes(self) -> int:
        return self.class_scores.shape[0]

    @property
    def predicted_class(self) -> int:
        # np.argmax returns the first (lowest) index on ties
        return int(np.argmax(self.class_scores))


@dataclass(frozen=True)
class BaselinePolicy:
    """How dropped features are filled: a zero vector or an explicit tensor."""

    kind: str = "zero"  # "zero" | "explicit_tensor"
    path: Path | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "explicit_tensor"):
            raise ManifestError(f"unknown baseline policy {self.kind!r}")
        if self.kind == "explicit_tensor" and self.path is None:
            raise ManifestError("explicit_tensor baseline requires a path")

    def to_json(self):
        if self.kind == "zero":
            return "zero"
        return {"kind": "explicit_tensor", "path": str(self.path)}


@dataclass(frozen=True)
class ManifestItem:
    instance_id: str
    image_path: Path
    attribution_path: Path
    segmentation_path: Path | None = None
    cached_prediction: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """A validated, order-preserving list of dataset instances.

    `digest` fingerprints the manifest content (not file bytes), so pipeline
    artifacts can detect calibration/inference mismatches.
    """

    items: tuple[ManifestItem, ...]
    num_classes: int
    baseline_policy: BaselinePolicy
    root: Path
    digest: str = field(default="")

    def __len__(self) -> int:
        return len(self.items)


def _canonical_digest(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def manifest_digest_from_payload(payload: dict) -> str:
    return _canonical_digest(payload)


def load_manifest(path) -> DatasetManifest:
    """Load and fully validate a JSON dataset manifest.

    Rejects missing fields, duplicate instance ids and dangling file paths.
    Item order is preserved exactly as written, so seeded calibration/test
    splits are reproducible.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    for key in ("num_classes", "baseline_policy", "items"):
        if key not in payload:
            raise ManifestError(f"manifest missing required key {key!r}")
    num_classes = payload["num_classes"]
    if not isinstance(num_classes, int) or num_classes < 1:
        raise ManifestError(f"num_classes must be a positive integer, got {num_classes!r}")

    root = path.parent
    raw_policy = payload["baseline_policy"]
    if raw_policy == "zero":
        policy = BaselinePolicy("zero")
    elif isinstance(raw_policy, dict) and raw_policy.get("kind") == "explicit_tensor":
        policy = BaselinePolicy("explicit_tensor", root / raw_policy["path"])
    else:
        raise ManifestError(f"unrecognized baseline_policy {raw_policy!r}")
    if policy.kind == "explicit_tensor" and not policy.path.exists():
        raise ManifestError(f"baseline tensor not found: {policy.path}")

    items: list[ManifestItem] = []
    seen: set[str] = set()
    for idx, raw in enumerate(payload["items"]):
        for key in ("instance_id", "image_path", "attribution_path"):
            if key not in raw:
                raise ManifestError(f"item {idx} missing required key {key!r}")
        iid = str(raw["instance_id"])
        if iid in seen:
            raise ManifestError(f"duplicate instance_id {iid!r}")
        seen.add(iid)
        image_path = root / raw["image_path"]
        attribution_path = root / raw["attribution_path"]
        for p in (image_path, attribution_path):
            if not p.exists():
                raise ManifestError(f"item {iid!r}: path does not exist: {p}")
        seg_path = None
        if raw.get("segmentation_path") is not None:
            seg_path = root / raw["segmentation_path"]
            if not seg_path.exists():
                raise ManifestError(f"item {iid!r}: segmentation path does not exist: {seg_path}")
        cached = raw.get("cached_prediction")
        if cached is not None:
            cached = int(cached)
            if not (0 <= cached < num_classes):
                raise ManifestError(f"item {iid!r}: cached_prediction {cached} out of range")
        items.append(ManifestItem(iid, image_path, attribution_path, seg_path, cached))

    return DatasetManifest(
        items=tuple(items),
        num_classes=num_classes,
        baseline_policy=policy,
        root=root,
        digest=_canonical_digest(payload),
    )


def save_manifest(path, items: list[dict], num_classes: int, baseline_policy="zero") -> None:
    """Write a manifest JSON. `items` hold paths relative to the manifest dir."""
    payload = {
        "num_classes": int(num_classes),
        "baseline_policy": baseline_policy if isinstance(baseline_policy, str) else baseline_policy.to_json(),
        "items": items,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_instance(manifest: DatasetManifest, item: ManifestItem) -> tuple[ImageTensor, AttributionMap]:
    """Load one instance's image and attribution, cross-checking dimensions."""
    img = ImageTensor.load(item.image_path)
    phi = AttributionMap.load(item.attribution_path)
    if (phi.height, phi.width) != (img.height, img.width):
        raise ManifestError(
            f"item {item.instance_id!r}: attribution dims {phi.data.shape} "
            f"do not match image spatial dims {(img.height, img.width)}"
        )
    return img, phi


def load_baseline(manifest: DatasetManifest) -> ImageTensor | None:
    """Resolve the manifest's baseline policy to a tensor (None means zero)."""
    if manifest.baseline_policy.kind == "zero":
        return None
    return ImageTensor.load(manifest.baseline_policy.path)
