"""Split-conformal calibration and explanation-mask construction.

Calibration turns a batch of per-instance conformity scores into one global
threshold with a finite-sample guarantee: for a fresh exchangeable instance,
the probability that its masked prediction differs from the full prediction
is bounded (up to the usual +1/(k+1) discreteness) by the chosen epsilon.
Inference applies that single number to a new attribution map.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conformity import (
    ConformityKind,
    ConformityScore,
    ThresholdGridSpec,
    selection_at_threshold,
    standardize_scores,
)
from .errors import DataIntegrityError
from .predictor import apply_baseline_mask, predict_classes
from .segmentation import SegmentationMap
from .tensor_io import AttributionMap, ImageTensor, write_tensor


@dataclass(frozen=True)
class CalibrationArtifact:
    """Everything inference needs: the kind, epsilon, and calibrated threshold.

    Digests of the source manifest and SLIC parameters travel along so that a
    mismatched calibration/inference configuration fails loudly instead of
    silently producing invalid guarantees.
    """

    kind: ConformityKind
    epsilon: float
    k: int
    threshold: float
    grid_spec: ThresholdGridSpec
    slic_digest: str | None = None
    manifest_digest: str | None = None

    def __post_init__(self):
        if not (0 < self.epsilon < 1):
            raise ValueError("epsilon must lie in (0,1)")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def sentinel(self) -> bool:
        return not math.isfinite(self.threshold)

    @property
    def confidence(self) -> float:
        return 1.0 - self.epsilon

    def to_json_dict(self) -> dict:
        d = {
            "kind": self.kind.name,
            "rho": self.kind.rho,
            "epsilon": self.epsilon,
            "k": self.k,
            "threshold": None if self.sentinel else float(self.threshold),
            "slic_digest": self.slic_digest,
            "manifest_digest": self.manifest_digest,
            "sentinel": self.sentinel,
        }
        d.update(self.grid_spec.to_json_dict())
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "CalibrationArtifact":
        kind = ConformityKind(d["kind"], d.get("rho"))
        threshold = d["threshold"]
        if threshold is None:
            threshold = math.inf if kind.is_summed else -math.inf
        return cls(
            kind=kind,
            epsilon=float(d["epsilon"]),
            k=int(d["k"]),
            threshold=float(threshold),
            grid_spec=ThresholdGridSpec.from_json_dict(d),
            slic_digest=d.get("slic_digest"),
            manifest_digest=d.get("manifest_digest"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationArtifact":
        return cls.from_json_dict(json.loads(Path(path).read_text()))

    def check_compatible(self, manifest_digest: str | None, slic_digest: str | None) -> None:
        if self.manifest_digest and manifest_digest and self.manifest_digest != manifest_digest:
            raise DataIntegrityError(
                f"manifest digest {manifest_digest} does not match calibration "
                f"artifact ({self.manifest_digest})"
            )
        if self.kind.uses_segmentation and self.slic_digest and slic_digest and self.slic_digest != slic_digest:
            raise DataIntegrityError(
                f"segmentation digest {slic_digest} does not match calibration "
                f"artifact ({self.slic_digest})"
            )


def calibrate_threshold(
    scores: list[ConformityScore],
    epsilon: float,
    grid_spec: ThresholdGridSpec | None = None,
    slic_digest: str | None = None,
    manifest_digest: str | None = None,
) -> CalibrationArtifact:
    """Pick the conformal threshold from calibration scores.

    Threshold kinds: the largest observed score s with
    (#{scores >= s} + 1) / (k + 1) >= 1 - epsilon. Summed kind: the smallest
    observed score s with (#{scores <= s} + 1) / (k + 1) >= 1 - epsilon.
    Candidates are restricted to the observed score values (sentinels
    included); if none qualifies the conservative sentinel is emitted, which
    makes inference select everything.
    """
    if not scores:
        raise ValueError("cannot calibrate from an empty score list")
    kind = scores[0].kind
    if any(s.kind != kind for s in scores):
        raise ValueError("calibration scores mix conformity kinds")
    if not (0 < epsilon < 1):
        raise ValueError("epsilon must lie in (0,1)")
    values = np.array([s.value for s in scores], dtype=np.float64)
    k = values.size
    need = (1.0 - epsilon) * (k + 1)

    candidates = np.unique(values)
    if kind.is_summed:
        counts = np.array([(values <= c).sum() for c in candidates])
        feasible = candidates[counts + 1 >= need]
        threshold = float(feasible.min()) if feasible.size else math.inf
    else:
        counts = np.array([(values >= c).sum() for c in candidates])
        feasible = candidates[counts + 1 >= need]
        threshold = float(feasible.max()) if feasible.size else -math.inf

    if not math.isfinite(threshold):
        warnings.warn(
            f"coverage requirement unattainable from the given scores "
            f"(k={k}, epsilon={epsilon}); emitting the conservative sentinel",
            stacklevel=2,
        )
    return CalibrationArtifact(
        kind=kind,
        epsilon=epsilon,
        k=k,
        threshold=threshold,
        grid_spec=grid_spec or ThresholdGridSpec(),
        slic_digest=slic_digest,
        manifest_digest=manifest_digest,
    )


@dataclass(frozen=True, eq=False)
class ExplanationMask:
    """The kept pixel set for one instance plus its reproduced prediction."""

    instance_id: str
    keep: np.ndarray
    size_fraction: float
    reproduced_class: int
    matches_full: bool

    def __post_init__(self):
        arr = np.ascontiguousarray(self.keep, dtype=bool)
        arr.flags.writeable = False
        object.__setattr__(self, "keep", arr)

    def to_json_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "size_fraction": self.size_fraction,
            "reproduced_class": self.reproduced_class,
            "matches_full": self.matches_full,
        }


def summed_prefix_mask(phi: np.ndarray, bound: float) -> np.ndarray:
    """Maximal contiguous prefix of descending-attribution pixels whose
    running sum stays within `bound`.

    Ranking ties are broken by pixel index (stable sort) so the prefix is
    deterministic. The scan stops at the first pixel that would push the
    running sum over the bound, even if later (negative) scores would bring
    it back under.
    """
    flat = np.asarray(phi, dtype=np.float64).ravel()
    order = np.argsort(-flat, kind="stable")
    running = np.cumsum(flat[order])
    over = running > bound
    n_keep = int(np.argmax(over)) if over.any() else flat.size
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:n_keep]] = True
    return keep.reshape(np.asarray(phi).shape)


def explain(
    x: ImageTensor,
    phi: AttributionMap,
    artifact: CalibrationArtifact,
    predictor,
    seg: SegmentationMap | None = None,
    baseline: ImageTensor | None = None,
    instance_id: str = "",
    full_class: int | None = None,
) -> ExplanationMask:
    """Construct the explanation mask for one instance and evaluate it.

    The kept set is thresholded exactly as during calibration scoring (the
    scaled kind re-standardizes phi per instance); the masked image goes
    through the predictor once to fill `reproduced_class`.
    """
    kind = artifact.kind
    if kind.uses_segmentation and seg is None:
        raise ValueError(f"kind {kind.name!r} requires a segmentation")
    if kind.is_summed:
        keep = summed_prefix_mask(phi.data, artifact.threshold)
    else:
        phi_eff = standardize_scores(phi.data) if kind.name == "scaled" else phi.data
        keep = selection_at_threshold(phi_eff, artifact.threshold, kind, seg)

    if full_class is None:
        full_class = int(predict_classes(predictor, x.data[None])[0])
    masked = apply_baseline_mask(x, keep, baseline)
    reproduced = int(predict_classes(predictor, masked.data[None])[0])
    return ExplanationMask(
        instance_id=instance_id,
        keep=keep,
        size_fraction=float(keep.sum()) / keep.size,
        reproduced_class=reproduced,
        matches_full=reproduced == int(full_class),
    )


def nested_masks(
    x: ImageTensor,
    phi: AttributionMap,
    artifacts: list[CalibrationArtifact],
    predictor,
    seg: SegmentationMap | None = None,
    baseline: ImageTensor | None = None,
    instance_id: str = "",
) -> list[ExplanationMask]:
    """Masks for one instance across several confidence levels.

    All artifacts must share kind and provenance. For threshold kinds the
    masks are nested: higher confidence (lower threshold) keeps a superset.
    """
    if not artifacts:
        return []
    kind = artifacts[0].kind
    if any(a.kind != kind for a in artifacts):
        raise ValueError("nested_masks requires artifacts of one conformity kind")
    ref = (artifacts[0].manifest_digest, artifacts[0].slic_digest)
    if any((a.manifest_digest, a.slic_digest) != ref for a in artifacts):
        raise DataIntegrityError("nested_masks requires artifacts of identical provenance")
    full_class = int(predict_classes(predictor, x.data[None])[0])
    return [
        explain(x, phi, art, predictor, seg, baseline, instance_id, full_class)
        for art in artifacts
    ]


def save_masks(masks: list[ExplanationMask], out_dir, metadata_name: str = "masks.jsonl") -> Path:
    """Write each mask as a CFXT tensor (0/1 as float32) plus JSONL metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_path = out_dir / metadata_name
    with open(meta_path, "w") as fh:
        for m in masks:
            write_tensor(m.keep.astype(np.float32), out_dir / f"{m.instance_id}.cfxt")
            fh.write(json.dumps(m.to_json_dict()) + "\n")
    return meta_path


def load_mask_metadata(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows
