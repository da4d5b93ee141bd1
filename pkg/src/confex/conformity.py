"""Per-instance conformity scores.

Each scoring function asks: how aggressively can this instance's attribution
map be thresholded while the model, shown only the surviving pixels (the rest
set to baseline), still produces its original class? Four variants are
provided:

- pixelwise: the highest preserving threshold over individual pixels;
- superpixel: thresholds admit whole segments once a fraction `rho` of a
  segment's pixels clears the bar;
- scaled: the superpixel rule on per-instance standardized scores, making
  thresholds comparable across instances with different attribution scales;
- summed: the smallest total attribution mass of any preserving selection.

Threshold candidates come from a per-instance grid over the attribution
values. Scores from a calibration set feed the conformal quantile rule in
`confex.conformal`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .predictor import masked_batch, predict_classes
from .segmentation import SegmentationMap
from .tensor_io import AttributionMap, ImageTensor

KIND_PIXELWISE = "pixelwise"
KIND_SUPERPIXEL = "superpixel"
KIND_SCALED = "scaled"
KIND_SUMMED = "summed"
ALL_KINDS = (KIND_PIXELWISE, KIND_SUPERPIXEL, KIND_SCALED, KIND_SUMMED)
SEGMENT_KINDS = (KIND_SUPERPIXEL, KIND_SCALED)
THRESHOLD_KINDS = (KIND_PIXELWISE, KIND_SUPERPIXEL, KIND_SCALED)

STD_FLOOR = 1e-12


@dataclass(frozen=True)
class ConformityKind:
    """One of the four conformity functions, with `rho` for segment kinds.

    `rho` is the fraction of a segment's pixels that must clear the threshold
    for the whole segment to be selected (inclusion rule: count >= ceil(rho *
    segment size)).
    """

    name: str
    rho: float | None = None

    def __post_init__(self):
        if self.name not in ALL_KINDS:
            raise ValueError(f"unknown conformity kind {self.name!r}")
        if self.name in SEGMENT_KINDS:
            if self.rho is None or not (0 < self.rho <= 1):
                raise ValueError(f"kind {self.name!r} requires rho in (0,1]")
        elif self.rho is not None:
            raise ValueError(f"kind {self.name!r} does not take rho")

    @property
    def uses_segmentation(self) -> bool:
        return self.name in SEGMENT_KINDS

    @property
    def is_threshold(self) -> bool:
        return self.name in THRESHOLD_KINDS

    @property
    def is_summed(self) -> bool:
        return self.name == KIND_SUMMED

    @property
    def invalid_sentinel(self) -> float:
        # most conservative score: "needed everything and more"
        return math.inf if self.is_summed else -math.inf


@dataclass(frozen=True)
class ThresholdGridSpec:
    """How the per-instance threshold grid is realized.

    mode "quantile": empirical quantiles of the scores at Q evenly spaced
    probability levels (linear interpolation); "linspace": Q even steps over
    [min, max]; "all_distinct": every distinct score value.
    """

    mode: str = "quantile"
    q: int = 100

    def __post_init__(self):
        if self.mode not in ("quantile", "linspace", "all_distinct"):
            raise ValueError(f"unknown grid mode {self.mode!r}")
        if self.mode != "all_distinct" and self.q < 2:
            raise ValueError("q must be >= 2")

    def to_json_dict(self) -> dict:
        return {"tau_mode": self.mode, "q": None if self.mode == "all_distinct" else self.q}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ThresholdGridSpec":
        mode = d["tau_mode"]
        return cls(mode=mode, q=d.get("q") or 100)


@dataclass(frozen=True, eq=False)
class ThresholdGrid:
    """Realized candidate thresholds for one instance, ascending and unique."""

    values: np.ndarray
    spec: ThresholdGridSpec

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("grid must be a non-empty vector")
        if np.any(np.diff(arr) <= 0):
            raise ValueError("grid values must be strictly ascending")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size


def make_threshold_grid(scores, spec: ThresholdGridSpec) -> ThresholdGrid:
    """Build the candidate threshold grid from an instance's attribution scores."""
    flat = np.asarray(scores.data if isinstance(scores, AttributionMap) else scores, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("cannot build a grid from empty scores")
    if spec.mode == "all_distinct":
        values = np.unique(flat)
    elif spec.mode == "quantile":
        levels = np.linspace(0.0, 1.0, spec.q)
        values = np.unique(np.quantile(flat, levels, method="linear"))
    else:  # linspace
        values = np.unique(np.linspace(flat.min(), flat.max(), spec.q))
    return ThresholdGrid(values=values, spec=spec)


def standardize_scores(phi: np.ndarray) -> np.ndarray:
    """Center to zero mean, scale to unit (population) std, per instance.

    Constant maps get std substituted by 1, so they standardize to all zeros
    rather than NaN; selection then degenerates to keeping everything.
    """
    phi = np.asarray(phi, dtype=np.float64)
    mean = phi.mean()
    std = phi.std()
    if std < STD_FLOOR:
        std = 1.0
    return (phi - mean) / std


def selection_at_threshold(
    phi: np.ndarray,
    threshold: float,
    kind: ConformityKind,
    seg: SegmentationMap | None = None,
) -> np.ndarray:
    """Pixel mask selected at one threshold.

    Pixel kinds keep pixels with score >= threshold. Segment kinds keep the
    union of whole segments in which at least ceil(rho * size) pixels clear
    the threshold. Selections shrink (weakly) as the threshold rises.
    """
    phi = np.asarray(phi, dtype=np.float64)
    hits = phi >= threshold
    if not kind.uses_segmentation:
        return hits
    if seg is None:
        raise ValueError(f"kind {kind.name!r} requires a segmentation")
    if seg.labels.shape != phi.shape:
        raise ValueError("segmentation dims do not match attribution dims")
    sizes = seg.segment_sizes()
    counts = np.bincount(seg.labels[hits], minlength=seg.num_segments)
    needed = np.ceil(kind.rho * sizes).astype(np.int64)
    selected = counts >= needed
    return selected[seg.labels]


def _selection_stack(
    phi: np.ndarray, grid: ThresholdGrid, kind: ConformityKind, seg: SegmentationMap | None
) -> np.ndarray:
    """(G,H,W) selections for every grid threshold, vectorized."""
    phi = np.asarray(phi, dtype=np.float64)
    thr = grid.values
    if not kind.uses_segmentation:
        return phi[None, :, :] >= thr[:, None, None]
    if seg is None:
        raise ValueError(f"kind {kind.name!r} requires a segmentation")
    if seg.labels.shape != phi.shape:
        raise ValueError("segmentation dims do not match attribution dims")
    sizes = seg.segment_sizes()
    needed = np.ceil(kind.rho * sizes).astype(np.int64)
    hits = phi[None, :, :] >= thr[:, None, None]  # (G,H,W)
    flat_labels = seg.labels.ravel()
    counts = np.zeros((len(grid), seg.num_segments), dtype=np.int64)
    for g in range(len(grid)):
        counts[g] = np.bincount(flat_labels[hits[g].ravel()], minlength=seg.num_segments)
    selected = counts >= needed[None, :]
    return selected[:, flat_labels].reshape(len(grid), *phi.shape)


@dataclass(frozen=True)
class ConformityScore:
    """One calibration instance's score; `valid` records whether any threshold
    preserved the prediction (invalid scores carry the conservative sentinel)."""

    instance_id: str
    kind: ConformityKind
    value: float
    valid: bool

    def to_json_dict(self) -> dict:
        d = {
            "instance_id": self.instance_id,
            "kind": self.kind.name,
            "value": float(self.value) if self.valid else None,
            "valid": self.valid,
        }
        if self.kind.rho is not None:
            d["rho"] = self.kind.rho
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ConformityScore":
        kind = ConformityKind(d["kind"], d.get("rho"))
        valid = bool(d["valid"])
        value = d["value"] if valid else kind.invalid_sentinel
        return cls(str(d["instance_id"]), kind, float(value), valid)


def save_scores(scores, path) -> None:
    """Scores as JSON lines: {"instance_id","kind","rho"?,"value","valid"}."""
    with open(path, "w") as fh:
        for s in scores:
            fh.write(json.dumps(s.to_json_dict()) + "\n")


def load_scores(path) -> list[ConformityScore]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(ConformityScore.from_json_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# scoring sweeps

def _dedup_nested(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique selections of a nested (monotone shrinking) stack.

    Selections along the grid are nested, so equal popcounts imply equal
    masks; this keeps predictor queries at or below one per distinct mask.
    Returns (unique stack, inverse index per grid point).
    """
    counts = stack.reshape(stack.shape[0], -1).sum(axis=1)
    change = np.empty(stack.shape[0], dtype=bool)
    change[0] = True
    change[1:] = counts[1:] != counts[:-1]
    idx = np.nonzero(change)[0]
    inverse = np.cumsum(change) - 1
    return stack[idx], inverse


def _preserving_mask(
    x: ImageTensor,
    selections: np.ndarray,
    predictor,
    baseline: ImageTensor | None,
    reference_class: int,
) -> np.ndarray:
    uniq, inverse = _dedup_nested(selections)
    batch = masked_batch(x, uniq, baseline)
    classes = predict_classes(predictor, batch)
    return (classes == reference_class)[inverse]


def _reference_class(x: ImageTensor, predictor, reference_class: int | None) -> int:
    if reference_class is not None:
        return int(reference_class)
    return int(predict_classes(predictor, x.data[None])[0])


def score_pixelwise(
    x: ImageTensor,
    phi: AttributionMap,
    predictor,
    grid_spec: ThresholdGridSpec,
    baseline: ImageTensor | None = None,
    reference_class: int | None = None,
    instance_id: str = "",
) -> ConformityScore:
    """Highest grid threshold whose pixel selection preserves the prediction.

    The preserving set over thresholds need not be contiguous, so the whole
    grid is scanned and the maximum preserving value returned. If nothing
    preserves, `valid` is False and the score is the -inf sentinel.
    """
    kind = ConformityKind(KIND_PIXELWISE)
    return _score_threshold_kind(
        x, phi, predictor, grid_spec, kind, None, baseline, reference_class, instance_id
    )


def score_superpixel(
    x: ImageTensor,
    phi: AttributionMap,
    predictor,
    grid_spec: ThresholdGridSpec,
    seg: SegmentationMap,
    rho: float = 0.5,
    baseline: ImageTensor | None = None,
    scaled: bool = False,
    reference_class: int | None = None,
    instance_id: str = "",
) -> ConformityScore:
    """Segment-level variant; `scaled=True` standardizes the attribution map
    (zero mean, unit std, per instance) before the grid is built."""
    kind = ConformityKind(KIND_SCALED if scaled else KIND_SUPERPIXEL, rho)
    return _score_threshold_kind(
        x, phi, predictor, grid_spec, kind, seg, baseline, reference_class, instance_id
    )


def _score_threshold_kind(
    x, phi, predictor, grid_spec, kind, seg, baseline, reference_class, instance_id
) -> ConformityScore:
    ref = _reference_class(x, predictor, reference_class)
    phi_eff = phi.data
    if kind.name == KIND_SCALED:
        phi_eff = standardize_scores(phi_eff)
    grid = make_threshold_grid(phi_eff, grid_spec)
    selections = _selection_stack(phi_eff, grid, kind, seg)
    preserving = _preserving_mask(x, selections, predictor, baseline, ref)
    if not preserving.any():
        return ConformityScore(instance_id, kind, kind.invalid_sentinel, valid=False)
    value = float(grid.values[preserving].max())
    return ConformityScore(instance_id, kind, value, valid=True)


def score_summed(
    x: ImageTensor,
    phi: AttributionMap,
    predictor,
    grid_spec: ThresholdGridSpec,
    baseline: ImageTensor | None = None,
    reference_class: int | None = None,
    instance_id: str = "",
) -> ConformityScore:
    """Minimal preserving attribution mass.

    Over grid thresholds whose pixel selection preserves the prediction, take
    the minimum of the (signed) sum of selected attribution scores. Invalid
    instances carry the +inf sentinel.
    """
    kind = ConformityKind(KIND_SUMMED)
    ref = _reference_class(x, predictor, reference_class)
    grid = make_threshold_grid(phi.data, grid_spec)
    selections = _selection_stack(phi.data, grid, ConformityKind(KIND_PIXELWISE), None)
    preserving = _preserving_mask(x, selections, predictor, baseline, ref)
    if not preserving.any():
        return ConformityScore(instance_id, kind, kind.invalid_sentinel, valid=False)
    phi64 = phi.data.astype(np.float64)
    sums = (selections * phi64[None]).sum(axis=(1, 2))
    value = float(sums[preserving].min())
    return ConformityScore(instance_id, kind, value, valid=True)


def score_instance(
    kind: ConformityKind,
    x: ImageTensor,
    phi: AttributionMap,
    predictor,
    grid_spec: ThresholdGridSpec,
    seg: SegmentationMap | None = None,
    baseline: ImageTensor | None = None,
    reference_class: int | None = None,
    instance_id: str = "",
) -> ConformityScore:
    """Dispatch to the scoring function for `kind`."""
    if kind.name == KIND_PIXELWISE:
        return score_pixelwise(x, phi, predictor, grid_spec, baseline, reference_class, instance_id)
    if kind.name in SEGMENT_KINDS:
        if seg is None:
            raise ValueError(f"kind {kind.name!r} requires a segmentation")
        return score_superpixel(
            x, phi, predictor, grid_spec, seg, kind.rho,
            baseline, kind.name == KIND_SCALED, reference_class, instance_id,
        )
    return score_summed(x, phi, predictor, grid_spec, baseline, reference_class, instance_id)
