"""Synthetic scenes with analytically known sufficient pixel sets.

Two families are provided. The lattice witness scene pairs a region-mean
predictor with perfectly honest attributions drawn on a small value lattice;
its conformity-score distribution has atoms, which keeps empirical coverage
comfortably inside the guarantee. The interference scene draws continuous
values, makes off-object pixels carry negative evidence and plants decoy
attributions, so pixel-level selections are genuinely fragile while
segment-aligned selections stay coherent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .predictor import RegionWitnessPredictor
from .segmentation import SegmentationMap, grid_segmentation
from .tensor_io import AttributionMap, ImageTensor


@dataclass(frozen=True, eq=False)
class SyntheticInstance:
    instance_id: str
    image: ImageTensor
    phi: AttributionMap
    seg: SegmentationMap


def _cell_region(height: int, width: int, cells: tuple[int, int], region_cells: tuple[int, ...]) -> np.ndarray:
    seg = grid_segmentation(height, width, cells[0], cells[1])
    return np.isin(seg.labels, np.asarray(region_cells))


@dataclass(frozen=True)
class WitnessScene:
    """Lattice-valued scene for coverage validation and informativeness checks.

    The predictor reads the mean of the witness region; region pixels carry
    values from `signal_values`, everything else from `background_values`.
    Honest attributions equal the pixel values, so high-value region pixels
    rank first and the minimal sufficient selections are known exactly.
    """

    height: int = 12
    width: int = 12
    cells: tuple[int, int] = (3, 3)
    region_cells: tuple[int, ...] = (0, 1, 3, 4)
    theta: float = 0.3
    signal_values: tuple[float, ...] = tuple(np.round(np.arange(0.3, 1.01, 0.1), 2))
    background_values: tuple[float, ...] = tuple(np.round(np.arange(0.0, 0.26, 0.05), 2))


class WitnessGenerator:
    """Samples i.i.d. instances from a WitnessScene with a fixed predictor."""

    def __init__(self, scene: WitnessScene | None = None):
        self.scene = scene or WitnessScene()
        s = self.scene
        self.region = _cell_region(s.height, s.width, s.cells, s.region_cells)
        self.segmentation = grid_segmentation(s.height, s.width, s.cells[0], s.cells[1])
        self.predictor = RegionWitnessPredictor(region=self.region, threshold=s.theta)

    def sample(
        self, rng: np.random.Generator, n: int, shuffled: bool = False, id_prefix: str = "w"
    ) -> list[SyntheticInstance]:
        """Draw `n` instances; `shuffled=True` permutes each attribution map,
        simulating an uninformative explainer (coverage still holds, masks
        just get much larger)."""
        s = self.scene
        H, W = s.height, s.width
        signal = np.asarray(s.signal_values)
        background = np.asarray(s.background_values)
        images = np.where(
            self.region[None],
            signal[rng.integers(0, signal.size, size=(n, H, W))],
            background[rng.integers(0, background.size, size=(n, H, W))],
        )
        out = []
        for i in range(n):
            phi = images[i].copy()
            if shuffled:
                phi = rng.permutation(phi.ravel()).reshape(H, W)
            out.append(
                SyntheticInstance(
                    instance_id=f"{id_prefix}{i:05d}",
                    image=ImageTensor(images[i][None].astype(np.float32)),
                    phi=AttributionMap(phi.astype(np.float32)),
                    seg=self.segmentation,
                )
            )
        return out


@dataclass(frozen=True)
class InterferenceScene:
    """Continuous scene where kept off-object pixels subtract evidence.

    The predictor averages the masked image over *all* pixels; object pixels
    are positive, everything else negative. The simulated explainer is
    imperfect: it under-scores a fraction of object pixels (`miss_rate`),
    gives mid-range scores to the benign background and high decoy scores to
    a few strongly negative pixels. Sweeping a pixel threshold downward
    therefore passes through a window where background drag is in but the
    missed object pixels are not yet back, so the preserving-threshold set
    has holes. Whole segments never exhibit the window: an object segment
    brings all its pixel values at once. A per-instance `scale_range` spreads
    where each instance's hole sits, so the calibrated threshold lands inside
    some holes at test time.
    """

    height: int = 12
    width: int = 12
    cells: tuple[int, int] = (3, 3)
    region_cells: tuple[int, ...] = (0, 1, 3, 4)
    theta: float = 0.07
    scale_range: tuple[float, float] = (1.0, 1.35)
    signal_range: tuple[float, float] = (0.4, 1.0)
    miss_rate: float = 0.3
    missed_attr: tuple[float, float] = (0.05, 0.25)
    attr_noise: float = 0.15
    decoy_rate: float = 0.2
    decoy_value: tuple[float, float] = (-1.4, -1.0)
    decoy_attr: tuple[float, float] = (0.8, 1.15)
    background_value: tuple[float, float] = (-0.25, -0.05)
    background_attr: tuple[float, float] = (0.3, 0.55)


class InterferenceGenerator:
    def __init__(self, scene: InterferenceScene | None = None):
        self.scene = scene or InterferenceScene()
        s = self.scene
        self.object_mask = _cell_region(s.height, s.width, s.cells, s.region_cells)
        self.segmentation = grid_segmentation(s.height, s.width, s.cells[0], s.cells[1])
        # evidence is the mean over every kept pixel: region = whole image
        self.predictor = RegionWitnessPredictor(
            region=np.ones((s.height, s.width), dtype=bool), threshold=s.theta
        )

    @staticmethod
    def _exact_subset(rng, where: np.ndarray, n: int, count: int) -> np.ndarray:
        """(n,H,W) masks marking exactly `count` random positions inside `where`."""
        idx = np.flatnonzero(where)
        ranks = rng.random(size=(n, idx.size)).argsort(axis=1)[:, :count]
        out = np.zeros((n,) + where.shape, dtype=bool)
        flat = out.reshape(n, -1)
        np.put_along_axis(flat, idx[ranks], True, axis=1)
        return out

    def sample(
        self, rng: np.random.Generator, n: int, shuffled: bool = False, id_prefix: str = "x"
    ) -> list[SyntheticInstance]:
        s = self.scene
        H, W = s.height, s.width
        obj = self.object_mask
        scale = rng.uniform(*s.scale_range, size=(n, 1, 1))
        # exact per-instance quotas keep the evidence margin tight and the
        # hole geometry stable across instances
        n_decoy = round(s.decoy_rate * (~obj).sum())
        n_missed = round(s.miss_rate * obj.sum())
        decoys = self._exact_subset(rng, ~obj, n, n_decoy)
        images = np.where(
            obj[None],
            rng.uniform(*s.signal_range, size=(n, H, W)),
            np.where(
                decoys,
                rng.uniform(*s.decoy_value, size=(n, H, W)),
                rng.uniform(*s.background_value, size=(n, H, W)),
            ),
        ) * scale
        missed = self._exact_subset(rng, obj, n, n_missed)
        phis = np.where(
            obj[None],
            np.where(
                missed,
                rng.uniform(*s.missed_attr, size=(n, H, W)) * scale,
                images + rng.uniform(0.0, s.attr_noise, size=(n, H, W)) * scale,
            ),
            np.where(
                decoys,
                rng.uniform(*s.decoy_attr, size=(n, H, W)) * scale,
                rng.uniform(*s.background_attr, size=(n, H, W)) * scale,
            ),
        )
        out = []
        for i in range(n):
            phi = phis[i]
            if shuffled:
                phi = rng.permutation(phi.ravel()).reshape(H, W)
            out.append(
                SyntheticInstance(
                    instance_id=f"{id_prefix}{i:05d}",
                    image=ImageTensor(images[i][None].astype(np.float32)),
                    phi=AttributionMap(phi.astype(np.float32)),
                    seg=self.segmentation,
                )
            )
        return out


def write_dataset(
    out_dir,
    generator,
    n: int,
    seed: int = 0,
    shuffled: bool = False,
    with_segmentations: bool = False,
    with_cached_predictions: bool = False,
) -> "Path":
    """Materialize a generated dataset as CFXT files plus a manifest.

    Returns the manifest path. Used by the CLI demos and pipeline tests; the
    witness region is also saved (as `region.cfxt` next to the manifest) so a
    matching synthetic predictor spec can be constructed.
    """
    from pathlib import Path

    from .predictor import predict_classes
    from .tensor_io import save_manifest, write_tensor

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "attributions").mkdir(exist_ok=True)
    if with_segmentations:
        (out_dir / "segmentations").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    instances = generator.sample(rng, n, shuffled=shuffled)
    items = []
    for inst in instances:
        iid = inst.instance_id
        inst.image.save(out_dir / "images" / f"{iid}.cfxt")
        inst.phi.save(out_dir / "attributions" / f"{iid}.cfxt")
        item = {
            "instance_id": iid,
            "image_path": f"images/{iid}.cfxt",
            "attribution_path": f"attributions/{iid}.cfxt",
        }
        if with_segmentations:
            inst.seg.save(out_dir / "segmentations" / f"{iid}.cfxt")
            item["segmentation_path"] = f"segmentations/{iid}.cfxt"
        if with_cached_predictions:
            item["cached_prediction"] = int(
                predict_classes(generator.predictor, inst.image.data[None])[0]
            )
        items.append(item)
    write_tensor(
        generator.predictor.region.astype(np.float32), out_dir / "region.cfxt"
    )
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, items, num_classes=generator.predictor.num_classes)
    return manifest_path
