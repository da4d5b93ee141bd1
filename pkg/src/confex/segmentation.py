"""SLIC super-pixel segmentation.

Produces the segment partition consumed by the segment-level conformity
functions. The implementation is deliberately self-contained so that its
determinism contract is explicit: fixed seed grid, lowest-index tie-breaking,
and a per-iteration energy trace (sum of squared combined color+spatial
distances) that is provably non-increasing.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import TensorFormatError
from .tensor_io import ImageTensor, read_tensor, write_tensor


@dataclass(frozen=True)
class SlicParams:
    """SLIC hyperparameters.

    target_segments is approximate: the seed grid rounds it and fragment
    merging may reduce it further, but the result always stays within
    [1, 2 * target_segments].
    """

    target_segments: int = 100
    compactness: float = 10.0
    max_iters: int = 10
    min_size_factor: float = 0.25
    perturb_seeds: bool = True

    def __post_init__(self):
        if self.target_segments < 1:
            raise ValueError("target_segments must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.compactness > 0):
            raise ValueError("compactness must be > 0")
        if not (0 < self.min_size_factor < 1):
            raise ValueError("min_size_factor must lie in (0,1)")

    def digest(self) -> str:
        blob = json.dumps(
            {
                "target_segments": self.target_segments,
                "compactness": self.compactness,
                "max_iters": self.max_iters,
                "min_size_factor": self.min_size_factor,
                "perturb_seeds": self.perturb_seeds,
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    """A labeled partition of the pixel grid into super-pixels.

    Labels are dense in [0, num_segments) and each label's pixel set is
    4-connected after connectivity enforcement.
    """

    labels: np.ndarray
    num_segments: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels, dtype=np.int32)
        if arr.ndim != 2:
            raise ValueError(f"labels must be (H,W), got shape {arr.shape}")
        if arr.min() < 0 or arr.max() >= self.num_segments:
            raise ValueError("labels out of range [0, num_segments)")
        present = np.bincount(arr.ravel(), minlength=self.num_segments)
        if np.any(present == 0):
            raise ValueError("every segment id must occur at least once")
        arr.flags.writeable = False
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def segment_sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_segments)

    def save(self, path) -> None:
        """Persist as a float32 label tensor plus a `<path>.json` sidecar."""
        write_tensor(self.labels.astype(np.float32), path)
        sidecar = {"num_segments": int(self.num_segments)}
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SegmentationMap":
        arr = read_tensor(path)
        if arr.ndim != 2:
            raise TensorFormatError(f"segmentation must be 2-D, got {arr.ndim} dims")
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
        labels = np.rint(arr).astype(np.int32)
        if not np.allclose(arr, labels):
            raise TensorFormatError("segmentation labels are not integral")
        return cls(labels=labels, num_segments=int(sidecar["num_segments"]))


# ---------------------------------------------------------------------------
# color features

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def _srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1], shape (H,W,3) -> CIELAB, shape (H,W,3)."""
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _SRGB_TO_XYZ.T / _D65_WHITE
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def _color_features(img: np.ndarray) -> np.ndarray:
    """(C,H,W) image -> (H,W,F) color feature array used by the distance.

    3-channel input is treated as RGB: rescaled to [0,1] by its global range
    (image tensors are usually mean/std normalized) and converted to CIELAB.
    1-channel input uses raw intensity. Other channel counts are used as-is.
    """
    if img.shape[0] == 3:
        rgb = np.moveaxis(img, 0, -1).astype(np.float64)
        lo, hi = rgb.min(), rgb.max()
        if hi - lo < 1e-12:
            rgb = np.full_like(rgb, 0.5)
        else:
            rgb = (rgb - lo) / (hi - lo)
        return _srgb_to_lab(rgb)
    return np.moveaxis(img, 0, -1).astype(np.float64)


# ---------------------------------------------------------------------------
# seed grid

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _seed_grid(height: int, width: int, k: int) -> tuple[int, int]:
    """Number of seed rows/cols; ny*nx approximates k and never exceeds ~1.5k."""
    ny = max(1, min(height, _round_half_up(math.sqrt(k * height / width))))
    nx = max(1, min(width, _round_half_up(k / ny)))
    ny = max(1, min(height, _round_half_up(k / nx)))
    return ny, nx


def _initial_centers(
    feats: np.ndarray, ny: int, nx: int, perturb: bool
) -> np.ndarray:
    """Centers as (n, F+2) rows of [color..., y, x]; seeds sit at cell centers."""
    H, W, F = feats.shape
    ys = (np.arange(ny) + 0.5) * (H / ny) - 0.5
    xs = (np.arange(nx) + 0.5) * (W / nx) - 0.5
    centers = np.empty((ny * nx, F + 2), dtype=np.float64)
    if perturb:
        gy = np.empty_like(feats)
        gx = np.empty_like(feats)
        gy[1:-1] = feats[2:] - feats[:-2]
        gy[0] = feats[min(1, H - 1)] - feats[0]
        gy[-1] = feats[-1] - feats[max(H - 2, 0)]
        gx[:, 1:-1] = feats[:, 2:] - feats[:, :-2]
        gx[:, 0] = feats[:, min(1, W - 1)] - feats[:, 0]
        gx[:, -1] = feats[:, -1] - feats[:, max(W - 2, 0)]
        grad = (gy ** 2).sum(-1) + (gx ** 2).sum(-1)
    i = 0
    for y in ys:
        ry = min(H - 1, max(0, _round_half_up(y)))
        for x in xs:
            rx = min(W - 1, max(0, _round_half_up(x)))
            cy, cx = float(y), float(x)
            py, px = ry, rx
            if perturb:
                # move only on strict improvement over the seed's own pixel,
                # scanning the 3x3 neighborhood in row-major order; constant
                # images therefore keep their symmetric seed grid
                best = grad[ry, rx]
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        qy, qx = ry + dy, rx + dx
                        if 0 <= qy < H and 0 <= qx < W and grad[qy, qx] < best:
                            best = grad[qy, qx]
                            py, px = qy, qx
                if (py, px) != (ry, rx):
                    cy, cx = float(py), float(px)
            centers[i, :F] = feats[py, px]
            centers[i, F] = cy
            centers[i, F + 1] = cx
            i += 1
    return centers


# ---------------------------------------------------------------------------
# core iteration

def slic_segment_with_energy(
    img: ImageTensor, params: SlicParams
) -> tuple[SegmentationMap, np.ndarray]:
    """Run SLIC and also return the per-iteration energy trace.

    Energy is the sum over pixels of the squared combined distance
    d_color^2 + (m/S)^2 * d_xy^2 to the assigned centroid, recorded after each
    assignment sweep. Keeping the current centroid as an assignment candidate
    and updating centroids to cluster means make the trace non-increasing.
    """
    feats = _color_features(img.data)
    H, W, F = feats.shape
    k = params.target_segments
    ny, nx = _seed_grid(H, W, k)
    centers = _initial_centers(feats, ny, nx, params.perturb_seeds)
    n_seeds = centers.shape[0]

    S = math.sqrt(H * W / k)
    w2 = (params.compactness / S) ** 2
    half_y = int(math.ceil(2.0 * max(H / ny, S)))
    half_x = int(math.ceil(2.0 * max(W / nx, S)))

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    labels = np.full((H, W), -1, dtype=np.int32)
    energies: list[float] = []

    for it in range(params.max_iters):
        if it == 0:
            d_best = np.full((H, W), np.inf)
            new_labels = np.full((H, W), -1, dtype=np.int32)
        else:
            # seed with the current assignment so a pixel can always keep
            # its centroid; required for the energy monotonicity guarantee
            cur = centers[labels.ravel()]
            d_cur = ((feats.reshape(-1, F) - cur[:, :F]) ** 2).sum(-1)
            d_cur += w2 * ((yy.ravel() - cur[:, F]) ** 2 + (xx.ravel() - cur[:, F + 1]) ** 2)
            d_best = d_cur.reshape(H, W)
            new_labels = labels.copy()

        for ci in range(n_seeds):
            cy, cx = centers[ci, F], centers[ci, F + 1]
            r0 = max(0, int(math.floor(cy)) - half_y)
            r1 = min(H, int(math.ceil(cy)) + half_y + 1)
            c0 = max(0, int(math.floor(cx)) - half_x)
            c1 = min(W, int(math.ceil(cx)) + half_x + 1)
            if r0 >= r1 or c0 >= c1:
                continue
            win = (slice(r0, r1), slice(c0, c1))
            d2 = ((feats[win] - centers[ci, :F]) ** 2).sum(-1)
            d2 = d2 + w2 * ((yy[win] - cy) ** 2 + (xx[win] - cx) ** 2)
            cur_d = d_best[win]
            cur_l = new_labels[win]
            upd = (d2 < cur_d) | ((d2 == cur_d) & (ci < cur_l))
            cur_d[upd] = d2[upd]
            cur_l[upd] = ci
            d_best[win] = cur_d
            new_labels[win] = cur_l

        missing = new_labels < 0
        if missing.any():
            # windows missed these pixels: global nearest centroid
            fy, fx = np.nonzero(missing)
            fd = ((feats[fy, fx][:, None, :] - centers[None, :, :F]) ** 2).sum(-1)
            fd += w2 * (
                (fy[:, None] - centers[None, :, F]) ** 2
                + (fx[:, None] - centers[None, :, F + 1]) ** 2
            )
            new_labels[fy, fx] = np.argmin(fd, axis=1).astype(np.int32)
            d_best[fy, fx] = fd[np.arange(len(fy)), new_labels[fy, fx]]

        energies.append(float(d_best.sum()))
        converged = it > 0 and np.array_equal(new_labels, labels)
        labels = new_labels
        if converged:
            break

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n_seeds).astype(np.float64)
        nonempty = counts > 0
        upd_centers = centers.copy()
        for f in range(F):
            s = np.bincount(flat, weights=feats[..., f].ravel(), minlength=n_seeds)
            upd_centers[nonempty, f] = s[nonempty] / counts[nonempty]
        sy = np.bincount(flat, weights=yy.ravel(), minlength=n_seeds)
        sx = np.bincount(flat, weights=xx.ravel(), minlength=n_seeds)
        upd_centers[nonempty, F] = sy[nonempty] / counts[nonempty]
        upd_centers[nonempty, F + 1] = sx[nonempty] / counts[nonempty]
        centers = upd_centers

    min_size = max(1, int(params.min_size_factor * (H * W / n_seeds)))
    seg = enforce_connectivity(labels, min_size)
    seg = _cap_segment_count(seg, 2 * k)
    return seg, np.asarray(energies)


def slic_segment(img: ImageTensor, params: SlicParams | None = None) -> SegmentationMap:
    """Segment an image into super-pixels; see slic_segment_with_energy."""
    seg, _ = slic_segment_with_energy(img, params or SlicParams())
    return seg


# ---------------------------------------------------------------------------
# connectivity post-processing

def _components(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of equal raw labels, ids dense in scan order."""
    H, W = labels.shape
    comp = np.full((H, W), -1, dtype=np.int32)
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    next_id = 0
    for value in np.unique(labels):
        mask = labels == value
        lab, n = ndimage.label(mask, structure=structure)
        comp[mask] = lab[mask] + next_id - 1
        next_id += n
    # renumber components by first pixel in scan order
    flat = comp.ravel()
    first = np.full(next_id, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size))
    order = np.argsort(first, kind="stable")
    remap = np.empty(next_id, dtype=np.int32)
    remap[order] = np.arange(next_id, dtype=np.int32)
    return remap[comp], next_id


def _adjacency(comp: np.ndarray, n: int) -> list[set[int]]:
    adj: list[set[int]] = [set() for _ in range(n)]
    pairs = np.concatenate(
        [
            np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], axis=1),
            np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], axis=1),
        ]
    )
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    for a, b in np.unique(pairs, axis=0):
        adj[a].add(int(b))
        adj[b].add(int(a))
    return adj


def _merge_components(
    comp: np.ndarray, n: int, should_merge, stop_when
) -> np.ndarray:
    """Generic smallest-first merge loop over the component graph.

    `should_merge(size)` selects merge candidates, `stop_when(count)` ends the
    loop early. Candidates merge into their largest adjacent component
    (ties: smallest id), deterministically.
    """
    sizes = np.bincount(comp.ravel(), minlength=n).astype(np.int64)
    adj = _adjacency(comp, n)
    parent = np.arange(n, dtype=np.int32)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    alive = set(range(n))
    while not stop_when(len(alive)):
        candidates = [c for c in alive if should_merge(sizes[c]) and adj[c]]
        if not candidates:
            break
        c = min(candidates, key=lambda i: (sizes[i], i))
        target = min(adj[c], key=lambda i: (-sizes[i], i))
        parent[c] = target
        sizes[target] += sizes[c]
        for nb in adj[c]:
            if nb == target:
                continue
            adj[nb].discard(c)
            adj[nb].add(target)
            adj[target].add(nb)
        adj[target].discard(c)
        adj[c] = set()
        alive.discard(c)

    roots = np.array([find(i) for i in range(n)], dtype=np.int32)
    return roots[comp]


def _relabel_dense(labels: np.ndarray) -> SegmentationMap:
    """Dense relabel in scan order of each region's first pixel."""
    flat = labels.ravel()
    uniq, inverse = np.unique(flat, return_inverse=True)
    first = np.full(uniq.size, flat.size, dtype=np.int64)
    np.minimum.at(first, inverse, np.arange(flat.size))
    order = np.argsort(first, kind="stable")
    remap = np.empty(uniq.size, dtype=np.int32)
    remap[order] = np.arange(uniq.size, dtype=np.int32)
    dense = remap[inverse].reshape(labels.shape)
    return SegmentationMap(labels=dense, num_segments=uniq.size)


def enforce_connectivity(raw_labels: np.ndarray, min_size: int) -> SegmentationMap:
    """Split disconnected labels, absorb fragments below `min_size`, relabel.

    Each output segment is 4-connected; fragments merge into their largest
    adjacent segment. Already-connected inputs come back unchanged up to
    dense relabeling.
    """
    raw_labels = np.ascontiguousarray(raw_labels, dtype=np.int32)
    comp, n = _components(raw_labels)
    merged = _merge_components(
        comp, n, should_merge=lambda size: size < min_size, stop_when=lambda count: count <= 1
    )
    return _relabel_dense(merged)


def _cap_segment_count(seg: SegmentationMap, max_count: int) -> SegmentationMap:
    """Merge smallest segments into neighbors until count <= max_count."""
    if seg.num_segments <= max_count:
        return seg
    merged = _merge_components(
        seg.labels,
        seg.num_segments,
        should_merge=lambda size: True,
        stop_when=lambda count: count <= max_count,
    )
    return _relabel_dense(merged)


def grid_segmentation(height: int, width: int, cells_y: int, cells_x: int) -> SegmentationMap:
    """A rectangular block partition; cheap stand-in for SLIC on synthetic data."""
    ys = np.minimum((np.arange(height) * cells_y) // height, cells_y - 1)
    xs = np.minimum((np.arange(width) * cells_x) // width, cells_x - 1)
    labels = (ys[:, None] * cells_x + xs[None, :]).astype(np.int32)
    return SegmentationMap(labels=labels, num_segments=cells_y * cells_x)
