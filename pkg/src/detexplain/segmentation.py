"""Superpixel segmentation in LAB space.

The segmenter is a SLIC-style k-means over the joint feature vector
``(L, a, b, y*m/S, x*m/S)`` where ``m`` is the compactness and
``S = sqrt(H*W / n_segments)`` the seeding grid interval. Connectivity is
enforced afterwards: every fragment of a cluster except its largest
connected component is merged into the largest adjacent segment. The whole
procedure is deterministic; the ``seed`` knob is carried in the parameters
for interface stability but the reference implementation draws no random
numbers.

Segments flagged ineligible by :func:`filter_segments` (too small or
near-black) keep their labels; they are only excluded from downstream
perturbation candidates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import validate_image

_SLIC_ITERATIONS = 10

# D65 reference white in XYZ, 2-degree observer.
_D65 = np.array([0.95047, 1.0, 1.08883])

# Linear RGB -> XYZ under sRGB primaries.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)


@dataclass(frozen=True)
class SlicParams:
    """Knobs for the superpixel segmenter."""

    n_segments: int = 200
    compactness: float = 20.0
    smoothing_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_segments < 2:
            raise ValueError(f"n_segments must be >= 2, got {self.n_segments}")
        if self.compactness <= 0:
            raise ValueError(f"compactness must be > 0, got {self.compactness}")
        if self.smoothing_sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.smoothing_sigma}")


@dataclass(frozen=True)
class SegmentMap:
    """Per-pixel segment labels plus per-segment bookkeeping.

    Labels are contiguous ``0..n-1`` and cover every pixel. ``eligible``
    starts all-true and is narrowed by :func:`filter_segments`.
    """

    labels: np.ndarray
    areas: np.ndarray
    mean_lab: np.ndarray
    eligible: np.ndarray

    def __post_init__(self) -> None:
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        object.__setattr__(self, "labels", labels)
        n = len(self.areas)
        if labels.ndim != 2:
            raise ValueError("labels must be a 2-D array")
        if labels.min() != 0 or labels.max() != n - 1:
            raise ValueError("labels must be contiguous 0..n-1")
        counts = np.bincount(labels.ravel(), minlength=n)
        if (counts == 0).any():
            raise ValueError("every label must cover at least one pixel")
        if not np.array_equal(counts, self.areas):
            raise ValueError("areas inconsistent with labels")
        if len(self.eligible) != n or self.mean_lab.shape != (n, 3):
            raise ValueError("per-segment arrays must have one row per label")

    @property
    def n(self) -> int:
        return len(self.areas)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def segment_mask(self, segment_id: int) -> np.ndarray:
        return self.labels == segment_id

    def eligible_ids(self) -> np.ndarray:
        return np.flatnonzero(self.eligible)

    def save(self, path_prefix: str | Path) -> tuple[Path, Path]:
        """Write labels as a 16-bit PNG plus a JSON sidecar; returns paths."""
        prefix = Path(path_prefix)
        if self.n > 0xFFFF:
            raise ValueError("cannot encode more than 65535 segments as 16-bit PNG")
        png_path = prefix.with_suffix(".png")
        json_path = prefix.with_suffix(".json")
        Image.fromarray(self.labels.astype(np.uint16)).save(png_path)
        sidecar = {
            "version": 1,
            "n": self.n,
            "shape": [self.height, self.width],
            "areas": self.areas.tolist(),
            "eligible": self.eligible.tolist(),
            "mean_lab": [[float(v) for v in row] for row in self.mean_lab],
        }
        json_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
        return png_path, json_path

    @classmethod
    def load(cls, path_prefix: str | Path) -> "SegmentMap":
        prefix = Path(path_prefix)
        labels = np.asarray(Image.open(prefix.with_suffix(".png")), dtype=np.int32)
        sidecar = json.loads(prefix.with_suffix(".json").read_text())
        return cls(
            labels=labels,
            areas=np.asarray(sidecar["areas"], dtype=np.int64),
            mean_lab=np.asarray(sidecar["mean_lab"], dtype=np.float64),
            eligible=np.asarray(sidecar["eligible"], dtype=bool),
        )


def to_lab(image: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] -> CIELAB (D65): L in [0, 100], a/b signed."""
    rgb = validate_image(image)
    linear = np.where(
        rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4
    )
    xyz = linear @ _RGB_TO_XYZ.T
    t = xyz / _D65
    eps = (6.0 / 29.0) ** 3
    f = np.where(t > eps, np.cbrt(t), t / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _seed_grid(height: int, width: int, n_segments: int) -> tuple[int, int]:
    """Rows x cols of initial cluster centers, as close to n as the aspect allows."""
    rows = max(1, round(np.sqrt(n_segments * height / width)))
    cols = max(1, round(n_segments / rows))
    return rows, cols

def _initial_centers(features: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Grid seeds nudged to the lowest-gradient pixel in a 3x3 window."""
    height, width = features.shape[:2]
    grad = np.zeros((height, width))
    lum = features[..., 0]
    grad[1:-1, 1:-1] = np.abs(lum[2:, 1:-1] - lum[:-2, 1:-1]) + np.abs(
        lum[1:-1, 2:] - lum[1:-1, :-2]
    )
    grad[0, :] = grad[-1, :] = grad[:, 0] = grad[:, -1] = np.inf
    centers = []
    for r in range(rows):
        for c in range(cols):
            y = int((r + 0.5) * height / rows)
            x = int((c + 0.5) * width / cols)
            y = min(max(y, 0), height - 1)
            x = min(max(x, 0), width - 1)
            y0, y1 = max(0, y - 1), min(height, y + 2)
            x0, x1 = max(0, x - 1), min(width, x + 2)
            window = grad[y0:y1, x0:x1]
            dy, dx = np.unravel_index(np.argmin(window), window.shape)
            centers.append(features[y0 + dy, x0 + dx])
    return np.asarray(centers)


def _assign_pixels(
    features: np.ndarray, centers: np.ndarray, window: int, scale: float
) -> np.ndarray:
    """Nearest-center assignment restricted to each center's spatial window."""
    height, width = features.shape[:2]
    flat = features.reshape(-1, 5)
    best_dist = np.full(height * width, np.inf)
    assignment = np.full(height * width, -1, dtype=np.int32)
    for k, center in enumerate(centers):
        yc = int(np.clip(round(center[3] / scale), 0, height - 1))
        xc = int(np.clip(round(center[4] / scale), 0, width - 1))
        y0, y1 = max(0, yc - window), min(height, yc + window + 1)
        x0, x1 = max(0, xc - window), min(width, xc + window + 1)
        block = features[y0:y1, x0:x1].reshape(-1, 5)
        dist = ((block - center) ** 2).sum(axis=1)
        idx = (
            np.arange(y0, y1)[:, None] * width + np.arange(x0, x1)[None, :]
        ).ravel()
        better = dist < best_dist[idx]
        sel = idx[better]
        best_dist[sel] = dist[better]
        assignment[sel] = k
    unassigned = assignment < 0
    if unassigned.any():
        dist_all = (
            (flat[unassigned][:, None, :] - centers[None, :, :]) ** 2
        ).sum(axis=2)
        assignment[unassigned] = np.argmin(dist_all, axis=1)
    return assignment.reshape(height, width)


def _enforce_connectivity(assignment: np.ndarray) -> np.ndarray:
    """Split clusters into connected components and merge orphan fragments.

    The largest component of each cluster keeps it; every other fragment is
    merged into the largest 4-adjacent non-orphan segment, iterating until
    no orphan remains. Final labels are renumbered 0..n-1 in row-major
    first-pixel order.
    """
    components = np.zeros_like(assignment, dtype=np.int32)
    next_label = 0
    for cluster in np.unique(assignment):
        mask = assignment == cluster
        lab, count = ndimage.label(mask)
        components[mask] = lab[mask] + next_label
        next_label += count
    components -= 1  # ndimage labels start at 1

    areas = np.bincount(components.ravel())
    uniq, first_pos = np.unique(components.ravel(), return_index=True)
    comp_cluster = np.full(len(areas), -1, dtype=np.int64)
    comp_cluster[uniq] = assignment.ravel()[first_pos]

    primaries: dict[int, int] = {}
    for comp in range(len(areas)):
        cluster = int(comp_cluster[comp])
        cur = primaries.get(cluster)
        if cur is None or areas[comp] > areas[cur]:
            primaries[cluster] = comp
    primary_set = set(primaries.values())

    labels = components.copy()
    orphans = sorted(set(range(len(areas))) - primary_set)
    merged_area = {c: int(areas[c]) for c in range(len(areas))}
    while orphans:
        deferred = []
        for comp in orphans:
            mask = labels == comp
            neighbors = _adjacent_labels(labels, mask)
            neighbors.discard(comp)
            pool = [n for n in neighbors if n not in orphans]
            if not pool:
                deferred.append(comp)
                continue
            best = max(pool, key=lambda n: (merged_area[n], -n))
            labels[mask] = best
            merged_area[best] += merged_area.pop(comp)
        if len(deferred) == len(orphans):  # isolated ring of orphans; absorb anyway
            comp = deferred[0]
            mask = labels == comp
            neighbors = sorted(_adjacent_labels(labels, mask) - {comp})
            if not neighbors:
                break
            best = max(neighbors, key=lambda n: (merged_area[n], -n))
            labels[mask] = best
            merged_area[best] += merged_area.pop(comp)
            deferred = deferred[1:]
        orphans = deferred

    flat = labels.ravel()
    uniq, first_pos = np.unique(flat, return_index=True)
    order = np.argsort(first_pos)
    remap = np.zeros(int(flat.max()) + 1, dtype=np.int32)
    for new_id, old_id in enumerate(uniq[order]):
        remap[old_id] = new_id
    return remap[labels]


def _adjacent_labels(labels: np.ndarray, mask: np.ndarray) -> set[int]:
    """Labels 4-adjacent to the masked region."""
    found: set[int] = set()
    rows, cols = np.nonzero(mask)
    height, width = labels.shape
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr = rows + dy
        cc = cols + dx
        ok = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        found.update(np.unique(labels[rr[ok], cc[ok]]).tolist())
    return found


def slic_segments(lab_image: np.ndarray, params: SlicParams) -> SegmentMap:
    """Segment a LAB image into superpixels (see module docstring)."""
    lab = np.asarray(lab_image, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) LAB image, got {lab.shape}")
    height, width = lab.shape[:2]
    if params.smoothing_sigma > 0:
        lab = ndimage.gaussian_filter(
            lab, sigma=(params.smoothing_sigma, params.smoothing_sigma, 0)
        )
    interval = np.sqrt(height * width / params.n_segments)
    scale = params.compactness / interval
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    features = np.concatenate(
        [lab, (ys * scale)[..., None], (xs * scale)[..., None]], axis=2
    )

    rows, cols = _seed_grid(height, width, params.n_segments)
    centers = _initial_centers(features, rows, cols)
    window = int(np.ceil(2 * interval))
    assignment = None
    for _ in range(_SLIC_ITERATIONS):
        assignment = _assign_pixels(features, centers, window, scale)
        flat = features.reshape(-1, 5)
        sums = np.zeros((len(centers), 5))
        counts = np.bincount(assignment.ravel(), minlength=len(centers))
        for dim in range(5):
            sums[:, dim] = np.bincount(
                assignment.ravel(), weights=flat[:, dim], minlength=len(centers)
            )
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]

    labels = _enforce_connectivity(assignment)
    return _build_segment_map(labels, lab)


def _build_segment_map(labels: np.ndarray, lab: np.ndarray) -> SegmentMap:
    n = int(labels.max()) + 1
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n).astype(np.int64)
    mean_lab = np.zeros((n, 3))
    for dim in range(3):
        mean_lab[:, dim] = (
            np.bincount(flat, weights=lab[..., dim].ravel(), minlength=n) / areas
        )
    return SegmentMap(
        labels=labels,
        areas=areas,
        mean_lab=mean_lab,
        eligible=np.ones(n, dtype=bool),
    )


def filter_segments(
    segmap: SegmentMap,
    min_area_fraction: float = 5e-4,
    black_lightness_threshold: float = 5.0,
) -> SegmentMap:
    """Mark tiny or near-black segments ineligible; labels are untouched."""
    if min_area_fraction < 0 or black_lightness_threshold < 0:
        raise ValueError("thresholds must be non-negative")
    min_area = min_area_fraction * segmap.height * segmap.width
    eligible = (segmap.areas >= min_area) & (
        segmap.mean_lab[:, 0] >= black_lightness_threshold
    )
    return replace(segmap, eligible=eligible)
