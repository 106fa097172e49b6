"""Evaluation metrics: per-class Dice, 95th-percentile Hausdorff distance,
region mapping (whole tumor / tumor core / enhancing tumor style) and case
reports.

Conventions, recorded in every report:
  - Dice of two empty masks is 1.0.
  - hd95 of two empty masks is 0.0; exactly one empty mask yields the
    volume-diagonal sentinel (spacing-weighted).
  - Report means skip sentinel entries; sentinel regions are listed.

Surfaces are foreground voxels with at least one 6-neighbour that is
background or outside the array. Directed nearest-surface distances are
pooled from both directions and the 95th percentile is taken with linear
interpolation. Distances are spacing-weighted Euclidean, in millimeters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MappingError, ShapeError
from .volume import LabelVolume


@dataclass
class BinaryMask:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=bool)
        if self.data.ndim != 3:
            raise ShapeError(f"mask must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)


@dataclass(frozen=True)
class RegionSpec:
    """Ordered named regions, each the union of a set of raw label ids."""

    regions: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        for name, ids in self.regions:
            if not ids:
                raise MappingError(f"region {name} has an empty label set")

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.regions]

    def labels_for(self, name: str) -> tuple[int, ...]:
        for n, ids in self.regions:
            if n == name:
                return ids
        raise MappingError(f"unknown region {name}")

    def covered_labels(self) -> set[int]:
        out = {0}
        for _, ids in self.regions:
            out.update(ids)
        return out


def brats_region_spec(ncr: int = 1, ed: int = 2, et: int = 3) -> RegionSpec:
    """Default nested regions: WT = {NCR, ED, ET}, TC = {NCR, ET}, ET = {ET}."""
    return RegionSpec(
        (("WT", (ncr, ed, et)), ("ET", (et,)), ("TC", (ncr, et)))
    )


def perclass_region_spec(num_classes: int) -> RegionSpec:
    """One region per foreground class, for non-BraTS label sets."""
    return RegionSpec(tuple((f"class{c}", (c,)) for c in range(1, num_classes)))


def dice_score(a: BinaryMask, b: BinaryMask) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mask dims differ: {a.data.shape} vs {b.data.shape}")
    sa, sb = int(a.data.sum()), int(b.data.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a.data & b.data).sum()) / (sa + sb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """[n, 3] voxel coordinates of the 6-neighbourhood boundary."""
    fg = np.asarray(mask, dtype=bool)
    if not fg.any():
        return np.zeros((0, 3), dtype=np.int64)
    interior = np.ones_like(fg)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        shifted = np.zeros_like(fg)
        shifted[tuple(lo)] = fg[tuple(hi)]
        interior &= shifted
        shifted = np.zeros_like(fg)
        shifted[tuple(hi)] = fg[tuple(lo)]
        interior &= shifted
    boundary = fg & ~interior
    return np.argwhere(boundary)


def diagonal_sentinel(dims: tuple[int, int, int], spacing) -> float:
    return float(np.sqrt(sum((d * s) ** 2 for d, s in zip(dims, spacing))))


def _directed_sq(src: np.ndarray, dst: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Per src point, squared distance to the nearest dst point (float64)."""
    out = np.empty(len(src), dtype=np.float64)
    for lo in range(0, len(src), chunk):
        block = src[lo : lo + chunk]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
        out[lo : lo + chunk] = d2.min(axis=1)
    return out


def hd95(a: BinaryMask, b: BinaryMask) -> float:
    """95th percentile of pooled directed surface distances, in mm."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mask dims differ: {a.data.shape} vs {b.data.shape}")
    if a.spacing != b.spacing:
        raise ShapeError(f"mask spacings differ: {a.spacing} vs {b.spacing}")
    ea, eb = not a.data.any(), not b.data.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return diagonal_sentinel(a.data.shape, a.spacing)
    sp = np.asarray(a.spacing, dtype=np.float64)
    pa = surface_voxels(a.data) * sp
    pb = surface_voxels(b.data) * sp
    pooled = np.concatenate([_directed_sq(pa, pb), _directed_sq(pb, pa)])
    return float(np.percentile(np.sqrt(pooled), 95.0))


def brats_regions(labels: LabelVolume, spec: RegionSpec, spacing=(1.0, 1.0, 1.0)) -> dict[str, BinaryMask]:
    """Region masks as unions of member-label voxels."""
    present = set(int(v) for v in np.unique(labels.data))
    unknown = present - spec.covered_labels()
    if unknown:
        raise MappingError(f"label ids {sorted(unknown)} not covered by region spec")
    out = {}
    for name, ids in spec.regions:
        out[name] = BinaryMask(np.isin(labels.data, ids), spacing)
    return out


@dataclass
class CaseReport:
    """Per-region Dice/HD95 for one case, plus means.

    `hd95_mean` averages non-sentinel entries only (all-sentinel cases keep
    the sentinel value); `sentinel_regions` lists where the one-empty-mask
    sentinel fired. Conventions echoed in `conventions`.
    """

    case_id: str
    dice: dict[str, float]
    hd95: dict[str, float]
    dice_mean: float
    hd95_mean: float
    sentinel: float
    sentinel_regions: list[str] = field(default_factory=list)
    conventions: str = (
        "dice(empty,empty)=1; hd95(empty,empty)=0; one-empty=diagonal sentinel; "
        "hd95 mean over non-sentinel regions"
    )

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    def csv_header(self) -> str:
        cols = ["case", "hd95_avg", "dsc_avg"]
        for name in self.dice:
            cols += [f"hd95_{name}", f"dsc_{name}"]
        return ",".join(cols)

    def csv_row(self) -> str:
        cells = [self.case_id, str(self.hd95_mean), str(self.dice_mean)]
        for name in self.dice:
            cells += [str(self.hd95[name]), str(self.dice[name])]
        return ",".join(cells)


def evaluate_case(
    pred: LabelVolume, gt: LabelVolume, spec: RegionSpec,
    spacing=(1.0, 1.0, 1.0), case_id: str = "case",
) -> CaseReport:
    if pred.dims != gt.dims:
        raise ShapeError(f"pred dims {pred.dims} != gt dims {gt.dims}")
    pm = brats_regions(pred, spec, spacing)
    gm = brats_regions(gt, spec, spacing)
    dice = {}
    dists = {}
    sentinel = diagonal_sentinel(gt.dims, spacing)
    sentinel_regions = []
    for name in spec.names:
        dice[name] = dice_score(pm[name], gm[name])
        d = hd95(pm[name], gm[name])
        dists[name] = d
        if d == sentinel and (pm[name].data.any() != gm[name].data.any()):
            sentinel_regions.append(name)
    clean = [v for k, v in dists.items() if k not in sentinel_regions]
    hd_mean = float(np.mean(clean)) if clean else sentinel
    return CaseReport(
        case_id=case_id,
        dice=dice,
        hd95=dists,
        dice_mean=float(np.mean(list(dice.values()))),
        hd95_mean=hd_mean,
        sentinel=sentinel,
        sentinel_regions=sentinel_regions,
    )
