"""Region extraction and evaluation metrics for labeled volumes.

Labels follow the challenge convention: 0 background, 1 necrotic and
non-enhancing core, 2 peritumoral edema, 4 GD-enhancing tumor.  The three
nested evaluation regions are ET (label 4), TC (labels 1 and 4), and WT
(labels 1, 2 and 4).

Metrics: Dice = |P1 n T1| / ((|P1| + |T1|) / 2), sensitivity, specificity,
and the 95th-percentile symmetric Hausdorff surface distance in physical
units.  Conventions for empty masks: both empty scores 1 for Dice and for a
ratio whose reference set is empty and matched, otherwise 0; Hausdorff95 is
undefined (NaN, flagged) when either mask is empty.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InputError, ShapeError

LEGAL_LABELS = (0, 1, 2, 4)
REGIONS = ("ET", "WT", "TC")
REGION_LABELS = {"ET": (4,), "WT": (1, 2, 4), "TC": (1, 4)}

# 6-connectivity structuring element for surface extraction
_SIX_CONN = ndimage.generate_binary_structure(3, 1)


@dataclass
class LabelVolume:
    """Integer voxel labels in {0, 1, 2, 4} with a physical spacing."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ShapeError(f"label volume must have rank 3, got {v.ndim}")
        if not np.issubdtype(v.dtype, np.integer):
            rounded = np.rint(v)
            if not np.array_equal(rounded, v):
                raise InputError("label volume holds non-integer values")
            v = rounded.astype(np.int64)
        else:
            v = v.astype(np.int64)
        legal = np.isin(v, LEGAL_LABELS)
        if not legal.all():
            idx = tuple(int(i) for i in np.argwhere(~legal)[0])
            raise InputError(f"illegal label {int(v[idx])} at voxel {idx}")
        v.flags.writeable = False
        self.voxels = v
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InputError(f"spacing must be three positive steps, got {self.spacing}")

    @property
    def shape(self) -> tuple:
        return self.voxels.shape


@dataclass
class RegionMask:
    """A binary region derived from a LabelVolume."""

    region: str
    mask: np.ndarray

    def __post_init__(self):
        if self.region not in REGIONS:
            raise InputError(f"unknown region {self.region!r}, expected one of {REGIONS}")
        m = np.asarray(self.mask).astype(bool)
        m.flags.writeable = False
        self.mask = m


def region_mask(labels: LabelVolume, region: str) -> RegionMask:
    """Binary mask of one evaluation region."""
    if region not in REGION_LABELS:
        raise InputError(f"unknown region {region!r}, expected one of {REGIONS}")
    return RegionMask(region=region, mask=np.isin(labels.voxels, REGION_LABELS[region]))


def _paired(p: RegionMask, t: RegionMask) -> tuple[np.ndarray, np.ndarray]:
    if p.mask.shape != t.mask.shape:
        raise ShapeError(f"mask extents differ: {p.mask.shape} vs {t.mask.shape}")
    return p.mask, t.mask


def dice(p: RegionMask, t: RegionMask) -> float:
    pm, tm = _paired(p, t)
    p1 = int(np.count_nonzero(pm))
    t1 = int(np.count_nonzero(tm))
    if p1 == 0 and t1 == 0:
        return 1.0
    if p1 == 0 or t1 == 0:
        return 0.0
    overlap = int(np.count_nonzero(pm & tm))
    return overlap / ((p1 + t1) / 2.0)


def sensitivity(p: RegionMask, t: RegionMask) -> float:
    pm, tm = _paired(p, t)
    t1 = int(np.count_nonzero(tm))
    if t1 == 0:
        return 1.0 if not pm.any() else 0.0
    return int(np.count_nonzero(pm & tm)) / t1


def specificity(p: RegionMask, t: RegionMask) -> float:
    pm, tm = _paired(p, t)
    t0 = int(tm.size - np.count_nonzero(tm))
    if t0 == 0:
        return 1.0 if pm.all() else 0.0
    return int(np.count_nonzero(~pm & ~tm)) / t0


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with a 6-neighbor outside it; volume borders count
    as outside."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros_like(m)
    interior = ndimage.binary_erosion(m, structure=_SIX_CONN, border_value=0)
    return m & ~interior


def hausdorff95(p: RegionMask, t: RegionMask, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th-percentile symmetric surface distance; NaN when a mask is empty.

    Each directed distance set is reduced by the nearest-rank 95th percentile;
    the result is the larger of the two directions, in physical units.
    """
    pm, tm = _paired(p, t)
    if not pm.any() or not tm.any():
        return math.nan
    ps = surface_mask(pm)
    ts = surface_mask(tm)
    sp = tuple(float(s) for s in spacing)

    def directed(src: np.ndarray, dst: np.ndarray) -> float:
        # exact Euclidean distance to the nearest dst-surface voxel, read at
        # the src-surface voxels
        dt = ndimage.distance_transform_edt(~dst, sampling=sp)
        vals = np.sort(dt[src])
        rank = max(1, math.ceil(0.95 * vals.size))
        return float(vals[rank - 1])

    return max(directed(ps, ts), directed(ts, ps))


@dataclass
class MetricRow:
    """One case, one region: the four metrics plus the voxel counts."""

    case_id: str
    region: str
    dice: float
    sensitivity: float
    specificity: float
    hausdorff95: float
    hausdorff_defined: bool
    p1: int
    t1: int
    p0: int
    t0: int

    def as_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "region": self.region,
            "dice": self.dice,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "hausdorff95": None if not self.hausdorff_defined else self.hausdorff95,
            "hausdorff_defined": self.hausdorff_defined,
            "p1": self.p1,
            "t1": self.t1,
            "p0": self.p0,
            "t0": self.t0,
        }


CSV_COLUMNS = (
    "case_id",
    "region",
    "dice",
    "sensitivity",
    "specificity",
    "hausdorff95",
    "p1",
    "t1",
    "p0",
    "t0",
)


@dataclass
class MetricReport:
    """Rows for a set of cases, serializable to CSV and JSON."""

    rows: list = field(default_factory=list)

    def append(self, row: MetricRow) -> None:
        self.rows.append(row)

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow(
                    [
                        r.case_id,
                        r.region,
                        f"{r.dice:.9f}",
                        f"{r.sensitivity:.9f}",
                        f"{r.specificity:.9f}",
                        f"{r.hausdorff95:.9f}" if r.hausdorff_defined else "nan",
                        r.p1,
                        r.t1,
                        r.p0,
                        r.t0,
                    ]
                )

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump([r.as_dict() for r in self.rows], f, indent=2)
            f.write("\n")

    def mean_dice(self) -> dict:
        """Mean Dice per region over all rows."""
        out = {}
        for region in REGIONS:
            vals = [r.dice for r in self.rows if r.region == region]
            if vals:
                out[region] = float(np.mean(vals))
        return out


def evaluate_case(pred: LabelVolume, truth: LabelVolume, case_id: str) -> list[MetricRow]:
    """All four metrics for the three regions of one case."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} extents differ")
    rows = []
    for region in REGIONS:
        pm = region_mask(pred, region)
        tm = region_mask(truth, region)
        hd = hausdorff95(pm, tm, spacing=truth.spacing)
        defined = not math.isnan(hd)
        rows.append(
            MetricRow(
                case_id=case_id,
                region=region,
                dice=dice(pm, tm),
                sensitivity=sensitivity(pm, tm),
                specificity=specificity(pm, tm),
                hausdorff95=hd,
                hausdorff_defined=defined,
                p1=int(np.count_nonzero(pm.mask)),
                t1=int(np.count_nonzero(tm.mask)),
                p0=int(pm.mask.size - np.count_nonzero(pm.mask)),
                t0=int(tm.mask.size - np.count_nonzero(tm.mask)),
            )
        )
    return rows
