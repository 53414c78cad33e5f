"""Case ingestion, intensity normalization, augmentation, and phantom synthesis.

A case holds four co-registered scalar volumes (t1, t1ce, t2, flair) and an
optional integer label volume.  All randomized operations draw from an
explicit generator so that (input, seed) fully determines the output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError, ParseError, ShapeError
from .metrics import LabelVolume
from .tensor import Tensor, load_array, save_array

MODALITY_NAMES = ("t1", "t1ce", "t2", "flair")
LABEL_FILE = "labels.bin"
MANIFEST_FILE = "case.json"

# Anisotropy band for phantom tumor ellipsoids; one factor per axis, shared by
# all nested surfaces of a tumor so the nesting survives the distortion.
_ANISO_LOW = 0.85
_ANISO_HIGH = 1.15

# Per-modality base intensity (t1, t1ce, t2, flair) for each tissue kind.
_BASE_INTENSITY = {
    "brain": (1.0, 1.0, 1.0, 1.0),
    2: (0.8, 0.9, 1.5, 1.6),
    4: (1.25, 1.6, 1.1, 1.15),
    1: (0.55, 0.6, 1.3, 1.2),
}


@dataclass
class CaseRecord:
    """One subject: four modality volumes plus optional labels."""

    case_id: str
    modalities: tuple
    labels: LabelVolume | None = None
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not isinstance(self.case_id, str) or not self.case_id:
            raise InputError("case_id must be a non-empty string")
        mods = tuple(self.modalities)
        if len(mods) != len(MODALITY_NAMES):
            raise InputError(
                f"a case needs {len(MODALITY_NAMES)} modalities, got {len(mods)}"
            )
        for name, m in zip(MODALITY_NAMES, mods):
            if not isinstance(m, Tensor):
                raise InputError(f"modality {name} must be a Tensor")
            if m.ndim != 3:
                raise ShapeError(f"modality {name} must have rank 3, got rank {m.ndim}")
        extents = mods[0].shape
        for name, m in zip(MODALITY_NAMES, mods):
            if m.shape != extents:
                raise ShapeError(
                    f"modality {name} has extents {m.shape}, expected {extents}"
                )
        self.modalities = mods
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InputError(f"spacing must be three positive steps, got {self.spacing}")
        if self.labels is not None:
            if self.labels.shape != extents:
                raise ShapeError(
                    f"labels have extents {self.labels.shape}, expected {extents}"
                )
            if self.labels.spacing != self.spacing:
                raise InputError(
                    f"label spacing {self.labels.spacing} differs from case spacing {self.spacing}"
                )

    @property
    def extents(self) -> tuple:
        return self.modalities[0].shape

    def modality_stack(self) -> np.ndarray:
        """The four volumes stacked on a leading channel axis, (4, D, H, W)."""
        return np.stack([m.numpy() for m in self.modalities])


@dataclass
class AugmentConfig:
    """Knobs for the randomized training-time transforms, applied in order:
    rotation, scale, mirror flips, intensity shift, elastic deformation."""

    rotation_degrees: float = 20.0
    scale_factor: float = 1.1
    scale_probability: float = 0.5
    flip_probability: float = 0.5
    intensity_shift: float = 0.1
    elastic_sigma: float = 10.0
    elastic_amplitude: float = 2.0
    crop_size: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        for label, p in (
            ("scale_probability", self.scale_probability),
            ("flip_probability", self.flip_probability),
        ):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{label} must lie in [0, 1], got {p}")
        if self.rotation_degrees < 0:
            raise ConfigError(f"rotation_degrees must be non-negative, got {self.rotation_degrees}")
        if self.scale_factor <= 0:
            raise ConfigError(f"scale_factor must be positive, got {self.scale_factor}")
        if self.intensity_shift < 0:
            raise ConfigError(f"intensity_shift must be non-negative, got {self.intensity_shift}")
        if self.elastic_sigma <= 0:
            raise ConfigError(f"elastic_sigma must be positive, got {self.elastic_sigma}")
        if self.elastic_amplitude < 0:
            raise ConfigError(f"elastic_amplitude must be non-negative, got {self.elastic_amplitude}")
        if self.crop_size is not None:
            size = tuple(int(s) for s in self.crop_size)
            if len(size) != 3 or any(s < 1 for s in size):
                raise ConfigError(f"crop_size must be three positive extents, got {self.crop_size}")
            self.crop_size = size


def normalize(case: CaseRecord) -> CaseRecord:
    """Zero-mean unit-variance over the nonzero voxels of each modality.

    Zero-intensity voxels are treated as outside the head and stay exactly 0.
    """
    out = []
    for name, m in zip(MODALITY_NAMES, case.modalities):
        v = m.numpy()
        mask = v != 0.0
        if not mask.any():
            raise InputError(f"modality {name} is entirely zero, nothing to normalize")
        fg = v[mask]
        res = np.zeros_like(v)
        res[mask] = (fg - fg.mean()) / max(float(fg.std()), 1e-8)
        out.append(Tensor(res))
    return CaseRecord(case.case_id, tuple(out), case.labels, case.spacing)


def _rotate(vol: np.ndarray, angle_deg: float, axis: int, order: int) -> np.ndarray:
    planes = {0: (1, 2), 1: (0, 2), 2: (0, 1)}
    return ndimage.rotate(
        vol, angle_deg, axes=planes[axis], reshape=False,
        order=order, mode="constant", cval=0.0, prefilter=False,
    )


def _scale(vol: np.ndarray, factor: float, order: int) -> np.ndarray:
    # Zoom about the volume center with the extents held fixed.
    center = (np.array(vol.shape, dtype=np.float64) - 1.0) / 2.0
    matrix = np.eye(3) / factor
    offset = center * (1.0 - 1.0 / factor)
    return ndimage.affine_transform(
        vol, matrix, offset=offset, order=order,
        mode="constant", cval=0.0, prefilter=False,
    )


def _elastic_field(shape: tuple, sigma: float, amplitude: float, rng) -> np.ndarray:
    # Smoothed white noise per axis, rescaled so its standard deviation is the
    # requested displacement amplitude in voxels.
    field = np.empty((3,) + shape)
    for a in range(3):
        smooth = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
        field[a] = smooth * (amplitude / max(float(smooth.std()), 1e-8))
    return field


def _warp(vol: np.ndarray, displacement: np.ndarray, order: int) -> np.ndarray:
    coords = np.indices(vol.shape, dtype=np.float64) + displacement
    return ndimage.map_coordinates(
        vol, coords, order=order, mode="constant", cval=0.0, prefilter=False
    )


def augment(case: CaseRecord, config: AugmentConfig, rng=None) -> CaseRecord:
    """One random draw of the training-time transform chain.

    Images resample trilinearly, labels by nearest neighbor, both through the
    same geometric map.  Draw order per call: rotation axis and angle, the
    scale coin, three flip coins, four intensity shifts, then the elastic
    noise field (drawn only when the amplitude is nonzero).  Inert stages are
    skipped entirely so an all-zero config is a bitwise identity.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    images = [m.numpy().copy() for m in case.modalities]
    labels = None if case.labels is None else case.labels.voxels.astype(np.float64)

    axis = int(rng.integers(3))
    angle = float(rng.uniform(-config.rotation_degrees, config.rotation_degrees))
    if config.rotation_degrees > 0.0:
        images = [_rotate(v, angle, axis, order=1) for v in images]
        if labels is not None:
            labels = _rotate(labels, angle, axis, order=0)

    coin = float(rng.random())
    if coin < config.scale_probability and config.scale_factor != 1.0:
        images = [_scale(v, config.scale_factor, order=1) for v in images]
        if labels is not None:
            labels = _scale(labels, config.scale_factor, order=0)

    flips = rng.random(3)
    for a in range(3):
        if flips[a] < config.flip_probability:
            images = [np.flip(v, axis=a) for v in images]
            if labels is not None:
                labels = np.flip(labels, axis=a)

    shifts = rng.uniform(-config.intensity_shift, config.intensity_shift, size=len(images))
    if config.intensity_shift > 0.0:
        images = [v + s for v, s in zip(images, shifts)]

    if config.elastic_amplitude > 0.0:
        field = _elastic_field(images[0].shape, config.elastic_sigma,
                               config.elastic_amplitude, rng)
        images = [_warp(v, field, order=1) for v in images]
        if labels is not None:
            labels = _warp(labels, field, order=0)

    new_labels = None
    if labels is not None:
        new_labels = LabelVolume(np.rint(labels).astype(np.int64), case.spacing)
    return CaseRecord(case.case_id, tuple(Tensor(v) for v in images),
                      new_labels, case.spacing)


def random_crop(case: CaseRecord, size, rng) -> CaseRecord:
    """Axis-aligned random window, the same for every modality and the labels.

    One start is drawn per axis in (depth, height, width) order.
    """
    size = tuple(int(s) for s in size)
    extents = case.extents
    if len(size) != 3 or any(s < 1 for s in size):
        raise ConfigError(f"crop size must be three positive extents, got {size}")
    if any(s > e for s, e in zip(size, extents)):
        raise ConfigError(f"crop size {size} exceeds the volume extents {extents}")
    starts = tuple(int(rng.integers(0, e - s + 1)) for s, e in zip(size, extents))
    window = tuple(slice(b, b + s) for b, s in zip(starts, size))
    mods = tuple(Tensor(np.ascontiguousarray(m.numpy()[window])) for m in case.modalities)
    labels = None
    if case.labels is not None:
        labels = LabelVolume(case.labels.voxels[window], case.spacing)
    return CaseRecord(case.case_id, mods, labels, case.spacing)


@dataclass
class PhantomSpec:
    """Geometry and noise for a synthetic labeled head volume.

    Each tumor is three nested ellipsoids: edema (label 2) around an
    enhancing rim (label 4) around a necrotic center (label 1).  The radius
    ranges must be strictly ordered so any draw nests.
    """

    extents: tuple = (24, 24, 24)
    tumor_count: int = 1
    edema_radius: tuple = (6.0, 8.0)
    core_radius: tuple = (3.5, 5.0)
    necrotic_radius: tuple = (1.5, 2.5)
    noise_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        if len(self.extents) != 3 or any(e < 8 for e in self.extents):
            raise ConfigError(f"extents must be three values of at least 8, got {self.extents}")
        if self.tumor_count < 0:
            raise ConfigError(f"tumor_count must be non-negative, got {self.tumor_count}")
        for label, r in (("edema_radius", self.edema_radius),
                         ("core_radius", self.core_radius),
                         ("necrotic_radius", self.necrotic_radius)):
            lo, hi = (float(r[0]), float(r[1]))
            if not 0 < lo <= hi:
                raise ConfigError(f"{label} must be an ordered positive range, got {r}")
        if not (self.necrotic_radius[1] < self.core_radius[0]
                and self.core_radius[1] < self.edema_radius[0]):
            raise ConfigError(
                "radius ranges must be strictly ordered: necrotic < core < edema"
            )
        if self.noise_level < 0:
            raise ConfigError(f"noise_level must be non-negative, got {self.noise_level}")
        brain = 0.45 * min(self.extents)
        reach = _ANISO_HIGH * self.edema_radius[1] + 1.0
        if reach > brain:
            raise ConfigError(
                f"edema radius up to {self.edema_radius[1]} does not fit inside "
                f"extents {self.extents}"
            )


def generate_phantom(spec: PhantomSpec, rng=None, case_id: str = "phantom") -> CaseRecord:
    """A labeled head phantom: an ellipsoidal head with nested tumor regions.

    Voxels outside the head are exactly zero in every modality.  Draw order
    per tumor: three radii, three anisotropy factors, three center offsets;
    then one noise block for all four modalities when noise_level is nonzero.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    shape = spec.extents
    coords = np.indices(shape, dtype=np.float64)
    center0 = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    brain_semi = 0.45 * np.array(shape, dtype=np.float64)

    def ellipsoid(center, semi):
        rel = (coords - center[:, None, None, None]) / semi[:, None, None, None]
        return (rel ** 2).sum(axis=0) <= 1.0

    brain = ellipsoid(center0, brain_semi)
    labels = np.zeros(shape, dtype=np.int64)
    for _ in range(spec.tumor_count):
        r_e = float(rng.uniform(*spec.edema_radius))
        r_c = float(rng.uniform(*spec.core_radius))
        r_n = float(rng.uniform(*spec.necrotic_radius))
        u = rng.uniform(_ANISO_LOW, _ANISO_HIGH, size=3)
        margin = np.maximum(brain_semi - _ANISO_HIGH * r_e - 1.0, 0.0)
        tc = center0 + rng.uniform(-1.0, 1.0, size=3) * margin
        labels[ellipsoid(tc, r_e * u) & brain] = 2
        labels[ellipsoid(tc, r_c * u) & brain] = 4
        labels[ellipsoid(tc, r_n * u) & brain] = 1

    noise = None
    if spec.noise_level > 0.0:
        noise = rng.standard_normal((len(MODALITY_NAMES),) + shape)
    images = []
    for i in range(len(MODALITY_NAMES)):
        vol = np.zeros(shape, dtype=np.float64)
        vol[brain] = _BASE_INTENSITY["brain"][i]
        for lab in (2, 4, 1):
            vol[labels == lab] = _BASE_INTENSITY[lab][i]
        if noise is not None:
            vol[brain] += noise[i][brain] * spec.noise_level
        images.append(Tensor(vol))
    return CaseRecord(case_id, tuple(images), LabelVolume(labels), spacing=(1.0, 1.0, 1.0))


def write_case(case: CaseRecord, path) -> Path:
    """Write a case directory: one container file per volume plus case.json."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for name, m in zip(MODALITY_NAMES, case.modalities):
        save_array(d / f"{name}.bin", m.numpy(), name=name)
    if case.labels is not None:
        save_array(d / LABEL_FILE, case.labels.voxels.astype(np.float64), name="labels")
    manifest = {
        "case_id": case.case_id,
        "extents": list(case.extents),
        "spacing": list(case.spacing),
        "has_labels": case.labels is not None,
    }
    (d / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def read_case(path) -> CaseRecord:
    """Read a case directory written by write_case; bit-exact round trip."""
    d = Path(path)
    if not d.is_dir():
        raise ParseError(f"{d}: no such case directory")
    mpath = d / MANIFEST_FILE
    if not mpath.is_file():
        raise ParseError(f"{mpath}: missing case manifest")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{mpath}: invalid JSON ({e})") from e
    if not isinstance(manifest, dict):
        raise ParseError(f"{mpath}: manifest must be a JSON object")
    for key in ("case_id", "extents", "spacing", "has_labels"):
        if key not in manifest:
            raise ParseError(f"{mpath}: manifest lacks key {key!r}")
    try:
        extents = tuple(int(e) for e in manifest["extents"])
        spacing = tuple(float(s) for s in manifest["spacing"])
    except (TypeError, ValueError) as e:
        raise ParseError(f"{mpath}: malformed extents or spacing ({e})") from e

    missing = [f"{n}.bin" for n in MODALITY_NAMES if not (d / f"{n}.bin").is_file()]
    if missing:
        raise ParseError(f"{d}: missing modality files: {', '.join(missing)}")
    mods = []
    for name in MODALITY_NAMES:
        fpath = d / f"{name}.bin"
        arr, _ = load_array(fpath)
        if arr.shape != extents:
            raise ParseError(
                f"{fpath}: extents {arr.shape} do not match the manifest {extents}"
            )
        mods.append(Tensor(arr))
    labels = None
    if manifest["has_labels"]:
        lpath = d / LABEL_FILE
        if not lpath.is_file():
            raise ParseError(f"{lpath}: manifest promises labels but the file is absent")
        arr, _ = load_array(lpath)
        if arr.shape != extents:
            raise ParseError(
                f"{lpath}: extents {arr.shape} do not match the manifest {extents}"
            )
        try:
            labels = LabelVolume(arr, spacing)
        except (InputError, ShapeError) as e:
            raise ParseError(f"{lpath}: {e}") from e
    return CaseRecord(manifest["case_id"], tuple(mods), labels, spacing)


def write_dataset_manifest(case_dirs, path) -> Path:
    """Newline-delimited list of case directories."""
    p = Path(path)
    p.write_text("".join(str(c) + "\n" for c in case_dirs))
    return p


def read_dataset_manifest(path) -> list:
    """Case directories from a manifest; relative entries resolve against the
    manifest's own directory.  Blank lines and #-comments are skipped."""
    p = Path(path)
    if not p.is_file():
        raise ParseError(f"{p}: no such manifest")
    out = []
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        c = Path(line)
        out.append(c if c.is_absolute() else p.parent / c)
    if not out:
        raise ParseError(f"{p}: manifest lists no cases")
    return out
