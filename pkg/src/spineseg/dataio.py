"""Dataset ingestion, on-disk formats, and the synthetic spine phantom.

A dataset lives in one directory: numerically named grayscale PNG slices
(``0000.png``, ``0001.png``, ...), a ``meta.json`` with the physical slice
spacing, and an ``annotations.json`` with sparse per-vertebra landmarks.
Label masks are 8-bit PNGs whose pixel values are raw class codes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

MAX_CLASS_CODE = 7
N_CLASSES = MAX_CLASS_CODE + 1  # seven vertebrae + background

_SLICE_NAME = re.compile(r"^(\d+)\.png$")


class VertebraLabel(IntEnum):
    """The seven vertebra labels and their fixed class codes (lumbar first)."""

    L1 = 1
    L2 = 2
    L3 = 3
    L4 = 4
    L5 = 5
    T11 = 6
    T12 = 7

    @property
    def class_code(self) -> int:
        return int(self.value)


@dataclass
class SliceStack:
    """Ordered sagittal slices with physical spacing metadata.

    ``slices`` is a float32 array of shape (n_slices, height, width) with
    intensities in [0, 1]. ``slice_gap_px`` is the pixel distance between
    consecutive slices along the sagittal axis (1 mm = ``pixel_per_mm`` px).
    """

    slices: np.ndarray
    slice_gap_px: int
    pixel_per_mm: int = 4

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise DataError(f"slice stack must be (n, h, w), got shape {self.slices.shape}")
        if self.slice_gap_px < 1:
            raise DataError(f"slice_gap_px must be >= 1, got {self.slice_gap_px}")
        if self.pixel_per_mm < 1:
            raise DataError(f"pixel_per_mm must be >= 1, got {self.pixel_per_mm}")
        lo, hi = float(self.slices.min()), float(self.slices.max())
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"slice intensities must lie in [0, 1], got [{lo}, {hi}]")

    @property
    def n_slices(self) -> int:
        return int(self.slices.shape[0])

    @property
    def slice_shape(self) -> tuple[int, int]:
        return int(self.slices.shape[1]), int(self.slices.shape[2])


@dataclass(frozen=True)
class VertebraAnnotation:
    """One vertebra on one slice: centroid plus two opposite corner points.

    Points are (row, col) in pixel coordinates; fractional values appear on
    interpolated slices. The centroid must lie inside the axis-aligned
    rectangle spanned by the corners (0.5 px tolerance).
    """

    slice_index: int
    label: VertebraLabel
    centroid: tuple[float, float]
    corner_a: tuple[float, float]
    corner_b: tuple[float, float]

    def __post_init__(self):
        if self.corner_a == self.corner_b:
            raise DataError(f"{self.label.name}@{self.slice_index}: corner points coincide")
        r_lo = min(self.corner_a[0], self.corner_b[0]) - 0.5
        r_hi = max(self.corner_a[0], self.corner_b[0]) + 0.5
        c_lo = min(self.corner_a[1], self.corner_b[1]) - 0.5
        c_hi = max(self.corner_a[1], self.corner_b[1]) + 0.5
        r, c = self.centroid
        if not (r_lo <= r <= r_hi and c_lo <= c <= c_hi):
            raise DataError(
                f"{self.label.name}@{self.slice_index}: centroid {self.centroid} outside "
                f"corner rectangle {self.corner_a}..{self.corner_b}"
            )


@dataclass
class AnnotationSet:
    """All annotations of a stack; at most one per (slice, label) pair."""

    annotations: list[VertebraAnnotation] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for ann in self.annotations:
            key = (ann.slice_index, ann.label)
            if key in seen:
                raise DataError(f"duplicate annotation for {ann.label.name}@{ann.slice_index}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.annotations)

    def __iter__(self):
        return iter(self.annotations)

    @property
    def annotated_slice_indices(self) -> list[int]:
        return sorted({ann.slice_index for ann in self.annotations})

    @property
    def labels(self) -> list[VertebraLabel]:
        return sorted({ann.label for ann in self.annotations})

    def for_slice(self, slice_index: int) -> list[VertebraAnnotation]:
        anns = [a for a in self.annotations if a.slice_index == slice_index]
        return sorted(anns, key=lambda a: a.label.class_code)

    def for_label(self, label: VertebraLabel) -> list[VertebraAnnotation]:
        anns = [a for a in self.annotations if a.label == label]
        return sorted(anns, key=lambda a: a.slice_index)

    def get(self, slice_index: int, label: VertebraLabel) -> VertebraAnnotation | None:
        for ann in self.annotations:
            if ann.slice_index == slice_index and ann.label == label:
                return ann
        return None


@dataclass
class LabelMask:
    """Per-slice integer raster; 0 is background, 1..7 are class codes."""

    raster: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.raster)
        if arr.ndim != 2:
            raise DataError(f"mask must be 2D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise DataError(f"mask must have an integer dtype, got {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() > MAX_CLASS_CODE):
            raise DataError(
                f"mask values must lie in 0..{MAX_CLASS_CODE}, got [{arr.min()}, {arr.max()}]"
            )
        self.raster = arr.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.raster.shape  # type: ignore[return-value]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMask):
            return NotImplemented
        return np.array_equal(self.raster, other.raster)


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and noise parameters of the synthetic spine phantom."""

    n_slices: int = 9
    height: int = 320
    width: int = 256
    n_vertebrae: int = 5
    noise_sigma: float = 0.0
    seed: int = 0
    slice_gap_px: int = 12  # 3 mm at 4 px/mm

    def __post_init__(self):
        if self.n_slices < 1:
            raise DataError("n_slices must be >= 1")
        if not (1 <= self.n_vertebrae <= MAX_CLASS_CODE):
            raise DataError(f"n_vertebrae must be in 1..{MAX_CLASS_CODE}")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if self.slice_gap_px < 1:
            raise DataError("slice_gap_px must be >= 1")


# ---------------------------------------------------------------------------
# PNG / JSON readers and writers


def _slice_files(dir_path: Path) -> list[tuple[int, Path]]:
    files = []
    for p in sorted(dir_path.glob("*.png")):
        m = _SLICE_NAME.match(p.name)
        if m is None:
            raise DataError(f"non-numeric slice filename {p.name!r} in {dir_path}")
        files.append((int(m.group(1)), p))
    files.sort(key=lambda t: t[0])
    return files


def _read_gray_png(path: Path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG, rescaled to float32 in [0, 1]."""
    with Image.open(path) as img:
        mode = img.mode
        arr = np.asarray(img)
    if mode == "L":
        return arr.astype(np.float32) / 255.0
    if mode in ("I", "I;16"):
        return arr.astype(np.float32) / 65535.0
    raise DataError(f"{path}: unsupported PNG mode {mode!r} (need 8- or 16-bit grayscale)")


def load_slice_stack(dir_path: str | Path) -> SliceStack:
    """Load a slice directory (numeric PNGs + ``meta.json``) into a SliceStack.

    Slices are ordered by numeric filename and rescaled to [0, 1]
    (8-bit by 255, 16-bit by 65535).
    """
    dir_path = Path(dir_path)
    meta_path = dir_path / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"missing metadata file {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        gap = int(meta["slice_gap_px"])
        ppm = int(meta.get("pixel_per_mm", 4))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed {meta_path}: {exc}") from exc

    files = _slice_files(dir_path)
    if not files:
        raise DataError(f"no slice PNGs found in {dir_path}")
    slices = []
    shape = None
    for idx, path in files:
        arr = _read_gray_png(path)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise DataError(
                f"{path}: slice dimensions {arr.shape} do not match first slice {shape}"
            )
        slices.append(arr)
    return SliceStack(slices=np.stack(slices), slice_gap_px=gap, pixel_per_mm=ppm)


def save_slice_stack(stack: SliceStack, dir_path: str | Path) -> None:
    """Write a stack as zero-padded 16-bit PNGs plus ``meta.json``."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for i in range(stack.n_slices):
        arr = np.round(stack.slices[i].astype(np.float64) * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(dir_path / f"{i:04d}.png")
    meta = {"slice_gap_px": stack.slice_gap_px, "pixel_per_mm": stack.pixel_per_mm}
    (dir_path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_annotations(file_path: str | Path, n_slices: int | None = None) -> AnnotationSet:
    """Parse ``annotations.json`` into an AnnotationSet.

    Each record is ``{slice, label, centroid, corner_a, corner_b}``. When the
    caller supplies ``n_slices``, slice indices are validated against it.
    """
    file_path = Path(file_path)
    try:
        records = json.loads(file_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse {file_path}: {exc}") from exc
    if not isinstance(records, list):
        raise DataError(f"{file_path}: expected a JSON array of annotation records")

    def point(rec, key) -> tuple[float, float]:
        value = rec[key]
        if not (isinstance(value, (list, tuple)) and len(value) == 2):
            raise DataError(f"{file_path}: field {key!r} must be a [row, col] pair")
        return float(value[0]), float(value[1])

    annotations = []
    for i, rec in enumerate(records):
        try:
            label = VertebraLabel[rec["label"]]
            ann = VertebraAnnotation(
                slice_index=int(rec["slice"]),
                label=label,
                centroid=point(rec, "centroid"),
                corner_a=point(rec, "corner_a"),
                corner_b=point(rec, "corner_b"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{file_path}: malformed record {i}: {exc}") from exc
        if n_slices is not None and not (0 <= ann.slice_index < n_slices):
            raise DataError(
                f"{file_path}: record {i} slice index {ann.slice_index} "
                f"outside 0..{n_slices - 1}"
            )
        annotations.append(ann)
    return AnnotationSet(annotations=annotations)


def save_annotations(ann_set: AnnotationSet, file_path: str | Path) -> None:
    records = [
        {
            "slice": ann.slice_index,
            "label": ann.label.name,
            "centroid": list(ann.centroid),
            "corner_a": list(ann.corner_a),
            "corner_b": list(ann.corner_b),
        }
        for ann in sorted(ann_set, key=lambda a: (a.slice_index, a.label.class_code))
    ]
    Path(file_path).write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")


def write_mask(mask: LabelMask, path: str | Path) -> None:
    """Write a label mask as an 8-bit grayscale PNG with raw class codes."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.raster, mode="L").save(path)


def read_mask(path: str | Path) -> LabelMask:
    with Image.open(path) as img:
        if img.mode != "L":
            raise DataError(f"{path}: mask PNG must be 8-bit grayscale, got mode {img.mode!r}")
        arr = np.asarray(img, dtype=np.uint8)
    if arr.max(initial=0) > MAX_CLASS_CODE:
        raise DataError(f"{path}: mask contains value {arr.max()} > {MAX_CLASS_CODE}")
    return LabelMask(raster=arr)


def load_mask_dir(dir_path: str | Path) -> list[LabelMask]:
    """Read all numeric-named mask PNGs in a directory, ordered by index."""
    dir_path = Path(dir_path)
    files = _slice_files(dir_path)
    if not files:
        raise DataError(f"no mask PNGs found in {dir_path}")
    return [read_mask(p) for _, p in files]


# ---------------------------------------------------------------------------
# Synthetic spine phantom


def generate_phantom(
    config: PhantomConfig,
) -> tuple[SliceStack, AnnotationSet, list[LabelMask]]:
    """Generate a synthetic stack of vertically stacked elliptical vertebrae.

    Each slice contains ``n_vertebrae`` bright elliptical blobs separated by
    dark gaps; blob centers drift smoothly across slices so that centroid
    interpolation is exercised nontrivially. Returns the noisy slices, exact
    per-slice annotations (centroid plus the two opposite corners of each
    blob's bounding box), and clean ground-truth label masks.

    Deterministic for a fixed config (including seed). Raises ``DataError``
    when the requested geometry cannot fit without blob overlap.
    """
    h, w, nv = config.height, config.width, config.n_vertebrae
    band = h / (nv + 1)
    if band < 16 or w < 48:
        raise DataError(
            f"phantom geometry infeasible: {nv} vertebrae need height >= {16 * (nv + 1)} "
            f"and width >= 48 (got {h}x{w})"
        )
    rng = np.random.default_rng(config.seed)

    # Per-vertebra base geometry. Row semi-axes stay below 0.38*band so
    # neighbouring blobs keep a dark gap even before drift is applied.
    row_centers = np.array([(i + 1) * band for i in range(nv)])
    col_centers = w / 2 + rng.uniform(-0.05 * w, 0.05 * w, size=nv)
    a_axes = band * rng.uniform(0.30, 0.38, size=nv)
    b_axes = w * rng.uniform(0.13, 0.19, size=nv)
    peaks = rng.uniform(0.75, 0.90, size=nv)

    # Drift budget: blobs may wander but never touch each other or the border.
    edge = 2.0
    gaps = []
    for i in range(nv):
        top = row_centers[i] - a_axes[i] - (row_centers[i - 1] + a_axes[i - 1] if i else edge)
        bot = (row_centers[i + 1] - a_axes[i + 1] if i + 1 < nv else h - 1 - edge) - (
            row_centers[i] + a_axes[i]
        )
        gaps.append(min(top, bot))
    steps = max(1, config.n_slices - 1)
    row_step_max = np.array([0.4 * g / steps for g in gaps])
    col_room = np.minimum(col_centers - b_axes - edge, w - 1 - edge - (col_centers + b_axes))
    col_step_max = np.minimum(0.4 * col_room / steps, 2.0)
    row_steps = rng.uniform(-row_step_max, row_step_max)
    col_steps = rng.uniform(-col_step_max, col_step_max)

    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    slices, masks = [], []
    annotations: list[VertebraAnnotation] = []
    for s in range(config.n_slices):
        img = np.zeros((h, w), dtype=np.float32)
        gt = np.zeros((h, w), dtype=np.uint8)
        for i in range(nv):
            r0 = row_centers[i] + row_steps[i] * s
            c0 = col_centers[i] + col_steps[i] * s
            rho2 = ((rr - r0) / a_axes[i]) ** 2 + ((cc - c0) / b_axes[i]) ** 2
            inside = rho2 <= 1.0
            if not inside.any():
                raise DataError(f"phantom vertebra {i + 1} degenerated to zero pixels")
            if (gt[inside] != 0).any():
                raise DataError("phantom vertebrae overlap for the requested geometry")
            img[inside] = (peaks[i] * (1.0 - 0.45 * rho2[inside])).astype(np.float32)
            gt[inside] = i + 1
            rows, cols = np.nonzero(inside)
            annotations.append(
                VertebraAnnotation(
                    slice_index=s,
                    label=VertebraLabel(i + 1),
                    centroid=(float(r0), float(c0)),
                    corner_a=(float(rows.min()), float(cols.min())),
                    corner_b=(float(rows.max()), float(cols.max())),
                )
            )
        if config.noise_sigma > 0:
            img = img + rng.normal(0.0, config.noise_sigma, img.shape).astype(np.float32)
        slices.append(np.clip(img, 0.0, 1.0))
        masks.append(LabelMask(raster=gt))

    stack = SliceStack(
        slices=np.stack(slices),
        slice_gap_px=config.slice_gap_px,
    )
    return stack, AnnotationSet(annotations=annotations), masks
