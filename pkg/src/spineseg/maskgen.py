"""Multi-label mask synthesis from sparse centroid/corner annotations.

Annotated landmarks are interpolated onto intermediate slices, a bounding box
and diameter are derived per vertebra, the bright region inside the box is
traced by 4-connected flood fill, and traced pixels are painted with the
vertebra's class code. Overlapping claims go to the nearer centroid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import groupby

import numpy as np
from scipy import ndimage

from .dataio import AnnotationSet, LabelMask, VertebraAnnotation
from .errors import DataError

log = logging.getLogger(__name__)

# Pixels at or below this normalized intensity count as black. Real denoised
# images have no exact zeros, hence a small positive default.
DEFAULT_BLACK_THRESHOLD = 0.02

_PLAUSIBLE_HW_RATIO = (0.3, 3.0)

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class VertebraGeometry:
    """Derived size descriptors of one annotated vertebra on one slice."""

    diameter_px: float
    height_px: float
    width_px: float
    hw_ratio: float
    area_px2: float
    bbox: tuple[int, int, int, int]  # (row_min, col_min, row_max, col_max), inclusive


def interpolate_centroids(
    ann_prev: VertebraAnnotation,
    ann_next: VertebraAnnotation,
    target_index: int,
) -> VertebraAnnotation:
    """Linearly interpolate an annotation onto a slice between two annotated ones.

    Centroid and both corners move along straight lines in (row, col) with
    fraction ``t = (target - prev) / (next - prev)``; the label is preserved.
    """
    if ann_prev.label != ann_next.label:
        raise DataError(
            f"cannot interpolate across labels {ann_prev.label.name} != {ann_next.label.name}"
        )
    if not (ann_prev.slice_index < target_index < ann_next.slice_index):
        raise DataError(
            f"target slice {target_index} not strictly between "
            f"{ann_prev.slice_index} and {ann_next.slice_index}"
        )
    t = (target_index - ann_prev.slice_index) / (ann_next.slice_index - ann_prev.slice_index)

    def lerp(p: tuple[float, float], q: tuple[float, float]) -> tuple[float, float]:
        return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))

    return VertebraAnnotation(
        slice_index=target_index,
        label=ann_prev.label,
        centroid=lerp(ann_prev.centroid, ann_next.centroid),
        corner_a=lerp(ann_prev.corner_a, ann_next.corner_a),
        corner_b=lerp(ann_prev.corner_b, ann_next.corner_b),
    )


def fill_annotation_gaps(ann_set: AnnotationSet, total_slices: int) -> AnnotationSet:
    """Interpolate annotations onto every slice between consecutive annotated ones.

    Original annotations pass through untouched. Slices outside a label's
    annotated range receive nothing (the vertebra is absent there); a label
    annotated on a single slice gains no interpolants.
    """
    for ann in ann_set:
        if not (0 <= ann.slice_index < total_slices):
            raise DataError(
                f"annotation {ann.label.name}@{ann.slice_index} outside stack of "
                f"{total_slices} slices"
            )
    out = list(ann_set.annotations)
    key = lambda a: a.label.class_code
    for _, group in groupby(sorted(ann_set, key=key), key=key):
        anns = sorted(group, key=lambda a: a.slice_index)
        for prev, nxt in zip(anns, anns[1:]):
            for target in range(prev.slice_index + 1, nxt.slice_index):
                out.append(interpolate_centroids(prev, nxt, target))
    return AnnotationSet(annotations=out)


def derive_geometry(
    ann: VertebraAnnotation, slice_shape: tuple[int, int]
) -> VertebraGeometry:
    """Compute diameter, height-to-width ratio, and clamped bounding box.

    The diameter joins the two corner points through the centroid. The painted
    area is not known yet; ``paint_mask`` fills it in from the traced pixel
    count.
    """
    (ra, ca), (rb, cb) = ann.corner_a, ann.corner_b
    height = abs(ra - rb)
    width = abs(ca - cb)
    if width == 0:
        raise DataError(f"{ann.label.name}@{ann.slice_index}: zero-width corner span")
    if height == 0:
        raise DataError(f"{ann.label.name}@{ann.slice_index}: zero-height corner span")
    hw_ratio = height / width
    if not (_PLAUSIBLE_HW_RATIO[0] <= hw_ratio <= _PLAUSIBLE_HW_RATIO[1]):
        log.warning(
            "%s@%d: height/width ratio %.3f outside plausible range %s",
            ann.label.name,
            ann.slice_index,
            hw_ratio,
            _PLAUSIBLE_HW_RATIO,
        )
    h, w = slice_shape
    row_min = int(np.clip(np.floor(min(ra, rb)), 0, h - 1))
    col_min = int(np.clip(np.floor(min(ca, cb)), 0, w - 1))
    row_max = int(np.clip(np.ceil(max(ra, rb)), 0, h - 1))
    col_max = int(np.clip(np.ceil(max(ca, cb)), 0, w - 1))
    return VertebraGeometry(
        diameter_px=float(np.hypot(ra - rb, ca - cb)),
        height_px=float(height),
        width_px=float(width),
        hw_ratio=float(hw_ratio),
        area_px2=0.0,
        bbox=(row_min, col_min, row_max, col_max),
    )


def trace_vertebra_pixels(
    slice_raster: np.ndarray,
    geom: VertebraGeometry,
    centroid: tuple[float, float],
    black_threshold: float = DEFAULT_BLACK_THRESHOLD,
) -> set[tuple[int, int]]:
    """Trace one vertebra inside its bounding box.

    Returns the 4-connected component of above-threshold pixels seeded at the
    above-threshold pixel nearest to the centroid (ties broken by row-major
    order). An empty set means the box contains nothing but black pixels.
    """
    h, w = slice_raster.shape
    r0, c0, r1, c1 = geom.bbox
    if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
        raise DataError(f"bounding box {geom.bbox} outside raster {slice_raster.shape}")
    window = slice_raster[r0 : r1 + 1, c0 : c1 + 1]
    above = window > black_threshold
    if not above.any():
        return set()
    rows, cols = np.nonzero(above)
    d2 = (rows + r0 - centroid[0]) ** 2 + (cols + c0 - centroid[1]) ** 2
    seed = int(np.argmin(d2))
    labeled, _ = ndimage.label(above, structure=_FOUR_CONN)
    component = labeled == labeled[rows[seed], cols[seed]]
    comp_rows, comp_cols = np.nonzero(component)
    return {(int(r + r0), int(c + c0)) for r, c in zip(comp_rows, comp_cols)}


def paint_mask(
    slice_raster: np.ndarray,
    anns: list[VertebraAnnotation],
    black_threshold: float = DEFAULT_BLACK_THRESHOLD,
) -> LabelMask:
    """Paint all annotated vertebrae of one slice into a label mask."""
    mask, _ = paint_mask_with_geometry(slice_raster, anns, black_threshold)
    return mask


def paint_mask_with_geometry(
    slice_raster: np.ndarray,
    anns: list[VertebraAnnotation],
    black_threshold: float = DEFAULT_BLACK_THRESHOLD,
) -> tuple[LabelMask, list[VertebraGeometry]]:
    """Paint a slice and return the per-vertebra geometry with painted areas.

    Background stays 0. Each annotation's traced pixels are painted with its
    class code; pixels claimed by several vertebrae go to the nearest centroid
    (Euclidean), ties to the lower class code. Deterministic and independent
    of annotation order.
    """
    out = np.zeros(slice_raster.shape, dtype=np.uint8)
    best_d2 = np.full(slice_raster.shape, np.inf, dtype=np.float64)
    geometries = []
    for ann in sorted(anns, key=lambda a: a.label.class_code):
        geom = derive_geometry(ann, slice_raster.shape)
        pixels = trace_vertebra_pixels(slice_raster, geom, ann.centroid, black_threshold)
        geom.area_px2 = float(len(pixels))
        geometries.append(geom)
        if not pixels:
            continue
        rows = np.fromiter((p[0] for p in pixels), dtype=np.intp, count=len(pixels))
        cols = np.fromiter((p[1] for p in pixels), dtype=np.intp, count=len(pixels))
        d2 = (rows - ann.centroid[0]) ** 2 + (cols - ann.centroid[1]) ** 2
        take = d2 < best_d2[rows, cols]  # strict: earlier (lower) code wins ties
        out[rows[take], cols[take]] = ann.label.class_code
        best_d2[rows[take], cols[take]] = d2[take]
    return LabelMask(raster=out), geometries
