"""Dense 3D reconstruction of a sparse sagittal stack by inter-slice interpolation.

Intermediate slices are per-pixel linear blends of the two enclosing acquired
slices; the acquired slices themselves are copied through unchanged, so
re-slicing the volume at the original gap recovers the input stack exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import SliceStack
from .errors import DataError


@dataclass
class Volume3D:
    """Voxel grid indexed (slice, row, col) with intensities in [0, 1]."""

    voxels: np.ndarray
    pixel_per_mm: int = 4

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise DataError(f"volume must be non-empty 3D, got shape {self.voxels.shape}")
        lo, hi = float(self.voxels.min()), float(self.voxels.max())
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"voxel intensities must lie in [0, 1], got [{lo}, {hi}]")

    @property
    def n_slices(self) -> int:
        return int(self.voxels.shape[0])


def reconstruct_volume(stack: SliceStack, target_gap_px: int = 1) -> Volume3D:
    """Densify a slice stack to ``target_gap_px`` spacing along the slice axis.

    Produces ``(n - 1) * (slice_gap_px / target_gap_px) + 1`` slices. Original
    slices appear bitwise unchanged at their mapped indices; each intermediate
    slice is the per-pixel linear interpolation of its two enclosing originals
    (clamped to their per-pixel envelope so float rounding never escapes it).
    """
    if stack.n_slices < 2:
        raise DataError(f"reconstruction needs >= 2 slices, got {stack.n_slices}")
    if target_gap_px < 1:
        raise DataError(f"target_gap_px must be >= 1, got {target_gap_px}")
    if stack.slice_gap_px % target_gap_px != 0:
        raise DataError(
            f"target gap {target_gap_px} px does not divide slice gap {stack.slice_gap_px} px"
        )
    step = stack.slice_gap_px // target_gap_px
    n_out = (stack.n_slices - 1) * step + 1
    h, w = stack.slice_shape
    voxels = np.empty((n_out, h, w), dtype=np.float32)
    for i in range(stack.n_slices - 1):
        lo = stack.slices[i]
        hi = stack.slices[i + 1]
        voxels[i * step] = lo
        env_lo = np.minimum(lo, hi)
        env_hi = np.maximum(lo, hi)
        for r in range(1, step):
            t = np.float32(r / step)
            blend = (np.float32(1.0) - t) * lo + t * hi
            voxels[i * step + r] = np.clip(blend, env_lo, env_hi)
    voxels[-1] = stack.slices[-1]
    return Volume3D(voxels=voxels, pixel_per_mm=stack.pixel_per_mm)


def extract_sagittal_slices(volume: Volume3D, gap_px: int) -> SliceStack:
    """Take every ``gap_px``-th slice of a volume as a new stack.

    ``extract_sagittal_slices(reconstruct_volume(s, 1), s.slice_gap_px)``
    recovers ``s`` exactly.
    """
    if gap_px < 1:
        raise DataError(f"gap_px must be >= 1, got {gap_px}")
    if gap_px > volume.n_slices:
        raise DataError(f"gap_px {gap_px} exceeds slice count {volume.n_slices}")
    slices = volume.voxels[::gap_px].copy()
    return SliceStack(slices=slices, slice_gap_px=gap_px, pixel_per_mm=volume.pixel_per_mm)
