"""Lesion localisation, cropping, resampling and convolution shape arithmetic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MaskVolume, Volume3D


@dataclass(frozen=True)
class BBox2D:
    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate bbox {self}")

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def center(self) -> tuple[int, int]:
        return (self.row_min + self.row_max) // 2, (self.col_min + self.col_max) // 2


@dataclass(frozen=True)
class LesionLocation:
    slice_index: int
    bbox: BBox2D

    @property
    def center(self) -> tuple[int, int]:
        return self.bbox.center

    @property
    def width(self) -> int:
        return self.bbox.width

    @property
    def height(self) -> int:
        return self.bbox.height

    @property
    def area(self) -> int:
        return self.bbox.area


@dataclass(frozen=True)
class ConvSpec:
    """One spatial axis of a convolution or pooling layer.

    Dilation follows the usual convention where a regular convolution has
    ``dilation=1``.
    """
    input_dim: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0 or self.dilation < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.input_dim < 1:
            raise ValueError(f"input dim must be positive, got {self.input_dim}")


def conv_output_size(spec: ConvSpec) -> int:
    out = (spec.input_dim + 2 * spec.padding - spec.dilation * (spec.kernel - 1) - 1) // spec.stride + 1
    if out < 1:
        raise ValueError(f"{spec} yields non-positive output size {out}")
    return out


def upconv_output_size(spec: ConvSpec, output_padding: int = 0) -> int:
    """Output extent of a transposed convolution along one axis."""
    return ((spec.input_dim - 1) * spec.stride - 2 * spec.padding
            + spec.dilation * (spec.kernel - 1) + output_padding + 1)


# ---------------------------------------------------------------------------
# interpolation

def _linear_weights(n_in: int, n_out: int):
    # half-pixel centres, edge clamped (same convention as align_corners=False)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_linear(arr: np.ndarray, shape) -> np.ndarray:
    """Separable (bi/tri)linear resize of the trailing ``len(shape)`` axes."""
    out = np.asarray(arr, dtype=np.float64)
    lead = out.ndim - len(shape)
    for k, n_out in enumerate(shape):
        axis = lead + k
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        lo, hi, frac = _linear_weights(n_in, n_out)
        a = np.take(out, lo, axis=axis)
        b = np.take(out, hi, axis=axis)
        bshape = [1] * out.ndim
        bshape[axis] = n_out
        frac = frac.reshape(bshape)
        out = a * (1.0 - frac) + b * frac
    return out


def resize_nearest(arr: np.ndarray, shape) -> np.ndarray:
    out = np.asarray(arr)
    lead = out.ndim - len(shape)
    for k, n_out in enumerate(shape):
        axis = lead + k
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        idx = np.minimum(np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)
        out = np.take(out, idx, axis=axis)
    return out


def resample_volume(vol: Volume3D, target_hw: int) -> Volume3D:
    """Bilinearly resize every slice to ``target_hw`` x ``target_hw``; slice count unchanged."""
    if target_hw < 1:
        raise ValueError("target_hw must be >= 1")
    s, h, w = vol.shape
    if (h, w) == (target_hw, target_hw):
        return vol
    out = resize_linear(vol.voxels, (target_hw, target_hw)).astype(np.float32)
    spacing = (vol.spacing[0], vol.spacing[1] * h / target_hw, vol.spacing[2] * w / target_hw)
    return Volume3D(out, vol.sequence, spacing)


def resample_mask(mask: MaskVolume, target_hw: int) -> MaskVolume:
    """Nearest-neighbour in-plane resize, re-binarised at 0.5."""
    if target_hw < 1:
        raise ValueError("target_hw must be >= 1")
    out = resize_nearest(mask.voxels, (target_hw, target_hw))
    return MaskVolume((out >= 0.5).astype(np.uint8), mask.kind)


# ---------------------------------------------------------------------------
# localisation

def slice_bbox(mask_slice: np.ndarray) -> BBox2D | None:
    m = np.asarray(mask_slice) > 0
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(m.any(axis=0))
    return BBox2D(int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))


def max_area_slice(mask: MaskVolume | np.ndarray) -> LesionLocation:
    """Slice whose tight bounding box has the largest width*height.

    Ties go to the lowest slice index.
    """
    vox = mask.voxels if isinstance(mask, MaskVolume) else np.asarray(mask)
    best = None
    for z in range(vox.shape[0]):
        bb = slice_bbox(vox[z])
        if bb is not None and (best is None or bb.area > best.bbox.area):
            best = LesionLocation(z, bb)
    if best is None:
        raise ValueError("empty mask: lesion cannot be located")
    return best


def _check_bbox(shape, bbox: BBox2D):
    h, w = shape[-2:]
    if bbox.row_min < 0 or bbox.col_min < 0 or bbox.row_max >= h or bbox.col_max >= w:
        raise ValueError(f"bbox {bbox} outside slice of extents {(h, w)}")


def crop_adjusted(image_slice: np.ndarray, bbox: BBox2D, crop_size: int,
                  square: bool = False) -> np.ndarray:
    """Extract the bounding box and resize it bilinearly to ``crop_size``.

    Accepts (H, W) or (C, H, W). With ``square`` the shorter box side is grown
    (and shifted inside the slice when needed) to match the longer one before
    resizing.
    """
    img = np.asarray(image_slice)
    _check_bbox(img.shape, bbox)
    if square:
        bbox = _square_bbox(bbox, img.shape[-2:])
    region = img[..., bbox.row_min:bbox.row_max + 1, bbox.col_min:bbox.col_max + 1]
    return resize_linear(region, (crop_size, crop_size)).astype(np.float32)


def _square_bbox(bbox: BBox2D, hw) -> BBox2D:
    side = min(max(bbox.height, bbox.width), min(hw))
    r0 = _fit(bbox.row_min - (side - bbox.height) // 2, side, hw[0])
    c0 = _fit(bbox.col_min - (side - bbox.width) // 2, side, hw[1])
    return BBox2D(r0, r0 + side - 1, c0, c0 + side - 1)


def _fit(start: int, size: int, extent: int) -> int:
    return int(min(max(start, 0), extent - size))


def fixed_window(center: tuple[int, int], crop_size: int, hw) -> tuple[int, int]:
    """Top-left corner of a ``crop_size`` window centred on ``center``, shifted inside."""
    h, w = hw
    if h < crop_size or w < crop_size:
        raise ValueError(f"slice {(h, w)} smaller than crop size {crop_size}")
    r0 = _fit(center[0] - crop_size // 2, crop_size, h)
    c0 = _fit(center[1] - crop_size // 2, crop_size, w)
    return r0, c0


def crop_fixed(image_slice: np.ndarray, center: tuple[int, int], crop_size: int) -> np.ndarray:
    img = np.asarray(image_slice)
    r0, c0 = fixed_window(center, crop_size, img.shape[-2:])
    return np.array(img[..., r0:r0 + crop_size, c0:c0 + crop_size], dtype=np.float32)
