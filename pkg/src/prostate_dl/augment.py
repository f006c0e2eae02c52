"""Random augmentations for 2-D lesion crops and 3-D volumes.

Every function takes an explicit ``numpy.random.Generator``; nothing touches
global random state. Spatial 3-D ops warp the image and all of its masks with
one shared transform; masks are interpolated linearly and re-thresholded at
0.5 so they stay binary.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .data import MaskVolume, Volume3D


@dataclass(frozen=True)
class Augment2DParams:
    crop_to: int = 28
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    max_rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.5, 1.5)
    shear: float = 15.0
    max_translate_frac: float = 0.07
    random_crop: bool = True

    def __post_init__(self):
        for p in (self.p_flip_h, self.p_flip_v):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of range: {p}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale range {self.scale_range}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Augment3DParams:
    elastic_alpha: float = 1000.0
    elastic_sigma: float = 40.0
    spline_order: int = 3
    p_elastic: float = 0.5
    gamma_range: tuple[float, float] = (0.8, 1.2)
    p_gamma: float = 0.5
    gaussian_sigma_frac: float = 0.05
    p_gaussian: float = 0.5
    poisson_enabled: bool = True
    poisson_peak: float = 1000.0
    p_poisson: float = 0.5
    rotation_deg_range: tuple[float, float] = (-10.0, 10.0)
    p_rotation: float = 0.5

    def __post_init__(self):
        if self.elastic_alpha < 0 or self.elastic_sigma <= 0:
            raise ValueError("elastic alpha must be >= 0 and sigma > 0")
        if self.spline_order not in (1, 3):
            raise ValueError(f"spline_order must be 1 or 3, got {self.spline_order}")

    def to_dict(self) -> dict:
        return asdict(self)


def _from_dict(cls, d: dict):
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def augment2d_params_from_dict(d: dict) -> Augment2DParams:
    return _from_dict(Augment2DParams, d)


def augment3d_params_from_dict(d: dict) -> Augment3DParams:
    return _from_dict(Augment3DParams, d)


# ---------------------------------------------------------------------------
# 2-D

def center_crop_offsets(src: tuple[int, int], size: int) -> tuple[int, int]:
    if size > min(src):
        raise ValueError(f"crop {size} larger than source {src}")
    return (src[0] - size) // 2, (src[1] - size) // 2


def center_crop(crop: np.ndarray, input_size: int) -> np.ndarray:
    arr = np.asarray(crop)
    r0, c0 = center_crop_offsets(arr.shape[-2:], input_size)
    return arr[..., r0:r0 + input_size, c0:c0 + input_size]


def affine_matrix(rotation_deg: float, scale: float, shear_deg: float) -> np.ndarray:
    """Forward 2x2 map in (row, col) coordinates: rotation @ x-shear @ scale."""
    t = math.radians(rotation_deg)
    sh = math.tan(math.radians(shear_deg))
    # built in (x, y) order then permuted to (row, col)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    shear = np.array([[1.0, sh], [0.0, 1.0]])
    a_xy = rot @ shear * scale
    perm = np.array([[0, 1], [1, 0]])
    return perm @ a_xy @ perm


def apply_affine2d(img: np.ndarray, matrix: np.ndarray, translate=(0.0, 0.0), order: int = 1) -> np.ndarray:
    """Warp (H, W) or (C, H, W) about the image centre; borders replicate edge values."""
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[-2:]
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv = np.linalg.inv(matrix)
    offset = c - inv @ (c + np.asarray(translate, dtype=float))
    planes = arr.reshape(-1, h, w)
    out = np.stack([ndimage.affine_transform(p, inv, offset=offset, order=order, mode="nearest")
                    for p in planes])
    return out.reshape(arr.shape)


def augment2d(crop: np.ndarray, params: Augment2DParams, rng: np.random.Generator) -> np.ndarray:
    """Random crop, independent flips, then one random affine shared by all channels."""
    arr = np.asarray(crop, dtype=np.float32)
    h, w = arr.shape[-2:]
    size = params.crop_to
    if size > min(h, w):
        raise ValueError(f"crop_to {size} exceeds source {(h, w)}")
    if params.random_crop:
        r0 = int(rng.integers(0, h - size + 1))
        c0 = int(rng.integers(0, w - size + 1))
    else:
        r0, c0 = center_crop_offsets((h, w), size)
    out = arr[..., r0:r0 + size, c0:c0 + size]
    if rng.random() < params.p_flip_h:
        out = out[..., :, ::-1]
    if rng.random() < params.p_flip_v:
        out = out[..., ::-1, :]
    rot = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
    scale = rng.uniform(*params.scale_range)
    shear = rng.uniform(-params.shear, params.shear)
    max_t = params.max_translate_frac * size
    translate = (rng.uniform(-max_t, max_t), rng.uniform(-max_t, max_t))
    if rot == 0 and scale == 1 and shear == 0 and translate == (0.0, 0.0):
        return np.ascontiguousarray(out, dtype=np.float32)
    return apply_affine2d(out, affine_matrix(rot, scale, shear), translate).astype(np.float32)


# ---------------------------------------------------------------------------
# 3-D

def _unwrap(vol, masks):
    is_vol = isinstance(vol, Volume3D)
    arr = vol.voxels if is_vol else np.asarray(vol)
    marrs = [m.voxels if isinstance(m, MaskVolume) else np.asarray(m) for m in masks]
    for m in marrs:
        if m.shape != arr.shape:
            raise ValueError(f"mask extents {m.shape} != volume {arr.shape}")
    return arr, marrs


def _wrap(vol, masks, arr, marrs):
    if isinstance(vol, Volume3D):
        arr = vol.with_voxels(arr.astype(np.float32))
    else:
        arr = arr.astype(np.float32)
    out_masks = [MaskVolume(mv, m.kind) if isinstance(m, MaskVolume) else mv
                 for m, mv in zip(masks, marrs)]
    return arr, out_masks


def elastic_displacement(hw, alpha: float, sigma: float, rng: np.random.Generator):
    """In-plane displacement fields (rows, cols): smoothed uniform noise times alpha."""
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, hw), sigma, mode="constant") * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, hw), sigma, mode="constant") * alpha
    return dy, dx


def _warp_mask(mask: np.ndarray, coords) -> np.ndarray:
    warped = ndimage.map_coordinates(mask.astype(np.float32), coords, order=1, mode="constant")
    return (warped >= 0.5).astype(np.uint8)


def elastic_deform3d(vol, masks, params: Augment3DParams, rng: np.random.Generator):
    """One in-plane elastic warp shared by every slice of the image and its masks."""
    arr, marrs = _unwrap(vol, masks)
    if params.elastic_alpha == 0:
        return vol, list(masks)
    s, h, w = arr.shape
    dy, dx = elastic_displacement((h, w), params.elastic_alpha, params.elastic_sigma, rng)
    zz, yy, xx = np.meshgrid(np.arange(s), np.arange(h), np.arange(w), indexing="ij")
    coords = np.array([zz, yy + dy[None], xx + dx[None]])
    out = ndimage.map_coordinates(arr.astype(np.float64), coords, order=params.spline_order,
                                  mode="reflect")
    return _wrap(vol, masks, out, [_warp_mask(m, coords) for m in marrs])


def rotate3d(vol, masks, params: Augment3DParams, rng: np.random.Generator, angle: float | None = None):
    """In-plane rotation of every slice by one angle drawn from the rotation range."""
    arr, marrs = _unwrap(vol, masks)
    if angle is None:
        angle = rng.uniform(*params.rotation_deg_range)
    if angle == 0:
        return vol, list(masks)
    out = ndimage.rotate(arr.astype(np.float64), angle, axes=(1, 2), reshape=False, order=1,
                         mode="nearest")
    rot_masks = [(ndimage.rotate(m.astype(np.float32), angle, axes=(1, 2), reshape=False, order=1,
                                 mode="constant") >= 0.5).astype(np.uint8) for m in marrs]
    return _wrap(vol, masks, out, rot_masks)


def intensity_augment3d(vol, params: Augment3DParams, rng: np.random.Generator):
    """Gamma contrast, additive Gaussian noise and Poisson resampling; masks are never touched."""
    is_vol = isinstance(vol, Volume3D)
    arr = (vol.voxels if is_vol else np.asarray(vol)).astype(np.float64)
    if rng.random() < params.p_gamma:
        gamma = rng.uniform(*params.gamma_range)
        lo, hi = arr.min(), arr.max()
        if gamma != 1.0 and hi > lo:
            arr = ((arr - lo) / (hi - lo)) ** gamma * (hi - lo) + lo
    if rng.random() < params.p_gaussian and params.gaussian_sigma_frac > 0:
        arr = arr + rng.normal(0.0, params.gaussian_sigma_frac * arr.std(), size=arr.shape)
    if params.poisson_enabled and rng.random() < params.p_poisson:
        shift = min(arr.min(), 0.0)
        pos = arr - shift
        peak = pos.max()
        if peak > 0:
            counts = rng.poisson(pos / peak * params.poisson_peak)
            arr = counts / params.poisson_peak * peak + shift
    arr = arr.astype(np.float32)
    return vol.with_voxels(arr) if is_vol else arr


def augment3d(vol, masks, params: Augment3DParams, rng: np.random.Generator):
    """Elastic warp, rotation and intensity ops, each gated by its own probability."""
    if rng.random() < params.p_elastic:
        vol, masks = elastic_deform3d(vol, masks, params, rng)
    if rng.random() < params.p_rotation:
        vol, masks = rotate3d(vol, masks, params, rng)
    vol = intensity_augment3d(vol, params, rng)
    return vol, list(masks)
