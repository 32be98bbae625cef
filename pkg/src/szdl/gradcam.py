"""3D gradient class-activation maps over the final convolution block.

The target-class score (the pre-softmax logit by default) is
backpropagated to the last convolution block's activations; each channel
is weighted by the spatial mean of its gradient, the weighted sum passes
through ReLU so only positively contributing voxels survive, and the
coarse map is trilinearly upsampled to the input grid and min-max
normalized to [0, 1].  An all-zero raw map short-circuits to an all-zero
CAM with a degenerate flag instead of dividing by zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .errors import EmptyList, MixedExtents, ShapeMismatch
from .model import Model
from .nifti import Volume, save_volume
from .tensor import Tape, Tensor, backward


@dataclass
class CamVolume:
    """Normalized class-activation heatmap aligned to the model-input grid."""

    values: np.ndarray
    source_layer: str
    target_class: int
    norm_min: float
    norm_max: float
    degenerate: bool = False
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.values.shape


def trilinear_resize(data: np.ndarray, out_shape) -> np.ndarray:
    """Resample a 3D array onto a new grid (half-voxel aligned, edges clamped)."""
    out_shape = tuple(out_shape)
    coords = []
    for axis, (n_in, n_out) in enumerate(zip(data.shape, out_shape)):
        c = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        coords.append(np.clip(c, 0, n_in - 1))
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")

    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    z0 = np.floor(gz).astype(np.int64)
    x1 = np.minimum(x0 + 1, data.shape[0] - 1)
    y1 = np.minimum(y0 + 1, data.shape[1] - 1)
    z1 = np.minimum(z0 + 1, data.shape[2] - 1)
    fx, fy, fz = gx - x0, gy - y0, gz - z0

    out = (data[x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
           + data[x1, y0, z0] * fx * (1 - fy) * (1 - fz)
           + data[x0, y1, z0] * (1 - fx) * fy * (1 - fz)
           + data[x0, y0, z1] * (1 - fx) * (1 - fy) * fz
           + data[x1, y0, z1] * fx * (1 - fy) * fz
           + data[x0, y1, z1] * (1 - fx) * fy * fz
           + data[x1, y1, z0] * fx * fy * (1 - fz)
           + data[x1, y1, z1] * fx * fy * fz)
    return out


def block_average(data: np.ndarray, out_shape) -> np.ndarray:
    """Inverse of integer-factor upsampling: mean over equal blocks."""
    factors = [n // m for n, m in zip(data.shape, out_shape)]
    view = data.reshape(out_shape[0], factors[0], out_shape[1], factors[1],
                        out_shape[2], factors[2])
    return view.mean(axis=(1, 3, 5))


def grad_cam(model: Model, volume: Volume, target_class: int,
             use_probability: bool = False) -> CamVolume:
    """Class-activation volume for one scan against one target class.

    Runs eval-mode (running BN statistics, no dropout) with gradients
    recorded; nothing in the model is mutated.
    """
    if target_class not in (0, 1):
        raise ValueError(f"target_class must be 0 or 1, got {target_class}")
    extent = model.config.input_extent
    if volume.extents not in ((extent,) * 3, (2 * extent,) * 3):
        raise ShapeMismatch(f"volume extents {volume.extents} do not match the model")

    x = Tensor(volume.data[None, None].astype(model.dtype))
    tape = Tape()
    result = model.apply(x, mode="eval", tape=tape)
    head = result.probs if use_probability else result.logits
    score = ops.take(head, (0, target_class), tape=tape)
    backward(tape, score)

    features = result.features
    grads = features.grad[0]            # [C, d, d, d]
    weights = grads.mean(axis=(1, 2, 3), dtype=np.float64)
    raw = np.maximum(np.tensordot(weights, features.data[0].astype(np.float64),
                                  axes=(0, 0)), 0.0)

    out_shape = volume.extents if volume.extents == (extent,) * 3 else (extent,) * 3
    if not raw.any():
        return CamVolume(values=np.zeros(out_shape, dtype=np.float32),
                         source_layer=model.feature_layer, target_class=target_class,
                         norm_min=0.0, norm_max=0.0, degenerate=True,
                         voxel_size=volume.voxel_size)

    upsampled = trilinear_resize(raw, out_shape)
    lo, hi = float(upsampled.min()), float(upsampled.max())
    if hi <= lo:  # constant map: no contrast to normalize
        return CamVolume(values=np.zeros(out_shape, dtype=np.float32),
                         source_layer=model.feature_layer, target_class=target_class,
                         norm_min=lo, norm_max=hi, degenerate=True,
                         voxel_size=volume.voxel_size)
    values = (upsampled - lo) / (hi - lo)
    return CamVolume(values=values.astype(np.float32),
                     source_layer=model.feature_layer, target_class=target_class,
                     norm_min=lo, norm_max=hi, voxel_size=volume.voxel_size)


def average_cam(cams: list[CamVolume]) -> CamVolume:
    """Voxelwise mean of normalized maps, re-normalized to [0, 1]."""
    if not cams:
        raise EmptyList("need at least one CAM to average")
    first = cams[0]
    for cam in cams[1:]:
        if cam.extents != first.extents:
            raise MixedExtents(f"CAM extents differ: {cam.extents} vs {first.extents}")
        if cam.target_class != first.target_class:
            raise MixedExtents("CAMs target different classes")
    mean = np.mean([c.values for c in cams], axis=0, dtype=np.float64)
    lo, hi = float(mean.min()), float(mean.max())
    if hi > lo:
        values = ((mean - lo) / (hi - lo)).astype(np.float32)
        degenerate = False
    else:
        values = np.zeros_like(mean, dtype=np.float32)
        degenerate = True
    return CamVolume(values=values, source_layer=first.source_layer,
                     target_class=first.target_class, norm_min=lo, norm_max=hi,
                     degenerate=degenerate, voxel_size=first.voxel_size)


def threshold_cam(cam: CamVolume, threshold: float = 0.85) -> np.ndarray:
    """Binary mask of voxels at or above the threshold."""
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return cam.values >= threshold


def localization_score(cam: CamVolume, roi_mask: np.ndarray,
                       threshold: float = 0.85) -> float:
    """Fraction of suprathreshold CAM voxels that fall inside the ROI."""
    roi_mask = np.asarray(roi_mask, dtype=bool)
    if roi_mask.shape != cam.values.shape:
        raise ShapeMismatch(f"ROI shape {roi_mask.shape} != CAM shape {cam.values.shape}")
    hot = threshold_cam(cam, threshold)
    total = int(hot.sum())
    if total == 0:
        return 0.0
    return float((hot & roi_mask).sum() / total)


def export_cam(cam: CamVolume, path) -> None:
    """Write the CAM as a NIfTI volume for overlay in standard viewers."""
    save_volume(Volume(cam.values, voxel_size=cam.voxel_size), path)


def write_mid_slices(values: np.ndarray, directory, stem: str) -> list[Path]:
    """Dump the three orthogonal mid-slices as 8-bit PGM images."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values, dtype=np.uint8) if hi <= lo else \
        np.round(255 * (values - lo) / (hi - lo)).astype(np.uint8)
    paths = []
    for axis, name in enumerate(("axial", "coronal", "sagittal")):
        mid = values.shape[axis] // 2
        plane = np.take(scaled, mid, axis=axis)
        path = directory / f"{stem}_{name}.pgm"
        with open(path, "wb") as fh:
            fh.write(f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode())
            fh.write(plane.tobytes())
        paths.append(path)
    return paths
