"""Stochastic training-time augmentation for 3D volumes.

The pipeline mirrors a clinical-MRI augmentation recipe: blur (p=0.1),
additive Gaussian noise (p=0.6), then exactly one of affine resampling or
elastic deformation (p=0.2, uniform branch), bias-field distortion
(p=0.1) and k-space motion artifacts (p=0.05).  Probabilities are
contractual; magnitude ranges are tool defaults and fully configurable.

Randomness is split in two stages: :func:`plan_pipeline` draws every
decision and parameter from the supplied generator and returns a plan,
and :func:`apply_plan` executes it.  Identical streams therefore give
bit-identical outputs regardless of how the work is scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .nifti import Volume

AugmentPlan = list[tuple[str, dict]]


@dataclass(frozen=True)
class AugmentSpec:
    """Application probabilities and magnitude ranges for every transform."""

    p_blur: float = 0.1
    blur_sigma_range: tuple[float, float] = (0.25, 1.5)   # mm
    p_noise: float = 0.6
    noise_std_range: tuple[float, float] = (0.0, 0.05)    # intensity units
    p_spatial: float = 0.2
    rotation_max_deg: float = 10.0
    translation_max_mm: float = 5.0
    elastic_grid: int = 7
    elastic_max_mm: float = 4.0
    p_bias: float = 0.1
    bias_order: int = 3
    bias_coeff_max: float = 0.3
    p_motion: float = 0.05
    motion_max_transforms: int = 2
    motion_max_deg: float = 5.0
    motion_max_mm: float = 4.0

    def validate(self) -> None:
        for name in ("p_blur", "p_noise", "p_spatial", "p_bias", "p_motion"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name in ("blur_sigma_range", "noise_std_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative ascending range")
        if min(self.rotation_max_deg, self.translation_max_mm, self.elastic_max_mm,
               self.bias_coeff_max, self.motion_max_deg, self.motion_max_mm) < 0:
            raise ValueError("magnitude ranges must be non-negative")
        if self.bias_order > 3 or self.bias_order < 0:
            raise ValueError(f"bias polynomial order must be in [0, 3], got {self.bias_order}")
        if self.elastic_grid < 2:
            raise ValueError("elastic control grid needs at least 2 points per axis")
        if self.motion_max_transforms < 1:
            raise ValueError("motion needs at least one transform")

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            out[name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        spec = cls(**kwargs)
        spec.validate()
        return spec


# ---------------------------------------------------------------------------
# shared resampling machinery


def _sample_trilinear(data: np.ndarray, coords: np.ndarray, fill: float) -> np.ndarray:
    """Trilinear lookup of [3, M] fractional coordinates with constant fill.

    Coordinates outside [0, extent-1] on any axis take ``fill``; a small
    epsilon absorbs floating-point error in the coordinate arithmetic so
    samples nominally on the boundary are not misclassified as outside.
    """
    eps = 1e-6
    valid = np.ones(coords.shape[1], dtype=bool)
    clamped = np.empty_like(coords)
    for axis in range(3):
        top = data.shape[axis] - 1
        valid &= (coords[axis] >= -eps) & (coords[axis] <= top + eps)
        clamped[axis] = np.clip(coords[axis], 0.0, top)

    base = np.floor(clamped).astype(np.int64)
    frac = clamped - base
    out = np.zeros(coords.shape[1], dtype=np.float64)
    for corner in range(8):
        idx = []
        weight = np.ones(coords.shape[1], dtype=np.float64)
        for axis in range(3):
            hi = (corner >> axis) & 1
            i = np.clip(base[axis] + hi, 0, data.shape[axis] - 1)
            idx.append(i)
            weight *= frac[axis] if hi else 1.0 - frac[axis]
        out += weight * data[idx[0], idx[1], idx[2]]
    return np.where(valid, out, fill)


def _rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation about axes 0, 1, 2 composed as R2 @ R1 @ R0."""
    r = np.eye(3)
    for axis, deg in enumerate(angles_deg):
        a = math.radians(deg)
        c, s = math.cos(a), math.sin(a)
        m = np.eye(3)
        other = [i for i in range(3) if i != axis]
        m[other[0], other[0]] = c
        m[other[0], other[1]] = -s
        m[other[1], other[0]] = s
        m[other[1], other[1]] = c
        r = m @ r
    return r


def _index_grid(shape) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij")).reshape(3, -1)


def _resample(volume: Volume, source_coords: np.ndarray) -> Volume:
    fill = float(volume.data.min())
    out = _sample_trilinear(volume.data.astype(np.float64), source_coords, fill)
    return replace(volume, data=out.reshape(volume.data.shape).astype(volume.data.dtype))


# ---------------------------------------------------------------------------
# individual transforms


def blur(volume: Volume, sigma_mm: float) -> Volume:
    """Separable Gaussian blur; kernel radius ceil(3 sigma) per axis, mirrored edges."""
    if sigma_mm < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma_mm}")
    if sigma_mm == 0:
        return replace(volume, data=volume.data.copy())
    data = volume.data.astype(np.float64)
    for axis in range(3):
        sigma_vox = sigma_mm / volume.voxel_size[axis]
        radius = math.ceil(3 * sigma_vox)
        if radius == 0:
            continue
        offsets = np.arange(-radius, radius + 1, dtype=np.float64)
        kernel = np.exp(-0.5 * (offsets / sigma_vox) ** 2)
        kernel /= kernel.sum()
        data = ndimage.convolve1d(data, kernel, axis=axis, mode="mirror")
    return replace(volume, data=data.astype(volume.data.dtype))


def add_noise(volume: Volume, std: float, rng: np.random.Generator) -> Volume:
    """Independent zero-mean Gaussian noise per voxel."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        return replace(volume, data=volume.data.copy())
    noisy = volume.data + std * rng.standard_normal(volume.data.shape)
    return replace(volume, data=noisy.astype(volume.data.dtype))


def affine_resample(volume: Volume, rotation_deg=(0.0, 0.0, 0.0),
                    translation_mm=(0.0, 0.0, 0.0), scale: float = 1.0) -> Volume:
    """Rigid resampling about the volume center with trilinear interpolation.

    Content moves by the forward transform; out-of-field samples take the
    minimum intensity as background.
    """
    if not np.any(rotation_deg) and not np.any(translation_mm) and scale == 1.0:
        return replace(volume, data=volume.data.copy())
    spacing = np.asarray(volume.voxel_size)
    center = (np.asarray(volume.data.shape, dtype=np.float64) - 1) / 2
    rot = _rotation_matrix(rotation_deg) * scale
    inv = np.linalg.inv(rot)
    grid = _index_grid(volume.data.shape)
    mm = (grid - center[:, None]) * spacing[:, None]
    src_mm = inv @ (mm - np.asarray(translation_mm, dtype=np.float64)[:, None])
    src = src_mm / spacing[:, None] + center[:, None]
    return _resample(volume, src)


def elastic_deform(volume: Volume, displacements_mm: np.ndarray) -> Volume:
    """Warp by a dense field trilinearly interpolated from a control grid.

    ``displacements_mm`` has shape [g, g, g, 3]; positive displacement moves
    content in the positive axis direction, matching the affine convention.
    """
    displacements_mm = np.asarray(displacements_mm, dtype=np.float64)
    if displacements_mm.ndim != 4 or displacements_mm.shape[3] != 3:
        raise ValueError(f"displacements must be [g, g, g, 3], got {displacements_mm.shape}")
    if not displacements_mm.any():
        return replace(volume, data=volume.data.copy())
    shape = volume.data.shape
    grid = _index_grid(shape)
    g = displacements_mm.shape[0]
    field_coords = np.empty_like(grid)
    for axis in range(3):
        field_coords[axis] = grid[axis] * (g - 1) / (shape[axis] - 1)
    src = grid.copy()
    for axis in range(3):
        disp_vox = _sample_trilinear(displacements_mm[..., axis], field_coords, 0.0)
        src[axis] -= disp_vox / volume.voxel_size[axis]
    return _resample(volume, src)


_BIAS_EXPONENTS = [(i, j, k) for i in range(4) for j in range(4) for k in range(4)
                   if i + j + k <= 3]


def bias_exponents(order: int) -> list[tuple[int, int, int]]:
    """Monomial exponents (lexicographic) for the bias polynomial of a given order."""
    if order > 3 or order < 0:
        raise ValueError(f"bias polynomial order must be in [0, 3], got {order}")
    return [e for e in _BIAS_EXPONENTS if sum(e) <= order]


def bias_field(volume: Volume, coefficients, order: int = 3) -> Volume:
    """Multiply by exp(P(x)) with P polynomial over normalized [-1, 1] coords."""
    exps = bias_exponents(order)
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (len(exps),):
        raise ValueError(f"order {order} needs {len(exps)} coefficients, "
                         f"got {coefficients.shape}")
    if not coefficients.any():
        return replace(volume, data=volume.data.copy())
    shape = volume.data.shape
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    logfield = np.zeros(shape, dtype=np.float64)
    for coeff, (i, j, k) in zip(coefficients, exps):
        if coeff != 0.0:
            logfield += coeff * gx ** i * gy ** j * gz ** k
    out = volume.data * np.exp(logfield)
    return replace(volume, data=out.astype(volume.data.dtype))


def motion_artifact(volume: Volume, transforms: list[dict]) -> Volume:
    """Composite k-space bands from rigidly moved copies of the volume.

    Each transform dict holds ``rotation_deg`` and ``translation_mm``.  Copy
    i contributes the i-th contiguous band of frequency lines along axis 0,
    in draw order; the real part of the inverse transform is returned.
    """
    if not transforms:
        raise ValueError("motion needs at least one transform")
    spectra = []
    for t in transforms:
        moved = affine_resample(volume, rotation_deg=t.get("rotation_deg", (0, 0, 0)),
                                translation_mm=t.get("translation_mm", (0, 0, 0)))
        spectra.append(np.fft.fftn(moved.data.astype(np.float64)))
    composite = np.empty_like(spectra[0])
    bands = np.array_split(np.arange(volume.data.shape[0]), len(spectra))
    for spectrum, band in zip(spectra, bands):
        composite[band] = spectrum[band]
    out = np.fft.ifftn(composite).real
    return replace(volume, data=out.astype(volume.data.dtype))


# ---------------------------------------------------------------------------
# pipeline


def plan_pipeline(spec: AugmentSpec, rng: np.random.Generator) -> AugmentPlan:
    """Draw all pipeline decisions and parameters; returns the executable plan."""
    spec.validate()
    plan: AugmentPlan = []
    if rng.random() < spec.p_blur:
        plan.append(("blur", {"sigma_mm": float(rng.uniform(*spec.blur_sigma_range))}))
    if rng.random() < spec.p_noise:
        plan.append(("noise", {"std": float(rng.uniform(*spec.noise_std_range)),
                               "seed": int(rng.integers(2 ** 63))}))
    if rng.random() < spec.p_spatial:
        if rng.random() < 0.5:
            plan.append(("affine", {
                "rotation_deg": rng.uniform(-spec.rotation_max_deg,
                                            spec.rotation_max_deg, 3).tolist(),
                "translation_mm": rng.uniform(-spec.translation_max_mm,
                                              spec.translation_max_mm, 3).tolist(),
            }))
        else:
            g = spec.elastic_grid
            disp = rng.uniform(-spec.elastic_max_mm, spec.elastic_max_mm, (g, g, g, 3))
            plan.append(("elastic", {"displacements_mm": disp.tolist()}))
    if rng.random() < spec.p_bias:
        n_coeff = len(bias_exponents(spec.bias_order))
        coeffs = rng.uniform(-spec.bias_coeff_max, spec.bias_coeff_max, n_coeff)
        plan.append(("bias", {"coefficients": coeffs.tolist(), "order": spec.bias_order}))
    if rng.random() < spec.p_motion:
        count = int(rng.integers(1, spec.motion_max_transforms + 1))
        transforms = [{
            "rotation_deg": rng.uniform(-spec.motion_max_deg, spec.motion_max_deg, 3).tolist(),
            "translation_mm": rng.uniform(-spec.motion_max_mm, spec.motion_max_mm, 3).tolist(),
        } for _ in range(count)]
        plan.append(("motion", {"transforms": transforms}))
    return plan


def apply_plan(volume: Volume, plan: AugmentPlan) -> Volume:
    for name, kwargs in plan:
        if name == "blur":
            volume = blur(volume, kwargs["sigma_mm"])
        elif name == "noise":
            noise_rng = np.random.default_rng(np.random.SeedSequence([kwargs["seed"]]))
            volume = add_noise(volume, kwargs["std"], noise_rng)
        elif name == "affine":
            volume = affine_resample(volume, rotation_deg=kwargs["rotation_deg"],
                                     translation_mm=kwargs["translation_mm"])
        elif name == "elastic":
            volume = elastic_deform(volume, np.asarray(kwargs["displacements_mm"]))
        elif name == "bias":
            volume = bias_field(volume, kwargs["coefficients"], kwargs["order"])
        elif name == "motion":
            volume = motion_artifact(volume, kwargs["transforms"])
        else:  # pragma: no cover
            raise AssertionError(f"unknown plan step {name}")
    return volume


def apply_pipeline(volume: Volume, spec: AugmentSpec, rng: np.random.Generator) -> Volume:
    """Plan and apply all transforms; deterministic given the RNG stream."""
    return apply_plan(volume, plan_pipeline(spec, rng))
