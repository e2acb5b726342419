"""Synthetic left-ventricle phantoms with exact ground-truth transforms.

The short-axis phantom is a truncated half-ellipsoidal shell in canonical
pose: long axis along +z, apex (the closed tip) at low z, open base above the
center. Cross-sections are elliptical (x semi-axis larger than y) so rotation
about the long axis is identifiable. Optional perfusion defects carve an
azimuthal sector out of the shell, background blobs imitate extracardiac
uptake, and additive Gaussian noise is clipped into [0, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .augment import GaussianParamModel, augment_pair, sample_truncated
from .manifest import DatasetManifest, ManifestEntry, save_manifest
from .volume import Volume3D, save_volume

CANONICAL_DIMS = (64, 64, 32)
CANONICAL_SPACING = (6.4, 6.4, 6.4)


@dataclass(frozen=True)
class DefectSpec:
    """Azimuthal perfusion defect: sector location/width in degrees and
    severity in [0, 1] (1 removes all shell intensity in the sector)."""

    polar_angle_deg: float = 0.0
    width_deg: float = 60.0
    severity: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must be in [0, 1], got {self.severity}")
        if not 0.0 < self.width_deg <= 360.0:
            raise ValueError(f"width must be in (0, 360] degrees, got {self.width_deg}")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = CANONICAL_DIMS
    outer_semi_axes: tuple[float, float, float] = (14.0, 10.5, 16.0)
    inner_semi_axes: tuple[float, float, float] = (10.0, 6.5, 12.0)
    apex_truncation: float = 0.35  # base cut above center, fraction of outer z semi-axis
    defect: DefectSpec | None = None
    blob_count: int = 0
    blob_intensity: float = 0.6
    noise: float = 0.0

    def __post_init__(self):
        outer = np.asarray(self.outer_semi_axes, dtype=np.float64)
        inner = np.asarray(self.inner_semi_axes, dtype=np.float64)
        if np.any(inner <= 0) or np.any(outer <= 0):
            raise ValueError("semi-axes must be positive")
        if np.any(inner >= outer):
            raise ValueError(f"inner semi-axes {tuple(inner)} must lie strictly inside outer {tuple(outer)}")
        if not 0.0 <= self.noise <= 0.2:
            raise ValueError(f"noise must be in [0, 0.2], got {self.noise}")
        if not 0.0 < self.blob_intensity <= 1.0:
            raise ValueError(f"blob intensity must be in (0, 1], got {self.blob_intensity}")
        if self.blob_count < 0:
            raise ValueError(f"blob count must be >= 0, got {self.blob_count}")
        if not 0.0 <= self.apex_truncation <= 1.0:
            raise ValueError(f"apex truncation must be in [0, 1], got {self.apex_truncation}")


def _ellipsoid_radius2(xc, yc, zc, semi_axes):
    ax, ay, az = semi_axes
    return (xc / ax) ** 2 + (yc / ay) ** 2 + (zc / az) ** 2


def generate_phantom(spec: PhantomSpec, seed: int = 0) -> Volume3D:
    """Deterministic phantom volume in [0, 1] for the given spec and seed."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = spec.dims
    center = (np.asarray(spec.dims, dtype=np.float64) - 1.0) / 2.0
    xs = np.arange(nx, dtype=np.float64) - center[0]
    ys = np.arange(ny, dtype=np.float64) - center[1]
    zs = np.arange(nz, dtype=np.float64) - center[2]
    xc, yc, zc = np.meshgrid(xs, ys, zs, indexing="ij")

    vol = np.zeros(spec.dims, dtype=np.float64)

    # extracardiac blobs first; the shell and cavity overwrite them
    for _ in range(spec.blob_count):
        blob_center = rng.uniform(-0.38, 0.38, size=3) * np.asarray(spec.dims)
        blob_axes = rng.uniform(2.5, 6.0, size=3)
        r2 = _ellipsoid_radius2(xc - blob_center[0], yc - blob_center[1], zc - blob_center[2], blob_axes)
        vol = np.maximum(vol, np.where(r2 <= 1.0, spec.blob_intensity, 0.0))

    base_cut = zc <= spec.apex_truncation * spec.outer_semi_axes[2]
    outer = _ellipsoid_radius2(xc, yc, zc, spec.outer_semi_axes) <= 1.0
    inner = _ellipsoid_radius2(xc, yc, zc, spec.inner_semi_axes) < 1.0
    shell = outer & ~inner & base_cut
    cavity = inner & base_cut

    vol[shell] = 1.0
    vol[cavity] = 0.0
    if spec.defect is not None:
        azimuth = np.degrees(np.arctan2(yc, xc))
        delta = np.abs((azimuth - spec.defect.polar_angle_deg + 180.0) % 360.0 - 180.0)
        in_defect = shell & (delta <= spec.defect.width_deg / 2.0)
        vol[in_defect] = 1.0 - spec.defect.severity

    if spec.noise > 0.0:
        vol = np.clip(vol + rng.normal(0.0, spec.noise, size=spec.dims), 0.0, 1.0)

    return Volume3D(dims=spec.dims, voxel_size_mm=CANONICAL_SPACING, data=vol.astype(np.float32))


@dataclass(frozen=True)
class PhantomRanges:
    """Per-case randomization ranges used by make_dataset."""

    dims: tuple[int, int, int] = CANONICAL_DIMS
    outer_x: tuple[float, float] = (12.0, 16.0)
    xy_ratio: tuple[float, float] = (1.2, 1.45)  # outer x over outer y
    outer_z: tuple[float, float] = (14.0, 18.0)
    wall: tuple[float, float] = (3.5, 5.0)
    apex_truncation: tuple[float, float] = (0.25, 0.45)
    defect_probability: float = 0.5
    defect_width: tuple[float, float] = (40.0, 100.0)
    defect_severity: tuple[float, float] = (0.4, 1.0)
    blob_count_max: int = 3
    blob_intensity: tuple[float, float] = (0.4, 0.8)
    noise: tuple[float, float] = (0.01, 0.04)


def random_spec(ranges: PhantomRanges, rng: np.random.Generator) -> PhantomSpec:
    outer_x = rng.uniform(*ranges.outer_x)
    outer_y = outer_x / rng.uniform(*ranges.xy_ratio)
    outer_z = rng.uniform(*ranges.outer_z)
    wall = rng.uniform(*ranges.wall)
    inner = tuple(max(a - wall, 1.0) for a in (outer_x, outer_y, outer_z))
    defect = None
    if rng.uniform() < ranges.defect_probability:
        defect = DefectSpec(
            polar_angle_deg=rng.uniform(-180.0, 180.0),
            width_deg=rng.uniform(*ranges.defect_width),
            severity=rng.uniform(*ranges.defect_severity),
        )
    return PhantomSpec(
        dims=ranges.dims,
        outer_semi_axes=(outer_x, outer_y, outer_z),
        inner_semi_axes=inner,
        apex_truncation=rng.uniform(*ranges.apex_truncation),
        defect=defect,
        blob_count=int(rng.integers(0, ranges.blob_count_max + 1)),
        blob_intensity=rng.uniform(*ranges.blob_intensity),
        noise=rng.uniform(*ranges.noise),
    )


def default_param_model(truncation_sigmas: float = 2.0) -> GaussianParamModel:
    """Zero-mean parameter distribution at clinically plausible scale."""
    return GaussianParamModel(
        mean=np.zeros(6),
        std=np.array([2.5, 2.5, 2.5, 10.0, 10.0, 10.0]),
        truncation_sigmas=truncation_sigmas,
    )


def make_dataset(
    n_cases: int,
    param_model: GaussianParamModel,
    ranges: PhantomRanges,
    seed: int,
    out_dir: str,
) -> DatasetManifest:
    """Generate n short-axis phantoms paired with inverse-warped transaxial
    volumes under parameters drawn from param_model; write volumes and the
    manifest to out_dir.

    The manifest's parameters are exact ground truth by construction. Each
    case uses an RNG stream derived from (seed, case index).
    """
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    os.makedirs(out_dir, exist_ok=True)
    case_seeds = np.random.SeedSequence(seed).spawn(n_cases)
    entries = []
    for i in range(n_cases):
        spec_stream, param_stream, vol_stream = case_seeds[i].spawn(3)
        spec = random_spec(ranges, np.random.default_rng(spec_stream))
        sa = generate_phantom(spec, seed=vol_stream)
        params = sample_truncated(param_model, 1, param_stream)[0]
        ta = augment_pair(sa, params)
        sa_name = f"case{i:04d}_sa"
        ta_name = f"case{i:04d}_ta"
        save_volume(sa, os.path.join(out_dir, sa_name))
        save_volume(ta, os.path.join(out_dir, ta_name))
        entries.append(
            ManifestEntry(transaxial_path=ta_name + ".f32", params=params, sa_path=sa_name + ".f32")
        )
    manifest = DatasetManifest(entries=entries, base_dir=out_dir)
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest
