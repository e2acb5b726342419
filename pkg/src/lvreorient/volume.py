"""3D scalar volumes: representation, file I/O, resizing, gradients, normalization.

A volume is stored as a float32 array of shape (nx, ny, nz), indexed
``data[x, y, z]``. On disk it is a pair of files sharing one stem: a JSON
header ``<stem>.json`` and a raw payload ``<stem>.f32`` of little-endian
32-bit floats with x varying fastest (Fortran ravel of the array).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

HEADER_SUFFIX = ".json"
PAYLOAD_SUFFIX = ".f32"


class VolumeFormatError(ValueError):
    """Malformed volume file pair (bad header, payload size mismatch, ...)."""


@dataclass(frozen=True)
class Volume3D:
    """Scalar 3D image with voxel spacing.

    dims: (nx, ny, nz), all positive.
    voxel_size_mm: (sx, sy, sz), all strictly positive.
    data: float32 array of shape dims.
    """

    dims: tuple[int, int, int]
    voxel_size_mm: tuple[float, float, float]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.voxel_size_mm)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise VolumeFormatError(f"dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise VolumeFormatError(f"voxel sizes must be strictly positive, got {self.voxel_size_mm}")
        data = np.asarray(self.data, dtype=np.float32)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise VolumeFormatError(
                f"data has {data.size} values, dims {dims} require {dims[0] * dims[1] * dims[2]}"
            )
        data = np.ascontiguousarray(data.reshape(dims))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size_mm", spacing)
        object.__setattr__(self, "data", data)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def _split_stem(path: str) -> str:
    for suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def load_volume(path: str) -> Volume3D:
    """Load a volume from its header/payload pair.

    `path` may be the header, the payload, or the common stem.
    """
    stem = _split_stem(os.fspath(path))
    header_path = stem + HEADER_SUFFIX
    payload_path = stem + PAYLOAD_SUFFIX
    if not os.path.exists(header_path):
        raise FileNotFoundError(header_path)
    if not os.path.exists(payload_path):
        raise FileNotFoundError(payload_path)
    with open(header_path, "r", encoding="utf-8") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise VolumeFormatError(f"invalid header {header_path}: {exc}") from exc
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["voxel_size_mm"])
        dtype = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"invalid header {header_path}: {exc}") from exc
    if dtype != "f32le":
        raise VolumeFormatError(f"unsupported dtype {dtype!r} in {header_path}")
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeFormatError(f"non-positive dims {dims} in {header_path}")
    raw = np.fromfile(payload_path, dtype="<f4")
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise VolumeFormatError(
            f"{payload_path}: payload has {raw.size} floats, header dims {dims} require {expected}"
        )
    # payload is x-fastest, so reshape in Fortran order to index [x, y, z]
    data = np.ascontiguousarray(raw.reshape(dims, order="F"))
    return Volume3D(dims=dims, voxel_size_mm=spacing, data=data)


def save_volume(vol: Volume3D, path: str) -> None:
    """Write the header/payload pair for `vol`; round trips bit-exactly."""
    stem = _split_stem(os.fspath(path))
    header = {
        "dims": list(vol.dims),
        "voxel_size_mm": list(vol.voxel_size_mm),
        "dtype": "f32le",
    }
    with open(stem + HEADER_SUFFIX, "w", encoding="utf-8") as fh:
        json.dump(header, fh, sort_keys=True)
        fh.write("\n")
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F")
    payload.tofile(stem + PAYLOAD_SUFFIX)


def _resize_axis_coords(n_out: int, n_in: int) -> np.ndarray:
    # voxel-center mapping, corners not aligned: center i sits at (i+0.5)/n
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def resize_trilinear(vol: Volume3D, target_dims: tuple[int, int, int]) -> Volume3D:
    """Resize by trilinear interpolation at proportionally mapped voxel centers.

    Voxel size is rescaled so the physical extent is unchanged. Coordinates
    beyond the outermost voxel centers clamp to the edge value, which keeps
    constant volumes exactly constant.
    """
    target = tuple(int(d) for d in target_dims)
    if len(target) != 3 or any(d <= 0 for d in target):
        raise ValueError(f"target dims must be three positive integers, got {target_dims}")
    src = vol.data.astype(np.float64)
    coords = [_resize_axis_coords(target[a], vol.dims[a]) for a in range(3)]
    lo = [np.clip(np.floor(c).astype(np.intp), 0, vol.dims[a] - 1) for a, c in enumerate(coords)]
    hi = [np.minimum(lo[a] + 1, vol.dims[a] - 1) for a in range(3)]
    frac = [np.clip(coords[a] - lo[a], 0.0, 1.0) for a in range(3)]

    out = np.zeros(target, dtype=np.float64)
    for cx, wx in ((lo[0], 1.0 - frac[0]), (hi[0], frac[0])):
        for cy, wy in ((lo[1], 1.0 - frac[1]), (hi[1], frac[1])):
            for cz, wz in ((lo[2], 1.0 - frac[2]), (hi[2], frac[2])):
                w = wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
                out += w * src[np.ix_(cx, cy, cz)]

    spacing = tuple(vol.voxel_size_mm[a] * vol.dims[a] / target[a] for a in range(3))
    return Volume3D(dims=target, voxel_size_mm=spacing, data=out.astype(np.float32))


def gradient_parts(data: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-axis central differences over the last three axes, plus magnitude.

    Central differences in the interior, one-sided at the boundaries, so the
    outputs have the input's shape. Accepts leading batch axes. Returns
    (gx, gy, gz, magnitude) as float64.
    """
    if any(n < 2 for n in data.shape[-3:]) or data.ndim < 3:
        raise ValueError(f"gradient needs at least 2 voxels per axis, got shape {data.shape}")
    arr = np.asarray(data, dtype=np.float64)
    gx = np.gradient(arr, axis=-3)
    gy = np.gradient(arr, axis=-2)
    gz = np.gradient(arr, axis=-1)
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    return gx, gy, gz, mag


def gradient_magnitude_array(data: np.ndarray) -> np.ndarray:
    """Voxel-unit gradient magnitude over the last three axes, as float64."""
    return gradient_parts(data)[3]


def _diff_adjoint(upstream: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of the central/one-sided difference operator along `axis`."""
    out = np.zeros_like(upstream)
    u = np.moveaxis(upstream, axis, 0)
    o = np.moveaxis(out, axis, 0)
    n = u.shape[0]
    o[0] -= u[0]
    o[1] += u[0]
    o[n - 1] += u[n - 1]
    o[n - 2] -= u[n - 1]
    if n > 2:
        o[2:] += 0.5 * u[1 : n - 1]
        o[: n - 2] -= 0.5 * u[1 : n - 1]
    return out


def gradient_magnitude_vjp(
    parts: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray], upstream: np.ndarray
) -> np.ndarray:
    """Backpropagate `upstream` d(loss)/d(magnitude) to the source array.

    `parts` is the tuple returned by gradient_parts for that array. The
    magnitude is non-differentiable where it is zero; the subgradient 0 is
    used there.
    """
    gx, gy, gz, mag = parts
    scale = np.divide(upstream, mag, out=np.zeros_like(mag), where=mag > 0)
    d_arr = _diff_adjoint(scale * gx, -3)
    d_arr += _diff_adjoint(scale * gy, -2)
    d_arr += _diff_adjoint(scale * gz, -1)
    return d_arr


def gradient_magnitude(vol: Volume3D) -> Volume3D:
    """Per-voxel gradient magnitude in voxel units; same dims as the input."""
    mag = gradient_magnitude_array(vol.data)
    return Volume3D(dims=vol.dims, voxel_size_mm=vol.voxel_size_mm, data=mag.astype(np.float32))


def normalize_array(data: np.ndarray) -> np.ndarray:
    """Divide by the global max (all zeros if max <= 0); clamp into [0, 1]."""
    arr = np.asarray(data, dtype=np.float64)
    peak = float(arr.max()) if arr.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(arr)
    return np.clip(arr / peak, 0.0, 1.0)


def normalize(vol: Volume3D) -> Volume3D:
    """Max-normalize intensities into [0, 1]; all-zero if the max is <= 0."""
    out = normalize_array(vol.data.astype(np.float64))
    return Volume3D(dims=vol.dims, voxel_size_mm=vol.voxel_size_mm, data=out.astype(np.float32))
