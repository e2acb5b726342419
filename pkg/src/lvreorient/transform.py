"""Six-parameter rigid transforms: translation in voxels plus Euler rotation.

Convention, fixed once and used everywhere:

* angles are degrees at the API surface and are applied intrinsically as
  rotation about X, then Y, then Z, i.e. the rotation block is
  ``R = Rz(theta) @ Ry(beta) @ Rx(alpha)`` acting on column vectors;
* matrices act on voxel coordinates measured from the volume center, so the
  rotation pivots on the volume center and the translation column of
  ``to_matrix`` is exactly (tx, ty, tz);
* beta stays inside (-90, +90) degrees so the Euler extraction is unique.

The module also exposes vectorized helpers over raw (..., 6) parameter
arrays together with their analytic Jacobians; the training and registration
code differentiates through these.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

RIGID_ATOL = 1e-6
GIMBAL_MARGIN_DEG = 0.1

PARAM_NAMES = ("tx", "ty", "tz", "alpha_deg", "beta_deg", "theta_deg")


class NotRigidError(ValueError):
    """Matrix is not a rigid (rotation + translation) homogeneous transform."""


class GimbalLockError(ValueError):
    """Euler extraction attempted with |beta| at or beyond 90 degrees."""


@dataclass(frozen=True)
class RigidParams:
    """Translation in voxels of the canonical grid and rotation in degrees."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    alpha_deg: float = 0.0
    beta_deg: float = 0.0
    theta_deg: float = 0.0

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"rigid parameters must be finite, got {vals}")
        if abs(self.beta_deg) >= 90.0:
            raise ValueError(f"beta must lie in (-90, 90) degrees, got {self.beta_deg}")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.tx, self.ty, self.tz, self.alpha_deg, self.beta_deg, self.theta_deg],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, values) -> "RigidParams":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (6,):
            raise ValueError(f"expected 6 parameters, got shape {values.shape}")
        return cls(*[float(v) for v in values])

    def to_json_dict(self) -> dict:
        return {name: float(getattr(self, name)) for name in PARAM_NAMES}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "RigidParams":
        return cls(**{name: float(obj[name]) for name in PARAM_NAMES})


def save_params(params: RigidParams, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params.to_json_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_params(path: str) -> RigidParams:
    with open(path, "r", encoding="utf-8") as fh:
        return RigidParams.from_json_dict(json.load(fh))


# ---------------------------------------------------------------------------
# vectorized core over raw (..., 6) float arrays
# ---------------------------------------------------------------------------

def matrices_from_values(values: np.ndarray) -> np.ndarray:
    """Homogeneous 4x4 transforms for a (..., 6) array of raw parameters."""
    values = np.asarray(values, dtype=np.float64)
    t = values[..., 0:3]
    ang = np.deg2rad(values[..., 3:6])
    ca, cb, ct = np.cos(ang[..., 0]), np.cos(ang[..., 1]), np.cos(ang[..., 2])
    sa, sb, st = np.sin(ang[..., 0]), np.sin(ang[..., 1]), np.sin(ang[..., 2])

    m = np.zeros(values.shape[:-1] + (4, 4), dtype=np.float64)
    # R = Rz @ Ry @ Rx, expanded
    m[..., 0, 0] = ct * cb
    m[..., 0, 1] = ct * sb * sa - st * ca
    m[..., 0, 2] = ct * sb * ca + st * sa
    m[..., 1, 0] = st * cb
    m[..., 1, 1] = st * sb * sa + ct * ca
    m[..., 1, 2] = st * sb * ca - ct * sa
    m[..., 2, 0] = -sb
    m[..., 2, 1] = cb * sa
    m[..., 2, 2] = cb * ca
    m[..., 0:3, 3] = t
    m[..., 3, 3] = 1.0
    return m


def values_from_matrices(m: np.ndarray) -> np.ndarray:
    """Inverse of matrices_from_values; raises GimbalLockError near |beta|=90."""
    m = np.asarray(m, dtype=np.float64)
    sb = -m[..., 2, 0]
    limit = np.sin(np.deg2rad(90.0 - GIMBAL_MARGIN_DEG))
    if np.any(np.abs(sb) > limit):
        worst = float(np.max(np.abs(sb)))
        raise GimbalLockError(
            f"|beta| within {GIMBAL_MARGIN_DEG} deg of 90 (|sin beta| = {worst:.9f}); "
            "Euler extraction is ill-conditioned there"
        )
    values = np.empty(m.shape[:-2] + (6,), dtype=np.float64)
    values[..., 0:3] = m[..., 0:3, 3]
    values[..., 3] = np.rad2deg(np.arctan2(m[..., 2, 1], m[..., 2, 2]))
    values[..., 4] = np.rad2deg(np.arcsin(np.clip(sb, -1.0, 1.0)))
    values[..., 5] = np.rad2deg(np.arctan2(m[..., 1, 0], m[..., 0, 0]))
    return values


def matrix_jacobian(values: np.ndarray) -> np.ndarray:
    """d(matrix)/d(parameter) for raw (..., 6) parameters, shape (..., 6, 4, 4)."""
    values = np.asarray(values, dtype=np.float64)
    ang = np.deg2rad(values[..., 3:6])
    ca, cb, ct = np.cos(ang[..., 0]), np.cos(ang[..., 1]), np.cos(ang[..., 2])
    sa, sb, st = np.sin(ang[..., 0]), np.sin(ang[..., 1]), np.sin(ang[..., 2])
    k = np.pi / 180.0

    jac = np.zeros(values.shape[:-1] + (6, 4, 4), dtype=np.float64)
    jac[..., 0, 0, 3] = 1.0
    jac[..., 1, 1, 3] = 1.0
    jac[..., 2, 2, 3] = 1.0

    # d/dalpha: R = Rz Ry Rx, only Rx depends on alpha
    jac[..., 3, 0, 1] = k * (ct * sb * ca + st * sa)
    jac[..., 3, 0, 2] = k * (-ct * sb * sa + st * ca)
    jac[..., 3, 1, 1] = k * (st * sb * ca - ct * sa)
    jac[..., 3, 1, 2] = k * (-st * sb * sa - ct * ca)
    jac[..., 3, 2, 1] = k * (cb * ca)
    jac[..., 3, 2, 2] = k * (-cb * sa)

    # d/dbeta
    jac[..., 4, 0, 0] = k * (-ct * sb)
    jac[..., 4, 0, 1] = k * (ct * cb * sa)
    jac[..., 4, 0, 2] = k * (ct * cb * ca)
    jac[..., 4, 1, 0] = k * (-st * sb)
    jac[..., 4, 1, 1] = k * (st * cb * sa)
    jac[..., 4, 1, 2] = k * (st * cb * ca)
    jac[..., 4, 2, 0] = k * (-cb)
    jac[..., 4, 2, 1] = k * (-sb * sa)
    jac[..., 4, 2, 2] = k * (-sb * ca)

    # d/dtheta
    jac[..., 5, 0, 0] = k * (-st * cb)
    jac[..., 5, 0, 1] = k * (-st * sb * sa - ct * ca)
    jac[..., 5, 0, 2] = k * (-st * sb * ca + ct * sa)
    jac[..., 5, 1, 0] = k * (ct * cb)
    jac[..., 5, 1, 1] = k * (ct * sb * sa - st * ca)
    jac[..., 5, 1, 2] = k * (ct * sb * ca + st * sa)
    return jac


def matrix_vjp(values: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pull a (..., 4, 4) matrix cotangent back to (..., 6) parameter space."""
    jac = matrix_jacobian(values)
    return np.einsum("...kij,...ij->...k", jac, np.asarray(upstream, dtype=np.float64))


def values_vjp(m: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Cotangent of values_from_matrices: (..., 6) pulled back to (..., 4, 4)."""
    m = np.asarray(m, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    deg = 180.0 / np.pi
    out = np.zeros_like(m)
    out[..., 0, 3] = u[..., 0]
    out[..., 1, 3] = u[..., 1]
    out[..., 2, 3] = u[..., 2]

    r21, r22 = m[..., 2, 1], m[..., 2, 2]
    denom_a = r21 * r21 + r22 * r22
    out[..., 2, 1] += deg * u[..., 3] * r22 / denom_a
    out[..., 2, 2] += deg * u[..., 3] * (-r21) / denom_a

    r20 = m[..., 2, 0]
    out[..., 2, 0] += deg * u[..., 4] * (-1.0) / np.sqrt(1.0 - r20 * r20)

    r10, r00 = m[..., 1, 0], m[..., 0, 0]
    denom_t = r00 * r00 + r10 * r10
    out[..., 1, 0] += deg * u[..., 5] * r00 / denom_t
    out[..., 0, 0] += deg * u[..., 5] * (-r10) / denom_t
    return out


def rigid_inverse(m: np.ndarray) -> np.ndarray:
    """Exact inverse of (..., 4, 4) rigid transforms: (R, t) -> (R^T, -R^T t)."""
    m = np.asarray(m, dtype=np.float64)
    out = np.zeros_like(m)
    rot_t = np.swapaxes(m[..., 0:3, 0:3], -1, -2)
    out[..., 0:3, 0:3] = rot_t
    out[..., 0:3, 3] = -np.einsum("...ij,...j->...i", rot_t, m[..., 0:3, 3])
    out[..., 3, 3] = 1.0
    return out


def rigidity_residual(m: np.ndarray) -> float:
    """Max deviation from rigidity: orthonormality, det +1, affine bottom row."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (4, 4):
        raise NotRigidError(f"expected a 4x4 matrix, got shape {m.shape}")
    rot = m[..., 0:3, 0:3]
    eye = np.eye(3)
    ortho = np.abs(rot @ np.swapaxes(rot, -1, -2) - eye).max()
    det = np.abs(np.linalg.det(rot) - 1.0).max()
    bottom = np.abs(m[..., 3, :] - np.array([0.0, 0.0, 0.0, 1.0])).max()
    return float(max(ortho, det, bottom))


def _check_rigid(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    residual = rigidity_residual(m)
    if residual > RIGID_ATOL:
        raise NotRigidError(f"matrix is not rigid (residual {residual:.3e} > {RIGID_ATOL})")
    return m


# ---------------------------------------------------------------------------
# public single-transform API
# ---------------------------------------------------------------------------

def to_matrix(p: RigidParams) -> np.ndarray:
    """4x4 homogeneous matrix: translate by (tx,ty,tz) after rotating about
    the volume center by Rz(theta) @ Ry(beta) @ Rx(alpha)."""
    return matrices_from_values(p.as_array())


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b: apply b first, then a."""
    return _check_rigid(a) @ _check_rigid(b)


def invert(m: np.ndarray) -> np.ndarray:
    """Exact rigid inverse (transposed rotation, back-rotated translation)."""
    return rigid_inverse(_check_rigid(m))


def matrix_to_params(m: np.ndarray) -> RigidParams:
    """Recover RigidParams from a rigid matrix; distinct error near gimbal lock."""
    return RigidParams.from_array(values_from_matrices(_check_rigid(m)))


def identity_matrix() -> np.ndarray:
    return np.eye(4, dtype=np.float64)
