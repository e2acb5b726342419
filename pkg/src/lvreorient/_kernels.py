"""Fused numba kernels for the resampling and gradient hot paths.

All kernels are serial loops: accumulation order is fixed, so results are
bit-reproducible regardless of thread settings. Source volumes are passed
zero-padded by one voxel per side; sampling coordinates are clamped into the
padding margin, which implements zero contribution outside the volume without
per-corner bounds checks.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def warp_affine(src_pad, p, nx, ny, nz, out):
    """Trilinear pull-back warp of a padded volume under an index-space affine.

    src_pad: flattened (nx+2, ny+2, nz+2) padded source.
    p: (3, 4) map from output voxel index (x, y, z, 1) to source index.
    out: flattened (nx, ny, nz) destination.
    """
    sx = (ny + 2) * (nz + 2)
    sy = nz + 2
    p00, p01, p02, p03 = p[0, 0], p[0, 1], p[0, 2], p[0, 3]
    p10, p11, p12, p13 = p[1, 0], p[1, 1], p[1, 2], p[1, 3]
    p20, p21, p22, p23 = p[2, 0], p[2, 1], p[2, 2], p[2, 3]
    idx = 0
    for x in range(nx):
        for y in range(ny):
            ub = p00 * x + p01 * y + p03 + 1.0
            vb = p10 * x + p11 * y + p13 + 1.0
            wb = p20 * x + p21 * y + p23 + 1.0
            for z in range(nz):
                u = ub + p02 * z
                v = vb + p12 * z
                w = wb + p22 * z
                if u < 0.0:
                    u = 0.0
                elif u > nx + 1.0:
                    u = nx + 1.0
                if v < 0.0:
                    v = 0.0
                elif v > ny + 1.0:
                    v = ny + 1.0
                if w < 0.0:
                    w = 0.0
                elif w > nz + 1.0:
                    w = nz + 1.0
                i = int(u)
                j = int(v)
                k = int(w)
                if i > nx:
                    i = nx
                if j > ny:
                    j = ny
                if k > nz:
                    k = nz
                fu = u - i
                fv = v - j
                fw = w - k
                b = i * sx + j * sy + k
                c000 = src_pad[b]
                c001 = src_pad[b + 1]
                c010 = src_pad[b + sy]
                c011 = src_pad[b + sy + 1]
                c100 = src_pad[b + sx]
                c101 = src_pad[b + sx + 1]
                c110 = src_pad[b + sx + sy]
                c111 = src_pad[b + sx + sy + 1]
                c00 = c000 + fw * (c001 - c000)
                c01 = c010 + fw * (c011 - c010)
                c10 = c100 + fw * (c101 - c100)
                c11 = c110 + fw * (c111 - c110)
                c0 = c00 + fv * (c01 - c00)
                c1 = c10 + fv * (c11 - c10)
                out[idx] = c0 + fu * (c1 - c0)
                idx += 1


@njit(cache=True)
def warp_affine_grad(src_pad, p, nx, ny, nz, upstream, dp):
    """Accumulate d<upstream, warp_affine(...)>/dp into dp (3, 4).

    The interpolant is piecewise linear; inside a cell its exact derivative is
    used, and voxels whose coordinate is clamped outside the padded range get
    zero derivative (the output is constant zero there).
    """
    sx = (ny + 2) * (nz + 2)
    sy = nz + 2
    p00, p01, p02, p03 = p[0, 0], p[0, 1], p[0, 2], p[0, 3]
    p10, p11, p12, p13 = p[1, 0], p[1, 1], p[1, 2], p[1, 3]
    p20, p21, p22, p23 = p[2, 0], p[2, 1], p[2, 2], p[2, 3]
    for row in range(3):
        for col in range(4):
            dp[row, col] = 0.0
    idx = 0
    for x in range(nx):
        for y in range(ny):
            ub = p00 * x + p01 * y + p03 + 1.0
            vb = p10 * x + p11 * y + p13 + 1.0
            wb = p20 * x + p21 * y + p23 + 1.0
            for z in range(nz):
                g = upstream[idx]
                idx += 1
                if g == 0.0:
                    continue
                u = ub + p02 * z
                v = vb + p12 * z
                w = wb + p22 * z
                mu = 1.0
                mv = 1.0
                mw = 1.0
                if u <= 0.0:
                    u = 0.0
                    mu = 0.0
                elif u >= nx + 1.0:
                    u = nx + 1.0
                    mu = 0.0
                if v <= 0.0:
                    v = 0.0
                    mv = 0.0
                elif v >= ny + 1.0:
                    v = ny + 1.0
                    mv = 0.0
                if w <= 0.0:
                    w = 0.0
                    mw = 0.0
                elif w >= nz + 1.0:
                    w = nz + 1.0
                    mw = 0.0
                i = int(u)
                j = int(v)
                k = int(w)
                if i > nx:
                    i = nx
                if j > ny:
                    j = ny
                if k > nz:
                    k = nz
                fu = u - i
                fv = v - j
                fw = w - k
                b = i * sx + j * sy + k
                c000 = src_pad[b]
                c001 = src_pad[b + 1]
                c010 = src_pad[b + sy]
                c011 = src_pad[b + sy + 1]
                c100 = src_pad[b + sx]
                c101 = src_pad[b + sx + 1]
                c110 = src_pad[b + sx + sy]
                c111 = src_pad[b + sx + sy + 1]
                c00 = c000 + fw * (c001 - c000)
                c01 = c010 + fw * (c011 - c010)
                c10 = c100 + fw * (c101 - c100)
                c11 = c110 + fw * (c111 - c110)
                gu = ((c10 + fv * (c11 - c10)) - (c00 + fv * (c01 - c00))) * mu * g
                gv = ((c01 - c00) + fu * ((c11 - c10) - (c01 - c00))) * mv * g
                d00 = c001 - c000
                d01 = c011 - c010
                d10 = c101 - c100
                d11 = c111 - c110
                gw = ((d00 + fv * (d01 - d00)) + fu * ((d10 + fv * (d11 - d10)) - (d00 + fv * (d01 - d00)))) * mw * g
                dp[0, 0] += gu * x
                dp[0, 1] += gu * y
                dp[0, 2] += gu * z
                dp[0, 3] += gu
                dp[1, 0] += gv * x
                dp[1, 1] += gv * y
                dp[1, 2] += gv * z
                dp[1, 3] += gv
                dp[2, 0] += gw * x
                dp[2, 1] += gw * y
                dp[2, 2] += gw * z
                dp[2, 3] += gw


@njit(cache=True)
def sample_at(src_pad, cu, cv, cw, nx, ny, nz, out):
    """Trilinear sampling of a padded volume at explicit index-space points."""
    sx = (ny + 2) * (nz + 2)
    sy = nz + 2
    for idx in range(cu.shape[0]):
        u = cu[idx] + 1.0
        v = cv[idx] + 1.0
        w = cw[idx] + 1.0
        if u < 0.0:
            u = 0.0
        elif u > nx + 1.0:
            u = nx + 1.0
        if v < 0.0:
            v = 0.0
        elif v > ny + 1.0:
            v = ny + 1.0
        if w < 0.0:
            w = 0.0
        elif w > nz + 1.0:
            w = nz + 1.0
        i = int(u)
        j = int(v)
        k = int(w)
        if i > nx:
            i = nx
        if j > ny:
            j = ny
        if k > nz:
            k = nz
        fu = u - i
        fv = v - j
        fw = w - k
        b = i * sx + j * sy + k
        c000 = src_pad[b]
        c001 = src_pad[b + 1]
        c010 = src_pad[b + sy]
        c011 = src_pad[b + sy + 1]
        c100 = src_pad[b + sx]
        c101 = src_pad[b + sx + 1]
        c110 = src_pad[b + sx + sy]
        c111 = src_pad[b + sx + sy + 1]
        c00 = c000 + fw * (c001 - c000)
        c01 = c010 + fw * (c011 - c010)
        c10 = c100 + fw * (c101 - c100)
        c11 = c110 + fw * (c111 - c110)
        c0 = c00 + fv * (c01 - c00)
        c1 = c10 + fv * (c11 - c10)
        out[idx] = c0 + fu * (c1 - c0)


@njit(cache=True)
def gradmag_forward(src, mag):
    """Gradient magnitude of src (nx, ny, nz): central differences in the
    interior, one-sided at faces, in voxel units."""
    nx, ny, nz = src.shape
    for x in range(nx):
        xm = x - 1 if x > 0 else 0
        xp = x + 1 if x < nx - 1 else nx - 1
        hx = 0.5 if 0 < x < nx - 1 else 1.0
        for y in range(ny):
            ym = y - 1 if y > 0 else 0
            yp = y + 1 if y < ny - 1 else ny - 1
            hy = 0.5 if 0 < y < ny - 1 else 1.0
            for z in range(nz):
                zm = z - 1 if z > 0 else 0
                zp = z + 1 if z < nz - 1 else nz - 1
                hz = 0.5 if 0 < z < nz - 1 else 1.0
                gx = (src[xp, y, z] - src[xm, y, z]) * hx
                gy = (src[x, yp, z] - src[x, ym, z]) * hy
                gz = (src[x, y, zp] - src[x, y, zm]) * hz
                mag[x, y, z] = np.sqrt(gx * gx + gy * gy + gz * gz)


@njit(cache=True)
def gradmag_vjp(src, upstream, d_src):
    """Accumulate d<upstream, gradmag(src)>/d(src) into d_src (pre-zeroed).

    Uses the 0 subgradient where the magnitude vanishes.
    """
    nx, ny, nz = src.shape
    for x in range(nx):
        xm = x - 1 if x > 0 else 0
        xp = x + 1 if x < nx - 1 else nx - 1
        hx = 0.5 if 0 < x < nx - 1 else 1.0
        for y in range(ny):
            ym = y - 1 if y > 0 else 0
            yp = y + 1 if y < ny - 1 else ny - 1
            hy = 0.5 if 0 < y < ny - 1 else 1.0
            for z in range(nz):
                zm = z - 1 if z > 0 else 0
                zp = z + 1 if z < nz - 1 else nz - 1
                hz = 0.5 if 0 < z < nz - 1 else 1.0
                gx = (src[xp, y, z] - src[xm, y, z]) * hx
                gy = (src[x, yp, z] - src[x, ym, z]) * hy
                gz = (src[x, y, zp] - src[x, y, zm]) * hz
                m = np.sqrt(gx * gx + gy * gy + gz * gz)
                if m == 0.0:
                    continue
                s = upstream[x, y, z] / m
                cx = s * gx * hx
                cy = s * gy * hy
                cz = s * gz * hz
                d_src[xp, y, z] += cx
                d_src[xm, y, z] -= cx
                d_src[x, yp, z] += cy
                d_src[x, ym, z] -= cy
                d_src[x, y, zp] += cz
                d_src[x, y, zm] -= cz
