"""Compiled ray-marching kernels: sample gathering, compositing and the adjoint.

Rendering is split in three passes so that the transcendental activations can
run through numpy's vectorized loops:

1. ``gather`` places stratified samples and trilinearly interpolates the packed
   pre-activation grid at each of them;
2. activations (sigmoid colour, softplus density) are applied array-wide;
3. ``composite`` alpha-composites, and ``scatter_adjoint`` runs the reverse
   sweep and scatters into the gradient grid.

Grid layout is vertex-centred: the packed grid is ``(nx, ny, nz, 4)`` holding
(r, g, b, density) pre-activations, with vertices spanning the bounding box.
"""
import numpy as np
from numba import njit

DEPTH_EPS = 1e-10
_TOL = 1e-9

_opts = dict(cache=True, nogil=True, error_model="numpy")


@njit(inline="always", **_opts)
def _splitmix(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(inline="always", **_opts)
def _jitter(seed, ray_id, k):
    h = _splitmix(np.uint64(seed) * np.uint64(0x100000001B3) + np.uint64(ray_id))
    h = _splitmix(h ^ np.uint64(k))
    return float(h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(**_opts)
def _sample_times(tn, tf, n, seed, ray_id, ts, deltas):
    step = (tf - tn) / n
    for k in range(n):
        u = 0.5 if seed < 0 else _jitter(seed, ray_id, k)
        ts[k] = tn + (k + u) * step
    for k in range(n - 1):
        deltas[k] = ts[k + 1] - ts[k]
    deltas[n - 1] = tf - ts[n - 1]


@njit(inline="always", **_opts)
def _axis(p, lo, scale, top):
    """Continuous vertex coordinate; -1.0 flags outside."""
    u = (p - lo) * scale
    if u < -_TOL or u > top + _TOL:
        return -1.0
    if u < 0.0:
        return 0.0
    if u > top:
        return float(top)
    return u


@njit(inline="always", **_opts)
def _base(u, top):
    i = int(u)
    if i > top - 1:
        i = top - 1
    return i


@njit(**_opts)
def gather(origins, dirs, tnear, tfar, ray_ids, n, seed, grid, lo, scale, V, ts, deltas, inside):
    """Sample times and interpolated pre-activations ``V[:, r, k]`` (channel-planar).

    Samples outside the box get ``inside = False`` and ``V = 0``; rays with an
    empty segment have every sample outside.
    """
    tx, ty, tz = grid.shape[0] - 1, grid.shape[1] - 1, grid.shape[2] - 1
    lx, ly, lz = lo[0], lo[1], lo[2]
    sx, sy, sz = scale[0], scale[1], scale[2]
    for r in range(origins.shape[0]):
        tn, tf = tnear[r], tfar[r]
        if not tf > tn:
            for k in range(n):
                inside[r, k] = False
                ts[r, k] = 0.0
                deltas[r, k] = 0.0
                for c in range(4):
                    V[c, r, k] = 0.0
            continue
        _sample_times(tn, tf, n, seed, ray_ids[r], ts[r], deltas[r])
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        for k in range(n):
            t = ts[r, k]
            ux = _axis(ox + t * dx, lx, sx, tx)
            uy = _axis(oy + t * dy, ly, sy, ty)
            uz = _axis(oz + t * dz, lz, sz, tz)
            if ux < 0.0 or uy < 0.0 or uz < 0.0:
                inside[r, k] = False
                for c in range(4):
                    V[c, r, k] = 0.0
                continue
            inside[r, k] = True
            i = _base(ux, tx)
            j = _base(uy, ty)
            l = _base(uz, tz)
            fx, fy, fz = ux - i, uy - j, uz - l
            gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
            w000 = gx * gy * gz
            w100 = fx * gy * gz
            w010 = gx * fy * gz
            w110 = fx * fy * gz
            w001 = gx * gy * fz
            w101 = fx * gy * fz
            w011 = gx * fy * fz
            w111 = fx * fy * fz
            i1, j1, l1 = i + 1, j + 1, l + 1
            for c in range(4):
                V[c, r, k] = (w000 * grid[i, j, l, c] + w100 * grid[i1, j, l, c]
                              + w010 * grid[i, j1, l, c] + w110 * grid[i1, j1, l, c]
                              + w001 * grid[i, j, l1, c] + w101 * grid[i1, j, l1, c]
                              + w011 * grid[i, j1, l1, c] + w111 * grid[i1, j1, l1, c])


@njit(**_opts)
def composite(att, col, ts, out_rgb, out_depth, out_trans):
    """Front-to-back compositing given per-sample attenuation ``exp(-sigma*delta)``."""
    n = att.shape[1]
    for r in range(att.shape[0]):
        T = 1.0
        wsum = 0.0
        dnum = 0.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        for k in range(n):
            w = T * (1.0 - att[r, k])
            cr += w * col[0, r, k]
            cg += w * col[1, r, k]
            cb += w * col[2, r, k]
            wsum += w
            dnum += w * ts[r, k]
            T *= att[r, k]
        out_rgb[r, 0] = cr
        out_rgb[r, 1] = cg
        out_rgb[r, 2] = cb
        out_depth[r] = dnum / max(wsum, DEPTH_EPS)
        out_trans[r] = T


@njit(**_opts)
def scatter_adjoint(origins, dirs, ts, deltas, inside, att, col, dsig, grid_shape, lo, scale,
                    g_rgb, g_depth, grad):
    """Reverse sweep of :func:`composite` chained through the activations and
    the trilinear interpolation; accumulates into the packed ``grad`` grid.

    ``dsig`` is ``sigmoid(density pre-activation)``, the softplus derivative.
    """
    n = att.shape[1]
    tx, ty, tz = grid_shape[0] - 1, grid_shape[1] - 1, grid_shape[2] - 1
    lx, ly, lz = lo[0], lo[1], lo[2]
    sx, sy, sz = scale[0], scale[1], scale[2]
    ws = np.empty(n)
    tnext = np.empty(n)
    for r in range(att.shape[0]):
        gr, gg, gb, gd = g_rgb[r, 0], g_rgb[r, 1], g_rgb[r, 2], g_depth[r]
        if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0:
            continue
        T = 1.0
        wsum = 0.0
        dnum = 0.0
        for k in range(n):
            w = T * (1.0 - att[r, k])
            ws[k] = w
            wsum += w
            dnum += w * ts[r, k]
            T *= att[r, k]
            tnext[k] = T
        wc = max(wsum, DEPTH_EPS)
        depth = dnum / wc if wsum > DEPTH_EPS else 0.0
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        # suffix = sum_{k>m} w_k e_k with e_k = dLoss/dw_k
        suffix = 0.0
        for m in range(n - 1, -1, -1):
            if not inside[r, m]:
                continue
            c0, c1, c2 = col[0, r, m], col[1, r, m], col[2, r, m]
            t = ts[r, m]
            e = gr * c0 + gg * c1 + gb * c2 + gd * (t - depth) / wc
            wm = ws[m]
            d_s = deltas[r, m] * (tnext[m] * e - suffix) * dsig[r, m]
            suffix += wm * e
            d0 = wm * gr * c0 * (1.0 - c0)
            d1 = wm * gg * c1 * (1.0 - c1)
            d2 = wm * gb * c2 * (1.0 - c2)
            ux = _axis(ox + t * dx, lx, sx, tx)
            uy = _axis(oy + t * dy, ly, sy, ty)
            uz = _axis(oz + t * dz, lz, sz, tz)
            i = _base(ux, tx)
            j = _base(uy, ty)
            l = _base(uz, tz)
            fx, fy, fz = ux - i, uy - j, uz - l
            for c8 in range(8):
                bx = c8 & 1
                by = (c8 >> 1) & 1
                bz = (c8 >> 2) & 1
                w8 = (fx if bx else 1.0 - fx) * (fy if by else 1.0 - fy) * (fz if bz else 1.0 - fz)
                ii, jj, ll = i + bx, j + by, l + bz
                grad[ii, jj, ll, 0] += w8 * d0
                grad[ii, jj, ll, 1] += w8 * d1
                grad[ii, jj, ll, 2] += w8 * d2
                grad[ii, jj, ll, 3] += w8 * d_s
