"""Voxel radiance field with volume rendering and exact adjoints.

The field stores pre-activation values on a dense vertex grid spanning an
axis-aligned box. Queries interpolate trilinearly, then apply sigmoid (color)
and softplus (density). View direction is accepted but unused: the field is
Lambertian.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit

from . import _march

# Rays are processed in fixed-size chunks with one gradient buffer per chunk,
# summed in chunk order, so results do not depend on the worker count.
CHUNK_RAYS = 4096
_BLOCK_RAYS = 256
_threads = 1


def set_num_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_num_threads() -> int:
    return _threads


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class RadianceField:
    """Dense vertex grid of (r, g, b, density) pre-activations.

    ``params`` has shape ``(nx, ny, nz, 4)``; ``rgb_grid`` and ``density_grid``
    are views into it. ``bbox`` is a ``(2, 3)`` array of lower/upper corners.
    """

    params: np.ndarray
    bbox: np.ndarray = dc_field(default_factory=lambda: np.array([[-1.0] * 3, [1.0] * 3]))

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        if self.params.ndim != 4 or self.params.shape[-1] != 4:
            raise ValueError("params must have shape (nx, ny, nz, 4)")
        if min(self.params.shape[:3]) < 2:
            raise ValueError("need at least 2 vertices per axis")
        if np.any(self.bbox[1] <= self.bbox[0]):
            raise ValueError("degenerate bbox")

    @classmethod
    def from_grids(cls, rgb_grid, density_grid, bbox=None) -> "RadianceField":
        rgb_grid = np.asarray(rgb_grid, dtype=np.float64)
        density_grid = np.asarray(density_grid, dtype=np.float64)
        if rgb_grid.shape != density_grid.shape + (3,):
            raise ValueError("rgb_grid must have shape density_grid.shape + (3,)")
        params = np.concatenate([rgb_grid, density_grid[..., None]], axis=-1)
        return cls(params) if bbox is None else cls(params, bbox)

    @classmethod
    def create(cls, resolution, bbox=None, density_init: float = -4.0, rgb_init: float = 0.0):
        if isinstance(resolution, int):
            resolution = (resolution,) * 3
        resolution = tuple(int(r) for r in resolution)
        params = np.empty(resolution + (4,))
        params[..., :3] = rgb_init
        params[..., 3] = density_init
        return cls(params) if bbox is None else cls(params, bbox)

    @property
    def rgb_grid(self) -> np.ndarray:
        return self.params[..., :3]

    @property
    def density_grid(self) -> np.ndarray:
        return self.params[..., 3]

    @property
    def resolution(self) -> tuple:
        return self.params.shape[:3]

    @property
    def scale(self) -> np.ndarray:
        return (np.array(self.resolution) - 1) / (self.bbox[1] - self.bbox[0])

    def copy(self) -> "RadianceField":
        return RadianceField(self.params.copy(), self.bbox.copy())


@dataclass
class FieldGrad:
    """Gradient with respect to the packed pre-activation grid."""

    params: np.ndarray

    @classmethod
    def zeros_like(cls, f: RadianceField) -> "FieldGrad":
        return cls(np.zeros_like(f.params))

    @property
    def rgb(self) -> np.ndarray:
        return self.params[..., :3]

    @property
    def density(self) -> np.ndarray:
        return self.params[..., 3]

    def __add__(self, other: "FieldGrad") -> "FieldGrad":
        return FieldGrad(self.params + other.params)

    def __mul__(self, c: float) -> "FieldGrad":
        return FieldGrad(self.params * c)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.params ** 2)))


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    ``world_from_camera`` is a 4x4 rigid transform.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_from_camera: np.ndarray

    def __post_init__(self):
        self.world_from_camera = np.asarray(self.world_from_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal length must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        R = self.world_from_camera[:3, :3]
        if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.world_from_camera[:3, 3].copy()

    def camera_dirs(self) -> np.ndarray:
        """Unit ray directions in the camera frame, shape ``(H, W, 3)``."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def _key(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.world_from_camera.tobytes())

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins and unit directions, each ``(H*W, 3)``, row-major pixels.

        The returned arrays are cached and read-only.
        """
        key = self._key()
        cached = _ray_cache.get(key)
        if cached is None:
            d = self.camera_dirs().reshape(-1, 3) @ self.world_from_camera[:3, :3].T
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            o = np.broadcast_to(self.origin, d.shape).copy()
            o.setflags(write=False)
            d.setflags(write=False)
            cached = _cache_put(_ray_cache, key, (o, d))
        return cached


_RAY_CACHE_SIZE = 512
_ray_cache: dict = {}
_segment_cache: dict = {}


def _cache_put(cache: dict, key, value):
    if len(cache) >= _RAY_CACHE_SIZE:
        cache.pop(next(iter(cache)))
    cache[key] = value
    return value


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera pose looking from ``eye`` at ``target`` (OpenCV axes)."""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    M = np.eye(4)
    M[:3, 0], M[:3, 1], M[:3, 2], M[:3, 3] = x, y, z, eye
    return M


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")


@dataclass
class RenderedView:
    rgb: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray


@dataclass
class NormalMap:
    normals: np.ndarray
    valid: np.ndarray


def bbox_intersect(origins, dirs, bbox) -> tuple[np.ndarray, np.ndarray]:
    """Slab test; misses get ``t_near == t_far == 0``. Near is clamped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bbox[0] - origins) * inv
        t1 = (bbox[1] - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    tn = np.maximum(lo.max(axis=-1), 0.0)
    tf = hi.min(axis=-1)
    miss = ~(tf > tn)
    tn[miss] = 0.0
    tf[miss] = 0.0
    return tn, tf


def query_field(field: RadianceField, point, direction=None) -> tuple[np.ndarray, float]:
    """Activated ``(color, density)`` at one point; zero outside the box."""
    p = np.asarray(point, dtype=np.float64)
    if direction is not None and abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be unit length")
    u = (p - field.bbox[0]) * field.scale
    top = np.array(field.resolution) - 1
    if np.any(u < -1e-9) or np.any(u > top + 1e-9):
        return np.zeros(3), 0.0
    u = np.clip(u, 0.0, top)
    i0 = np.minimum(np.floor(u).astype(int), top - 1)
    f = u - i0
    acc = np.zeros(4)
    for c in range(8):
        d = np.array([c & 1, (c >> 1) & 1, (c >> 2) & 1])
        w = np.prod(np.where(d, f, 1.0 - f))
        i, j, k = i0 + d
        acc[:3] += w * field.rgb_grid[i, j, k]
        acc[3] += w * field.density_grid[i, j, k]
    return expit(acc[:3]), float(softplus(acc[3]))


def _chunks(n: int):
    return [(s, min(s + CHUNK_RAYS, n)) for s in range(0, n, CHUNK_RAYS)]


def _blocks(a: int, b: int):
    # cache-sized sub-blocks of a chunk; sequential, so accumulation order is unchanged
    return [(s, min(s + _BLOCK_RAYS, b)) for s in range(a, b, _BLOCK_RAYS)]


def _run(fn, jobs):
    if _threads == 1 or len(jobs) == 1:
        return [fn(*j) for j in jobs]
    with ThreadPoolExecutor(_threads) as ex:
        return list(ex.map(lambda j: fn(*j), jobs))


def _check_samples(n_samples: int):
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")


def render_rays(field: RadianceField, origins, dirs, t_near, t_far, n_samples: int,
                ray_ids=None, seed: int | None = None):
    """Composite a batch of rays.

    Returns ``(rgb (R,3), depth (R,), transmittance (R,))``. ``seed=None`` places
    samples at stratum midpoints; otherwise each stratum is jittered by a hash
    of ``(seed, ray_id, k)``, so results are independent of batching.
    """
    _check_samples(n_samples)
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    t_near = np.ascontiguousarray(t_near, dtype=np.float64)
    t_far = np.ascontiguousarray(t_far, dtype=np.float64)
    R = origins.shape[0]
    ids = np.arange(R, dtype=np.int64) if ray_ids is None else np.ascontiguousarray(ray_ids, dtype=np.int64)
    rgb, depth, trans = np.empty((R, 3)), np.empty(R), np.empty(R)
    s = -1 if seed is None else int(seed)

    def work(a0, b0):
        for a, b in _blocks(a0, b0):
            smp = _Samples(field, origins[a:b], dirs[a:b], t_near[a:b], t_far[a:b], ids[a:b], n_samples, s)
            _march.composite(smp.att, smp.col, smp.ts, rgb[a:b], depth[a:b], trans[a:b])

    _run(work, _chunks(R))
    return rgb, depth, trans


class _Samples:
    """Per-sample quantities for a chunk of rays (gather + vectorized activations)."""

    def __init__(self, field, o, d, tn, tf, ids, n, seed, need_dsig=False):
        R = o.shape[0]
        self.V = np.empty((4, R, n))
        self.ts = np.empty((R, n))
        self.deltas = np.empty((R, n))
        self.inside = np.empty((R, n), dtype=np.bool_)
        _march.gather(o, d, tn, tf, ids, n, seed, field.params, field.bbox[0].copy(), field.scale,
                      self.V, self.ts, self.deltas, self.inside)
        s = self.V[3]
        # softplus(s) = max(s, 0) + log1p(exp(-|s|)), zero optical depth outside the box
        tau = (np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))) * self.deltas
        tau[~self.inside] = 0.0
        self.att = np.exp(-tau)
        self.col = 0.5 + 0.5 * np.tanh(0.5 * self.V[:3])
        self.dsig = 0.5 + 0.5 * np.tanh(0.5 * s) if need_dsig else None


def render_rays_with_grad(field: RadianceField, origins, dirs, t_near, t_far, n_samples: int,
                          grad_rgb, grad_depth=None, ray_ids=None, seed: int | None = None) -> FieldGrad:
    """Vector-Jacobian product of :func:`render_rays` w.r.t. the pre-activation grids."""
    _check_samples(n_samples)
    R = len(origins)
    g_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64).reshape(R, 3)
    g_depth = np.zeros(R) if grad_depth is None else np.ascontiguousarray(grad_depth, dtype=np.float64).reshape(R)
    keep = np.flatnonzero(np.any(g_rgb != 0.0, axis=1) | (g_depth != 0.0))
    ids = np.arange(R, dtype=np.int64) if ray_ids is None else np.asarray(ray_ids, dtype=np.int64)
    origins = np.ascontiguousarray(np.asarray(origins, dtype=np.float64)[keep])
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64)[keep])
    t_near = np.ascontiguousarray(np.asarray(t_near, dtype=np.float64)[keep])
    t_far = np.ascontiguousarray(np.asarray(t_far, dtype=np.float64)[keep])
    ids, g_rgb, g_depth = (np.ascontiguousarray(a[keep]) for a in (ids, g_rgb, g_depth))
    s = -1 if seed is None else int(seed)
    lo, scale = field.bbox[0].copy(), field.scale
    shape = np.array(field.params.shape[:3], dtype=np.int64)

    def work(a0, b0):
        buf = FieldGrad.zeros_like(field)
        for a, b in _blocks(a0, b0):
            smp = _Samples(field, origins[a:b], dirs[a:b], t_near[a:b], t_far[a:b], ids[a:b], n_samples, s,
                           need_dsig=True)
            _march.scatter_adjoint(origins[a:b], dirs[a:b], smp.ts, smp.deltas, smp.inside, smp.att,
                                   smp.col, smp.dsig, shape, lo, scale, g_rgb[a:b], g_depth[a:b], buf.params)
        return buf

    total = FieldGrad.zeros_like(field)
    for buf in _run(work, _chunks(len(keep))):
        total.params += buf.params
    return total


class RayTrace:
    """Forward samples of a ray batch kept for a later vector-Jacobian product.

    Valid only while the field's parameters are unchanged.
    """

    def __init__(self, field: RadianceField, origins, dirs, chunks):
        self.field = field
        self.origins = origins
        self.dirs = dirs
        self.chunks = chunks  # per chunk: list of (start, stop, _Samples)

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]


def trace_rays(field: RadianceField, origins, dirs, t_near, t_far, n_samples: int,
               ray_ids=None, seed: int | None = None):
    """:func:`render_rays` that also returns a :class:`RayTrace` for :func:`trace_vjp`."""
    _check_samples(n_samples)
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    t_near = np.ascontiguousarray(t_near, dtype=np.float64)
    t_far = np.ascontiguousarray(t_far, dtype=np.float64)
    R = origins.shape[0]
    ids = np.arange(R, dtype=np.int64) if ray_ids is None else np.ascontiguousarray(ray_ids, dtype=np.int64)
    rgb, depth, trans = np.empty((R, 3)), np.empty(R), np.empty(R)
    s = -1 if seed is None else int(seed)

    def work(a0, b0):
        kept = []
        for a, b in _blocks(a0, b0):
            smp = _Samples(field, origins[a:b], dirs[a:b], t_near[a:b], t_far[a:b], ids[a:b], n_samples, s,
                           need_dsig=True)
            smp.V = None
            _march.composite(smp.att, smp.col, smp.ts, rgb[a:b], depth[a:b], trans[a:b])
            kept.append((a, b, smp))
        return kept

    return rgb, depth, trans, RayTrace(field, origins, dirs, _run(work, _chunks(R)))


def trace_vjp(trace: RayTrace, grad_rgb, grad_depth=None) -> FieldGrad:
    """Vector-Jacobian product of a traced render w.r.t. the pre-activation grids.

    Rays with zero upstream gradient are skipped inside the sweep.
    """
    field = trace.field
    R = trace.n_rays
    g_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64).reshape(R, 3)
    g_depth = np.zeros(R) if grad_depth is None else np.ascontiguousarray(grad_depth, dtype=np.float64).reshape(R)
    lo, scale = field.bbox[0].copy(), field.scale
    shape = np.array(field.params.shape[:3], dtype=np.int64)
    o, d = trace.origins, trace.dirs

    def work(blocks):
        buf = FieldGrad.zeros_like(field)
        for a, b, smp in blocks:
            if not (g_rgb[a:b].any() or g_depth[a:b].any()):
                continue
            _march.scatter_adjoint(o[a:b], d[a:b], smp.ts, smp.deltas, smp.inside, smp.att, smp.col, smp.dsig,
                                   shape, lo, scale, g_rgb[a:b], g_depth[a:b], buf.params)
        return buf

    total = FieldGrad.zeros_like(field)
    for buf in _run(work, [(c,) for c in trace.chunks]):
        total.params += buf.params
    return total


def trace_views(field: RadianceField, cameras, n_samples: int, seed: int | None = None):
    """:func:`render_views` plus a :class:`RayTrace` over the concatenated pixels."""
    if not cameras:
        return [], None
    parts = [camera_rays(field, c) for c in cameras]
    o, d, tn, tf = (np.concatenate([p[i] for p in parts]) for i in range(4))
    ids = np.concatenate([np.arange(c.width * c.height) for c in cameras])
    rgb, depth, trans, trace = trace_rays(field, o, d, tn, tf, n_samples, ray_ids=ids, seed=seed)
    return _split_views(cameras, rgb, depth, trans), trace


def render_ray(field: RadianceField, ray: Ray, n_samples: int, seed: int | None = None, ray_id: int = 0):
    """Composite one ray: ``(color, depth, final transmittance)``."""
    if not ray.t_near < ray.t_far:
        raise ValueError("t_near must be < t_far")
    rgb, depth, trans = render_rays(field, ray.origin[None], ray.direction[None], [ray.t_near],
                                    [ray.t_far], n_samples, ray_ids=[ray_id], seed=seed)
    return rgb[0], float(depth[0]), float(trans[0])


def camera_rays(field: RadianceField, camera: Camera):
    """``(origins, dirs, t_near, t_far)`` for every pixel; cached per camera and box, read-only."""
    o, d = camera.rays()
    key = camera._key() + (field.bbox.tobytes(),)
    seg = _segment_cache.get(key)
    if seg is None:
        tn, tf = bbox_intersect(o, d, field.bbox)
        tn.setflags(write=False)
        tf.setflags(write=False)
        seg = _cache_put(_segment_cache, key, (tn, tf))
    return (o, d) + seg


def render_view(field: RadianceField, camera: Camera, n_samples: int, seed: int | None = None) -> RenderedView:
    o, d, tn, tf = camera_rays(field, camera)
    rgb, depth, trans = render_rays(field, o, d, tn, tf, n_samples, seed=seed)
    H, W = camera.height, camera.width
    return RenderedView(rgb.reshape(H, W, 3), depth.reshape(H, W), (1.0 - trans).reshape(H, W))


def render_view_with_grad(field: RadianceField, camera: Camera, n_samples: int, grad_rgb,
                          grad_depth=None, seed: int | None = None) -> FieldGrad:
    """dLoss/d(grids) given per-pixel upstream gradients of rgb ``(H,W,3)`` and depth ``(H,W)``."""
    H, W = camera.height, camera.width
    if np.shape(grad_rgb) != (H, W, 3):
        raise ValueError(f"grad_rgb shape {np.shape(grad_rgb)} != {(H, W, 3)}")
    if grad_depth is not None and np.shape(grad_depth) != (H, W):
        raise ValueError(f"grad_depth shape {np.shape(grad_depth)} != {(H, W)}")
    o, d, tn, tf = camera_rays(field, camera)
    gd = None if grad_depth is None else np.reshape(grad_depth, -1)
    return render_rays_with_grad(field, o, d, tn, tf, n_samples, np.reshape(grad_rgb, (-1, 3)), gd, seed=seed)


def _normal_parts(depth, camera):
    dcam = camera.camera_dirs()
    P = depth[..., None] * dcam
    H, W = depth.shape
    a = np.zeros((H, W, 3))
    b = np.zeros((H, W, 3))
    a[1:-1, 1:-1] = P[1:-1, 2:] - P[1:-1, :-2]
    b[1:-1, 1:-1] = P[2:, 1:-1] - P[:-2, 1:-1]
    m = np.cross(b, a)
    mn = np.linalg.norm(m, axis=-1)
    valid = np.zeros((H, W), dtype=bool)
    if H >= 3 and W >= 3:
        pos = depth > 0
        valid[1:-1, 1:-1] = pos[1:-1, 2:] & pos[1:-1, :-2] & pos[2:, 1:-1] & pos[:-2, 1:-1]
    valid &= mn > 1e-12
    return dcam, a, b, m, mn, valid


def normal_from_depth(depth, camera: Camera) -> NormalMap:
    """Camera-frame normals from a ray-distance depth map.

    Pixels are back-projected along their unit rays; the normal is the
    normalized cross product of vertical and horizontal central differences,
    oriented toward the camera. Border pixels and pixels with a zero-depth
    neighbor are invalid (normal set to zero).
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0):
        raise ValueError("depth must be non-negative")
    _, _, _, m, mn, valid = _normal_parts(depth, camera)
    n = np.zeros_like(m)
    n[valid] = m[valid] / mn[valid, None]
    return NormalMap(n, valid)


def normal_from_depth_vjp(depth, camera: Camera, grad_normals) -> np.ndarray:
    """Pull a gradient on the normal map back to the depth map."""
    depth = np.asarray(depth, dtype=np.float64)
    dcam, a, b, m, mn, valid = _normal_parts(depth, camera)
    g = np.where(valid[..., None], np.asarray(grad_normals, dtype=np.float64), 0.0)
    safe = np.where(valid, mn, 1.0)[..., None]
    n = m / safe
    gm = (g - n * np.sum(n * g, axis=-1, keepdims=True)) / safe
    ga = np.cross(gm, b)
    gb = np.cross(a, gm)
    gP = np.zeros_like(m)
    gP[1:-1, 2:] += ga[1:-1, 1:-1]
    gP[1:-1, :-2] -= ga[1:-1, 1:-1]
    gP[2:, 1:-1] += gb[1:-1, 1:-1]
    gP[:-2, 1:-1] -= gb[1:-1, 1:-1]
    return np.sum(gP * dcam, axis=-1)


def _split_views(cameras, rgb, depth, trans) -> list[RenderedView]:
    out, s = [], 0
    for c in cameras:
        e = s + c.width * c.height
        H, W = c.height, c.width
        out.append(RenderedView(rgb[s:e].reshape(H, W, 3), depth[s:e].reshape(H, W),
                                (1.0 - trans[s:e]).reshape(H, W)))
        s = e
    return out


def render_views(field: RadianceField, cameras, n_samples: int, seed: int | None = None) -> list[RenderedView]:
    """Render several cameras in one batched kernel call."""
    if not cameras:
        return []
    parts = [camera_rays(field, c) for c in cameras]
    o, d, tn, tf = (np.concatenate([p[i] for p in parts]) for i in range(4))
    ids = np.concatenate([np.arange(c.width * c.height) for c in cameras])
    rgb, depth, trans = render_rays(field, o, d, tn, tf, n_samples, ray_ids=ids, seed=seed)
    return _split_views(cameras, rgb, depth, trans)
