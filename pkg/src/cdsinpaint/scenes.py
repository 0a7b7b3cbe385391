"""Scene data model, on-disk format, mask dilation and a synthetic occluded-scene generator.

The synthetic scenes are made of axis-aligned boxes with smooth procedural
textures: a back wall, a floor, a few background props, and one occluder box
standing in front of them. Training views are rendered with the occluder and
mask its (dilated) footprint; test views are rendered without it.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .field import Camera, RadianceField, look_at

FORMAT_NAME = "ocld-scene"
FORMAT_VERSION = 1
DEPTH_MAGIC = b"ODPT"
POOL_FACTOR = 4


class SceneError(Exception):
    """Base class for scene loading/saving failures."""


class NoManifestError(SceneError):
    pass


class MissingAssetError(SceneError):
    pass


class ShapeMismatchError(SceneError):
    pass


class PoseError(SceneError):
    pass


class ManifestError(SceneError):
    pass


class DegenerateSceneError(SceneError):
    pass


@dataclass
class MaskedView:
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    camera: Camera

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        _check_view_shapes(self.rgb, self.depth, self.mask, self.camera)


@dataclass
class TestView:
    """Held-out view: object-free ground truth plus the object's footprint."""

    camera: Camera
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
        _check_view_shapes(self.rgb, self.depth, self.mask, self.camera)

    __test__ = False  # keep pytest from collecting this class


@dataclass
class SceneBundle:
    train_views: list[MaskedView]
    test_views: list[TestView]
    concept: str = ""
    bbox: np.ndarray = dc_field(default_factory=lambda: np.array([[-1.0] * 3, [1.0] * 3]))

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        self.validate()

    def validate(self) -> None:
        cams = [v.camera for v in self.train_views] + [v.camera for v in self.test_views]
        if cams:
            ref = _intrinsics(cams[0])
            for c in cams[1:]:
                if _intrinsics(c) != ref:
                    raise ShapeMismatchError("all cameras in a scene must share intrinsics")

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.train_views]


def _intrinsics(c: Camera):
    return (c.fx, c.fy, c.cx, c.cy, c.width, c.height)


def _check_view_shapes(rgb, depth, mask, camera):
    H, W = camera.height, camera.width
    if rgb.shape != (H, W, 3):
        raise ShapeMismatchError(f"rgb shape {rgb.shape} does not match camera {(H, W, 3)}")
    if depth.shape != (H, W):
        raise ShapeMismatchError(f"depth shape {depth.shape} does not match camera {(H, W)}")
    if mask is not None and mask.shape != (H, W):
        raise ShapeMismatchError(f"mask shape {mask.shape} does not match camera {(H, W)}")
    if np.any(depth < 0):
        raise ShapeMismatchError("depth must be non-negative")


def dilate_mask(mask, kernel_size: int = 3, iterations: int = 3) -> np.ndarray:
    """Iterated binary dilation with a square structuring element."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be a positive odd integer")
    mask = np.asarray(mask, dtype=bool)
    if iterations <= 0 or not mask.any():
        return mask.copy()
    structure = np.ones((kernel_size, kernel_size), dtype=bool)
    return ndimage.binary_dilation(mask, structure=structure, iterations=iterations)


# ----------------------------------------------------------------------------
# on-disk format


def write_depth(path, depth) -> None:
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<III", w, h, 0))
        fh.write(depth.tobytes(order="C"))


def read_depth(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingAssetError(f"missing asset: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise ManifestError(f"{path}: not a depth file (bad magic)")
    w, h, _ = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * w * h:
        raise ShapeMismatchError(f"{path}: payload size does not match {w}x{h}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(h, w).astype(np.float64)


def _write_png(path, arr) -> None:
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def _read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingAssetError(f"missing asset: {path}")
    with Image.open(path) as im:
        return np.asarray(im)


def write_rgb(path, rgb) -> None:
    _write_png(path, np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8))


def read_rgb(path) -> np.ndarray:
    a = _read_png(path)
    if a.ndim != 3 or a.shape[2] < 3:
        raise ShapeMismatchError(f"{path}: expected an RGB image, got shape {a.shape}")
    return a[..., :3].astype(np.float64) / 255.0


def write_mask(path, mask) -> None:
    _write_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask(path) -> np.ndarray:
    a = _read_png(path)
    if a.ndim == 3:
        a = a[..., 0]
    return a >= 128


def camera_to_json(c: Camera) -> dict:
    return {"world_from_camera": c.world_from_camera.tolist(), "fx": c.fx, "fy": c.fy,
            "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height}


def camera_from_json(d: dict, where: str = "") -> Camera:
    try:
        M = np.asarray(d["world_from_camera"], dtype=np.float64)
        if M.shape != (4, 4):
            raise PoseError(f"{where}: pose must be 4x4, got {M.shape}")
        R = M[:3, :3]
        if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-5 or abs(np.linalg.det(R) - 1.0) > 1e-5:
            raise PoseError(f"{where}: pose rotation is not orthonormal")
        return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                      int(d["width"]), int(d["height"]), M)
    except KeyError as e:
        raise ManifestError(f"{where}: pose missing field {e}") from None


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_scene(bundle: SceneBundle, directory) -> dict:
    """Write ``bundle`` under ``directory``; returns the manifest dictionary."""
    bundle.validate()
    for v in bundle.train_views:
        _check_view_shapes(v.rgb, v.depth, v.mask, v.camera)
    for v in bundle.test_views:
        _check_view_shapes(v.rgb, v.depth, v.mask, v.camera)
    root = Path(directory)
    try:
        (root / "train").mkdir(parents=True, exist_ok=True)
        (root / "test").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise SceneError(f"cannot write scene to {root}: {e}") from e
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "concept": bundle.concept,
                "bbox": bundle.bbox.tolist(), "train": [], "test": []}
    for split, views in (("train", bundle.train_views), ("test", bundle.test_views)):
        for i, v in enumerate(views):
            stem = f"{split}/{i:04d}"
            entry = {"rgb": f"{stem}.rgb.png", "depth": f"{stem}.depth.raw", "pose": f"{stem}.pose.json"}
            write_rgb(root / entry["rgb"], v.rgb)
            write_depth(root / entry["depth"], v.depth)
            _dump_json(root / entry["pose"], camera_to_json(v.camera))
            if v.mask is not None:
                entry["mask"] = f"{stem}.mask.png"
                write_mask(root / entry["mask"], v.mask)
            manifest[split].append(entry)
    _dump_json(root / "manifest.json", manifest)
    return manifest


def load_scene(directory) -> SceneBundle:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise NoManifestError(f"no manifest: {mpath} not found")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"{mpath}: invalid JSON ({e})") from None
    if manifest.get("format") != FORMAT_NAME:
        raise ManifestError(f"{mpath}: unknown format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise ManifestError(f"{mpath}: unsupported version {manifest.get('version')!r}")

    def asset(entry, key, required=True):
        if key not in entry:
            if required:
                raise ManifestError(f"{mpath}: entry {entry} lacks {key!r}")
            return None
        p = root / entry[key]
        if not p.exists():
            raise MissingAssetError(f"missing asset: {p}")
        return p

    train, test = [], []
    for split, out in (("train", train), ("test", test)):
        for entry in manifest.get(split, []):
            pose_path = asset(entry, "pose")
            try:
                pose = json.loads(pose_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise ManifestError(f"{pose_path}: invalid JSON ({e})") from None
            cam = camera_from_json(pose, str(pose_path))
            rgb = read_rgb(asset(entry, "rgb"))
            depth = read_depth(asset(entry, "depth"))
            mpath_ = asset(entry, "mask", required=(split == "train"))
            mask = None if mpath_ is None else read_mask(mpath_)
            try:
                if split == "train":
                    out.append(MaskedView(rgb, depth, mask, cam))
                else:
                    out.append(TestView(cam, rgb, depth, mask))
            except ShapeMismatchError as e:
                raise ShapeMismatchError(f"{split} view {entry['rgb']}: {e}") from None
    return SceneBundle(train, test, manifest.get("concept", ""), np.asarray(manifest["bbox"]))


# ----------------------------------------------------------------------------
# synthetic generator


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    tex_amp: float = 0.0
    tex_freq: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    tex_phase: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.lo, self.hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        self.color = np.asarray(self.color, float)
        self.tex_freq, self.tex_phase = np.asarray(self.tex_freq, float), np.asarray(self.tex_phase, float)

    def shade(self, p) -> np.ndarray:
        """Smooth procedural albedo at surface points ``p`` (..., 3)."""
        wave = np.sin(p * self.tex_freq + self.tex_phase)
        c = self.color + self.tex_amp * np.stack([wave[..., 0] * wave[..., 1],
                                                  wave[..., 1] * wave[..., 2],
                                                  wave[..., 2] * wave[..., 0]], axis=-1)
        return np.clip(c, 0.03, 0.97)

    def intersect(self, o, d) -> np.ndarray:
        """Entry distance of rays (R,3) into the box; inf on a miss."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (self.lo - o) * inv
            t1 = (self.hi - o) * inv
        tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
        tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
        hit = (tmax >= tmin) & (tmin > 0)
        return np.where(hit, tmin, np.inf)

    def inside_depth(self, p) -> np.ndarray:
        """Signed distance, positive inside the box."""
        q = np.maximum(self.lo - p, p - self.hi)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return -(outside + inside)


@dataclass
class SceneSpec:
    """Generator parameters for :func:`synth_scene`."""

    resolution: int = 32
    n_train: int = 28
    n_test: int = 8
    severity: float = 0.8
    occluder: bool = True
    radius: float = 2.8
    fov_deg: float = 40.0
    elevation: float = 0.35
    narrow_deg: float = 4.0
    wide_deg: tuple = (28.0, 38.0)
    occluder_center: tuple = (0.0, -0.3, -0.15)
    occluder_half: tuple = (0.24, 0.3, 0.12)
    n_props: int = 2
    concept: str = "synthetic room"

    def validate(self) -> None:
        if self.resolution % POOL_FACTOR:
            raise DegenerateSceneError(f"resolution must be divisible by {POOL_FACTOR}")
        if self.n_train < 1 or self.n_test < 0:
            raise DegenerateSceneError("need at least one training view")
        if not 0.0 <= self.severity <= 1.0:
            raise DegenerateSceneError("severity must lie in [0, 1]")
        if not 0 < self.fov_deg < 180:
            raise DegenerateSceneError("fov must lie in (0, 180) degrees")
        if self.wide_deg[0] > self.wide_deg[1] or self.narrow_deg < 0:
            raise DegenerateSceneError("bad camera angle bands")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DegenerateSceneError(f"unknown scene spec keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("wide_deg", "occluder_center", "occluder_half"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SyntheticScene:
    """Analytic scene: background boxes plus an optional occluder."""

    background: list[Box]
    occluder: Box | None
    bbox: np.ndarray = dc_field(default_factory=lambda: np.array([[-1.0] * 3, [1.0] * 3]))

    def boxes(self, with_occluder: bool) -> list[Box]:
        return self.background + ([self.occluder] if with_occluder and self.occluder is not None else [])

    def cast(self, o, d, with_occluder: bool = True):
        """Nearest hit of rays: ``(rgb (R,3), depth (R,), box index (R,), -1 on miss)``."""
        boxes = self.boxes(with_occluder)
        T = np.stack([b.intersect(o, d) for b in boxes], axis=1)
        idx = np.argmin(T, axis=1)
        t = T[np.arange(len(o)), idx]
        hit = np.isfinite(t)
        rgb = np.zeros((len(o), 3))
        depth = np.where(hit, t, 0.0)
        p = o + depth[:, None] * d
        for k, b in enumerate(boxes):
            sel = hit & (idx == k)
            if sel.any():
                rgb[sel] = b.shade(p[sel])
        return rgb, depth, np.where(hit, idx, -1)

    def render(self, camera: Camera, with_occluder: bool = True):
        o, d = camera.rays()
        rgb, depth, idx = self.cast(o, d, with_occluder)
        H, W = camera.height, camera.width
        return rgb.reshape(H, W, 3), depth.reshape(H, W), idx.reshape(H, W)

    def footprint(self, camera: Camera) -> np.ndarray:
        """Pixels whose ray meets the occluder (regardless of what is in front)."""
        if self.occluder is None:
            return np.zeros((camera.height, camera.width), dtype=bool)
        o, d = camera.rays()
        return np.isfinite(self.occluder.intersect(o, d)).reshape(camera.height, camera.width)

    def occluded(self, eye, points) -> np.ndarray:
        """Whether the segment from ``eye`` to each point passes through the occluder."""
        if self.occluder is None:
            return np.zeros(len(points), dtype=bool)
        v = np.asarray(points, float) - eye
        dist = np.linalg.norm(v, axis=-1)
        d = v / dist[:, None]
        t = self.occluder.intersect(np.broadcast_to(eye, v.shape), d)
        return t < dist - 1e-9


def _texture(rng, base):
    return dict(color=base, tex_amp=float(rng.uniform(0.1, 0.2)),
                tex_freq=rng.uniform(1.5, 3.5, 3), tex_phase=rng.uniform(0, 2 * np.pi, 3))


def build_synthetic(spec: SceneSpec, rng: np.random.Generator) -> SyntheticScene:
    wall = Box([-1.0, -1.0, 0.75], [1.0, 1.0, 1.0], **_texture(rng, rng.uniform(0.35, 0.65, 3)))
    floor = Box([-1.0, -1.0, -1.0], [1.0, -0.6, 1.0], **_texture(rng, rng.uniform(0.3, 0.6, 3)))
    props = []
    for k in range(spec.n_props):
        cx = -0.45 + 0.9 * k / max(spec.n_props - 1, 1) + rng.uniform(-0.1, 0.1)
        hx, hz = rng.uniform(0.12, 0.22), rng.uniform(0.1, 0.18)
        top = -0.6 + rng.uniform(0.35, 0.8)
        cz = rng.uniform(0.35, 0.55)
        props.append(Box([cx - hx, -0.6, cz - hz], [cx + hx, top, cz + hz],
                         **_texture(rng, rng.uniform(0.15, 0.85, 3))))
    occ = None
    if spec.occluder:
        c, h = np.asarray(spec.occluder_center), np.asarray(spec.occluder_half)
        occ = Box(c - h, c + h, color=np.array([0.9, 0.15, 0.1]), tex_amp=0.05,
                  tex_freq=np.full(3, 4.0), tex_phase=np.zeros(3))
    return SyntheticScene([wall, floor] + props, occ)


def _camera(spec: SceneSpec, angle_deg: float) -> Camera:
    a = math.radians(angle_deg)
    eye = np.array([spec.radius * math.sin(a), spec.elevation, -spec.radius * math.cos(a)])
    f = 0.5 * spec.resolution / math.tan(math.radians(spec.fov_deg) / 2)
    c = 0.5 * spec.resolution
    return Camera(f, f, c, c, spec.resolution, spec.resolution, look_at(eye, [0.0, -0.2, 0.3]))


def train_angles(spec: SceneSpec) -> np.ndarray:
    """Camera angles: ``severity`` of them in the narrow central band, the rest
    alternating between the two wide side bands."""
    n = spec.n_train
    n_narrow = int(round(spec.severity * n))
    n_key = n - n_narrow
    narrow = np.linspace(-spec.narrow_deg, spec.narrow_deg, n_narrow) if n_narrow > 1 else np.zeros(n_narrow)
    lo, hi = spec.wide_deg
    mags = np.linspace(lo, hi, (n_key + 1) // 2) if n_key > 2 else np.full((n_key + 1) // 2, 0.5 * (lo + hi))
    key = np.empty(n_key)
    key[0::2] = mags[: len(key[0::2])]
    key[1::2] = -mags[: len(key[1::2])]
    return np.concatenate([narrow, key])


def test_angles(spec: SceneSpec) -> np.ndarray:
    if spec.n_test == 0:
        return np.zeros(0)
    # offset from the training grid so test views are genuinely held out
    return np.linspace(-spec.narrow_deg, spec.narrow_deg, spec.n_test) * 0.93 + 0.37


test_angles.__test__ = False


def hidden_probe_points(scene: SyntheticScene, spec: SceneSpec, erosion: int = 3) -> np.ndarray:
    """Background surface points behind the occluder's core, as seen head-on.

    Taken from the central view's occluder footprint eroded by ``erosion``
    pixels, with the occluder removed.
    """
    cam = _camera(spec, 0.0)
    fp = scene.footprint(cam)
    core = ndimage.binary_erosion(fp, iterations=erosion) if erosion > 0 else fp
    o, d = cam.rays()
    sel = core.ravel()
    _, depth, idx = scene.cast(o[sel], d[sel], with_occluder=False)
    ok = idx >= 0
    return o[sel][ok] + depth[ok, None] * d[sel][ok]


def synth_scene(spec: SceneSpec, rng: np.random.Generator) -> SceneBundle:
    spec.validate()
    scene = build_synthetic(spec, rng)
    train, test = [], []
    for a in train_angles(spec):
        cam = _camera(spec, float(a))
        rgb, depth, _ = scene.render(cam, with_occluder=True)
        mask = dilate_mask(scene.footprint(cam))
        train.append(MaskedView(rgb, depth, mask, cam))
    if spec.occluder and not any(v.mask.any() for v in train):
        raise DegenerateSceneError("occluder is outside every training frustum")
    for a in test_angles(spec):
        cam = _camera(spec, float(a))
        rgb, depth, _ = scene.render(cam, with_occluder=False)
        test.append(TestView(cam, rgb, depth, dilate_mask(scene.footprint(cam))))
    return SceneBundle(train, test, spec.concept, scene.bbox)


def voxelize(scene: SyntheticScene, resolution: int = 65, sharpness: float = 1e4,
             with_occluder: bool = False, clip: float = 1e3) -> RadianceField:
    """Radiance field approximating the analytic scene.

    Density pre-activations are ``sharpness`` times the signed distance to the
    nearest solid (clipped), so planar faces sit exactly where the trilinear
    interpolant crosses zero.
    """
    g = np.linspace(scene.bbox[0], scene.bbox[1], resolution)
    P = np.stack(np.meshgrid(g[:, 0], g[:, 1], g[:, 2], indexing="ij"), axis=-1)
    boxes = scene.boxes(with_occluder)
    sd = np.stack([b.inside_depth(P) for b in boxes], axis=0)
    owner = np.argmax(sd, axis=0)
    params = np.empty(P.shape[:3] + (4,))
    params[..., 3] = np.clip(sharpness * sd.max(axis=0), -clip, clip)
    for k, b in enumerate(boxes):
        sel = owner == k
        c = b.shade(P[sel])
        params[sel, :3] = np.log(c / (1.0 - c))
    return RadianceField(params, scene.bbox)
