"""Training loop: background reconstruction, collaborative distillation in the
masked region, normal-map distillation, and the optimizer.

Every iteration derives its randomness from ``SeedSequence([seed, iteration])``,
so a run resumed from a checkpoint continues exactly as an uninterrupted one.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np

from .field import (FieldGrad, RadianceField, RenderedView, camera_rays, normal_from_depth,
                    normal_from_depth_vjp, render_rays_with_grad, render_views, trace_rays, trace_views,
                    trace_vjp)
from .griddle import GridLayout, draw_assignment, shuffled_grid_predict
from .kernel import cds_latent_grads, kernel_matrix, make_weight, median_bandwidth
from .noise import (Condition, GuidedDenoiser, NoiseSchedule, add_noise, make_denoiser,
                    progressive_timestep)
from .scenes import POOL_FACTOR, MaskedView, SceneBundle

CHECKPOINT_MAGIC = b"OCLD1"
CHECKPOINT_VERSION = 1


# ----------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    lambda_rgb: float = 1.0
    lambda_depth: float = 0.1
    lambda_geo: float = 0.1
    lambda_collab: float = 1.0
    n_train: int = 12
    n_ref: int = 48
    grid_rows: int = 2
    grid_cols: int = 2
    grid_passes: int = 4
    guidance: float = 7.5
    t_min: float = 0.02
    t_max: float = 0.98
    max_iter: int = 3000
    lr: float = 0.05
    lr_period: int = 50
    n_samples: int = 64
    ray_batch: int = 1024
    seed: int = 0
    denoiser: str = "context-pull"
    weighting: str = "sigma2"
    use_cds: bool = True
    field_resolution: int = 32
    density_init: float = -4.0
    jitter: bool = True

    def validate(self) -> None:
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if self.n_ref < 0:
            raise ValueError("n_ref must be >= 0")
        for name in ("lambda_rgb", "lambda_depth", "lambda_geo", "lambda_collab"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.t_min < self.t_max < 1.0:
            raise ValueError("need 0 < t_min < t_max < 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.grid_rows < 1 or self.grid_cols < 1 or self.grid_passes < 1:
            raise ValueError("grid layout and pass count must be positive")
        if self.lambda_collab > 0 and self.n_train + self.n_ref < self.grid_rows * self.grid_cols:
            raise ValueError("view pool smaller than the grid capacity")
        if self.n_samples < 2 or self.ray_batch < 1 or self.lr_period < 1:
            raise ValueError("n_samples >= 2, ray_batch >= 1 and lr_period >= 1 required")
        if self.field_resolution < 2:
            raise ValueError("field_resolution must be >= 2")
        if self.weighting not in ("sigma2", "constant"):
            raise ValueError("weighting must be 'sigma2' or 'constant'")

    @property
    def layout(self) -> GridLayout:
        return GridLayout(self.grid_rows, self.grid_cols)

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.t_min, self.t_max)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        out = {}
        for k, v in d.items():
            typ = type(known[k].default)
            if typ is bool and not isinstance(v, bool):
                raise ValueError(f"config key {k!r} must be a boolean")
            if typ is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            if not isinstance(v, typ):
                raise ValueError(f"config key {k!r} must be {typ.__name__}, got {type(v).__name__}")
            out[k] = v
        cfg = cls(**out)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ViewSelection:
    train: np.ndarray
    ref: np.ndarray

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.ref = np.asarray(self.ref, dtype=np.int64)
        if np.intersect1d(self.train, self.ref).size:
            raise ValueError("train and reference views must be disjoint")


@dataclass
class LossReport:
    iteration: int
    t: float
    rgb_loss: float = 0.0
    depth_loss: float = 0.0
    collab_grad_norm: float = 0.0
    geo_grad_norm: float = 0.0
    bandwidth: float = 0.0
    kernel_bypassed: bool = False
    empty_mask: bool = False

    CSV_FIELDS = ("iteration", "t", "rgb_loss", "depth_loss", "collab_grad_norm", "geo_grad_norm",
                  "bandwidth", "kernel_bypassed", "empty_mask")

    def csv_row(self) -> list[str]:
        row = []
        for k in self.CSV_FIELDS:
            v = getattr(self, k)
            row.append(str(int(v)) if isinstance(v, (bool, int)) else repr(float(v)))
        return row


# ----------------------------------------------------------------------------
# encoder


def _pool(x, factor: int):
    H, W = x.shape[:2]
    if H % factor or W % factor:
        raise ValueError(f"image {H}x{W} not divisible by pool factor {factor}")
    return x.reshape(H // factor, factor, W // factor, factor, *x.shape[2:])


def encode_view(rgb, factor: int = POOL_FACTOR) -> np.ndarray:
    """Average-pool ``factor x factor`` blocks, then map [0, 1] to [-1, 1]."""
    return 2.0 * _pool(np.asarray(rgb, dtype=np.float64), factor).mean(axis=(1, 3)) - 1.0


def encode_transpose(g_latent, factor: int = POOL_FACTOR) -> np.ndarray:
    """Pull a latent-space gradient back to pixels (transpose of :func:`encode_view`)."""
    g = np.asarray(g_latent, dtype=np.float64) * (2.0 / (factor * factor))
    return np.repeat(np.repeat(g, factor, axis=0), factor, axis=1)


def downsample_mask(mask, factor: int = POOL_FACTOR) -> np.ndarray:
    """A latent cell is masked if any of its pixels is."""
    return _pool(np.asarray(mask, dtype=bool), factor).any(axis=(1, 3))


def view_condition(view: MaskedView, concept: str = "") -> Condition:
    return Condition.from_latent(encode_view(view.rgb), downsample_mask(view.mask), concept)


def _normal_image(normals) -> np.ndarray:
    return 0.5 * (np.asarray(normals) + 1.0)


def normal_condition(view: MaskedView, concept: str = "") -> Condition:
    gt = normal_from_depth(view.depth, view.camera)
    return Condition.from_latent(encode_view(_normal_image(gt.normals)), downsample_mask(view.mask), concept)


# ----------------------------------------------------------------------------
# losses and steps


def background_loss_arrays(rgb, depth, opacity, gt_rgb, gt_depth, mask, lambda_rgb, lambda_depth):
    """Masked colour + depth reconstruction on arrays with matching leading shape.

    Returns ``(loss, rgb_loss, depth_loss, grad_rgb, grad_depth)``; the mean is
    over unmasked entries and depth terms are gated by ``opacity >= 0.5``.
    """
    rgb, gt_rgb = np.asarray(rgb, float), np.asarray(gt_rgb, float)
    depth, gt_depth, opacity = np.asarray(depth, float), np.asarray(gt_depth, float), np.asarray(opacity, float)
    mask = np.asarray(mask, dtype=bool)
    if rgb.shape != gt_rgb.shape or depth.shape != gt_depth.shape or depth.shape != mask.shape \
            or rgb.shape[:-1] != mask.shape or opacity.shape != mask.shape:
        raise ValueError("rendered and ground-truth arrays disagree in shape")
    keep = ~mask
    n = int(keep.sum())
    if n == 0:
        return 0.0, 0.0, 0.0, np.zeros_like(rgb), np.zeros_like(depth)
    drgb = np.where(keep[..., None], rgb - gt_rgb, 0.0)
    dd = np.where(keep & (opacity >= 0.5), depth - gt_depth, 0.0)
    rgb_loss = float(np.sum(drgb ** 2)) / n
    depth_loss = float(np.sum(dd ** 2)) / n
    loss = lambda_rgb * rgb_loss + lambda_depth * depth_loss
    return loss, rgb_loss, depth_loss, (2.0 * lambda_rgb / n) * drgb, (2.0 * lambda_depth / n) * dd


def background_loss(rendered: RenderedView, gt: MaskedView, lambda_rgb: float, lambda_depth: float):
    """``(loss, grad_rgb, grad_depth)`` for a full rendered view."""
    loss, _, _, g_rgb, g_depth = background_loss_arrays(
        rendered.rgb, rendered.depth, rendered.opacity, gt.rgb, gt.depth, gt.mask, lambda_rgb, lambda_depth)
    return loss, g_rgb, g_depth


def select_views(rng: np.random.Generator, n_available: int, n_train: int, n_ref: int) -> ViewSelection:
    if n_train + n_ref > n_available:
        raise ValueError(f"need {n_train + n_ref} views, scene has {n_available}")
    perm = rng.permutation(n_available)
    return ViewSelection(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_ref]))


def _streams(seed: int, iteration: int):
    ss = np.random.SeedSequence([seed, iteration])
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _render_seed(config: TrainConfig, iteration: int):
    if not config.jitter:
        return None
    return int(np.random.SeedSequence([config.seed, iteration, 7]).generate_state(1)[0] & 0x7FFFFFFF)


def _views_with_grad(field, cameras, n_samples, grads_rgb, grads_depth=None, seed=None) -> FieldGrad:
    parts = [camera_rays(field, c) for c in cameras]
    o, d, tn, tf = (np.concatenate([p[i] for p in parts]) for i in range(4))
    ids = np.concatenate([np.arange(c.width * c.height) for c in cameras])
    g_rgb = np.concatenate([np.reshape(g, (-1, 3)) for g in grads_rgb])
    g_d = None if grads_depth is None else np.concatenate([np.reshape(g, -1) for g in grads_depth])
    return render_rays_with_grad(field, o, d, tn, tf, n_samples, g_rgb, g_d, ray_ids=ids, seed=seed)


def make_guided(config: TrainConfig):
    base = make_denoiser(config.denoiser, schedule=config.schedule)
    return GuidedDenoiser(base, config.guidance)


@dataclass
class CollabResult:
    grad: FieldGrad
    report: LossReport
    rendered: dict = dc_field(default_factory=dict)
    latent_grads: np.ndarray | None = None


def collaborative_step(field: RadianceField, denoiser, scene: SceneBundle, selection: ViewSelection,
                       config: TrainConfig, iteration: int, rng: np.random.Generator | None = None,
                       rendered: dict | None = None, ref_grad_taps: bool = False) -> CollabResult:
    """Distillation update for the masked region of the training views.

    Renders the training and reference views, encodes them, noises them at
    the iteration's timestep, predicts noise with shuffled grids over the
    union pool, mixes residuals through the kernel over training views only,
    and chains the latent gradients back to the field. Reference views only
    act as grid companions.
    """
    if rng is None:
        rng = _streams(config.seed, iteration)[2]
    t = progressive_timestep(min(iteration, max(config.max_iter, 1)), max(config.max_iter, 1),
                             config.t_min, config.t_max)
    report = LossReport(iteration, t, kernel_bypassed=not config.use_cds)
    train_ids, ref_ids = list(selection.train), list(selection.ref)
    pool_ids = train_ids + ref_ids
    n = len(train_ids)
    seed = _render_seed(config, iteration)
    if rendered is None:
        rendered = {}
    # training views (and, with taps, reference views) are traced so their adjoint reuses the samples
    tapped = pool_ids if ref_grad_taps else train_ids
    views_out, trace = trace_views(field, [scene.train_views[i].camera for i in tapped], config.n_samples, seed)
    rendered.update(zip(tapped, views_out))
    missing = [i for i in ref_ids if i not in rendered]
    rendered.update(zip(missing, render_views(field, [scene.train_views[i].camera for i in missing],
                                              config.n_samples, seed)))
    views = scene.train_views
    masks = np.stack([downsample_mask(views[i].mask) for i in train_ids])
    latents = np.stack([encode_view(rendered[i].rgb) for i in pool_ids])
    eps = rng.standard_normal(latents.shape)
    schedule = config.schedule
    z_t = np.stack([add_noise(latents[k], eps[k], t, schedule) for k in range(len(pool_ids))])
    if not masks.any():
        report.empty_mask = True
        return CollabResult(FieldGrad.zeros_like(field), report, rendered, np.zeros((n,) + latents.shape[1:]))
    conditions = [view_condition(views[i], scene.concept) for i in pool_ids]
    assignment = draw_assignment(rng, n, len(ref_ids), config.layout, config.grid_passes)
    eps_hat = shuffled_grid_predict(denoiser, z_t[:n], z_t[n:], conditions, t, config.layout,
                                    config.grid_passes, assignment=assignment)
    w = make_weight(config.weighting, schedule)
    if config.use_cds:
        h = median_bandwidth(z_t[:n]) if n >= 2 else 1.0
        report.bandwidth = h
        g = cds_latent_grads(z_t[:n], eps_hat, eps[:n], t, w, h, residual_masks=masks,
                             K=kernel_matrix(z_t[:n], h))
    else:
        g = w(t) * (eps_hat - eps[:n]) * masks[..., None]
    g = g * masks[..., None] * config.lambda_collab
    grads_rgb = [encode_transpose(g[k]) for k in range(n)]
    grads_rgb += [np.zeros_like(rendered[i].rgb) for i in tapped[n:]]
    grad = trace_vjp(trace, np.concatenate([x.reshape(-1, 3) for x in grads_rgb]))
    report.collab_grad_norm = grad.norm()
    return CollabResult(grad, report, rendered, g)


def geometry_step(field: RadianceField, denoiser, scene: SceneBundle, view_id: int, config: TrainConfig,
                  iteration: int, rng: np.random.Generator | None = None,
                  rendered: RenderedView | None = None) -> tuple[FieldGrad, LossReport]:
    """Single-view distillation on the normal map derived from rendered depth."""
    if rng is None:
        rng = _streams(config.seed, iteration)[3]
    t = progressive_timestep(min(iteration, max(config.max_iter, 1)), max(config.max_iter, 1),
                             config.t_min, config.t_max)
    report = LossReport(iteration, t)
    if config.lambda_geo == 0.0:
        return FieldGrad.zeros_like(field), report
    view = scene.train_views[view_id]
    seed = _render_seed(config, iteration)
    if rendered is None:
        rendered = render_views(field, [view.camera], config.n_samples, seed)[0]
    nm = normal_from_depth(rendered.depth, view.camera)
    latent_mask = downsample_mask(view.mask)
    pixel_active = encode_transpose(latent_mask[..., None].astype(float))[..., 0] > 0
    if not (nm.valid & pixel_active).any():
        report.empty_mask = True
        return FieldGrad.zeros_like(field), report
    z = encode_view(_normal_image(nm.normals))
    eps = rng.standard_normal(z.shape)
    z_t = add_noise(z, eps, t, config.schedule)
    eps_hat = denoiser.predict(z_t, t, normal_condition(view, scene.concept), conditional=True)
    w = make_weight(config.weighting, config.schedule)
    g = w(t) * (eps_hat - eps) * latent_mask[..., None] * config.lambda_geo
    g_img = encode_transpose(g)
    g_depth = normal_from_depth_vjp(rendered.depth, view.camera, 0.5 * g_img)
    grad = _views_with_grad(field, [view.camera], config.n_samples, [np.zeros_like(g_img)], [g_depth], seed=seed)
    report.geo_grad_norm = grad.norm()
    return grad, report


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def cosine_lr(base_lr: float, step: int, period: int = 50) -> float:
    return base_lr * (1.0 + math.cos(math.pi * (step % period) / period)) / 2.0


def adam_cosine_update(state: AdamState, params: np.ndarray, grad: np.ndarray, base_lr: float,
                       period: int = 50, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam step with a restarting cosine learning rate; updates in place."""
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    lr = cosine_lr(base_lr, state.step, period)
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1 ** state.step)
    vhat = state.v / (1.0 - beta2 ** state.step)
    params -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    field: RadianceField
    adam: AdamState
    iteration: int = 0


def init_state(scene: SceneBundle, config: TrainConfig) -> TrainState:
    f = RadianceField.create(config.field_resolution, scene.bbox, density_init=config.density_init)
    return TrainState(f, AdamState.zeros_like(f.params), 0)


def _background_batch(field, scene: SceneBundle, config: TrainConfig, rng, seed):
    views = scene.train_views
    HW = np.array([v.camera.width * v.camera.height for v in views])
    offsets = np.concatenate([[0], np.cumsum(HW)])
    unmasked = np.concatenate([np.flatnonzero(~v.mask.ravel()) + offsets[k] for k, v in enumerate(views)])
    if unmasked.size == 0:
        return None
    pick = np.sort(rng.choice(unmasked, size=min(config.ray_batch, unmasked.size), replace=False))
    vid = np.searchsorted(offsets, pick, side="right") - 1
    pix = pick - offsets[vid]
    o = np.empty((len(pick), 3))
    d = np.empty((len(pick), 3))
    tn = np.empty(len(pick))
    tf = np.empty(len(pick))
    gt_rgb = np.empty((len(pick), 3))
    gt_depth = np.empty(len(pick))
    for k in np.unique(vid):
        sel = vid == k
        vo, vd, vn, vf = camera_rays(field, views[k].camera)
        p = pix[sel]
        o[sel], d[sel], tn[sel], tf[sel] = vo[p], vd[p], vn[p], vf[p]
        gt_rgb[sel] = views[k].rgb.reshape(-1, 3)[p]
        gt_depth[sel] = views[k].depth.ravel()[p]
    return o, d, tn, tf, pix, gt_rgb, gt_depth


def background_step(field, scene: SceneBundle, config: TrainConfig, iteration: int,
                    rng: np.random.Generator | None = None) -> tuple[FieldGrad, LossReport]:
    """Reconstruction loss on a random batch of unmasked training pixels."""
    if rng is None:
        rng = _streams(config.seed, iteration)[1]
    report = LossReport(iteration, 0.0)
    if config.lambda_rgb == 0.0 and config.lambda_depth == 0.0:
        return FieldGrad.zeros_like(field), report
    seed = _render_seed(config, iteration)
    batch = _background_batch(field, scene, config, rng, seed)
    if batch is None:
        return FieldGrad.zeros_like(field), report
    o, d, tn, tf, ids, gt_rgb, gt_depth = batch
    rgb, depth, trans, trace = trace_rays(field, o, d, tn, tf, config.n_samples, ray_ids=ids, seed=seed)
    _, report.rgb_loss, report.depth_loss, g_rgb, g_depth = background_loss_arrays(
        rgb, depth, 1.0 - trans, gt_rgb, gt_depth, np.zeros(len(ids), bool),
        config.lambda_rgb, config.lambda_depth)
    grad = trace_vjp(trace, g_rgb, g_depth)
    return grad, report


@dataclass
class StepResult:
    background: FieldGrad
    collab: FieldGrad
    geometry: FieldGrad
    report: LossReport

    @property
    def total(self) -> FieldGrad:
        return self.background + self.collab + self.geometry


def compute_step(state: TrainState, scene: SceneBundle, config: TrainConfig, denoiser) -> StepResult:
    """All gradient components for ``state.iteration`` (no parameter update)."""
    it = state.iteration
    field = state.field
    r_sel, r_bg, r_collab, r_geo = _streams(config.seed, it)
    t = progressive_timestep(min(it, max(config.max_iter, 1)), max(config.max_iter, 1), config.t_min, config.t_max)
    g_bg, rep = background_step(field, scene, config, it, r_bg)
    rep.t = t
    rep.kernel_bypassed = not config.use_cds
    zero = FieldGrad.zeros_like(field)
    g_collab, g_geo = zero, zero
    rendered: dict = {}
    if config.lambda_collab > 0.0 or config.lambda_geo > 0.0:
        sel = select_views(r_sel, len(scene.train_views), config.n_train, config.n_ref)
        if config.lambda_collab > 0.0:
            res = collaborative_step(field, denoiser, scene, sel, config, it, r_collab, rendered)
            g_collab = res.grad
            rep.collab_grad_norm = res.report.collab_grad_norm
            rep.bandwidth = res.report.bandwidth
            rep.empty_mask = res.report.empty_mask
        if config.lambda_geo > 0.0:
            vid = int(sel.train[r_geo.integers(len(sel.train))])
            g_geo, grep = geometry_step(field, denoiser, scene, vid, config, it, r_geo, rendered.get(vid))
            rep.geo_grad_norm = grep.geo_grad_norm
    return StepResult(g_bg, g_collab, g_geo, rep)


def train(scene: SceneBundle, config: TrainConfig, state: TrainState | None = None,
          until: int | None = None, callback: Callable[[LossReport], None] | None = None):
    """Run iterations ``state.iteration .. min(until, max_iter)``.

    Returns ``(state, reports)``; ``state.field`` is the trained field.
    """
    config.validate()
    need = config.n_train + config.n_ref
    if (config.lambda_collab > 0 or config.lambda_geo > 0) and need > len(scene.train_views):
        raise ValueError(f"config needs {need} training views, scene has {len(scene.train_views)}")
    res = scene.train_views[0].camera.width if scene.train_views else 0
    if scene.train_views and (res % POOL_FACTOR or scene.train_views[0].camera.height % POOL_FACTOR):
        raise ValueError(f"render size must be divisible by {POOL_FACTOR}")
    if state is None:
        state = init_state(scene, config)
    stop = config.max_iter if until is None else min(until, config.max_iter)
    denoiser = make_guided(config)
    reports = []
    while state.iteration < stop:
        step = compute_step(state, scene, config, denoiser)
        adam_cosine_update(state.adam, state.field.params, step.total.params, config.lr, config.lr_period)
        if not np.all(np.isfinite(state.field.params)):
            raise FloatingPointError(f"non-finite parameters at iteration {state.iteration}")
        reports.append(step.report)
        if callback is not None:
            callback(step.report)
        state.iteration += 1
    return state, reports


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainState, config: TrainConfig) -> None:
    arrays = {"params": state.field.params, "adam_m": state.adam.m, "adam_v": state.adam.v,
              "bbox": state.field.bbox}
    meta = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "config_hash": config.config_hash(),
            "iteration": state.iteration, "adam_step": state.adam.step, "arrays": []}
    offset = 0
    for name, a in arrays.items():
        meta["arrays"].append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


class CheckpointError(Exception):
    pass


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, dict]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{p}: bad magic, not a checkpoint")
    (hlen,) = struct.unpack("<I", raw[5:9])
    try:
        meta = json.loads(raw[9:9 + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{p}: corrupt header ({e})") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{p}: unsupported checkpoint version {meta.get('version')}")
    body = raw[9 + hlen:]
    arrays = {}
    try:
        for spec in meta["arrays"]:
            n = int(np.prod(spec["shape"]))
            a = np.frombuffer(body, dtype="<f8", count=n, offset=spec["offset"])
            arrays[spec["name"]] = a.reshape(spec["shape"]).astype(np.float64)
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{p}: truncated or corrupt payload ({e})") from None
    config = TrainConfig.from_dict(meta["config"])
    if config.config_hash() != meta["config_hash"]:
        raise CheckpointError(f"{p}: config hash mismatch")
    field = RadianceField(arrays["params"], arrays["bbox"])
    state = TrainState(field, AdamState(arrays["adam_m"], arrays["adam_v"], int(meta["adam_step"])),
                       int(meta["iteration"]))
    return state, config, meta
