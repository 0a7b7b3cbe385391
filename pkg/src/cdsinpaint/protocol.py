"""Seeded ablation protocol: train variants on synthetic occluded scenes and
score the inpainted region on held-out object-free views."""
from __future__ import annotations

import dataclasses
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .field import RadianceField, render_views, set_num_threads
from .metrics import MetricReport, evaluate
from .scenes import SceneBundle, SceneSpec, synth_scene
from .trainer import TrainConfig, train

VARIANTS = ("full", "no-cds", "no-grid", "no-ref")


def apply_ablation(config: TrainConfig, variant: str) -> TrainConfig:
    """Config for one ablation row; ``full`` returns an unchanged copy."""
    if variant == "full":
        return dataclasses.replace(config)
    if variant == "no-cds":
        return dataclasses.replace(config, use_cds=False)
    if variant == "no-grid":
        return dataclasses.replace(config, grid_rows=1, grid_cols=1, grid_passes=1)
    if variant == "no-ref":
        return dataclasses.replace(config, n_ref=0)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class ProtocolConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    scene: SceneSpec = dataclasses.field(default_factory=lambda: SceneSpec(resolution=32, n_train=28, n_test=8,
                                                                           severity=0.8))
    train: TrainConfig = dataclasses.field(default_factory=lambda: TrainConfig(
        n_train=20, n_ref=8, max_iter=1500, n_samples=32, denoiser="context-pull"))


def render_test(field: RadianceField, scene: SceneBundle, n_samples: int) -> list[np.ndarray]:
    views = render_views(field, [v.camera for v in scene.test_views], n_samples)
    return [np.clip(v.rgb, 0.0, 1.0) for v in views]


def score(field: RadianceField, scene: SceneBundle, config: TrainConfig, label: str = "") -> MetricReport:
    preds = render_test(field, scene, config.n_samples)
    return evaluate(preds, [v.rgb for v in scene.test_views], [v.mask for v in scene.test_views],
                    config.config_hash(), label)


def run_variant(scene: SceneBundle, config: TrainConfig, variant: str, seed: int) -> MetricReport:
    cfg = apply_ablation(dataclasses.replace(config, seed=seed), variant)
    state, _ = train(scene, cfg)
    return score(state.field, scene, cfg, variant)


def _job(pc: ProtocolConfig, seed: int, variant: str) -> MetricReport:
    set_num_threads(1)
    scene = synth_scene(pc.scene, np.random.default_rng(seed))
    return run_variant(scene, pc.train, variant, seed)


def run_protocol(pc: ProtocolConfig, variants=("full", "no-cds", "no-ref"), log=print,
                 workers: int | None = None) -> dict:
    """``{variant: [MetricReport per seed]}`` plus the wall time under ``"_seconds"``.

    Runs are independent and fanned out over ``workers`` processes (default:
    one per CPU); each run is deterministic, so the result does not depend on
    the worker count.
    """
    t0 = time.perf_counter()
    workers = workers or os.cpu_count() or 1
    jobs = [(seed, v) for seed in pc.seeds for v in variants]
    out: dict = {v: [] for v in variants}

    def record(seed, v, rep):
        out[v].append(rep)
        if log is not None:
            log(f"seed {seed} {v:7s} masked_l2 {rep.mean['masked_l2']:.6f} psnr {rep.mean['psnr']:.3f}")

    if workers == 1:
        for seed, v in jobs:
            record(seed, v, _job(pc, seed, v))
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(workers, mp_context=ctx) as ex:
            futures = [ex.submit(_job, pc, seed, v) for seed, v in jobs]
            for (seed, v), fut in zip(jobs, futures):
                record(seed, v, fut.result())
    out["_seconds"] = time.perf_counter() - t0
    return out
