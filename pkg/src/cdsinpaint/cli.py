"""Command-line entry point: ``cdsinpaint {gen-scene,train,render,eval,compare}``.

Every subcommand exits 0 only after its outputs are written and validated;
failures print a one-line diagnostic on stderr and exit 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .field import render_views, set_num_threads
from .metrics import MetricReport, compare_table, evaluate
from .protocol import apply_ablation
from .scenes import SceneSpec, load_scene, read_rgb, save_scene, synth_scene, write_depth, write_rgb
from .trainer import LossReport, TrainConfig, load_checkpoint, save_checkpoint, train

CHECKPOINT_NAME = "checkpoint.bin"
LOSS_LOG_NAME = "losses.csv"
RUN_KEYS = ("scene", "out", "no_cds", "no_grid", "no_ref")


class CliError(Exception):
    pass


def _read_toml(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise CliError(f"{p}: invalid TOML ({e})") from None


@dataclasses.dataclass
class RunConfig:
    """A training run: the trainer config plus scene/output paths and ablation switches."""

    train: TrainConfig
    scene: str | None = None
    out: str | None = None
    no_cds: bool = False
    no_grid: bool = False
    no_ref: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        extra = {k: d.pop(k) for k in RUN_KEYS if k in d}
        for k in ("no_cds", "no_grid", "no_ref"):
            if k in extra and not isinstance(extra[k], bool):
                raise ValueError(f"config key {k!r} must be a boolean")
        for k in ("scene", "out"):
            if k in extra and not isinstance(extra[k], str):
                raise ValueError(f"config key {k!r} must be a string")
        return cls(TrainConfig.from_dict(d), **extra)

    def effective(self) -> TrainConfig:
        cfg = self.train
        for flag, variant in ((self.no_cds, "no-cds"), (self.no_grid, "no-grid"), (self.no_ref, "no-ref")):
            if flag:
                cfg = apply_ablation(cfg, variant)
        cfg.validate()
        return cfg


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args) -> int:
    spec = SceneSpec.from_dict(_read_toml(args.config)) if args.config else SceneSpec()
    spec.validate()
    out = _require(args.out, "--out")
    bundle = synth_scene(spec, np.random.default_rng(args.seed if args.seed is not None else 0))
    save_scene(bundle, out)
    load_scene(out)
    print(f"wrote scene with {len(bundle.train_views)} train / {len(bundle.test_views)} test views to {out}")
    return 0


def _require(value, name):
    if value is None:
        raise CliError(f"{name} is required")
    return value


def _write_log(path: Path, reports: list[LossReport], append: bool) -> None:
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow(LossReport.CSV_FIELDS)
        for r in reports:
            w.writerow(r.csv_row())


def cmd_train(args) -> int:
    run = RunConfig.from_dict(_read_toml(args.config)) if args.config else RunConfig(TrainConfig())
    if args.seed is not None:
        run.train = dataclasses.replace(run.train, seed=args.seed)
    run.no_cds |= args.no_cds
    run.no_grid |= args.no_grid
    run.no_ref |= args.no_ref
    scene_dir = _require(args.scene or run.scene, "--scene (or 'scene' in the config)")
    out = Path(_require(args.out or run.out, "--out (or 'out' in the config)"))
    config = run.effective()
    scene = load_scene(scene_dir)
    state = None
    if args.resume:
        state, saved, _ = load_checkpoint(args.resume)
        if saved.config_hash() != config.config_hash():
            raise CliError(f"checkpoint {args.resume} was written with a different config")
    out.mkdir(parents=True, exist_ok=True)
    state, reports = train(scene, config, state=state, until=args.until)
    save_checkpoint(out / CHECKPOINT_NAME, state, config)
    _write_log(out / LOSS_LOG_NAME, reports, append=bool(args.resume))
    load_checkpoint(out / CHECKPOINT_NAME)
    print(f"trained to iteration {state.iteration}; checkpoint {out / CHECKPOINT_NAME}")
    return 0


def _split_cameras(scene, split: str):
    if split == "train":
        return [v.camera for v in scene.train_views]
    if split == "test":
        return [v.camera for v in scene.test_views]
    raise CliError(f"unknown split {split!r}")


def cmd_render(args) -> int:
    ckpt = _require(args.checkpoint, "--checkpoint")
    state, config, _ = load_checkpoint(ckpt)
    scene = load_scene(_require(args.scene, "--scene"))
    out = Path(_require(args.out, "--out"))
    cams = _split_cameras(scene, args.split)
    out.mkdir(parents=True, exist_ok=True)
    views = render_views(state.field, cams, args.n_samples or config.n_samples)
    for i, v in enumerate(views):
        write_rgb(out / f"{i:04d}.rgb.png", np.clip(v.rgb, 0.0, 1.0))
        write_depth(out / f"{i:04d}.depth.raw", v.depth)
    written = sorted(out.glob("*.rgb.png"))
    if len(written) != len(cams):
        raise CliError(f"{out} holds {len(written)} renders, expected {len(cams)}; use an empty directory")
    print(f"rendered {len(views)} {args.split} views to {out}")
    return 0


def cmd_eval(args) -> int:
    scene = load_scene(_require(args.scene, "--scene"))
    renders = Path(_require(args.renders, "--renders"))
    files = sorted(renders.glob("*.rgb.png"))
    views = scene.test_views
    if len(files) != len(views):
        raise CliError(f"{len(files)} renders in {renders} for {len(views)} test views")
    preds = [read_rgb(f) for f in files]
    label = args.label or renders.name
    report = evaluate(preds, [v.rgb for v in views], [v.mask for v in views], args.config_hash or "", label)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        MetricReport.load(args.out)
    print(report.to_table(), end="")
    return 0


def cmd_compare(args) -> int:
    a = MetricReport.load(args.a)
    b = MetricReport.load(args.b)
    table = compare_table(a, b, args.tol)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdsinpaint", description="Occlusion-aware radiance-field inpainting")
    p.add_argument("--threads", type=int, default=None, help="worker threads for rendering")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic occluded scene")
    g.add_argument("--config", help="TOML scene-spec file")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output scene directory")
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="train a field on a scene")
    t.add_argument("--config", help="TOML run config (trainer fields, scene, out, ablation switches)")
    t.add_argument("--scene")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory for the checkpoint and loss log")
    t.add_argument("--no-cds", action="store_true", help="per-view SDS instead of kernel-coupled updates")
    t.add_argument("--no-grid", action="store_true", help="denoise each view alone (1x1 grid)")
    t.add_argument("--no-ref", action="store_true", help="no reference views")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--until", type=int, help="stop after this iteration")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a split from a checkpoint")
    r.add_argument("--checkpoint")
    r.add_argument("--scene")
    r.add_argument("--split", default="test", choices=("train", "test"))
    r.add_argument("--out")
    r.add_argument("--n-samples", type=int, default=None)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score renders against the scene's test views")
    e.add_argument("--renders")
    e.add_argument("--scene")
    e.add_argument("--out", help="report JSON path")
    e.add_argument("--label", default=None)
    e.add_argument("--config-hash", default=None)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="per-metric winners between two reports")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--tol", type=float, default=0.0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    for sp in (g, t, r, e, c):
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for rendering")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise CliError("--threads must be >= 1")
            set_num_threads(args.threads)
        return args.func(args)
    except (CliError, ValueError, OSError, FloatingPointError) as e:
        print(f"cdsinpaint {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # scene/checkpoint errors and anything else: still a clean exit code
        print(f"cdsinpaint {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
