"""Grid denoising: tile several view latents into one canvas, denoise once,
split the prediction back, and average over shuffled groupings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noise import Condition, Denoiser


@dataclass(frozen=True)
class GridLayout:
    rows: int = 2
    cols: int = 2

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid layout needs rows, cols >= 1")

    @property
    def capacity(self) -> int:
        return self.rows * self.cols


def to_grid(tiles, layout: GridLayout) -> np.ndarray:
    """Row-major block placement: tile ``r * cols + c`` lands in cell (r, c).

    Works for latents (H', W', C) and masks (H', W') alike.
    """
    tiles = [np.asarray(x) for x in tiles]
    if len(tiles) != layout.capacity:
        raise ValueError(f"layout {layout.rows}x{layout.cols} needs {layout.capacity} tiles, got {len(tiles)}")
    shape = tiles[0].shape
    if any(x.shape != shape for x in tiles):
        raise ValueError("all tiles must share a shape")
    rows = [np.concatenate(tiles[r * layout.cols:(r + 1) * layout.cols], axis=1)
            for r in range(layout.rows)]
    return np.concatenate(rows, axis=0)


def from_grid(canvas, layout: GridLayout) -> list[np.ndarray]:
    canvas = np.asarray(canvas)
    H, W = canvas.shape[:2]
    if H % layout.rows or W % layout.cols:
        raise ValueError(f"canvas {H}x{W} not divisible by layout {layout.rows}x{layout.cols}")
    h, w = H // layout.rows, W // layout.cols
    return [canvas[r * h:(r + 1) * h, c * w:(c + 1) * w].copy()
            for r in range(layout.rows) for c in range(layout.cols)]


def grid_condition(conditions: list[Condition], layout: GridLayout) -> Condition:
    concept = conditions[0].concept if conditions else ""
    return Condition(to_grid([c.mask for c in conditions], layout),
                     to_grid([c.context_latent for c in conditions], layout), concept)


def grid_predict(denoiser: Denoiser, latents, conditions, t: float, layout: GridLayout,
                 conditional: bool = True) -> list[np.ndarray]:
    """One denoiser call on the tiled canvas; predictions come back in input order."""
    if len(conditions) != len(latents):
        raise ValueError("need one condition per latent")
    canvas = to_grid(latents, layout)
    pred = denoiser.predict(canvas, t, grid_condition(list(conditions), layout), conditional=conditional)
    return from_grid(pred, layout)


@dataclass
class GridAssignment:
    """Pre-drawn grid memberships.

    ``cells[m, i]`` lists the pool indices occupying the cells of the grid
    anchored at training view ``i`` in pass ``m``; pool indices below
    ``n_train`` are training views, the rest reference views.
    """

    cells: np.ndarray
    n_train: int

    @property
    def passes(self) -> int:
        return self.cells.shape[0]

    def anchor_cell(self, m: int, i: int) -> int:
        return int(np.flatnonzero(self.cells[m, i] == i)[0])


def draw_assignment(rng: np.random.Generator, n_train: int, n_ref: int,
                    layout: GridLayout, M: int) -> GridAssignment:
    if M < 1:
        raise ValueError("M must be >= 1")
    if n_train < 1:
        raise ValueError("need at least one training view")
    pool = n_train + n_ref
    cap = layout.capacity
    if pool < cap:
        raise ValueError(f"pool of {pool} views too small for a {layout.rows}x{layout.cols} grid")
    cells = np.empty((M, n_train, cap), dtype=np.int64)
    for m in range(M):
        for i in range(n_train):
            others = np.delete(np.arange(pool), i)
            members = np.concatenate([[i], rng.choice(others, size=cap - 1, replace=False)])
            cells[m, i] = members[rng.permutation(cap)]
    return GridAssignment(cells, n_train)


def shuffled_grid_predict(denoiser: Denoiser, train_latents, ref_latents, conditions, t: float,
                          layout: GridLayout, M: int, rng: np.random.Generator | None = None,
                          conditional: bool = True,
                          assignment: GridAssignment | None = None) -> np.ndarray:
    """Average each training view's prediction over ``M`` shuffled grids.

    ``conditions`` covers the pool (training views first, then references).
    Returns an array stacked over training views; reference predictions are
    discarded.
    """
    pool = [np.asarray(z, dtype=np.float64) for z in train_latents] + \
           [np.asarray(z, dtype=np.float64) for z in ref_latents]
    n_train = len(train_latents)
    if len(conditions) != len(pool):
        raise ValueError("need one condition per pool view")
    if assignment is None:
        if rng is None:
            raise ValueError("need an rng or a pre-drawn assignment")
        assignment = draw_assignment(rng, n_train, len(pool) - n_train, layout, M)
    if assignment.cells.shape[1:] != (n_train, layout.capacity):
        raise ValueError("assignment does not match views/layout")
    acc = np.zeros((n_train,) + pool[0].shape)
    for m in range(assignment.passes):
        for i in range(n_train):
            members = assignment.cells[m, i]
            preds = grid_predict(denoiser, [pool[j] for j in members],
                                 [conditions[j] for j in members], t, layout, conditional)
            acc[i] += preds[assignment.anchor_cell(m, i)]
    return acc / assignment.passes
