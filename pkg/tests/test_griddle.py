import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdsinpaint.griddle import (GridAssignment, GridLayout, draw_assignment, from_grid, grid_condition,
                                grid_predict, shuffled_grid_predict, to_grid)
from cdsinpaint.noise import Condition, ContextPullDenoiser, GaussianOracleDenoiser

layouts = st.builds(GridLayout, st.integers(1, 3), st.integers(1, 3))


def random_conditions(rng, n, shape=(4, 4, 2), p=0.3):
    out = []
    for _ in range(n):
        mask = rng.random(shape[:2]) < p
        mask[0, 0] = False
        out.append(Condition.from_latent(rng.normal(size=shape), mask))
    return out


class CallCounter:
    """Pass-dependent test double: the k-th call returns the constant k."""

    def __init__(self):
        self.calls = 0

    def predict(self, z_t, t, condition=None, conditional=True):
        out = np.full(np.shape(z_t), float(self.calls))
        self.calls += 1
        return out


class Constant:
    def __init__(self, tile):
        self.tile = tile

    def predict(self, z_t, t, condition=None, conditional=True):
        h, w = self.tile.shape[:2]
        return np.tile(self.tile, (z_t.shape[0] // h, z_t.shape[1] // w, 1))


# --------------------------------------------------------------- G and G^-1


def test_identity_layout():
    x = np.random.default_rng(0).normal(size=(3, 5, 2))
    assert np.array_equal(to_grid([x], GridLayout(1, 1)), x)


def test_constant_quadrants():
    tiles = [np.full((2, 3, 1), float(v)) for v in range(4)]
    g = to_grid(tiles, GridLayout(2, 2))
    assert g.shape == (4, 6, 1)
    assert np.all(g[:2, :3] == 0) and np.all(g[:2, 3:] == 1) and np.all(g[2:, :3] == 2) and np.all(g[2:, 3:] == 3)


def test_hand_built_2x3_canvas():
    canvas = np.zeros((4, 9))
    for k in range(6):
        r, c = divmod(k, 3)
        canvas[r * 2:(r + 1) * 2, c * 3:(c + 1) * 3] = k
    blocks = from_grid(canvas, GridLayout(2, 3))
    assert [b[0, 0] for b in blocks] == [0, 1, 2, 3, 4, 5]
    assert all(b.shape == (2, 3) for b in blocks)


@settings(max_examples=100, deadline=None)
@given(layouts, st.integers(1, 5), st.integers(1, 5), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_round_trips_bit_exact(layout, h, w, c, seed):
    rng = np.random.default_rng(seed)
    shape = (h, w) if c == 0 else (h, w, c)
    tiles = [rng.normal(size=shape) for _ in range(layout.capacity)]
    back = from_grid(to_grid(tiles, layout), layout)
    assert all(np.array_equal(a, b) for a, b in zip(tiles, back))
    canvas = rng.normal(size=(h * layout.rows, w * layout.cols) + shape[2:])
    assert np.array_equal(to_grid(from_grid(canvas, layout), layout), canvas)


def test_grid_errors():
    with pytest.raises(ValueError):
        GridLayout(0, 2)
    with pytest.raises(ValueError):
        to_grid([np.zeros((2, 2))] * 3, GridLayout(2, 2))
    with pytest.raises(ValueError):
        to_grid([np.zeros((2, 2))] * 3 + [np.zeros((2, 3))], GridLayout(2, 2))
    with pytest.raises(ValueError):
        from_grid(np.zeros((5, 4)), GridLayout(2, 2))


def test_conditions_are_gridded_like_latents():
    rng = np.random.default_rng(1)
    conds = random_conditions(rng, 4)
    g = grid_condition(conds, GridLayout(2, 2))
    assert np.array_equal(g.mask, to_grid([c.mask for c in conds], GridLayout(2, 2)))
    assert np.array_equal(g.context_latent, to_grid([c.context_latent for c in conds], GridLayout(2, 2)))


# ------------------------------------------------------------- grid_predict


def test_one_by_one_equals_direct_call():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 6, 2))
    cond = random_conditions(rng, 1, (6, 6, 2))
    den = ContextPullDenoiser()
    assert np.array_equal(grid_predict(den, [z], cond, 0.4, GridLayout(1, 1))[0], den.predict(z, 0.4, cond[0]))


@settings(max_examples=30, deadline=None)
@given(layouts, st.integers(0, 2**31 - 1), st.booleans())
def test_local_denoiser_commutes_with_tiling(layout, seed, conditional):
    rng = np.random.default_rng(seed)
    n = layout.capacity
    zs = [rng.normal(size=(4, 4, 2)) for _ in range(n)]
    conds = random_conditions(rng, n)
    den = GaussianOracleDenoiser(s=0.2)
    got = grid_predict(den, zs, conds, 0.5, layout, conditional)
    for z, c, g in zip(zs, conds, got):
        assert np.max(np.abs(g - den.predict(z, 0.5, c, conditional))) <= 1e-12


def test_context_pull_has_cross_tile_influence():
    rng = np.random.default_rng(3)
    zs = [rng.normal(size=(4, 4, 2)) for _ in range(4)]
    conds = []
    for k in range(4):
        mask = np.zeros((4, 4), bool)
        if k == 0:
            mask[:, 2:] = True  # right half of tile 0 borders tile 1's visible context on the canvas
        conds.append(Condition.from_latent(rng.normal(size=(4, 4, 2)), mask))
    den = ContextPullDenoiser()
    grid = grid_predict(den, zs, conds, 0.5, GridLayout(2, 2))
    alone = den.predict(zs[0], 0.5, conds[0])
    assert np.linalg.norm(grid[0] - alone) > 0


def test_grid_predict_propagates_denoiser_errors():
    conds = [Condition(np.ones((2, 2), bool), np.zeros((2, 2, 1)))] * 4
    with pytest.raises(ValueError):
        grid_predict(ContextPullDenoiser(), [np.zeros((2, 2, 1))] * 4, conds, 0.5, GridLayout(2, 2))


# ---------------------------------------------------- shuffled grid predict


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), layouts, st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_assignment_invariants(n_train, n_ref, layout, M, seed):
    if n_train + n_ref < layout.capacity:
        with pytest.raises(ValueError):
            draw_assignment(np.random.default_rng(seed), n_train, n_ref, layout, M)
        return
    a = draw_assignment(np.random.default_rng(seed), n_train, n_ref, layout, M)
    assert a.cells.shape == (M, n_train, layout.capacity) and a.passes == M
    for m in range(M):
        for i in range(n_train):
            members = a.cells[m, i]
            assert len(set(members.tolist())) == layout.capacity  # no view twice in one grid
            assert i in members and members[a.anchor_cell(m, i)] == i
            assert np.all((members >= 0) & (members < n_train + n_ref))


def test_assignment_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        draw_assignment(rng, 2, 0, GridLayout(1, 1), 0)
    with pytest.raises(ValueError):
        draw_assignment(rng, 0, 4, GridLayout(1, 1), 1)


def test_seeded_determinism():
    rng = np.random.default_rng(4)
    tr = [rng.normal(size=(4, 4, 2)) for _ in range(3)]
    ref = [rng.normal(size=(4, 4, 2)) for _ in range(2)]
    conds = random_conditions(rng, 5)
    den = ContextPullDenoiser()
    a = shuffled_grid_predict(den, tr, ref, conds, 0.5, GridLayout(2, 2), 1, np.random.default_rng(9))
    b = shuffled_grid_predict(den, tr, ref, conds, 0.5, GridLayout(2, 2), 1, np.random.default_rng(9))
    assert np.array_equal(a, b) and a.shape == (3, 4, 4, 2)


@pytest.mark.parametrize("M", [1, 3, 4])
def test_constant_denoiser(M):
    rng = np.random.default_rng(5)
    eps0 = rng.normal(size=(4, 4, 2))
    tr = [rng.normal(size=(4, 4, 2)) for _ in range(4)]
    out = shuffled_grid_predict(Constant(eps0), tr, [], random_conditions(rng, 4), 0.5, GridLayout(2, 2), M,
                                np.random.default_rng(M))
    assert all(np.max(np.abs(o - eps0)) <= 1e-12 for o in out)


@pytest.mark.parametrize("M", [1, 2, 4])
def test_local_denoiser_any_m(M):
    rng = np.random.default_rng(6)
    tr = [rng.normal(size=(4, 4, 2)) for _ in range(5)]
    ref = [rng.normal(size=(4, 4, 2)) for _ in range(3)]
    conds = random_conditions(rng, 8)
    den = GaussianOracleDenoiser(s=0.3)
    out = shuffled_grid_predict(den, tr, ref, conds, 0.3, GridLayout(2, 2), M, np.random.default_rng(0))
    for i in range(5):
        assert np.max(np.abs(out[i] - den.predict(tr[i], 0.3, conds[i]))) <= 1e-12


def test_pass_averaging_with_injected_double():
    rng = np.random.default_rng(7)
    n, M = 3, 4
    tr = [rng.normal(size=(2, 2, 1)) for _ in range(n)]
    ref = [rng.normal(size=(2, 2, 1)) for _ in range(2)]
    conds = random_conditions(rng, 5, (2, 2, 1), p=0.0)
    a = draw_assignment(np.random.default_rng(1), n, 2, GridLayout(2, 2), M)
    counter = CallCounter()
    out = shuffled_grid_predict(counter, tr, ref, conds, 0.5, GridLayout(2, 2), M, assignment=a)
    assert counter.calls == n * M  # every training view predicted exactly M times
    for i in range(n):
        expect = np.mean([m * n + i for m in range(M)])
        assert np.max(np.abs(out[i] - expect)) <= 1e-12


def test_pool_too_small_and_condition_count():
    rng = np.random.default_rng(8)
    tr = [np.zeros((2, 2, 1))] * 2
    conds = random_conditions(rng, 2, (2, 2, 1), p=0.0)
    with pytest.raises(ValueError):
        shuffled_grid_predict(GaussianOracleDenoiser(), tr, [], conds, 0.5, GridLayout(2, 2), 1, rng)
    with pytest.raises(ValueError):
        shuffled_grid_predict(GaussianOracleDenoiser(), tr, [], conds[:1], 0.5, GridLayout(1, 1), 1, rng)
    with pytest.raises(ValueError):
        shuffled_grid_predict(GaussianOracleDenoiser(), tr, [], conds, 0.5, GridLayout(1, 1), 1)
    bad = GridAssignment(np.zeros((1, 3, 1), dtype=np.int64), 3)
    with pytest.raises(ValueError):
        shuffled_grid_predict(GaussianOracleDenoiser(), tr, [], conds, 0.5, GridLayout(1, 1), 1, assignment=bad)
