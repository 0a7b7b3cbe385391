import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cdsinpaint.noise import (Condition, ContextPullDenoiser, Denoiser, GaussianOracleDenoiser, GuidedDenoiser,
                              NoiseSchedule, add_noise, alpha_sigma, available_denoisers, blur_fill, cfg_combine,
                              gaussian_oracle_predict, make_denoiser, progressive_timestep, register_denoiser)

SCHED = NoiseSchedule()
finite = st.floats(-1e3, 1e3, allow_nan=False)


# ----------------------------------------------------------------- schedule


def test_schedule_endpoints_and_midpoint():
    a, s = alpha_sigma(SCHED, 1e-9)
    assert a == pytest.approx(1.0) and s == pytest.approx(0.0, abs=1e-8)
    a, s = alpha_sigma(SCHED, 0.5)
    assert a == pytest.approx(math.cos(math.pi / 4), abs=1e-15)
    assert s == pytest.approx(math.sin(math.pi / 4), abs=1e-15)
    a, s = alpha_sigma(SCHED, 1 - 1e-9)
    assert s == pytest.approx(1.0)


@pytest.mark.parametrize("t", [-0.01, 1.01, float("nan")])
def test_schedule_rejects_out_of_range(t):
    with pytest.raises(ValueError):
        alpha_sigma(SCHED, t)


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(0.5, 0.4)
    with pytest.raises(ValueError):
        NoiseSchedule(0.0, 0.9)


def test_variance_preserving_at_1000_points():
    for t in np.random.default_rng(0).uniform(0, 1, 1000):
        a, s = alpha_sigma(SCHED, t)
        assert abs(a * a + s * s - 1) <= 1e-9


@given(st.floats(0, 1), st.floats(0, 1))
def test_alpha_decreasing_sigma_increasing(t1, t2):
    if t1 == t2:
        return
    lo, hi = sorted((t1, t2))
    (a1, s1), (a2, s2) = alpha_sigma(SCHED, lo), alpha_sigma(SCHED, hi)
    assert a1 >= a2 and s1 <= s2


# ---------------------------------------------------------------- add_noise


def test_add_noise_matches_direct_formula():
    rng = np.random.default_rng(1)
    z, eps = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
    a, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    assert np.max(np.abs(add_noise(z, eps, 0.5, SCHED) - (a * z + s * eps))) <= 1e-12


def test_add_noise_limits():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 3, 4))
    assert np.allclose(add_noise(z, rng.normal(size=z.shape), 1e-9, SCHED), z, atol=1e-7)
    a, _ = alpha_sigma(SCHED, 0.3)
    assert np.array_equal(add_noise(z, np.zeros_like(z), 0.3, SCHED), a * z)
    with pytest.raises(ValueError):
        add_noise(z, np.zeros((3, 3, 3)), 0.3, SCHED)


# ------------------------------------------------------------ timestep, CFG


def test_progressive_timestep_endpoints_and_midpoint():
    assert progressive_timestep(0, 1000, 0.02, 0.98) == 0.98
    assert progressive_timestep(1000, 1000, 0.02, 0.98) == 0.02
    assert progressive_timestep(500, 1000, 0.02, 0.98) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        progressive_timestep(0, 0, 0.02, 0.98)
    with pytest.raises(ValueError):
        progressive_timestep(11, 10, 0.02, 0.98)


@given(st.integers(1, 10_000), st.data())
def test_progressive_timestep_linear_nonincreasing(max_iter, data):
    i = data.draw(st.integers(0, max_iter - 1))
    t0 = progressive_timestep(i, max_iter, 0.02, 0.98)
    t1 = progressive_timestep(i + 1, max_iter, 0.02, 0.98)
    assert t1 <= t0
    assert t0 - t1 == pytest.approx(0.96 / max_iter, rel=1e-9, abs=1e-15)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_cfg_bit_exact_at_zero_and_one(u, c):
    assert np.array_equal(cfg_combine(u, c, 0.0), u)
    assert np.array_equal(cfg_combine(u, c, 1.0), c)


@given(arrays(np.float64, (5,), elements=finite), arrays(np.float64, (5,), elements=finite),
       st.floats(-10, 10), st.floats(-10, 10))
def test_cfg_is_affine(u, c, g1, g2):
    lhs = cfg_combine(u, c, g1) + cfg_combine(u, c, g2) - u
    rhs = cfg_combine(u, c, g1 + g2)
    scale = max(1.0, np.max(np.abs(u)), np.max(np.abs(c))) * max(1.0, abs(g1) + abs(g2))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale


def test_cfg_shape_mismatch():
    with pytest.raises(ValueError):
        cfg_combine(np.zeros(3), np.zeros(4), 7.5)


def test_guided_denoiser_default_scale():
    base = GaussianOracleDenoiser()
    assert GuidedDenoiser(base).guidance == 7.5
    rng = np.random.default_rng(3)
    ctx = rng.normal(size=(4, 4, 2))
    cond = Condition(np.zeros((4, 4), bool), ctx)
    z = rng.normal(size=(4, 4, 2))
    g = GuidedDenoiser(base, 7.5)
    expect = cfg_combine(base.predict(z, 0.4, cond, False), base.predict(z, 0.4, cond, True), 7.5)
    assert np.array_equal(g.predict(z, 0.4, cond), expect)
    assert np.array_equal(g.predict(z, 0.4, cond, conditional=False), base.predict(z, 0.4, cond, False))


# ----------------------------------------------------------- Gaussian oracle


def test_oracle_vanishes_at_mode():
    mu = np.random.default_rng(4).normal(size=(3, 3, 2))
    a, _ = alpha_sigma(SCHED, 0.6)
    assert np.allclose(gaussian_oracle_predict(mu, 0.3, a * mu, 0.6, SCHED), 0.0, atol=1e-15)


def test_oracle_recovers_noise_for_point_mass():
    rng = np.random.default_rng(5)
    mu, eps = rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 2))
    z_t = add_noise(mu, eps, 0.37, SCHED)
    assert np.allclose(gaussian_oracle_predict(mu, 0.0, z_t, 0.37, SCHED), eps, atol=1e-12)
    with pytest.raises(ValueError):
        gaussian_oracle_predict(mu, -1.0, z_t, 0.37, SCHED)


def test_oracle_matches_monte_carlo_score():
    """-sigma * grad log p_t estimated by self-normalized importance weights over 10^6 data draws."""
    rng = np.random.default_rng(6)
    d, s, t = 3, 0.3, 0.5
    a, sig = alpha_sigma(SCHED, t)
    mu = rng.normal(size=d)
    z = a * mu + rng.normal(size=d) * math.sqrt(a * a * s * s + sig * sig)
    x = mu + s * rng.normal(size=(1_000_000, d))
    logw = -np.sum((z - a * x) ** 2, axis=1) / (2 * sig * sig)
    w = np.exp(logw - logw.max())
    score = (w[:, None] * (a * x - z)).sum(axis=0) / (w.sum() * sig * sig)
    assert np.max(np.abs(gaussian_oracle_predict(mu, s, z, t, SCHED) - (-sig * score))) < 1e-2


def test_oracle_gradient_descent_converges_to_mean():
    rng = np.random.default_rng(7)
    mu = rng.normal(size=(2, 2, 3))
    z = np.zeros_like(mu)
    for _ in range(2000):
        eps = rng.normal(size=(16,) + mu.shape)
        resid = gaussian_oracle_predict(mu, 0.1, add_noise(np.broadcast_to(z, eps.shape), eps, 0.5, SCHED), 0.5,
                                        SCHED) - eps
        z = z - 0.05 * resid.mean(axis=0)
    assert np.linalg.norm(z - mu) < 1e-2


def test_oracle_denoiser_branches():
    rng = np.random.default_rng(8)
    ctx = rng.normal(size=(4, 4, 2))
    mask = np.zeros((4, 4), bool)
    mask[1, 1] = True
    cond = Condition.from_latent(ctx, mask)
    z = rng.normal(size=(4, 4, 2))
    den = GaussianOracleDenoiser(s=0.2)
    assert np.array_equal(den.predict(z, 0.3, cond, True), gaussian_oracle_predict(cond.context_latent, 0.2, z, 0.3,
                                                                                   SCHED))
    assert np.array_equal(den.predict(z, 0.3, cond, False), gaussian_oracle_predict(0 * z, 0.2, z, 0.3, SCHED))
    fixed = GaussianOracleDenoiser(mu=ctx, s=0.2)
    assert np.array_equal(fixed.predict(z, 0.3, None), gaussian_oracle_predict(ctx, 0.2, z, 0.3, SCHED))


# ---------------------------------------------------------------- condition


def test_condition_requires_zero_context_under_mask():
    mask = np.zeros((2, 2), bool)
    mask[0, 0] = True
    with pytest.raises(ValueError):
        Condition(mask, np.ones((2, 2, 1)))
    with pytest.raises(ValueError):
        Condition(mask, np.zeros((3, 2, 1)))
    c = Condition.from_latent(np.ones((2, 2, 1)), mask, "room")
    assert c.context_latent[0, 0, 0] == 0 and c.context_latent[1, 1, 0] == 1 and c.concept == "room"


# -------------------------------------------------------------- context pull


def brute_fill(context, mask, radius):
    h, w, c = context.shape
    out = context.copy()
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            num, den = np.zeros(c), 0.0
            for k in range(h):
                for l in range(w):
                    d2 = (i - k) ** 2 + (j - l) ** 2
                    if mask[k, l] or d2 > radius ** 2:
                        continue
                    num += context[k, l] / d2
                    den += 1.0 / d2
            out[i, j] = num / den if den > 0 else context[~mask].mean(axis=0)
    return out


def test_blur_fill_matches_brute_force():
    rng = np.random.default_rng(9)
    ctx = rng.normal(size=(12, 12, 4))
    mask = np.zeros((12, 12), bool)
    mask[4:8, 5:9] = True
    ctx[mask] = 0.0
    assert np.allclose(blur_fill(ctx, mask, 8), brute_fill(ctx, mask, 8), rtol=1e-12, atol=1e-13)


def test_blur_fill_far_cells_use_global_mean():
    rng = np.random.default_rng(10)
    ctx = rng.normal(size=(10, 10, 2))
    mask = np.ones((10, 10), bool)
    mask[0, 0] = mask[0, 1] = False
    ctx[mask] = 0
    out = blur_fill(ctx, mask, 2.0)
    assert np.allclose(out, brute_fill(ctx, mask, 2.0), rtol=1e-12)
    assert np.allclose(out[9, 9], ctx[~mask].mean(axis=0))


def test_single_masked_pixel_in_constant_context():
    v = np.array([0.3, -0.2])
    ctx = np.broadcast_to(v, (7, 7, 2)).copy()
    mask = np.zeros((7, 7), bool)
    mask[3, 3] = True
    ctx[mask] = 0.0
    cond = Condition(mask, ctx)
    assert np.allclose(blur_fill(ctx, mask)[3, 3], v, rtol=1e-14)
    den = ContextPullDenoiser()
    z = np.zeros((7, 7, 2))
    for _ in range(200):  # descend on z with the predicted residual against zero noise
        z_t = add_noise(z, np.zeros_like(z), 0.5, SCHED)
        z -= 0.2 * den.predict(z_t, 0.5, cond)
    assert np.allclose(z[3, 3], v, atol=1e-6)


def test_context_reproduced_outside_mask():
    rng = np.random.default_rng(11)
    ctx = rng.normal(size=(8, 8, 3))
    mask = np.zeros((8, 8), bool)
    mask[2:4, 2:5] = True
    cond = Condition.from_latent(ctx, mask)
    z_t = rng.normal(size=ctx.shape)
    a, s = alpha_sigma(SCHED, 0.4)
    pred = ContextPullDenoiser().predict(z_t, 0.4, cond)
    assert np.allclose(pred[~mask], (z_t[~mask] - a * cond.context_latent[~mask]) / s, rtol=1e-13)
    assert np.all(np.isfinite(pred))


def test_all_false_mask_fixes_context():
    rng = np.random.default_rng(12)
    ctx = rng.normal(size=(6, 6, 2))
    cond = Condition(np.zeros((6, 6), bool), ctx)
    den = ContextPullDenoiser()
    z = np.zeros_like(ctx)
    for _ in range(300):
        z -= 0.2 * den.predict(add_noise(z, np.zeros_like(z), 0.5, SCHED), 0.5, cond)
    assert np.allclose(z, ctx, atol=1e-8)


def test_all_true_mask_raises():
    cond = Condition(np.ones((4, 4), bool), np.zeros((4, 4, 2)))
    with pytest.raises(ValueError):
        ContextPullDenoiser().predict(np.zeros((4, 4, 2)), 0.5, cond)


def test_unconditional_branch_ignores_condition():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(6, 6, 2))
    den = ContextPullDenoiser()
    c1 = Condition.from_latent(rng.normal(size=(6, 6, 2)), rng.random((6, 6)) < 0.3)
    c2 = Condition.from_latent(rng.normal(size=(6, 6, 2)), rng.random((6, 6)) < 0.3)
    assert np.array_equal(den.predict(z, 0.5, c1, False), den.predict(z, 0.5, c2, False))
    assert np.array_equal(den.predict(z, 0.5, None, False), den.predict(z, 0.5, c1, False))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["gaussian-oracle", "context-pull"]))
def test_denoisers_deterministic_and_shape_preserving(seed, name):
    rng = np.random.default_rng(seed)
    den = make_denoiser(name)
    cond = Condition.from_latent(rng.normal(size=(8, 8, 4)), rng.random((8, 8)) < 0.4)
    if cond.mask.all():
        return
    z = rng.normal(size=(8, 8, 4))
    t = float(rng.uniform(0.02, 0.98))
    a, b = den.predict(z, t, cond), den.predict(z.copy(), t, cond)
    assert a.shape == z.shape and np.array_equal(a, b) and np.all(np.isfinite(a))


# ----------------------------------------------------------------- registry


def test_registry():
    assert {"gaussian-oracle", "context-pull"} <= set(available_denoisers())
    with pytest.raises(ValueError):
        make_denoiser("no-such-denoiser")

    class Zero:
        def predict(self, z_t, t, condition=None, conditional=True):
            return np.zeros_like(z_t)

    register_denoiser("zero-test", Zero)
    d = make_denoiser("zero-test")
    assert isinstance(d, Denoiser)
    assert np.all(d.predict(np.ones((2, 2, 1)), 0.5) == 0)
