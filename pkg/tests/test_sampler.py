import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsep.denoiser import NULL, CountingDenoiser, FunctionDenoiser, GaussianSourceModel, AnalyticDenoiser, Label
from zsep.rng import Stream
from zsep.sampler import GuidanceConfig, SamplerKind, cfg_eps, ddim_step, ddpm_step, generate
from zsep.schedule import default_schedule, make_plan

SHAPE = (1, 2, 4)


def _affine_model(sched):
    # eps_null = 0.1 x, eps_cond = 0.3 x + 1 (per condition), so every branch is distinguishable
    def fn(x, c, t):
        return 0.1 * x if c is NULL else 0.3 * x + 1.0
    return CountingDenoiser(FunctionDenoiser(sched, fn))


def test_guidance_endpoints_skip_the_other_branch():
    sched = default_schedule()
    m = _affine_model(sched)
    x = Stream(0).normal(SHAPE)
    assert np.array_equal(cfg_eps(m, x, 5, GuidanceConfig(0.0, Label(1))), 0.1 * x)
    assert m.calls["cond"] == 0 and m.calls["uncond"] == 1
    m.reset()
    assert np.array_equal(cfg_eps(m, x, 5, GuidanceConfig(1.0, Label(1))), 0.3 * x + 1.0)
    assert m.calls["uncond"] == 0 and m.calls["cond"] == 1
    m.reset()
    cfg_eps(m, x, 5, GuidanceConfig(1.5, Label(1)))
    assert m.calls["uncond"] == 1 and m.calls["cond"] == 1


@given(st.floats(0.0, 8.0, allow_nan=False))
@settings(max_examples=40, deadline=None)
def test_guidance_is_affine_in_omega(omega):
    sched = default_schedule()
    m = _affine_model(sched)
    x = Stream(1).normal(SHAPE)
    e0, e1 = 0.1 * x, 0.3 * x + 1.0
    got = cfg_eps(m, x, 10, GuidanceConfig(omega, Label(0)))
    np.testing.assert_allclose(got, e0 + omega * (e1 - e0), rtol=1e-12, atol=1e-12)


def test_guidance_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(-0.1)
    with pytest.raises(ValueError):
        GuidanceConfig(float("nan"))
    assert GuidanceConfig(1.0, [Label(0), NULL]).c_rev == (Label(0), NULL)


def test_ddim_step_with_zero_eps_rescales():
    sched = default_schedule()
    x = Stream(2).normal(SHAPE)
    got = ddim_step(sched, x, 700, 300, np.zeros_like(x))
    np.testing.assert_allclose(got, math.sqrt(sched.alpha_bars[300] / sched.alpha_bars[700]) * x, rtol=1e-13)
    with pytest.raises(ValueError):
        ddim_step(sched, x, 300, 300, np.zeros_like(x))


def test_single_step_plan_returns_x0_estimate():
    sched = default_schedule()
    m = FunctionDenoiser(sched, lambda x, c, t: 0.5 * x)
    x = Stream(3).normal(SHAPE)
    out = generate(m, sched, make_plan(sched.T, 1), x, GuidanceConfig(0.0))
    ab = sched.alpha_bars[sched.T]
    np.testing.assert_allclose(out, (x - math.sqrt(1 - ab) * 0.5 * x) / math.sqrt(ab), rtol=1e-12)


def test_ddpm_step_final_is_mean():
    sched = default_schedule()
    x = Stream(4).normal(SHAPE)
    eps = Stream(5).normal(SHAPE)
    a = ddpm_step(sched, x, 20, 0, eps, Stream(6).normal(SHAPE))
    b = ddpm_step(sched, x, 20, 0, eps, None)
    assert np.array_equal(a, b)


def _gaussian(mu=0.8, s=0.5):
    return GaussianSourceModel({0: np.full(SHAPE, mu)}, {0: np.full(SHAPE, s)}, composites=[])


def _flow_map(sched, mu, s, x_T):
    # the probability-flow ODE keeps the standardized coordinate fixed for Gaussian data
    ab = sched.alpha_bars[sched.T]
    return mu + s * (x_T - math.sqrt(ab) * mu) / math.sqrt(ab * s * s + 1 - ab)


def test_ddim_matches_gaussian_flow_map():
    sched = default_schedule()
    den = AnalyticDenoiser(_gaussian(), sched)
    x_T = np.zeros(SHAPE)
    out = generate(den, sched, make_plan(sched.T, sched.T), x_T, GuidanceConfig(1.0, Label(0)))
    np.testing.assert_allclose(out, _flow_map(sched, 0.8, 0.5, x_T), atol=1e-3)


def test_ddim_self_consistency_improves_with_steps():
    sched = default_schedule()
    den = AnalyticDenoiser(_gaussian(), sched)
    x_T = Stream(7).normal((3, *SHAPE))
    ref = _flow_map(sched, 0.8, 0.5, x_T)
    errs = [np.max(np.abs(generate(den, sched, make_plan(sched.T, n), x_T, GuidanceConfig(1.0, Label(0))) - ref))
            for n in (10, 50, 200)]
    assert errs[0] > errs[1] > errs[2]


def test_ddim_is_deterministic_and_ddpm_seeded():
    sched = default_schedule()
    den = AnalyticDenoiser(_gaussian(), sched)
    x_T = Stream(8).normal(SHAPE)
    plan = make_plan(sched.T, 20)
    g = GuidanceConfig(1.0, Label(0))
    assert np.array_equal(generate(den, sched, plan, x_T, g), generate(den, sched, plan, x_T, g))
    a = generate(den, sched, plan, x_T, g, SamplerKind.DDPM, seed=1)
    b = generate(den, sched, plan, x_T, g, "ddpm", seed=1)
    c = generate(den, sched, plan, x_T, g, "ddpm", seed=2)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_ddpm_replays_supplied_noise():
    sched = default_schedule()
    den = FunctionDenoiser(sched, lambda x, c, t: 0.2 * x)
    plan = make_plan(sched.T, 4)
    x_T = Stream(9).normal(SHAPE)
    zs = [Stream(10, k).normal(SHAPE) for k in range(len(plan))]
    got = generate(den, sched, plan, x_T, GuidanceConfig(0.0), "ddpm", zs=zs)
    x = x_T
    for (t, tp), z in zip(plan.pairs(), zs):
        x = ddpm_step(sched, x, t, tp, 0.2 * x, z)
    assert np.array_equal(got, x)
    with pytest.raises(ValueError):
        generate(den, sched, plan, x_T, GuidanceConfig(0.0), "ddpm", zs=zs[:-1])


def test_generate_rejects_plan_beyond_schedule():
    sched = default_schedule()
    den = FunctionDenoiser(sched, lambda x, c, t: 0 * x)
    with pytest.raises(ValueError):
        generate(den, sched, make_plan(sched.T + 5, 3), np.zeros(SHAPE), GuidanceConfig())
