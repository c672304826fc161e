import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsep import _accel
from zsep.denoiser import (NULL, AnalyticDenoiser, Composite, CountingDenoiser, FunctionDenoiser,
                           GaussianSourceModel, Label, Null, Random, TinyDenoiser, analytic_eps, init_params,
                           parse_condition, tiny_eps, tiny_forward, train)
from zsep.denoiser.analytic import mixture_posterior
from zsep.denoiser.tiny import eval_loss, loss_and_grads, random_prompt_embedding
from zsep.rng import Stream
from zsep.schedule import default_schedule, make_linear_schedule

SHAPE1 = (1, 1, 1)


# -- conditions -------------------------------------------------------------------------


@given(st.one_of(st.just(NULL), st.builds(Label, st.integers(0, 99)),
                 st.builds(lambda ids: Composite.of(*ids), st.lists(st.integers(0, 99), min_size=1, max_size=4)),
                 st.builds(Random, st.integers(0, 2**31))))
def test_condition_key_round_trip(c):
    assert parse_condition(c.key()) == c


def test_composite_is_sorted_and_unique():
    assert Composite.of(3, 1, 3).ids == (1, 3)
    with pytest.raises(ValueError):
        Composite(())
    assert parse_condition("2") == Label(2)
    with pytest.raises(ValueError):
        parse_condition("banana:1")


# -- analytic oracle ----------------------------------------------------------------------


def _quadrature_x0_mean(model: GaussianSourceModel, ab: float, x_t: float, c) -> float:
    """E[x0 | x_t] by brute-force integration over a dense 1-D grid."""
    grid = np.linspace(-12.0, 12.0, 400_001)
    comps = model.components if isinstance(c, Null) else [c]
    weights = model.priors if isinstance(c, Null) else [1.0]
    prior = np.zeros_like(grid)
    for comp, w in zip(comps, weights):
        mu, var = (float(a.ravel()[0]) for a in model.mean_var(comp))
        prior += w * np.exp(-0.5 * (grid - mu) ** 2 / var) / math.sqrt(2 * math.pi * var)
    lik = np.exp(-0.5 * (x_t - math.sqrt(ab) * grid) ** 2 / (1 - ab))
    w = prior * lik
    return float(np.trapezoid(grid * w, grid) / np.trapezoid(w, grid))


@pytest.fixture
def toy1d():
    return GaussianSourceModel({0: np.full(SHAPE1, -1.0), 1: np.full(SHAPE1, 1.5)},
                               {0: np.full(SHAPE1, 0.4), 1: np.full(SHAPE1, 0.7)},
                               priors={"label:0": 0.3, "label:1": 0.5, "composite:0+1": 0.2})


@pytest.mark.parametrize("t", [20, 200, 600, 950])
@pytest.mark.parametrize("x_t", [-1.3, 0.0, 0.8, 2.5])
@pytest.mark.parametrize("c", [NULL, Label(0), Label(1), Composite.of(0, 1)])
def test_analytic_matches_quadrature(toy1d, t, x_t, c):
    sched = default_schedule()
    ab = sched.alpha_bars[t]
    e = _quadrature_x0_mean(toy1d, ab, x_t, c)
    eps_ref = (x_t - math.sqrt(ab) * e) / math.sqrt(1 - ab)
    eps = analytic_eps(toy1d, sched, np.full(SHAPE1, x_t), c, t)
    assert float(eps.ravel()[0]) == pytest.approx(eps_ref, abs=1e-6)


def test_standard_normal_label_closed_form():
    # alpha_bar = 0.5 exactly
    sched = make_linear_schedule(1, 0.5, 0.5)
    m = GaussianSourceModel({0: np.zeros(SHAPE1)}, {0: np.ones(SHAPE1)}, composites=[])
    x = np.full(SHAPE1, 0.7)
    eps = analytic_eps(m, sched, x, Label(0), 1)
    assert float(eps.ravel()[0]) == pytest.approx(math.sqrt(0.5) * 0.7, abs=1e-15)
    assert float(_quadrature_x0_mean(m, 0.5, 0.7, Label(0))) == pytest.approx(math.sqrt(0.5) * 0.7, abs=1e-8)


def test_centered_input_gives_zero_eps(toy1d):
    sched = default_schedule()
    t = 300
    mu = toy1d.means[1]
    x = math.sqrt(sched.alpha_bars[t]) * mu
    assert np.allclose(analytic_eps(toy1d, sched, x, Label(1), t), 0.0, atol=1e-15)


def test_point_mass_limit():
    sched = default_schedule()
    m = GaussianSourceModel({0: np.full(SHAPE1, 2.0)}, {0: np.full(SHAPE1, 1e-9)}, composites=[])
    t = 500
    ab = sched.alpha_bars[t]
    x = np.full(SHAPE1, -3.0)
    eps = analytic_eps(m, sched, x, Label(0), t)
    x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    assert float(x0.ravel()[0]) == pytest.approx(2.0, abs=1e-8)


def test_symmetric_labels_give_zero_null_eps():
    sched = default_schedule()
    m = GaussianSourceModel({0: np.full((1, 2, 3), 1.2), 1: np.full((1, 2, 3), -1.2)},
                            {0: np.full((1, 2, 3), 0.5), 1: np.full((1, 2, 3), 0.5)}, composites=[])
    eps = analytic_eps(m, sched, np.zeros((1, 2, 3)), NULL, 400)
    assert np.allclose(eps, 0.0, atol=1e-14)


def test_responsibilities_normalized_even_far_out(toy1d):
    sched = default_schedule()
    x = np.array([0.0, 5.0, -40.0, 300.0]).reshape(4, 1, 1, 1)
    eps, r = analytic_eps(toy1d, sched, x, NULL, 10, return_resp=True)
    assert np.all(np.isfinite(eps))
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")
def test_posterior_kernels_agree():
    st_ = Stream(4)
    x = st_.normal((7, 20))
    means = st_.uniform((3, 20), -1, 1)
    vars_ = st_.uniform((3, 20), 0.05, 1.0)
    logpi = np.log(np.array([0.2, 0.3, 0.5]))
    e1, r1 = mixture_posterior(x, means, vars_, logpi, 0.4, use_numba=False)
    e2, r2 = mixture_posterior(x, means, vars_, logpi, 0.4, use_numba=True)
    np.testing.assert_allclose(e1, e2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(r1, r2, rtol=1e-12, atol=1e-14)


def test_gaussian_model_construction():
    m = GaussianSourceModel({0: np.ones(SHAPE1), 1: 2 * np.ones(SHAPE1)},
                            {0: 0.3 * np.ones(SHAPE1), 1: 0.4 * np.ones(SHAPE1)})
    assert [c.key() for c in m.components] == ["label:0", "label:1", "composite:0+1"]
    assert m.priors.sum() == pytest.approx(1.0, abs=1e-12)
    mu, var = m.mean_var(Composite.of(0, 1))
    assert float(mu.ravel()[0]) == 3.0 and float(var.ravel()[0]) == pytest.approx(0.25)
    only_pair = GaussianSourceModel(m.means, m.stds, priors={"composite:0+1": 1.0})
    assert [c.key() for c in only_pair.components] == ["composite:0+1"]
    assert only_pair.mean_var(Label(0))[0].ravel()[0] == 1.0
    with pytest.raises(ValueError):
        GaussianSourceModel(m.means, m.stds, priors={"label:0": -1.0})
    with pytest.raises(ValueError):
        GaussianSourceModel(m.means, m.stds, priors={"label:7": 1.0})
    with pytest.raises(ValueError):
        GaussianSourceModel(m.means, {0: np.zeros(SHAPE1), 1: np.ones(SHAPE1)})
    with pytest.raises(KeyError):
        m.mean_var(Label(9))


def test_analytic_denoiser_contract(toy1d):
    sched = default_schedule()
    d = AnalyticDenoiser(toy1d, sched)
    x = Stream(2).normal((5, *SHAPE1))
    a, b = d.predict_eps(x, NULL, 50), d.predict_eps(x, NULL, 50)
    assert np.array_equal(a, b) and a.shape == x.shape
    assert d.supports(Label(1)) and not d.supports(Label(4)) and not d.supports(Random(1))
    with pytest.raises(ValueError):
        d.predict_eps(x, Random(3), 50)
    with pytest.raises(IndexError):
        d.predict_eps(x, NULL, 0)
    with pytest.raises(FloatingPointError):
        d.predict_eps(np.full((1, *SHAPE1), np.nan), NULL, 5)


def test_per_row_conditions_match_individual_calls(toy1d):
    sched = default_schedule()
    d = AnalyticDenoiser(toy1d, sched)
    x = Stream(3).normal((4, *SHAPE1))
    conds = (Label(0), NULL, Label(0), Composite.of(0, 1))
    got = d.predict_eps(x, conds, 100)
    for i, c in enumerate(conds):
        assert np.array_equal(got[i], d.predict_eps(x[i:i + 1], c, 100)[0])
    with pytest.raises(ValueError):
        d.predict_eps(x, conds[:2], 100)


def test_counting_denoiser():
    sched = default_schedule()
    d = CountingDenoiser(FunctionDenoiser(sched, lambda x, c, t: np.zeros_like(x)))
    d.predict_eps(np.zeros((1, 1, 1)), NULL, 3)
    d.predict_eps(np.zeros((1, 1, 1)), Label(2), 3)
    d.predict_eps(np.zeros((2, 1, 1, 1)), (Label(2), NULL), 3)
    assert d.calls["uncond"] == 2 and d.calls["cond"] == 2 and d.calls["label:2"] == 2
    d.reset()
    assert not d.calls


# -- tiny denoiser -----------------------------------------------------------------------


def _small_params(seed=0, **kw):
    return init_params((1, 2, 3), [0, 1], hidden=5, d_t=4, d_c=3, seed=seed, **kw)


def test_tiny_zero_weights_give_zero_output():
    p = _small_params()
    p = p.with_arrays({k: np.zeros_like(v) for k, v in p.arrays().items()})
    out = tiny_forward(p, Stream(1).normal((4, 1, 2, 3)), Label(1), 7)
    assert out.shape == (4, 1, 2, 3) and not np.any(out)


def test_tiny_last_layer_linearity():
    p = _small_params()
    x = Stream(1).normal((3, 1, 2, 3))
    base = tiny_forward(p, x, Label(0), 11)
    p2 = p.with_arrays({"W2": 2 * p.W2, "b2": 2 * p.b2})
    np.testing.assert_allclose(tiny_forward(p2, x, Label(0), 11), 2 * base, rtol=1e-14, atol=1e-15)


def test_tiny_shape_and_dims_check():
    sched = default_schedule()
    d = TinyDenoiser(_small_params(), sched)
    x = Stream(5).normal((2, 1, 2, 3))
    assert d.predict_eps(x, NULL, 10).shape == x.shape
    assert d.predict_eps(x[0], Label(1), 10).shape == x.shape[1:]
    with pytest.raises(ValueError):
        d.predict_eps(np.zeros((1, 3, 3)), NULL, 10)
    with pytest.raises(KeyError, match="unknown label id"):
        d.predict_eps(x, Label(5), 10)
    assert d.supports(Random(3)) and d.supports(Composite.of(0, 1)) and not d.supports(Label(5))


def test_precondition_is_gaussian_optimal_when_network_is_zero():
    sched = default_schedule()
    p = _small_params(sigma_data=0.6)
    p = p.with_arrays({k: np.zeros_like(v) for k, v in p.arrays().items()})
    g = GaussianSourceModel({0: np.zeros((1, 2, 3))}, {0: np.full((1, 2, 3), 0.6)}, composites=[])
    x = Stream(8).normal((3, 1, 2, 3))
    for t in (1, 100, 999):
        np.testing.assert_allclose(tiny_eps(p, sched, x, NULL, t), analytic_eps(g, sched, x, Label(0), t),
                                   rtol=1e-12, atol=1e-14)


def _gradcheck(params, sched, B=6, h=1e-6):
    st_ = Stream(21)
    D = params.grid_size
    x0 = st_.uniform((B, D), 0, 1)
    noise = st_.normal((B, D))
    t = st_.integers(1, sched.T + 1, (B,))
    rows = st_.integers(0, params.emb.shape[0], (B,))
    _, grads = loss_and_grads(params, sched, x0, noise, t, rows)
    worst = 0.0
    for name, arr in params.arrays().items():
        for idx in np.ndindex(arr.shape):
            up, dn = arr.copy(), arr.copy()
            up[idx] += h
            dn[idx] -= h
            lu = loss_and_grads(params.with_arrays({name: up}), sched, x0, noise, t, rows)[0]
            ld = loss_and_grads(params.with_arrays({name: dn}), sched, x0, noise, t, rows)[0]
            num = (lu - ld) / (2 * h)
            ana = grads[name][idx]
            scale = max(abs(num), abs(ana))
            if scale > 1e-7:
                worst = max(worst, abs(num - ana) / scale)
    return worst


@pytest.mark.parametrize("sigma_data", [0.5, None])
def test_gradient_matches_central_differences(sigma_data):
    sched = default_schedule()
    assert _gradcheck(_small_params(sigma_data=sigma_data), sched) < 1e-4


def test_random_prompt_embedding():
    p = _small_params()
    a, b = random_prompt_embedding(p, 3), random_prompt_embedding(p, 3)
    assert np.array_equal(a, b) and not np.array_equal(a, random_prompt_embedding(p, 4))


def _toy_dataset(n=4):
    from zsep.scene import default_labels, make_dataset
    return make_dataset(default_labels()[:2], n, True, (1, 4, 16), seed=0)


def test_train_lr_zero_keeps_params():
    data = _toy_dataset()
    p = init_params((1, 4, 16), [0, 1], hidden=8, d_t=4, d_c=3, seed=0)
    res = train(p, data, default_schedule(), 2, 0.0, seed=1, fit_sigma_data=False)
    for k, v in p.arrays().items():
        assert np.array_equal(res.params.arrays()[k], v)


def test_train_is_deterministic_and_single_sample_loss_halves():
    from zsep.scene import default_labels, gen_source
    data = [(Label(0), gen_source(default_labels()[0], (1, 4, 16), 0))]
    p = init_params((1, 4, 16), [0, 1], hidden=64, d_t=4, d_c=3, seed=0, sigma_data=None)
    r1 = train(p, data, default_schedule(), 600, 3e-3, seed=2, batch_size=32)
    r2 = train(p, data, default_schedule(), 600, 3e-3, seed=2, batch_size=32)
    assert r1.losses == r2.losses
    sched = default_schedule()
    before = eval_loss(p, data, sched, repeats=256)
    after = eval_loss(r1.params, data, sched, repeats=256)
    assert after <= 0.5 * before


def test_full_dropout_leaves_condition_rows_untouched():
    data = _toy_dataset()
    p = init_params((1, 4, 16), [0, 1], hidden=8, d_t=4, d_c=3, seed=0, p_uncond=1.0)
    res = train(p, data, default_schedule(), 3, 1e-2, seed=1)
    assert np.array_equal(res.params.emb[1:], p.emb[1:])
    assert not np.array_equal(res.params.emb[0], p.emb[0])


def test_non_finite_loss_aborts():
    data = _toy_dataset()
    p = init_params((1, 4, 16), [0, 1], hidden=8, d_t=4, d_c=3, seed=0)
    p = p.with_arrays({"W2": np.full_like(p.W2, np.nan)})
    with pytest.raises(FloatingPointError):
        train(p, data, default_schedule(), 1, 1e-3, seed=0)


def test_init_params_validation():
    with pytest.raises(ValueError):
        init_params((1, 2, 3), [0], d_t=3)
    p = _small_params()
    assert p.emb.shape[0] == 1 + 2 + 1  # null, two labels, one pair
    assert p.cond_keys[0] == "null"
