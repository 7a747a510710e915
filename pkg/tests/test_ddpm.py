"""Schedule constants, forward-process equivalence, posterior formulas,
embedding, condition assembly, loss, and the ancestral sampler."""

import numpy as np
import numpy.testing as npt
import pytest

from smokediff.ddpm import (
    SamplingError,
    ancestral_sample,
    build_condition,
    diffusion_loss,
    eps_to_posterior_mean,
    iterate_forward,
    make_schedule,
    posterior_mean_var,
    q_sample,
    sinusoidal_embed,
    variational_terms,
)
from smokediff.rng import Rng

# float64 cumprod oracle, frozen before the build
ALPHA_BAR_400 = 0.017472873372638704


@pytest.fixture(scope="module")
def paper_sched():
    return make_schedule(400, 1e-4, 0.02)


# ---------------------------------------------------------------------------
# schedule

def test_schedule_endpoints(paper_sched):
    assert paper_sched.beta[0] == pytest.approx(1e-4)
    assert paper_sched.beta[-1] == pytest.approx(0.02)


def test_schedule_alpha_bar_1(paper_sched):
    npt.assert_allclose(paper_sched.alpha_bar[1], 0.9999, rtol=1e-12)


def test_schedule_alpha_bar_T_matches_product_oracle(paper_sched):
    npt.assert_allclose(paper_sched.alpha_bar[400], ALPHA_BAR_400, rtol=1e-12)
    assert 0.005 < paper_sched.alpha_bar[400] < 0.05


def test_schedule_monotone_and_conventions(paper_sched):
    assert np.all(np.diff(paper_sched.alpha_bar) < 0)
    assert paper_sched.alpha_bar[0] == 1.0
    assert paper_sched.sigma2[1] == 0.0
    assert np.all(paper_sched.beta > 0) and np.all(paper_sched.beta < 1)
    assert np.all(np.diff(paper_sched.beta) >= 0)


def test_schedule_invalid_ranges_rejected():
    with pytest.raises(ValueError):
        make_schedule(10, 0.02, 1e-4)
    with pytest.raises(ValueError):
        make_schedule(10, 0.0, 0.02)
    with pytest.raises(ValueError):
        make_schedule(0, 1e-4, 0.02)


# ---------------------------------------------------------------------------
# q_sample / iterate_forward

def test_q_sample_zero_noise(paper_sched):
    x0 = Rng(1).normal((4, 4))
    out = q_sample(x0, 50, np.zeros((4, 4)), paper_sched)
    npt.assert_allclose(out, np.sqrt(paper_sched.alpha_bar[50]) * x0, rtol=1e-14)


def test_q_sample_t1_close_to_x0(paper_sched):
    x0 = Rng(2).normal((4, 4))
    eps = Rng(3).normal((4, 4))
    out = q_sample(x0, 1, eps, paper_sched)
    bound = np.sqrt(paper_sched.beta[0]) * np.abs(eps) + 1e-4 * np.abs(x0)
    assert np.all(np.abs(out - x0) <= bound + 1e-12)


def test_q_sample_t_out_of_range(paper_sched):
    x0 = np.zeros((2, 2))
    with pytest.raises(ValueError):
        q_sample(x0, 0, x0, paper_sched)
    with pytest.raises(ValueError):
        q_sample(x0, 401, x0, paper_sched)


class _ZeroRng:
    def normal(self, shape):
        return np.zeros(shape)


def test_iterate_forward_zero_noise_telescopes(paper_sched):
    x0 = Rng(4).normal((4, 4))
    out = iterate_forward(x0, 120, paper_sched, _ZeroRng())
    npt.assert_allclose(out, np.sqrt(paper_sched.alpha_bar[120]) * x0, rtol=1e-12)


def test_iterate_forward_single_step_equals_q_sample(paper_sched):
    x0 = Rng(5).normal((4, 4))
    z = Rng(77).normal((4, 4))
    direct = q_sample(x0, 1, z, paper_sched)
    stepped = iterate_forward(x0, 1, paper_sched, Rng(77))
    npt.assert_allclose(stepped, direct, rtol=1e-12)


@pytest.mark.parametrize("t", [1, 10, 100, 400])
def test_forward_process_moment_equivalence(paper_sched, t):
    x0 = Rng(6).normal((8, 8))
    n = 10_000
    batch = np.broadcast_to(x0, (n, 8, 8)).copy()
    iterated = iterate_forward(batch, t, paper_sched, Rng(1000 + t))
    ab = paper_sched.alpha_bar[t]
    assert np.abs(iterated.mean(axis=0) - np.sqrt(ab) * x0).max() < 0.05
    assert np.abs(iterated.std(axis=0) - np.sqrt(1.0 - ab)).max() < 0.05
    direct = q_sample(batch, t, Rng(2000 + t).normal((n, 8, 8)), paper_sched)
    assert np.abs(iterated.mean(axis=0) - direct.mean(axis=0)).max() < 0.05
    assert np.abs(iterated.std(axis=0) - direct.std(axis=0)).max() < 0.05


# ---------------------------------------------------------------------------
# posterior

def test_posterior_t1_reduces_to_x0(paper_sched):
    x0 = Rng(8).normal((3, 3))
    xt = Rng(9).normal((3, 3))
    mu, s2 = posterior_mean_var(x0, xt, 1, paper_sched)
    npt.assert_allclose(mu, x0, rtol=1e-12)
    assert s2 == 0.0


@pytest.mark.parametrize("t", [2, 10, 100, 400])
def test_posterior_two_parameterizations_agree(paper_sched, t):
    x0 = Rng(10).normal((4, 4))
    eps = Rng(11).normal((4, 4))
    xt = q_sample(x0, t, eps, paper_sched)
    mu_x0, _ = posterior_mean_var(x0, xt, t, paper_sched)
    mu_eps = eps_to_posterior_mean(xt, eps, t, paper_sched)
    npt.assert_allclose(mu_x0, mu_eps, rtol=1e-6)


def test_posterior_toy_schedule_hand_values():
    # T=2, beta=[0.1, 0.2], x0=1, xt=0.5, t=2; worked out by hand:
    # ab1=0.9, ab2=0.72, mu = sqrt(.9)*.2/.28*1 + sqrt(.8)*.1/.28*0.5
    sched = make_schedule(2, 0.1, 0.2)
    mu, s2 = posterior_mean_var(np.array(1.0), np.array(0.5), 2, sched)
    npt.assert_allclose(mu, 0.8373500684289237, rtol=1e-12)
    npt.assert_allclose(s2, 0.07142857142857144, rtol=1e-12)


# ---------------------------------------------------------------------------
# embedding / condition

def test_embed_at_zero():
    npt.assert_array_equal(sinusoidal_embed(0.0, 8), [0, 1, 0, 1, 0, 1, 0, 1])


def test_embed_frequency_value():
    # d=4, k=1: omega_1 = 10000^(-1/2) = 0.01
    v = sinusoidal_embed(1.0, 4)
    npt.assert_allclose(v[2], np.sin(0.01), rtol=1e-12)
    npt.assert_allclose(v[3], np.cos(0.01), rtol=1e-12)


@pytest.mark.parametrize("s,d", [(0.0, 2), (3.7, 16), (400.0, 64), (-2.0, 10)])
def test_embed_length_and_range(s, d):
    v = sinusoidal_embed(s, d)
    assert v.shape == (d,)
    assert np.all(np.abs(v) <= 1.0)


def test_embed_odd_dim_rejected():
    with pytest.raises(ValueError):
        sinusoidal_embed(1.0, 5)


def test_build_condition_channels():
    rho0 = Rng(12).uniform((6, 6))
    y0 = build_condition(rho0, 0.0, 8.0)
    assert np.all(y0.channels[1] == 0.0)
    y1 = build_condition(rho0, 8.0, 8.0)
    assert np.all(y1.channels[1] == 1.0)
    y = build_condition(rho0, 2.0, 8.0)
    assert y.channels.shape == (2, 6, 6)
    npt.assert_array_equal(y.channels[0], rho0)
    npt.assert_allclose(y.channels[1], 0.25)


def test_build_condition_rejects_bad_tau():
    with pytest.raises(ValueError):
        build_condition(np.zeros((4, 4)), 9.0, 8.0)


# ---------------------------------------------------------------------------
# loss

def test_diffusion_loss_values(np_rng):
    e = np_rng.standard_normal((2, 4, 4))
    assert diffusion_loss(e, e) == 0.0
    npt.assert_allclose(diffusion_loss(e + 0.3, e), 0.09, rtol=1e-12)


def test_diffusion_loss_matches_loop_oracle(np_rng):
    a = np_rng.standard_normal((2, 3, 3))
    b = np_rng.standard_normal((2, 3, 3))
    acc = 0.0
    for i in np.ndindex(a.shape):
        acc += (a[i] - b[i]) ** 2
    npt.assert_allclose(diffusion_loss(a, b), acc / a.size, rtol=1e-12)


def test_diffusion_loss_shape_mismatch(np_rng):
    with pytest.raises(ValueError):
        diffusion_loss(np_rng.standard_normal((2, 2)), np_rng.standard_normal((2, 3)))


# ---------------------------------------------------------------------------
# ancestral sampler

def test_sampler_single_step_deterministic():
    sched = make_schedule(1, 0.1, 0.1)
    out1 = ancestral_sample(lambda x, t, y: np.zeros_like(x), None, sched, seed=5, shape=(3, 3))
    out2 = ancestral_sample(lambda x, t, y: np.zeros_like(x), None, sched, seed=5, shape=(3, 3))
    assert np.array_equal(out1, out2)
    x1 = Rng(5).normal((3, 3))
    npt.assert_allclose(out1, x1 / np.sqrt(1.0 - 0.1), rtol=1e-12)


def test_sampler_dirac_oracle_concentrates():
    sched = make_schedule(100, 1e-4, 0.02)
    x0_star = Rng(33).normal((8, 8))

    def oracle(xt, t, y):
        ab = sched.alpha_bar[t]
        return (xt - np.sqrt(ab) * x0_star) / np.sqrt(1.0 - ab)

    samples = [ancestral_sample(oracle, None, sched, seed=s, shape=(8, 8)) for s in range(64)]
    mean = np.mean(samples, axis=0)
    assert np.abs(mean - x0_star).mean() < 0.05


def test_sampler_aborts_on_non_finite():
    sched = make_schedule(10, 1e-4, 0.02)

    def bad(xt, t, y):
        return np.full_like(xt, np.nan) if t == 7 else np.zeros_like(xt)

    with pytest.raises(SamplingError) as exc:
        ancestral_sample(bad, None, sched, seed=0, shape=(2, 2))
    assert exc.value.t == 7


def test_variational_terms_finite_nonnegative():
    sched = make_schedule(50, 1e-4, 0.02)
    x0 = Rng(40).normal((4, 4))

    def oracle(xt, t, y):
        ab = sched.alpha_bar[t]
        return (xt - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    terms = variational_terms(oracle, x0, None, sched, Rng(41), ts=[2, 10, 50])
    assert set(terms) == {2, 10, 50}
    for v in terms.values():
        assert np.isfinite(v) and v >= 0.0
    # the analytic-optimal denoiser should make every term tiny
    assert max(terms.values()) < 1e-10
