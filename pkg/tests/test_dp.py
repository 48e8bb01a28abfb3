import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from pevdn import dp
from pevdn.acceptance import mc_moment
from pevdn.errors import EmptyEpisode


def test_dpconfig_derived_values():
    cfg = dp.DPConfig(clip=2.0, noise_multiplier=1.5, buffer_size=500, expected_batch_size=32)
    assert cfg.sample_rate == 32 / 500
    assert cfg.sigma == 3.0


@pytest.mark.parametrize("kwargs", [dict(clip=0), dict(noise_multiplier=-1), dict(delta=1),
                                    dict(buffer_throughput=0.5), dict(expected_batch_size=600)])
def test_dpconfig_validation(kwargs):
    with pytest.raises(ValueError):
        dp.DPConfig(**kwargs)


def test_poisson_q_one_takes_all(rng):
    assert dp.poisson_sample(17, 1.0, rng).tolist() == list(range(17))


def test_poisson_mean_batch_size(rng):
    sizes = [len(dp.poisson_sample(5000, 0.02, rng)) for _ in range(1000)]
    sd = math.sqrt(5000 * 0.02 * 0.98 / 1000)
    assert abs(np.mean(sizes) - 100) <= 3 * sd


def test_poisson_may_be_empty(rng):
    assert any(len(dp.poisson_sample(3, 1e-3, rng)) == 0 for _ in range(10))


def test_poisson_rejects_bad_rate(rng):
    with pytest.raises(ValueError):
        dp.poisson_sample(10, 0.0, rng)


def test_clip_examples():
    assert dp.clip(np.array([3.0, 4.0]), 1.0).tolist() == pytest.approx([0.6, 0.8])
    assert dp.clip(np.array([3.0, 4.0]), 10.0).tolist() == [3.0, 4.0]
    assert dp.clip(np.zeros(3), 1.0).tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        dp.clip(np.ones(2), 0.0)


@settings(max_examples=200)
@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=8),
       st.floats(min_value=1e-3, max_value=1e3))
def test_clip_properties(values, c):
    g = np.array(values)
    out = dp.clip(g, c)
    assert np.linalg.norm(out) <= c * (1 + 1e-12)
    if np.linalg.norm(g) <= c:
        assert np.array_equal(out, g)
    else:
        # same direction
        assert np.allclose(out * np.linalg.norm(g) / c, g, rtol=1e-9, atol=1e-9)


def test_clip_rows_matches_clip(rng):
    g = rng.normal(size=(20, 6)) * rng.uniform(0.01, 10, size=(20, 1))
    rows = dp.clip_rows(g, 1.5)
    for a, b in zip(rows, g):
        assert np.allclose(a, dp.clip(b, 1.5))


def test_noise_sigma_zero_identity(rng):
    g = rng.normal(size=5)
    assert np.array_equal(dp.noise(g, 0.0, rng), g)
    with pytest.raises(ValueError):
        dp.noise(g, -1.0, rng)


def test_noise_mean_and_variance(rng):
    g = np.array([1.0, -3.0, 0.5])
    sigma = 1.7
    draws = np.stack([dp.noise(g, sigma, rng) for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(axis=0) - g) <= 3 * sigma / 100)
    assert np.all(np.abs(draws.var(axis=0, ddof=1) / sigma ** 2 - 1) <= 0.10)


def test_update_gate_frequencies(rng):
    assert all(dp.update_gate(1.0, rng) for _ in range(100))
    hits = sum(dp.update_gate(4.0, rng) for _ in range(10_000))
    assert abs(hits / 10_000 - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 10_000)
    assert sum(dp.update_gate(1e9, rng) for _ in range(1000)) == 0
    with pytest.raises(ValueError):
        dp.update_gate(0.5, rng)


def test_per_episode_gradient():
    g = np.array([1.0, -2.0])
    assert dp.per_episode_gradient([g]).tolist() == [1.0, -2.0]
    assert dp.per_episode_gradient([g, -g]).tolist() == [0.0, 0.0]
    assert np.array_equal(dp.per_episode_gradient([g] * 5), g)
    with pytest.raises(EmptyEpisode):
        dp.per_episode_gradient([])


@pytest.mark.parametrize("sigma", [1.0, 2.0, 4.0])
def test_log_moment_closed_form_at_q_one(sigma):
    for lam in range(1, 33):
        exact = lam * (lam + 1) / (2 * sigma ** 2)
        assert dp.log_moment(1.0, sigma, lam) == pytest.approx(exact, rel=1e-3)


def test_log_moment_vanishes_for_huge_noise():
    values = [dp.log_moment(0.1, s, 4) for s in (10.0, 100.0, 1000.0)]
    assert values[0] > values[1] > values[2] >= 0.0
    assert values[2] < 1e-6


def test_log_moment_binomial_oracle():
    # integer-order moment of the mixture as a finite binomial sum:
    # E_mu0[(mu/mu0)^k] = sum_j C(k,j) q^j (1-q)^(k-j) exp(j(j-1)/(2 s^2)), here at k = lam + 1
    q, s, lam = 0.01, 1.0, 2
    k = lam + 1
    oracle = sum(math.comb(k, j) * q ** j * (1 - q) ** (k - j) * math.exp(j * (j - 1) / (2 * s * s))
                 for j in range(k + 1))
    assert dp.log_moment(q, s, lam) == pytest.approx(math.log(oracle), rel=1e-9)


def test_log_moment_monte_carlo_oracle():
    (m1, se1), (m2, se2) = mc_moment(0.01, 1.0, 2, samples=10_000_000)
    numeric = math.exp(dp.log_moment(0.01, 1.0, 2))
    mc, se = (m1, se1) if m1 >= m2 else (m2, se2)
    assert abs(numeric - mc) <= 3 * se


def test_log_moment_argument_checks():
    with pytest.raises(ValueError):
        dp.log_moment(0.1, 1.0, 0)
    with pytest.raises(ValueError):
        dp.log_moment(0.1, 0.0, 1)
    with pytest.raises(ValueError):
        dp.log_moment(0.0, 1.0, 1)


def test_epsilon_q_one_matches_analytic_minimum():
    # minimize (lam (lam + 1) / 2 + ln 1e5) / lam over integer lam
    c = math.log(1e5)
    exact = min((lam * (lam + 1) / 2 + c) / lam for lam in range(1, 65))
    res = optimize.minimize_scalar(lambda x: (x * (x + 1) / 2 + c) / x, bounds=(1, 64), method="bounded")
    assert exact == pytest.approx(res.fun, rel=0.05)  # integer grid vs continuum
    assert dp.epsilon_for(1, 1.0, 1.0, 1e-5) == pytest.approx(exact, rel=0.01)


GRID = [(q, s) for q in (0.01, 0.064, 0.2) for s in (0.8, 1.0, 1.5)]


@pytest.mark.parametrize("q,s", GRID)
def test_epsilon_monotone_in_t_and_sigma(q, s):
    e1 = dp.epsilon_for(100, q, s, 1e-5)
    assert dp.epsilon_for(200, q, s, 1e-5) >= e1
    assert dp.epsilon_for(100, q, 2 * s, 1e-5) < e1


def test_epsilon_monotone_in_q():
    values = [dp.epsilon_for(200, q, 1.0, 1e-5) for q in (0.01, 0.02, 0.05, 0.1)]
    assert values == sorted(values)


def test_epsilon_needs_compositions():
    with pytest.raises(ValueError):
        dp.epsilon_for(0, 0.1, 1.0, 1e-5)


def test_replay_ledger_arithmetic():
    cfg = dp.DPConfig(noise_multiplier=1.5, delta=1e-4, buffer_size=500, buffer_throughput=4.0)
    raw = dp.epsilon_for(500, cfg.sample_rate, 1.5, 1e-4)
    assert dp.replay_ledger(cfg) == (raw / 4.0, 1e-4 / 4.0)
    one = dp.DPConfig(noise_multiplier=1.5, delta=1e-4, buffer_size=500)
    assert dp.replay_ledger(one) == (raw, 1e-4)


def test_ledger_reaches_target_privacy():
    from pevdn.acceptance import DP_OVERRIDES
    cfg = dp.DPConfig(noise_multiplier=DP_OVERRIDES["noise_multiplier"], delta=DP_OVERRIDES["delta"],
                      buffer_throughput=DP_OVERRIDES["buffer_throughput"])
    eps_t, delta_t = dp.replay_ledger(cfg)
    assert eps_t < 3.0
    assert delta_t < 1 / 40_000 ** 1.1


def test_privacy_ledger_running_state():
    cfg = dp.DPConfig(noise_multiplier=1.0, buffer_size=50, expected_batch_size=5, buffer_throughput=2.0)
    ledger = dp.PrivacyLedger(cfg)
    assert ledger.epsilon_raw() == 0.0
    previous = 0.0
    for t in range(1, 80):
        ledger.step()
        eps = ledger.epsilon_raw()
        assert eps >= previous
        previous = eps
    # composition length saturates at the buffer size
    assert ledger.epsilon_raw() == pytest.approx(dp.epsilon_for(50, 0.1, 1.0, 1e-5))
    snap = ledger.snapshot()
    assert snap["T"] == 79
    assert snap["epsilon_tilde"] == snap["epsilon_raw"] / 2.0
    assert snap["delta_tilde"] == 1e-5 / 2.0
    assert (snap["epsilon_tilde"], snap["delta_tilde"]) == pytest.approx(dp.replay_ledger(cfg))
