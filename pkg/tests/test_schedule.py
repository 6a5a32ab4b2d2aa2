import numpy as np
import pytest

from embodiff.embodiment import EmbodimentSpec, UnifiedActionLayout, default_layout
from embodiff.schedule import (
    ScheduleError,
    build_cosine_schedule,
    build_ebf_covariance,
    forward_marginal,
    forward_step,
    unit_covariance,
)


def _spec(sigma=1.0):
    return EmbodimentSpec(id=0, name="t", active_dims=(4, 2, 3, 3), sigma_e=sigma)


def test_cosine_schedule_k50():
    sched = build_cosine_schedule(50)
    assert sched.steps == 50
    assert len(sched.betas) == 50
    assert np.all(sched.betas > 0) and np.all(sched.betas < 1)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.alpha_bars[-1] < 1e-2


def test_cosine_schedule_minimal_two_steps():
    sched = build_cosine_schedule(2)
    assert sched.steps == 2
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.alpha_bars[-1] < 1e-2


def test_schedule_rejects_k_below_two():
    with pytest.raises(ScheduleError):
        build_cosine_schedule(1)


def test_alpha_bar_product_oracle():
    sched = build_cosine_schedule(50)
    prod = 1.0
    for k in range(1, 51):
        prod *= 1.0 - sched.beta(k)
        assert abs(prod - sched.alpha_bar(k)) < 1e-12


def test_snr_strictly_decreasing():
    sched = build_cosine_schedule(50)
    snr = np.sqrt(sched.alpha_bars) / np.sqrt(1.0 - sched.alpha_bars)
    assert np.all(np.diff(snr) < 0)


def test_ebf_scale_reference_example():
    cov = build_ebf_covariance(_spec(1.0), default_layout(), 0.5)
    expected = [1, 1, 1, 1, 0.5, 0.5, 0.25, 0.25, 0.25, 0.125, 0.125, 0.125]
    assert np.array_equal(cov.scale, expected)


def test_ebf_delta_one_disables_pyramid():
    cov = build_ebf_covariance(_spec(1.0), default_layout(), 1.0)
    assert np.array_equal(cov.scale, np.ones(12))


def test_ebf_sigma_08_window3_exact():
    cov = build_ebf_covariance(_spec(0.8), default_layout(), 0.5)
    assert np.all(cov.scale[9:12] == 0.1)


def test_ebf_pyramid_exactness_all_sigmas():
    layout = default_layout()
    for sigma in (1.0, 0.9, 0.8):
        cov = build_ebf_covariance(_spec(sigma), layout, 0.5)
        for d in range(layout.total_dim):
            assert cov.scale[d] / sigma == 0.5 ** layout.window_of(d)


def test_ebf_stepwise_flag():
    layout = default_layout()
    cov = build_ebf_covariance(_spec(1.0), layout, 0.5, stepwise=True)
    assert np.array_equal(cov.scale, 0.5 ** np.arange(12))


def test_ebf_rejects_bad_delta():
    for delta in (0.0, -0.1, 1.5):
        with pytest.raises(ScheduleError):
            build_ebf_covariance(_spec(), default_layout(), delta)


def test_forward_step_zero_scale_contracts_exactly():
    sched = build_cosine_schedule(50)
    cov = unit_covariance(default_layout())
    zero_cov = type(cov)(scale=np.zeros(12), delta=1.0)
    chunk = np.random.default_rng(0).uniform(-1, 1, (4, 12))
    out = forward_step(chunk, 10, sched, zero_cov, np.random.default_rng(1))
    assert np.array_equal(out, np.sqrt(1.0 - sched.beta(10)) * chunk)


def test_forward_step_low_noise_limit():
    sched = build_cosine_schedule(50)
    k = int(np.argmin(sched.betas)) + 1  # smallest clipped beta
    cov = build_ebf_covariance(_spec(1.0), default_layout(), 0.5)
    chunk = np.zeros((4, 12))
    out = forward_step(chunk, k, sched, cov, np.random.default_rng(2))
    bound = np.sqrt(sched.beta(k)) * cov.scale.max() * 6.0
    assert np.max(np.abs(out - chunk)) < bound


def test_forward_step_monte_carlo_std():
    sched = build_cosine_schedule(50)
    cov = build_ebf_covariance(_spec(0.9), default_layout(), 0.5)
    k = 20
    chunk = np.full((1, 12), 0.3)
    rng = np.random.default_rng(3)
    draws = forward_step(np.broadcast_to(chunk, (100_000, 12)), k, sched, cov, rng)
    std = draws.std(axis=0)
    expected = np.sqrt(sched.beta(k)) * cov.scale
    assert np.all(np.abs(std / expected - 1.0) < 0.02)


def test_forward_marginal_terminal_decorrelates():
    sched = build_cosine_schedule(50)
    cov = build_ebf_covariance(_spec(1.0), default_layout(), 0.5)
    rng = np.random.default_rng(4)
    clean = rng.uniform(-1, 1, (10_000, 12))
    noisy = forward_marginal(clean, 50, sched, cov, np.random.default_rng(5))
    for d in range(12):
        corr = np.corrcoef(clean[:, d], noisy[:, d])[0, 1]
        assert abs(corr) < 0.05


def test_forward_marginal_near_identity_at_k1():
    sched = build_cosine_schedule(500)
    cov = build_ebf_covariance(_spec(1.0), default_layout(), 0.5)
    clean = np.random.default_rng(6).uniform(-1, 1, (4, 12))
    out = forward_marginal(clean, 1, sched, cov, np.random.default_rng(7))
    bound = np.sqrt(1.0 - sched.alpha_bar(1)) * cov.scale.max() * 6.0 + 1e-6
    assert np.max(np.abs(out - clean)) < bound + (1 - np.sqrt(sched.alpha_bar(1)))


def test_forward_marginal_matches_composed_steps():
    """Closed form vs literally iterating the stepwise kernel (small k)."""
    sched = build_cosine_schedule(50)
    cov = build_ebf_covariance(_spec(0.8), default_layout(), 0.5)
    clean = np.random.default_rng(8).uniform(-0.9, 0.9, 12)
    n = 100_000
    k = 10
    stack = np.broadcast_to(clean, (n, 12)).copy()
    rng = np.random.default_rng(9)
    for i in range(1, k + 1):
        stack = forward_step(stack, i, sched, cov, rng)
    marg = forward_marginal(np.broadcast_to(clean, (n, 12)), k, sched, cov,
                            np.random.default_rng(10))
    std_c, std_m = stack.std(axis=0), marg.std(axis=0)
    assert np.all(np.abs(std_m / std_c - 1.0) < 0.02)
    tol = 0.02 * np.maximum(std_c, 0.05)
    assert np.all(np.abs(stack.mean(axis=0) - marg.mean(axis=0)) < tol)


def test_plain_ddpm_reduction():
    """sigma_e = 1, delta = 1 matches the analytic standard marginal."""
    sched = build_cosine_schedule(50)
    cov = unit_covariance(default_layout())
    clean = np.full(12, 0.5)
    n = 100_000
    for k in (5, 25, 50):
        rng = np.random.default_rng(100 + k)
        out = forward_marginal(np.broadcast_to(clean, (n, 12)), k, sched, cov, rng)
        abar = sched.alpha_bar(k)
        assert np.all(np.abs(out.mean(axis=0) - np.sqrt(abar) * clean) < 0.02)
        assert np.all(np.abs(out.std(axis=0) / np.sqrt(1 - abar) - 1.0) < 0.02)


def test_seeded_determinism_bit_identical():
    sched = build_cosine_schedule(50)
    cov = build_ebf_covariance(_spec(0.9), default_layout(), 0.5)
    clean = np.random.default_rng(11).uniform(-1, 1, (16, 12))
    a = forward_marginal(clean, 30, sched, cov, np.random.default_rng(42))
    b = forward_marginal(clean, 30, sched, cov, np.random.default_rng(42))
    assert np.array_equal(a, b)
    c = forward_step(clean, 30, sched, cov, np.random.default_rng(43))
    d = forward_step(clean, 30, sched, cov, np.random.default_rng(43))
    assert np.array_equal(c, d)


def test_k_out_of_range_errors():
    sched = build_cosine_schedule(50)
    cov = unit_covariance(default_layout())
    chunk = np.zeros((2, 12))
    for k in (0, 51):
        with pytest.raises(ScheduleError):
            forward_step(chunk, k, sched, cov, np.random.default_rng(0))
        with pytest.raises(ScheduleError):
            forward_marginal(chunk, k, sched, cov, np.random.default_rng(0))
