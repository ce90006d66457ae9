import numpy as np
import pytest
import scipy.optimize

from lipsam.errors import DomainError, ShapeError
from lipsam.lipschitz import realify, unrealify
from lipsam.modifier import (
    AmplitudeMap,
    ModifierArchitecture,
    SoftThreshConstant,
    ZeroMap,
    apply_to_values,
)
from lipsam.pnp import (
    AdmmState,
    Observation,
    SolverConfig,
    default_lambda_grid,
    dual_update,
    initial_state,
    lambda_sweep,
    precompute_inverse_filter,
    run,
    u_update,
    v_update,
    x_update,
)
from lipsam.signal import (
    Spectrogram,
    StftConfig,
    TimeSignal,
    add_noise_at_snr,
    circular_convolve,
    si_snr,
    stft,
)

RATE = 8000
SMALL = StftConfig(window_length=16, hop=8)


def delta_signal(length, gain=1.0):
    samples = np.zeros(length)
    samples[0] = gain
    return TimeSignal(samples, RATE)


def identity_denoiser():
    return ModifierArchitecture("lipsam_re", ZeroMap())


def soft_thresh_denoiser(tau=0.1):
    return ModifierArchitecture("lipsam_re", SoftThreshConstant(tau))


def random_observation(seed, length=64, taps=16):
    rng = np.random.default_rng(seed)
    y = TimeSignal(rng.standard_normal(length), RATE)
    h = TimeSignal(rng.standard_normal(taps), RATE)
    return Observation(y, h)


def random_state(seed, observation, config=SMALL):
    rng = np.random.default_rng(seed)
    length = observation.length
    spec_shape = (config.num_bins, length // config.hop)

    def spec():
        c = rng.standard_normal(spec_shape) + 1j * rng.standard_normal(spec_shape)
        return Spectrogram(c, config)

    return AdmmState(
        x=TimeSignal(rng.standard_normal(length), RATE),
        u=TimeSignal(rng.standard_normal(length), RATE),
        v=spec(),
        xi1=TimeSignal(rng.standard_normal(length), RATE),
        xi2=spec(),
    )


def dense_analysis_matrix(config, length):
    columns = []
    for i in range(length):
        e = np.zeros(length)
        e[i] = 1.0
        columns.append(realify(stft(TimeSignal(e, RATE), config).values))
    return np.stack(columns, axis=1)


def dense_circulant(h_padded):
    return np.stack([np.roll(h_padded, j) for j in range(h_padded.size)], axis=1)


def synthetic_instance(seed=0, length=1024, taps=128, noise_db=30.0):
    rng = np.random.default_rng(seed)
    t = np.arange(length) / RATE
    clean = np.zeros(length)
    for f in (150.0, 370.0, 910.0):
        clean += rng.uniform(0.3, 1.0) * np.sin(2.0 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    clean *= 0.5 / np.max(np.abs(clean))
    clean_sig = TimeSignal(clean, RATE)
    h = np.zeros(taps)
    h[0] = 1.0
    h[1:] += 0.3 * rng.standard_normal(taps - 1) * np.exp(-np.arange(1, taps) / 32.0)
    h /= np.linalg.norm(h)
    rir = TimeSignal(h, RATE)
    reverberant = circular_convolve(clean_sig, rir)
    noisy = add_noise_at_snr(reverberant, noise_db, seed=seed + 1)
    return clean_sig, Observation(noisy, rir)


# ---------------------------------------------------------------- containers


def test_observation_pads_impulse_response():
    obs = random_observation(0)
    assert len(obs.h) == obs.length == 64
    assert np.all(obs.h.samples[16:] == 0.0)


def test_observation_validation():
    y = TimeSignal(np.ones(8), RATE)
    with pytest.raises(DomainError):
        Observation(y, TimeSignal(np.zeros(4), RATE))
    with pytest.raises(ShapeError):
        Observation(y, TimeSignal(np.ones(16), RATE))
    with pytest.raises(ShapeError):
        Observation(y, TimeSignal(np.ones(4), RATE + 1))


def test_solver_config_validation():
    with pytest.raises(DomainError):
        SolverConfig(lam=0.0)
    with pytest.raises(DomainError):
        SolverConfig(lam=1.0, max_iterations=0)
    with pytest.raises(DomainError):
        SolverConfig(lam=1.0, log_every=-1)


def test_initial_state_is_warm_start():
    obs = random_observation(1)
    state = initial_state(obs, SolverConfig(lam=1.0, stft=SMALL))
    assert np.all(state.x.samples == 0.0)
    assert np.array_equal(state.u.samples, obs.y.samples)
    assert np.all(state.v.values == 0.0)
    assert np.all(state.xi1.samples == 0.0)
    assert np.all(state.xi2.values == 0.0)


# ---------------------------------------------------------------- inverse filter


def test_inverse_filter_delta_is_half():
    filt = precompute_inverse_filter(delta_signal(4), 64)
    assert np.allclose(filt, 0.5, atol=1e-15)


def test_inverse_filter_zero_kernel_is_one():
    filt = precompute_inverse_filter(TimeSignal(np.zeros(4), RATE), 16)
    assert np.allclose(filt, 1.0, atol=1e-15)


def test_inverse_filter_range_and_length():
    obs = random_observation(2)
    filt = precompute_inverse_filter(obs.h, obs.length)
    assert filt.shape == (64,)
    assert np.all(filt > 0.0) and np.all(filt <= 1.0)
    with pytest.raises(ShapeError):
        precompute_inverse_filter(obs.h, 32)


# ---------------------------------------------------------------- x update


def test_x_update_delta_channel_example():
    obs = Observation(TimeSignal(np.zeros(64) + 1e-12, RATE), delta_signal(1))
    state = initial_state(obs, SolverConfig(lam=1.0, stft=SMALL))
    state.u = delta_signal(64, gain=2.0)
    filt = precompute_inverse_filter(obs.h, 64)
    x = x_update(state, obs, filt)
    want = np.zeros(64)
    want[0] = 1.0
    assert np.allclose(x.samples, want, atol=1e-12)


def test_x_update_zero_state_is_zero():
    obs = random_observation(3)
    state = initial_state(obs, SolverConfig(lam=1.0, stft=SMALL))
    state.u = TimeSignal(np.zeros(64), RATE)
    filt = precompute_inverse_filter(obs.h, 64)
    assert np.allclose(x_update(state, obs, filt).samples, 0.0, atol=1e-15)


def test_x_update_matches_dense_solve():
    obs = random_observation(4)
    state = random_state(5, obs)
    filt = precompute_inverse_filter(obs.h, obs.length)
    fast = x_update(state, obs, filt).samples

    H = dense_circulant(obs.h.samples)
    G = dense_analysis_matrix(SMALL, obs.length)
    assert np.allclose(G.T @ G, np.eye(obs.length), atol=1e-9)
    rhs = H.T @ (state.u.samples - state.xi1.samples) + G.T @ realify(
        state.v.values - state.xi2.values
    )
    dense = np.linalg.solve(H.T @ H + np.eye(obs.length), rhs)
    assert np.allclose(fast, dense, atol=1e-8)


# ---------------------------------------------------------------- u update


def test_u_update_closed_form_and_prox_oracle():
    obs = random_observation(6)
    state = random_state(7, obs)
    for lam in (1e-3, 1.0, 1e2):
        u = u_update(state, obs, lam).samples
        w = circular_convolve(state.x, obs.h).samples + state.xi1.samples - obs.y.samples
        assert np.allclose(u, (lam / (1.0 + lam)) * w + obs.y.samples, atol=1e-12)

        # independent numeric minimization of the prox objective
        target = w[:6]

        def objective(p):
            return np.sum(p * p) / (2.0 * lam) + 0.5 * np.sum((p - target) ** 2)

        def gradient(p):
            return p / lam + (p - target)

        sol = scipy.optimize.minimize(
            objective, np.zeros(6), jac=gradient, method="BFGS", options={"gtol": 1e-14}
        )
        assert np.allclose(sol.x, (lam / (1.0 + lam)) * target, atol=1e-8)


def test_u_update_large_lambda_is_identity():
    obs = random_observation(8)
    state = random_state(9, obs)
    u = u_update(state, obs, 1e9).samples
    hx_xi = circular_convolve(state.x, obs.h).samples + state.xi1.samples
    assert np.allclose(u, hx_xi, atol=1e-7)


def test_u_update_fixed_point_returns_y():
    obs = random_observation(10)
    state = random_state(11, obs)
    # arrange Hx + xi1 = y exactly: zero x makes Hx bitwise zero
    state.x = TimeSignal(np.zeros(obs.length), RATE)
    state.xi1 = obs.y
    for lam in (1e-3, 1.0, 37.0):
        assert np.array_equal(u_update(state, obs, lam).samples, obs.y.samples)


# ---------------------------------------------------------------- v update


def test_v_update_identity_denoiser_passthrough():
    obs = random_observation(12)
    state = random_state(13, obs)
    v = v_update(state, identity_denoiser())
    want = stft(state.x, SMALL).values + state.xi2.values
    assert np.allclose(v.values, want, atol=1e-15)


def test_v_update_matches_scalar_soft_threshold():
    obs = random_observation(14)
    state = random_state(15, obs)
    tau = 0.1
    v = v_update(state, soft_thresh_denoiser(tau))
    z = stft(state.x, SMALL).values + state.xi2.values
    mags = np.abs(z)
    want = np.where(mags > 0, np.maximum(mags - tau, 0.0) * np.divide(z, np.where(mags > 0, mags, 1.0)), 0.0)
    assert np.allclose(v.values, want, atol=1e-12)


def test_v_update_huge_threshold_zeroes_everything():
    obs = random_observation(16)
    state = random_state(17, obs)
    v = v_update(state, soft_thresh_denoiser(1e6))
    assert np.all(v.values == 0.0)


# ---------------------------------------------------------------- dual update


def test_dual_update_fixed_point_unchanged():
    obs = random_observation(18)
    state = random_state(19, obs)
    state.u = circular_convolve(state.x, obs.h)
    state.v = Spectrogram(stft(state.x, SMALL).values, SMALL)
    xi1, xi2 = dual_update(state, obs)
    assert np.allclose(xi1.samples, state.xi1.samples, atol=1e-12)
    assert np.allclose(xi2.values, state.xi2.values, atol=1e-12)


def test_dual_update_from_warm_start():
    obs = random_observation(20)
    state = initial_state(obs, SolverConfig(lam=1.0, stft=SMALL))
    xi1, xi2 = dual_update(state, obs)
    assert np.allclose(xi1.samples, -obs.y.samples, atol=1e-15)
    assert np.all(xi2.values == 0.0)


def test_dual_update_matches_dense_operators():
    obs = random_observation(21)
    state = random_state(22, obs)
    xi1, xi2 = dual_update(state, obs)
    H = dense_circulant(obs.h.samples)
    G = dense_analysis_matrix(SMALL, obs.length)
    want1 = state.xi1.samples + H @ state.x.samples - state.u.samples
    want2 = state.xi2.values + unrealify(G @ state.x.samples, state.v.values.shape) - state.v.values
    assert np.allclose(xi1.samples, want1, atol=1e-10)
    assert np.allclose(xi2.values, want2, atol=1e-10)


# ---------------------------------------------------------------- full iteration oracle


def test_one_iteration_matches_dense_reference():
    obs = random_observation(23)
    lam = 0.7
    denoiser = soft_thresh_denoiser(0.05)
    config = SolverConfig(lam=lam, max_iterations=1, stft=SMALL)
    result = run(obs, denoiser, config)

    T = obs.length
    H = dense_circulant(obs.h.samples)
    G = dense_analysis_matrix(SMALL, T)
    y = obs.y.samples
    # warm start: x = 0, u = y, v = 0, duals = 0
    x_d = np.linalg.solve(H.T @ H + np.eye(T), H.T @ y)
    u_d = (lam / (1.0 + lam)) * (H @ x_d - y) + y
    gx = unrealify(G @ x_d, result.state.v.values.shape)
    v_d = apply_to_values(denoiser, gx)
    xi1_d = H @ x_d - u_d
    xi2_d = gx - v_d

    assert np.allclose(result.state.x.samples, x_d, atol=1e-8)
    assert np.allclose(result.state.u.samples, u_d, atol=1e-8)
    assert np.allclose(result.state.v.values, v_d, atol=1e-8)
    assert np.allclose(result.state.xi1.samples, xi1_d, atol=1e-8)
    assert np.allclose(result.state.xi2.values, xi2_d, atol=1e-8)


# ---------------------------------------------------------------- run


def test_run_identity_channel_recovers_observation():
    rng = np.random.default_rng(24)
    y = TimeSignal(rng.standard_normal(64), RATE)
    obs = Observation(y, delta_signal(1))
    config = SolverConfig(lam=1.0, max_iterations=300, stft=SMALL)
    result = run(obs, identity_denoiser(), config, reference=y)
    assert result.status == "completed"
    assert result.iterations == 300
    assert np.linalg.norm(result.x_hat.samples - y.samples) <= 1e-8 * np.linalg.norm(y.samples)
    assert result.delta_x[-1] <= 1e-9
    assert result.si_snr_trace is not None
    assert result.si_snr_trace[-1] >= 100.0


def test_run_soft_threshold_is_stable():
    clean, obs = synthetic_instance(seed=30)
    config = SolverConfig(
        lam=1.0, max_iterations=200, stft=StftConfig(window_length=64, hop=32)
    )
    result = run(obs, soft_thresh_denoiser(0.1), config, reference=clean)
    assert result.status == "completed"
    assert np.all(np.isfinite(result.delta_x))
    assert result.delta_x[199] <= 0.1 * result.delta_x[9]


class _PoisonAfter(AmplitudeMap):
    """Benign zero map that starts returning NaN after a call budget."""

    lipschitz_bound = None

    def __init__(self, healthy_calls):
        self.healthy_calls = healthy_calls

    def __call__(self, x):
        if self.healthy_calls <= 0:
            return np.full(np.shape(x), np.nan)
        self.healthy_calls -= 1
        return np.zeros(np.shape(x))


def test_run_contains_denoiser_nan():
    obs = random_observation(25)
    denoiser = ModifierArchitecture("am_se", _PoisonAfter(healthy_calls=4))
    config = SolverConfig(lam=1.0, max_iterations=50, stft=SMALL)
    result = run(obs, denoiser, config, reference=obs.y)
    assert result.status == "diverged"
    assert result.diverged_at == 5
    assert result.status_text == "diverged(5)"
    assert result.delta_x.shape == (4,)
    assert result.si_snr_trace.shape == (4,)
    assert np.all(np.isfinite(result.delta_x))


# ---------------------------------------------------------------- lambda sweep


def test_default_lambda_grid_shape():
    grid = default_lambda_grid()
    assert grid.shape == (26,)
    assert abs(grid[0] - 1e-3) < 1e-12
    assert abs(grid[-1] - 1e2) < 1e-10


def test_lambda_sweep_single_point_matches_direct_run():
    clean, obs = synthetic_instance(seed=31, length=512, taps=64)
    config = SolverConfig(
        lam=999.0, max_iterations=40, stft=StftConfig(window_length=32, hop=16)
    )
    rows = lambda_sweep(obs, soft_thresh_denoiser(0.1), [0.5], config, reference=clean)
    direct = run(obs, soft_thresh_denoiser(0.1), SolverConfig(
        lam=0.5, max_iterations=40, stft=StftConfig(window_length=32, hop=16)
    ), reference=clean)
    assert len(rows) == 1
    assert rows[0]["lambda"] == 0.5
    assert rows[0]["status"] == "completed"
    assert rows[0]["best"] is True
    assert abs(rows[0]["final_si_snr"] - direct.si_snr_trace[-1]) < 1e-12


def test_lambda_sweep_marks_single_best():
    clean, obs = synthetic_instance(seed=32, length=512, taps=64)
    config = SolverConfig(
        lam=1.0, max_iterations=30, stft=StftConfig(window_length=32, hop=16)
    )
    rows = lambda_sweep(
        obs, soft_thresh_denoiser(0.1), [1e-2, 1e-1, 1.0, 10.0], config, reference=clean
    )
    assert len(rows) == 4
    assert all(np.isfinite(row["final_si_snr"]) for row in rows)
    assert sum(row["best"] for row in rows) == 1
    best = max(rows, key=lambda row: row["final_si_snr"])
    assert best["best"] is True


def test_lambda_sweep_records_divergence_and_continues():
    obs = random_observation(26)
    config = SolverConfig(lam=1.0, max_iterations=20, stft=SMALL)

    calls = []

    class _FreshPoison(AmplitudeMap):
        lipschitz_bound = None

        def __call__(self, x):
            calls.append(1)
            if len(calls) > 3:
                return np.full(np.shape(x), np.nan)
            return np.zeros(np.shape(x))

    rows = lambda_sweep(
        obs,
        ModifierArchitecture("am_se", _FreshPoison()),
        [0.5, 2.0],
        config,
        reference=obs.y,
    )
    assert len(rows) == 2
    assert rows[0]["status"] == "completed" or rows[0]["status"].startswith("diverged")
    assert rows[1]["status"].startswith("diverged")
    assert not np.isfinite(rows[1]["final_si_snr"])


def test_lambda_sweep_rejects_empty_grid():
    obs = random_observation(27)
    config = SolverConfig(lam=1.0, max_iterations=5, stft=SMALL)
    with pytest.raises(DomainError):
        lambda_sweep(obs, identity_denoiser(), [], config)
