"""ADMM Plug-and-Play dereverberation with spectrogram denoisers.

The observation model is y = Hx + n with H circular convolution by a known
impulse response.  Splitting u = Hx and v = Gx (G the tight-frame STFT)
gives the ADMM recursion

    x  <- (H^T H + G^H G)^-1 (H^T (u - xi1) + G^H (v - xi2))
    u  <- prox of the data term at Hx + xi1
    v  <- D(Gx + xi2)
    xi <- xi + residuals

where the v-proximity operator is replaced by an amplitude-modifier
denoiser D.  Because the window is Parseval tight, G^H G = I and the
x-update reduces to one FFT division; H^T H is diagonalized by the same
FFT, so the inverse filter 1/(|FFT(h)|^2 + 1) is precomputed once.

Divergence is contained, not fatal: the first non-finite value ends the
run with a diverged status and the traces collected so far.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError
from .modifier import ModifierArchitecture, apply
from .signal import Spectrogram, StftConfig, TimeSignal, circular_convolve, istft, si_snr, stft


@dataclass(frozen=True, eq=False)
class Observation:
    """A reverberant noisy recording with its known impulse response.

    The response is zero-padded to the signal length at construction so all
    circular operators act on one common period.
    """

    y: TimeSignal
    h: TimeSignal

    def __post_init__(self):
        if self.y.sample_rate != self.h.sample_rate:
            raise ShapeError("observation and impulse response sample rates differ")
        if len(self.h) > len(self.y):
            raise ShapeError("impulse response is longer than the observation")
        if not np.any(self.h.samples):
            raise DomainError("impulse response must not be all-zero")
        if len(self.h) < len(self.y):
            padded = np.zeros(len(self.y))
            padded[: len(self.h)] = self.h.samples
            object.__setattr__(self, "h", TimeSignal(padded, self.h.sample_rate))

    @property
    def length(self) -> int:
        return len(self.y)


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """ADMM parameters.  ``lam`` weighs the data term against the prior."""

    lam: float = 1.0
    max_iterations: int = 500
    stft: StftConfig = field(default_factory=StftConfig)
    log_every: int = 0

    def __post_init__(self):
        if not (self.lam > 0.0 and np.isfinite(self.lam)):
            raise DomainError("lam must be positive and finite")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be at least 1")
        if self.log_every < 0:
            raise DomainError("log_every must be nonnegative")


@dataclass
class AdmmState:
    """The five ADMM variables plus the iteration counter and traces."""

    x: TimeSignal
    u: TimeSignal
    v: Spectrogram
    xi1: TimeSignal
    xi2: Spectrogram
    iteration: int = 0
    delta_x_history: list = field(default_factory=list)
    si_snr_history: Optional[list] = None


def initial_state(observation: Observation, config: SolverConfig) -> AdmmState:
    """Warm start from the observation: x = 0, u = y, v = 0, duals = 0."""
    rate = observation.y.sample_rate
    zero = TimeSignal(np.zeros(observation.length), rate)
    zero_spec = stft(zero, config.stft)
    return AdmmState(
        x=zero,
        u=observation.y,
        v=zero_spec,
        xi1=zero,
        xi2=Spectrogram(zero_spec.values.copy(), config.stft),
    )


def precompute_inverse_filter(h: TimeSignal, length: int) -> np.ndarray:
    """The spectrum 1 / (|FFT(h)|^2 + 1) that inverts H^T H + I.

    Real values in (0, 1]; the +1 from the tight STFT branch keeps the
    denominator away from zero, so no regularization knob is needed.
    """
    if len(h) > length:
        raise ShapeError("impulse response is longer than the target length")
    padded = np.zeros(length)
    padded[: len(h)] = h.samples
    spectrum = np.fft.fft(padded)
    return 1.0 / (np.abs(spectrum) ** 2 + 1.0)


def _correlate(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # H^T a: circular cross-correlation, the exact adjoint of the circulant
    return np.fft.ifft(np.fft.fft(values) * np.conj(np.fft.fft(kernel))).real


def _solver_stft_config(state: AdmmState) -> StftConfig:
    config = state.v.config
    if config is None:
        raise ShapeError("solver state spectrograms must carry their StftConfig")
    return config


def x_update(
    state: AdmmState, observation: Observation, inverse_filter: np.ndarray
) -> TimeSignal:
    """Quadratic-term minimizer: one filtered FFT inversion."""
    config = _solver_stft_config(state)
    rate = observation.y.sample_rate
    from_time = _correlate(state.u.samples - state.xi1.samples, observation.h.samples)
    residual_spec = Spectrogram(state.v.values - state.xi2.values, config)
    from_spec = istft(residual_spec, config, rate).samples
    r = from_time + from_spec
    x = np.fft.ifft(np.fft.fft(r) * inverse_filter).real
    return TimeSignal(x, rate)


def u_update(state: AdmmState, observation: Observation, lam: float) -> TimeSignal:
    """Proximity operator of the data term, in closed form.

    prox of (1/(2 lam))||.||^2 is multiplication by lam/(1+lam), applied to
    the residual Hx + xi1 - y and shifted back by y.
    """
    hx = circular_convolve(state.x, observation.h).samples
    w = hx + state.xi1.samples - observation.y.samples
    u = (lam / (1.0 + lam)) * w + observation.y.samples
    return TimeSignal(u, observation.y.sample_rate)


def v_update(state: AdmmState, denoiser: ModifierArchitecture) -> Spectrogram:
    """Plug-and-play step: denoise the shifted analysis coefficients."""
    config = _solver_stft_config(state)
    noisy = Spectrogram(stft(state.x, config).values + state.xi2.values, config)
    return apply(denoiser, noisy)


def dual_update(state: AdmmState, observation: Observation):
    """Multiplier ascent on both splitting constraints."""
    config = _solver_stft_config(state)
    rate = observation.y.sample_rate
    hx = circular_convolve(state.x, observation.h).samples
    xi1 = TimeSignal(state.xi1.samples + hx - state.u.samples, rate)
    gx = stft(state.x, config).values
    xi2 = Spectrogram(state.xi2.values + gx - state.v.values, config)
    return xi1, xi2


@dataclass(frozen=True, eq=False)
class SolveResult:
    """Final estimate plus per-iteration traces and the completion status."""

    x_hat: TimeSignal
    delta_x: np.ndarray
    si_snr_trace: Optional[np.ndarray]
    status: str
    diverged_at: Optional[int]
    iterations: int
    state: AdmmState

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def status_text(self) -> str:
        if self.diverged:
            return f"diverged({self.diverged_at})"
        return self.status


def run(
    observation: Observation,
    denoiser: ModifierArchitecture,
    config: SolverConfig,
    reference: Optional[TimeSignal] = None,
) -> SolveResult:
    """Run the ADMM recursion for ``config.max_iterations`` iterations.

    Records ||x_k - x_{k-1}|| each iteration, and SI-SNR against
    ``reference`` when one is supplied (purely observational, the iteration
    never sees it).  The first non-finite value anywhere in an iteration
    stops the run with status ``diverged`` at that iteration; traces cover
    exactly the completed iterations.
    """
    inverse_filter = precompute_inverse_filter(observation.h, observation.length)
    state = initial_state(observation, config)
    if reference is not None:
        state.si_snr_history = []
    status = "completed"
    diverged_at = None
    for k in range(1, config.max_iterations + 1):
        try:
            with np.errstate(all="ignore"):
                x_new = x_update(state, observation, inverse_filter)
                delta = float(np.linalg.norm(x_new.samples - state.x.samples))
                state.x = x_new
                state.u = u_update(state, observation, config.lam)
                state.v = v_update(state, denoiser)
                state.xi1, state.xi2 = dual_update(state, observation)
        except (DomainError, NonFiniteError, FloatingPointError, OverflowError):
            status = "diverged"
            diverged_at = k
            break
        state.iteration = k
        state.delta_x_history.append(delta)
        if state.si_snr_history is not None:
            state.si_snr_history.append(si_snr(state.x, reference))
        if config.log_every and k % config.log_every == 0:
            print(f"iteration {k}: delta_x {delta:.6e}")
    return SolveResult(
        x_hat=state.x,
        delta_x=np.asarray(state.delta_x_history),
        si_snr_trace=(
            None if state.si_snr_history is None else np.asarray(state.si_snr_history)
        ),
        status=status,
        diverged_at=diverged_at,
        iterations=state.iteration,
        state=state,
    )


def default_lambda_grid() -> np.ndarray:
    """26 logarithmically spaced weights from 1e-3 to 1e2."""
    return np.logspace(-3.0, 2.0, 26)


def lambda_sweep(
    observation: Observation,
    denoiser: ModifierArchitecture,
    lambda_grid,
    config: SolverConfig,
    reference: Optional[TimeSignal] = None,
) -> list:
    """Independent solver runs over a grid of regularization weights.

    Returns one row per weight: final SI-SNR (NaN when the run diverged or
    no reference was given), the status text, and a marker on the best
    finite SI-SNR.  Divergence at one weight never aborts the sweep.
    """
    grid = [float(g) for g in np.atleast_1d(lambda_grid)]
    if not grid:
        raise DomainError("lambda grid must be non-empty")
    rows = []
    for lam in grid:
        result = run(observation, denoiser, replace(config, lam=lam), reference)
        final = float("nan")
        if result.si_snr_trace is not None and result.si_snr_trace.size and not result.diverged:
            final = float(result.si_snr_trace[-1])
        rows.append(
            {
                "lambda": lam,
                "final_si_snr": final,
                "status": result.status_text,
                "best": False,
            }
        )
    finite = [i for i, row in enumerate(rows) if np.isfinite(row["final_si_snr"])]
    if finite:
        best = max(finite, key=lambda i: rows[i]["final_si_snr"])
        rows[best]["best"] = True
    return rows
