"""Time-domain signals, tight-frame STFT analysis, and scalar audio metrics.

The STFT here is circular (frames wrap around the end of the signal) and
Parseval tight: analysis followed by synthesis is the identity, and the
stored coefficient matrix has the same Euclidean norm as the signal.  Both
properties are exact up to FFT rounding, which is what makes the frame
usable as the change-of-variables operator inside a splitting solver.

Tightness is obtained in two steps.  The window prototype is normalized so
its squared hop-shifted copies sum to one at every sample, and the DFT is
scaled unitarily with sqrt(2) weights on the interior bins so that one-sided
storage of a real input loses no energy.  The synthesis path applies the
exact adjoint, so ``istft(stft(x)) == x`` with no further correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io.wavfile

from .errors import (
    DomainError,
    FormatError,
    InvalidWindowError,
    ShapeError,
    UndefinedMetricError,
)

SNR_CAP_DB = 300.0


@dataclass(frozen=True)
class TimeSignal:
    """A finite mono signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self) -> None:
        samples = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float64))
        if samples.ndim != 1:
            raise ShapeError(f"expected a 1-D sample vector, got shape {samples.shape}")
        if samples.size == 0:
            raise ShapeError("signal must contain at least one sample")
        if not np.all(np.isfinite(samples)):
            raise DomainError("signal samples must be finite")
        if int(self.sample_rate) <= 0:
            raise DomainError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window, the default STFT prototype."""
    if length <= 0:
        raise InvalidWindowError("window length must be positive")
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def make_tight_window(prototype: np.ndarray, hop: int) -> np.ndarray:
    """Normalize a window prototype so hop-shifted squares sum to one.

    Parameters
    ----------
    prototype : array of shape [window_length]
        Nonnegative analysis prototype. Its length must be a multiple of hop.
    hop : int
        Frame advance in samples.

    Returns
    -------
    array of shape [window_length]
        Window w with sum_k w[m + k * hop]^2 == 1 for every residue m.

    The normalizer depends only on the sample index modulo hop, so a zero
    denominator (for example a Hann window with hop equal to its length)
    cannot be repaired and raises InvalidWindowError.
    """
    prototype = np.asarray(prototype, dtype=np.float64)
    if prototype.ndim != 1 or prototype.size == 0:
        raise InvalidWindowError("prototype must be a nonempty 1-D array")
    if hop <= 0 or prototype.size % hop != 0:
        raise InvalidWindowError(
            f"prototype length {prototype.size} must be a positive multiple of hop {hop}"
        )
    if not np.all(np.isfinite(prototype)):
        raise InvalidWindowError("prototype must be finite")
    folded = prototype.reshape(-1, hop)
    denom = np.sum(folded * folded, axis=0)
    if np.any(denom <= 0.0):
        raise InvalidWindowError(
            "hop-shifted squared prototype sums to zero at some sample; "
            "pick a window/hop pair with full coverage"
        )
    return prototype / np.sqrt(np.tile(denom, prototype.size // hop))


@dataclass(frozen=True, eq=False)
class StftConfig:
    """Analysis parameters for the circular tight-frame STFT."""

    window_length: int = 512
    hop: int = 256
    window: np.ndarray | None = None
    pad: bool = False

    def __post_init__(self) -> None:
        if self.window_length <= 0 or self.hop <= 0:
            raise InvalidWindowError("window_length and hop must be positive")
        if self.window_length % self.hop != 0:
            raise InvalidWindowError(
                f"hop {self.hop} must divide window_length {self.window_length}"
            )
        if self.window_length % 2 != 0:
            raise InvalidWindowError("window_length must be even")
        if self.window is None:
            window = make_tight_window(hann_window(self.window_length), self.hop)
        else:
            window = np.asarray(self.window, dtype=np.float64)
            if window.shape != (self.window_length,):
                raise InvalidWindowError("window length does not match window_length")
        folded = window.reshape(-1, self.hop)
        if np.max(np.abs(np.sum(folded * folded, axis=0) - 1.0)) > 1e-10:
            raise InvalidWindowError("window is not tight: shifted squares must sum to 1")
        object.__setattr__(self, "window", window)

    @property
    def fft_length(self) -> int:
        return self.window_length

    @property
    def num_bins(self) -> int:
        return self.window_length // 2 + 1

    @classmethod
    def tight_hann(cls, window_length: int = 512, hop: int = 256, pad: bool = False) -> "StftConfig":
        return cls(window_length=window_length, hop=hop, pad=pad)

    def matches(self, other: "StftConfig") -> bool:
        return (
            self.window_length == other.window_length
            and self.hop == other.hop
            and np.array_equal(self.window, other.window)
        )


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Complex STFT coefficients, one-sided, shape [num_bins, num_frames]."""

    values: np.ndarray
    config: StftConfig | None = None

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.complex128))
        if values.ndim != 2 or values.size == 0:
            raise ShapeError(f"expected a 2-D coefficient matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("spectrogram values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def num_bins(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


def _bin_weights(config: StftConfig) -> np.ndarray:
    # sqrt(2) on interior bins makes one-sided storage an isometry;
    # DC and Nyquist appear once in the full spectrum, interior bins twice.
    weights = np.full(config.num_bins, np.sqrt(2.0))
    weights[0] = 1.0
    weights[-1] = 1.0
    return weights


def _gather_frames(x: np.ndarray, config: StftConfig) -> np.ndarray:
    """Stack circularly wrapped frames, shape [num_frames, window_length]."""
    hop = config.hop
    strips = x.reshape(-1, hop)
    blocks = [np.roll(strips, -j, axis=0) for j in range(config.window_length // hop)]
    return np.concatenate(blocks, axis=1)


def stft(signal: TimeSignal, config: StftConfig) -> Spectrogram:
    """Analyze a signal into tight-frame STFT coefficients.

    The signal length must be a multiple of the hop unless ``config.pad`` is
    set, in which case it is zero-padded up to the next multiple.  Frames wrap
    around the signal end, so every sample is covered the same number of times
    and the analysis operator is a linear isometry.
    """
    x = signal.samples
    hop = config.hop
    if x.size % hop != 0:
        if not config.pad:
            raise ShapeError(
                f"signal length {x.size} is not a multiple of hop {hop} (set pad=True to zero-pad)"
            )
        x = np.concatenate([x, np.zeros(hop - x.size % hop)])
    if x.size < config.window_length:
        raise ShapeError(
            f"signal length {x.size} is shorter than the window {config.window_length}"
        )
    frames = _gather_frames(x, config) * config.window
    spectrum = np.fft.rfft(frames, n=config.fft_length, axis=1)
    weights = _bin_weights(config) / np.sqrt(config.fft_length)
    return Spectrogram((spectrum * weights).T, config)


def istft(spec: Spectrogram, config: StftConfig, sample_rate: int = 8000) -> TimeSignal:
    """Apply the exact adjoint of :func:`stft` (synthesis).

    Because the frame is Parseval tight, this inverts ``stft`` on its range;
    on arbitrary coefficient matrices it computes the adjoint, which composes
    with analysis to the orthogonal projection onto the range.
    """
    if spec.config is not None and not spec.config.matches(config):
        raise ShapeError("spectrogram was produced with a different STFT configuration")
    values = spec.values
    if values.shape[0] != config.num_bins:
        raise ShapeError(
            f"expected {config.num_bins} frequency bins, got {values.shape[0]}"
        )
    length = values.shape[1] * config.hop
    if length < config.window_length:
        raise ShapeError("too few frames to cover one window")
    # Adjoint of the weighted one-sided DFT. Imaginary parts at DC and
    # Nyquist do not couple to real signals, so the adjoint drops them.
    scaled = (values.T * (np.sqrt(config.fft_length) / _bin_weights(config))).copy()
    scaled[:, 0] = scaled[:, 0].real
    scaled[:, -1] = scaled[:, -1].real
    frames = np.fft.irfft(scaled, n=config.fft_length, axis=1) * config.window
    hop = config.hop
    out = np.zeros((length // hop, hop))
    for j in range(config.window_length // hop):
        out += np.roll(frames[:, j * hop : (j + 1) * hop], j, axis=0)
    return TimeSignal(out.reshape(-1), sample_rate)


def circular_convolve(x: TimeSignal, h: TimeSignal) -> TimeSignal:
    """Circular convolution of x with a kernel h zero-padded to len(x)."""
    if x.sample_rate != h.sample_rate:
        raise ShapeError("sample rates differ")
    if len(h) > len(x):
        raise ShapeError(f"kernel length {len(h)} exceeds signal length {len(x)}")
    kernel = np.zeros(len(x))
    kernel[: len(h)] = h.samples
    out = np.fft.irfft(np.fft.rfft(x.samples) * np.fft.rfft(kernel), n=len(x))
    return TimeSignal(out, x.sample_rate)


def snr(estimate: TimeSignal, reference: TimeSignal) -> float:
    """Plain signal-to-noise ratio of an estimate against a reference, in dB.

    A silent estimate carries no signal at all and is reported as the
    -300 dB sentinel rather than the 0 dB a literal reading would give.
    """
    if len(estimate) != len(reference):
        raise ShapeError("signals must have equal length")
    ref = reference.samples
    est = estimate.samples
    ref_power = float(np.dot(ref, ref))
    if ref_power == 0.0:
        raise UndefinedMetricError("reference signal is identically zero")
    if not np.any(est):
        return -SNR_CAP_DB
    err = ref - est
    err_power = float(np.dot(err, err))
    if err_power == 0.0:
        return SNR_CAP_DB
    return float(np.clip(10.0 * np.log10(ref_power / err_power), -SNR_CAP_DB, SNR_CAP_DB))


def si_snr(estimate: TimeSignal, reference: TimeSignal) -> float:
    """Scale-invariant SNR in dB, capped at +/-300 dB.

    The reference is rescaled by the projection coefficient
    alpha = <estimate, reference> / ||reference||^2 before the ratio is
    computed, so the metric ignores the estimate's overall gain.
    """
    if len(estimate) != len(reference):
        raise ShapeError("signals must have equal length")
    ref = reference.samples
    est = estimate.samples
    ref_power = float(np.dot(ref, ref))
    if ref_power == 0.0:
        raise UndefinedMetricError("reference signal is identically zero")
    alpha = float(np.dot(est, ref)) / ref_power
    target = alpha * ref
    target_power = float(np.dot(target, target))
    if target_power == 0.0:
        return -SNR_CAP_DB
    err = target - est
    err_power = float(np.dot(err, err))
    if err_power == 0.0:
        return SNR_CAP_DB
    return float(np.clip(10.0 * np.log10(target_power / err_power), -SNR_CAP_DB, SNR_CAP_DB))


def add_noise_at_snr(signal: TimeSignal, snr_db: float, seed: int) -> TimeSignal:
    """Add white Gaussian noise scaled to hit the requested SNR exactly."""
    x = signal.samples
    signal_norm = float(np.linalg.norm(x))
    if signal_norm == 0.0:
        raise DomainError("cannot scale noise against an all-zero signal")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(x.size)
    noise *= signal_norm * 10.0 ** (-snr_db / 20.0) / np.linalg.norm(noise)
    return TimeSignal(x + noise, signal.sample_rate)


def read_wav(path) -> TimeSignal:
    """Read a mono WAV file (16-bit PCM or 32-bit float) as float64 in [-1, 1]."""
    rate, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise FormatError("only mono WAV files are supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"unsupported WAV sample format {data.dtype}")
    return TimeSignal(samples, rate)


def write_wav(path, signal: TimeSignal, encoding: str = "float32") -> None:
    """Write a mono WAV file. ``encoding`` is 'float32' or 'pcm16'."""
    if encoding == "float32":
        # A diverged solver iterate can exceed the float32 range; the cast
        # saturating to inf is the faithful post-mortem record, so only the
        # overflow warning is suppressed.
        with np.errstate(over="ignore"):
            data = signal.samples.astype(np.float32)
    elif encoding == "pcm16":
        clipped = np.clip(signal.samples, -1.0, 1.0)
        data = np.round(clipped * 32767.0).astype(np.int16)
    else:
        raise FormatError(f"unknown WAV encoding {encoding!r}")
    scipy.io.wavfile.write(path, signal.sample_rate, data)
