"""Desk-scale denoiser training on a synthetic speech-like corpus.

The corpus generator produces harmonic signals with drifting fundamentals,
smooth amplitude envelopes, and occasional silent gaps; impulse responses
are exponentially decaying noise behind a unit direct-path spike.  Training
runs the Gaussian denoising task: add white noise at a random SNR, analyze,
run an amplitude-modifier architecture, synthesize, and minimize negative
time-domain SNR against the clean signal.

Gradients flow through the amplitude path only.  The phase term sign(z) is
held constant per sample, synthesis is the exact adjoint of analysis, and
relu/min kinks use the zero subgradient on their inactive side.  The plain
AM wrappers are the trained objects; the safeguarded variants reuse the same
weights post hoc.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError, UndefinedMetricError
from .modifier import (
    ModifierArchitecture,
    NetMap,
    _amplitude_with_cache,
    amplitude_backward,
    apply_to_values,
    complex_sign,
)
from .network import (
    IDENTITY,
    LEAKY_RELU,
    AdamState,
    ConvLayer,
    ConvNet,
    adam_step,
    circulant_operator_norm,
)
from .signal import Spectrogram, StftConfig, TimeSignal, istft, si_snr, snr, stft

LOSS_EPSILON = 1e-12

# Named rng streams, so corpus, validation noise, and epoch shuffles never
# alias even when drawn in a different order.
_VALIDATION_STREAM = 1
_EPOCH_STREAM = 2


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass(frozen=True)
class SynthCorpusConfig:
    """Generative parameters for the speech-like corpus.

    Items are deterministic per ``(seed, index)``.  The defaults give 8192
    samples at 8 kHz, which is exactly 32 analysis frames at hop 256.
    """

    item_count: int = 64
    duration_seconds: float = 1.024
    sample_rate: int = 8000
    harmonic_range: tuple = (3, 8)
    f0_range: tuple = (80.0, 300.0)
    attack_seconds: float = 0.015
    decay_seconds: float = 0.03
    silence_probability: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.item_count <= 0:
            raise DomainError("item_count must be positive")
        if self.duration_seconds <= 0.0 or self.sample_rate <= 0:
            raise DomainError("duration and sample rate must be positive")
        low, high = self.harmonic_range
        if not (1 <= low <= high):
            raise DomainError("harmonic_range must satisfy 1 <= low <= high")
        f_low, f_high = self.f0_range
        if not (0.0 < f_low <= f_high):
            raise DomainError("f0_range must satisfy 0 < low <= high")
        if f_high >= self.sample_rate / 2.0:
            raise DomainError("f0_range must lie below the Nyquist frequency")
        if self.attack_seconds <= 0.0 or self.decay_seconds <= 0.0:
            raise DomainError("attack and decay times must be positive")
        if not 0.0 <= self.silence_probability <= 1.0:
            raise DomainError("silence_probability must lie in [0, 1]")
        object.__setattr__(self, "harmonic_range", (int(low), int(high)))
        object.__setattr__(self, "f0_range", (float(f_low), float(f_high)))

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_seconds * self.sample_rate))


def _voiced_draw(rng: np.random.Generator, config: SynthCorpusConfig) -> np.ndarray:
    """One harmonic draw: drifting f0, 1/k harmonic falloff, smooth envelope."""
    n = config.num_samples
    rate = config.sample_rate
    time = np.arange(n) / rate

    f0 = rng.uniform(*config.f0_range)
    harmonics = int(rng.integers(config.harmonic_range[0], config.harmonic_range[1] + 1))
    # Relative drift of 3e-4 keeps k*f0 within one FFT bin over one second.
    drift_depth = 3e-4
    drift_cycles = rng.uniform(0.1, 0.5)
    drift_phase = rng.uniform(0.0, 2.0 * np.pi)
    instantaneous = f0 * (
        1.0
        + drift_depth
        * np.sin(2.0 * np.pi * drift_cycles * time / config.duration_seconds + drift_phase)
    )
    base_phase = 2.0 * np.pi * np.cumsum(instantaneous) / rate

    x = np.zeros(n)
    nyquist = rate / 2.0
    for k in range(1, harmonics + 1):
        if k * f0 * (1.0 + drift_depth) >= nyquist:
            break
        amplitude = rng.uniform(0.5, 1.0) / k
        phase = rng.uniform(0.0, 2.0 * np.pi)
        x += amplitude * np.sin(k * base_phase + phase)

    # Smooth amplitude modulation from a handful of random control points.
    points = rng.uniform(0.2, 1.0, size=8)
    envelope = np.interp(np.linspace(0.0, 7.0, n), np.arange(8.0), points)
    return x * envelope


def _carve_gaps(x: np.ndarray, rng: np.random.Generator, config: SynthCorpusConfig) -> np.ndarray:
    """Zero out up to three gaps with linear decay/attack ramps at the edges."""
    n = x.size
    rate = config.sample_rate
    decay = max(1, int(round(config.decay_seconds * rate)))
    attack = max(1, int(round(config.attack_seconds * rate)))
    mask = np.ones(n)
    for _ in range(3):
        if rng.uniform() >= config.silence_probability:
            continue
        gap = int(round(n * rng.uniform(0.05, 0.15)))
        start = int(rng.integers(0, max(1, n - gap)))
        mask[start : start + gap] = 0.0
        ramp_down = np.linspace(1.0, 0.0, decay)
        lo = max(0, start - decay)
        mask[lo:start] = np.minimum(mask[lo:start], ramp_down[decay - (start - lo) :])
        end = start + gap
        ramp_up = np.linspace(0.0, 1.0, attack)
        hi = min(n, end + attack)
        mask[end:hi] = np.minimum(mask[end:hi], ramp_up[: hi - end])
    return x * mask


def synth_speechlike(config: SynthCorpusConfig, index: int) -> TimeSignal:
    """Deterministic speech-like item: harmonic stack, envelope, silent gaps.

    Peak-normalized to 0.5.  Draws whose silent gaps swallow nearly the whole
    signal are rejected and redrawn from the same stream until the RMS guard
    (> 0.01) passes, so every item keeps at least one voiced stretch.
    """
    rng = np.random.default_rng([config.seed, int(index)])
    n = config.num_samples
    for attempt in range(64):
        x = _voiced_draw(rng, config)
        # After repeated rejections, drop the gaps: a gapless draw always
        # passes the guard, which bounds the loop for silence_probability 1.
        if attempt < 8:
            x = _carve_gaps(x, rng, config)
        peak = float(np.max(np.abs(x)))
        if peak == 0.0:
            continue
        x *= 0.5 / peak
        if float(np.sqrt(np.mean(x * x))) > 0.01:
            return TimeSignal(x, config.sample_rate)
    raise DomainError("corpus draw failed the RMS guard repeatedly")


def synth_rir(
    length: int,
    decay_time_seconds: float,
    seed: int,
    sample_rate: int = 8000,
) -> TimeSignal:
    """Synthetic room impulse response, energy-normalized to 1.

    A unit direct-path spike at t = 0 followed by white noise shaped by the
    amplitude envelope e^(-t/tau), tau = decay_time_seconds * sample_rate.
    """
    if length <= 0:
        raise DomainError("length must be positive")
    if decay_time_seconds <= 0.0:
        raise DomainError("decay_time_seconds must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    tau = decay_time_seconds * sample_rate
    with np.errstate(under="ignore"):
        h = rng.standard_normal(length) * np.exp(-t / tau)
    h[0] = 1.0
    h /= np.linalg.norm(h)
    return TimeSignal(h, sample_rate)


# ---------------------------------------------------------------------------
# Loss


def neg_snr_loss(estimate: TimeSignal, reference: TimeSignal):
    """Negative time-domain SNR and its analytic gradient wrt the estimate.

    loss = -10 log10(||ref||^2 / (||ref - est||^2 + eps)), eps = 1e-12.  The
    guard keeps the loss finite at est = ref; the gradient shown is the exact
    gradient of the guarded loss.
    """
    if len(estimate) != len(reference):
        raise ShapeError("estimate and reference must have equal length")
    if estimate.sample_rate != reference.sample_rate:
        raise ShapeError("estimate and reference sample rates differ")
    ref = reference.samples
    est = estimate.samples
    ref_power = float(np.dot(ref, ref))
    if ref_power == 0.0:
        raise UndefinedMetricError("negative-SNR loss is undefined for a zero reference")
    err = est - ref
    denom = float(np.dot(err, err)) + LOSS_EPSILON
    loss = -10.0 * np.log10(ref_power / denom)
    gradient = (20.0 / np.log(10.0)) * err / denom
    return float(loss), gradient


# ---------------------------------------------------------------------------
# Training configuration and network construction


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the Gaussian denoising task."""

    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-4
    snr_range: tuple = (20.0, 40.0)
    frames: int = 32
    arch: str = "re"
    lipschitz: str = "none"
    channel_width: int = 64
    kernel_size: int = 5
    seed: int = 0
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self) -> None:
        if not 0 <= self.epochs <= 20:
            raise DomainError("epochs must lie in [0, 20]")
        if self.batch_size < 1:
            raise DomainError("batch_size must be at least 1")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0.0):
            raise DomainError("learning_rate must be positive and finite")
        low, high = self.snr_range
        if not (np.isfinite(low) and np.isfinite(high) and low <= high):
            raise DomainError("snr_range must satisfy low <= high")
        if self.frames <= 0:
            raise DomainError("frames must be positive")
        if self.arch not in ("se", "re"):
            raise DomainError("arch must be 'se' or 're'")
        if self.lipschitz not in ("none", "spectral"):
            raise DomainError("lipschitz must be 'none' or 'spectral'")
        if self.channel_width < 1:
            raise DomainError("channel_width must be at least 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise DomainError("kernel_size must be odd and positive")
        object.__setattr__(self, "snr_range", (float(low), float(high)))

    @property
    def segment_samples(self) -> int:
        return self.frames * self.stft.hop

    @property
    def modifier_kind(self) -> str:
        return "am_" + self.arch

    @property
    def safeguarded_kind(self) -> str:
        return "lipsam_" + self.arch


def denoiser_architecture(
    net: ConvNet, arch: str, safeguarded: bool = False
) -> ModifierArchitecture:
    """Wrap a net as an amplitude-modifier architecture of the given family."""
    if arch not in ("se", "re"):
        raise DomainError("arch must be 'se' or 're'")
    kind = ("lipsam_" if safeguarded else "am_") + arch
    return ModifierArchitecture(kind, NetMap(net))


def build_denoiser_net(config: TrainConfig) -> ConvNet:
    """Initialize the amplitude network: bins -> width -> width -> bins.

    Leaky-relu hidden layers, identity output, biases zero-initialized.  In
    spectral mode every layer is projected onto the unit operator-norm ball
    at initialization, so training starts feasible.
    """
    rng = np.random.default_rng([config.seed, 0])
    bins = config.stft.num_bins
    chain = (bins, config.channel_width, config.channel_width, bins)
    activations = (LEAKY_RELU, LEAKY_RELU, IDENTITY)
    layers = []
    for cin, cout, act in zip(chain, chain[1:], activations):
        fan_in = cin * config.kernel_size
        weights = rng.standard_normal((cout, cin, config.kernel_size)) * np.sqrt(2.0 / fan_in)
        layers.append(ConvLayer(weights, np.zeros(cout), activation=act))
    net = ConvNet(tuple(layers))
    if config.lipschitz == "spectral":
        net = _project_unit_ball(net, config.frames)
    return net


def _project_unit_ball(net: ConvNet, frames: int) -> ConvNet:
    """Scale any layer with operator norm above 1 back onto the unit ball."""
    layers = []
    changed = False
    for layer in net.layers:
        norm = circulant_operator_norm(layer, (frames,))
        if norm > 1.0:
            w = layer.weights / (norm * (1.0 + 1e-12))
            layers.append(ConvLayer(w, layer.bias, activation=layer.activation))
            changed = True
        else:
            layers.append(layer)
    if not changed:
        return net
    return ConvNet(tuple(layers), net.scale)


def certify_denoiser_net(net: ConvNet, frames: int) -> ConvNet:
    """Stamp exact per-layer operator norms as certificates.

    Uses the circulant norm at the training frame count; the certificate is
    the measured norm itself, so downstream bounds stay tight.
    """
    layers = []
    for layer in net.layers:
        norm = circulant_operator_norm(layer, (frames,))
        layers.append(
            ConvLayer(layer.weights, layer.bias, activation=layer.activation, norm_certificate=norm)
        )
    return ConvNet(tuple(layers), net.scale)


# ---------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class TrainResult:
    """Outcome of a training run.

    ``net`` is the best-validation checkpoint.  ``log`` holds one row per
    evaluated epoch as dicts with keys epoch, train_loss, val_loss; epoch 0
    is the untrained net (train_loss is NaN there).  ``status`` is
    "completed" or "aborted"; an abort reports the poisoned step and still
    returns the last good checkpoint.
    """

    net: ConvNet
    arch: str
    lipschitz: str
    log: tuple
    status: str
    best_epoch: int
    best_val_loss: float
    poisoned_at: tuple | None = None

    @property
    def modifier_kind(self) -> str:
        return "am_" + self.arch


def _added_noise(clean: np.ndarray, snr_db: float, noise: np.ndarray) -> np.ndarray:
    scale = float(np.linalg.norm(clean)) * 10.0 ** (-snr_db / 20.0)
    return clean + noise * (scale / float(np.linalg.norm(noise)))


def _analyze_batch(batch: np.ndarray, config: StftConfig, rate: int) -> np.ndarray:
    return np.stack([stft(TimeSignal(row, rate), config).values for row in batch])


def _synthesize_batch(values: np.ndarray, config: StftConfig, rate: int) -> np.ndarray:
    return np.stack([istft(Spectrogram(v, config), config, rate).samples for v in values])


def _batch_loss_and_grads(net, kind, clean, noisy, config: TrainConfig, rate: int):
    """Mean negative-SNR loss over a batch and its parameter gradients.

    The chain is stft -> modifier -> istft -> loss.  Synthesis is the exact
    adjoint of analysis, so the coefficient gradient is the stft of the
    time-domain gradient; sign(z) is constant per sample, which restricts
    the flow to the amplitude path.
    """
    arch = ModifierArchitecture(kind, NetMap(net))
    z = _analyze_batch(noisy, config.stft, rate)
    magnitude = np.abs(z)
    sign = complex_sign(z)
    amplitude, cache = _amplitude_with_cache(arch, magnitude)
    estimates = _synthesize_batch(amplitude * sign, config.stft, rate)

    batch = clean.shape[0]
    losses = np.empty(batch)
    grad_time = np.empty_like(estimates)
    for b in range(batch):
        losses[b], grad_time[b] = neg_snr_loss(
            TimeSignal(estimates[b], rate), TimeSignal(clean[b], rate)
        )
    grad_values = _analyze_batch(grad_time / batch, config.stft, rate)
    grad_amplitude = np.real(np.conj(sign) * grad_values)
    param_grads, _ = amplitude_backward(arch, cache, grad_amplitude)
    return float(np.mean(losses)), param_grads


def _validation_loss(net, kind, clean, noisy, config: TrainConfig, rate: int) -> float:
    arch = ModifierArchitecture(kind, NetMap(net))
    z = _analyze_batch(noisy, config.stft, rate)
    estimates = _synthesize_batch(apply_to_values(arch, z), config.stft, rate)
    losses = [
        neg_snr_loss(TimeSignal(est, rate), TimeSignal(ref, rate))[0]
        for est, ref in zip(estimates, clean)
    ]
    return float(np.mean(losses))


def _corpus_segments(corpus: SynthCorpusConfig, needed: int) -> np.ndarray:
    items = np.empty((corpus.item_count, needed))
    for i in range(corpus.item_count):
        samples = synth_speechlike(corpus, i).samples
        if samples.size < needed:
            raise ShapeError(
                f"corpus items are {samples.size} samples but training needs {needed}"
            )
        items[i] = samples[:needed]
    return items


def train_denoiser(
    train_config: TrainConfig,
    corpus_config: SynthCorpusConfig | None = None,
    initial_net: ConvNet | None = None,
) -> TrainResult:
    """Train an amplitude-modifier denoiser on the Gaussian denoising task.

    10% of the corpus (at least one item) is held out with fixed validation
    noise; the returned checkpoint minimizes validation loss over epoch 0
    (untrained) and every completed epoch.  A non-finite loss or gradient
    aborts the run and returns the best checkpoint seen so far.  Identical
    configurations reproduce bitwise-identical results.

    ``initial_net`` warm-starts from existing weights instead of a fresh
    initialization; with ``epochs = 0`` the net comes back unchanged.
    """
    if corpus_config is None:
        corpus_config = SynthCorpusConfig(seed=train_config.seed)
    if corpus_config.item_count < 2:
        raise DomainError("training needs at least two corpus items (one is held out)")
    rate = corpus_config.sample_rate
    needed = train_config.segment_samples
    items = _corpus_segments(corpus_config, needed)

    val_count = max(1, int(round(0.1 * corpus_config.item_count)))
    val_clean = items[:val_count]
    train_clean = items[val_count:]

    low, high = train_config.snr_range
    rng_val = np.random.default_rng([train_config.seed, _VALIDATION_STREAM])
    val_noisy = np.stack(
        [
            _added_noise(row, rng_val.uniform(low, high), rng_val.standard_normal(needed))
            for row in val_clean
        ]
    )

    if initial_net is None:
        net = build_denoiser_net(train_config)
    else:
        if initial_net.is_2d or initial_net.in_channels != train_config.stft.num_bins:
            raise ShapeError("initial net must be 1-D with one channel per frequency bin")
        net = initial_net
    kind = train_config.modifier_kind
    params = net.parameters()
    state = AdamState.init(params, learning_rate=train_config.learning_rate)

    val0 = _validation_loss(net, kind, val_clean, val_noisy, train_config, rate)
    log = [{"epoch": 0, "train_loss": float("nan"), "val_loss": val0}]
    best_net, best_epoch, best_val = net, 0, val0
    status = "completed"
    poisoned_at = None

    for epoch in range(1, train_config.epochs + 1):
        rng_epoch = np.random.default_rng([train_config.seed, _EPOCH_STREAM, epoch])
        order = rng_epoch.permutation(train_clean.shape[0])
        epoch_losses = []
        for start in range(0, order.size, train_config.batch_size):
            chosen = order[start : start + train_config.batch_size]
            clean = train_clean[chosen]
            snrs = rng_epoch.uniform(low, high, size=chosen.size)
            noise = rng_epoch.standard_normal(clean.shape)
            noisy = np.stack(
                [_added_noise(c, s, n) for c, s, n in zip(clean, snrs, noise)]
            )
            try:
                # Blow-ups surface as exceptions from the finiteness checks
                # in TimeSignal/Spectrogram/adam_step, not as numpy warnings.
                with np.errstate(all="ignore"):
                    loss, grads = _batch_loss_and_grads(
                        net, kind, clean, noisy, train_config, rate
                    )
                    if not np.isfinite(loss):
                        raise NonFiniteError("training loss is not finite")
                    params, state = adam_step(params, grads, state)
            except (DomainError, NonFiniteError, FloatingPointError, OverflowError):
                status = "aborted"
                poisoned_at = (epoch, start // train_config.batch_size)
                break
            net = net.with_parameters(np.concatenate([p.reshape(-1) for p in params]))
            if train_config.lipschitz == "spectral":
                net = _project_unit_ball(net, train_config.frames)
                params = net.parameters()
            epoch_losses.append(loss)
        if status == "aborted":
            break
        val = _validation_loss(net, kind, val_clean, val_noisy, train_config, rate)
        log.append(
            {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "val_loss": val}
        )
        if val < best_val:
            best_net, best_epoch, best_val = net, epoch, val

    if train_config.lipschitz == "spectral" and train_config.epochs > 0:
        best_net = certify_denoiser_net(best_net, train_config.frames)
    return TrainResult(
        net=best_net,
        arch=train_config.arch,
        lipschitz=train_config.lipschitz,
        log=tuple(log),
        status=status,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        poisoned_at=poisoned_at,
    )


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_denoiser(
    arch: ModifierArchitecture,
    items,
    snr_levels,
    stft_config: StftConfig | None = None,
    seed: int = 0,
):
    """Mean output SNR and SI-SNR per input-SNR level.

    Noise draws are deterministic per (seed, level index, item index).
    Returns one dict per level with keys input_snr_db, mean_snr_db,
    mean_si_snr_db.
    """
    if stft_config is None:
        stft_config = StftConfig()
    items = list(items)
    if not items:
        raise DomainError("evaluation needs at least one item")
    levels = [float(s) for s in snr_levels]
    if not levels:
        raise DomainError("evaluation needs at least one SNR level")
    rows = []
    for level_index, level in enumerate(levels):
        snrs = []
        si_snrs = []
        for item_index, clean in enumerate(items):
            noisy = TimeSignal(
                _added_noise(
                    clean.samples,
                    level,
                    np.random.default_rng(
                        [seed, level_index, item_index]
                    ).standard_normal(len(clean)),
                ),
                clean.sample_rate,
            )
            denoised = apply_to_values(arch, stft(noisy, stft_config).values)
            estimate = istft(
                Spectrogram(denoised, stft_config), stft_config, clean.sample_rate
            )
            snrs.append(snr(estimate, clean))
            si_snrs.append(si_snr(estimate, clean))
        rows.append(
            {
                "input_snr_db": level,
                "mean_snr_db": float(np.mean(snrs)),
                "mean_si_snr_db": float(np.mean(si_snrs)),
            }
        )
    return rows
