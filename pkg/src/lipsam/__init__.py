"""Lipschitz-safeguarded amplitude modifiers for complex spectrograms.

The package splits into small layers: ``signal`` (tight-frame STFT and WAV
plumbing), ``network`` (circular ConvNets with exact operator norms),
``modifier`` (the four amplitude-modifier architectures and their safeguard
variants), ``lipschitz`` (adversarial verification of the certified bounds),
``pnp`` (ADMM plug-and-play dereverberation with a modifier as the denoiser),
and ``trainer`` (synthetic corpus plus the denoiser training loop).  The
``lipsam`` console script in ``cli`` drives all of it.
"""

from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    InvalidWindowError,
    NonFiniteError,
    ShapeError,
    UnboundedModifierError,
    UncertifiedError,
    UndefinedMetricError,
)
from .lipschitz import (
    LipschitzEstimate,
    ModifierFamily,
    SearchConfig,
    conv2d_family,
    counterexample_bias,
    counterexample_permutation,
    estimate_B,
    fixed_modifier_family,
    pairwise_quotient_search,
)
from .modifier import (
    KINDS,
    BiasAdd,
    IdentityMap,
    ModifierArchitecture,
    NetMap,
    PermutationMap,
    SoftThreshConstant,
    ZeroMap,
    apply,
    apply_to_values,
    architecture_from_config,
    architecture_to_config,
    complex_sign,
    theoretical_bound,
)
from .network import (
    ConvLayer,
    ConvNet,
    circulant_operator_norm,
    forward,
    load_net,
    save_net,
)
from .pnp import Observation, SolveResult, SolverConfig, lambda_sweep, run
from .signal import (
    Spectrogram,
    StftConfig,
    TimeSignal,
    add_noise_at_snr,
    circular_convolve,
    istft,
    read_wav,
    si_snr,
    snr,
    stft,
    write_wav,
)
from .trainer import (
    SynthCorpusConfig,
    TrainConfig,
    TrainResult,
    evaluate_denoiser,
    synth_rir,
    synth_speechlike,
    train_denoiser,
)

__version__ = "0.1.0"

__all__ = [
    "BiasAdd",
    "ConfigError",
    "ConvLayer",
    "ConvNet",
    "DomainError",
    "FormatError",
    "IdentityMap",
    "InvalidWindowError",
    "KINDS",
    "LipschitzEstimate",
    "ModifierArchitecture",
    "ModifierFamily",
    "NetMap",
    "NonFiniteError",
    "Observation",
    "PermutationMap",
    "SearchConfig",
    "ShapeError",
    "SoftThreshConstant",
    "SolveResult",
    "SolverConfig",
    "Spectrogram",
    "StftConfig",
    "SynthCorpusConfig",
    "TimeSignal",
    "TrainConfig",
    "TrainResult",
    "UnboundedModifierError",
    "UncertifiedError",
    "UndefinedMetricError",
    "ZeroMap",
    "add_noise_at_snr",
    "apply",
    "apply_to_values",
    "architecture_from_config",
    "architecture_to_config",
    "circulant_operator_norm",
    "circular_convolve",
    "complex_sign",
    "conv2d_family",
    "counterexample_bias",
    "counterexample_permutation",
    "estimate_B",
    "evaluate_denoiser",
    "fixed_modifier_family",
    "forward",
    "istft",
    "lambda_sweep",
    "load_net",
    "pairwise_quotient_search",
    "read_wav",
    "run",
    "save_net",
    "si_snr",
    "snr",
    "stft",
    "synth_rir",
    "synth_speechlike",
    "theoretical_bound",
    "train_denoiser",
    "write_wav",
]
