"""Small convolutional networks with hand-rolled forward/backward passes.

Layers convolve circularly with centered kernels, in one spatial dimension
(channels x width, used for spectrogram magnitudes with frequency bins as
channels) or two (channels x height x width, used for small image-like
inputs).  Every array op broadcasts over optional leading batch axes.

The linear part of each layer can carry a norm certificate: an upper bound
on its operator norm for a fixed input geometry, established by power
iteration.  Certificates multiply through activations (all 1-Lipschitz here)
and the output scale into a certified bound for the whole network.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .errors import FormatError, NonFiniteError, ShapeError, UncertifiedError


@dataclass(frozen=True)
class Activation:
    """Elementwise nonlinearity applied after a layer's affine map."""

    kind: str
    slope: float = 0.1

    _KINDS = ("identity", "leaky_relu", "softplus")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown activation {self.kind!r}")

    def __call__(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return v
        if self.kind == "leaky_relu":
            return np.where(v > 0.0, v, self.slope * v)
        return np.logaddexp(0.0, v)

    def derivative(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.ones_like(v)
        if self.kind == "leaky_relu":
            return np.where(v > 0.0, 1.0, self.slope)
        return expit(v)

    @property
    def lipschitz(self) -> float:
        if self.kind == "leaky_relu":
            return max(1.0, abs(self.slope))
        return 1.0


IDENTITY = Activation("identity")
LEAKY_RELU = Activation("leaky_relu", 0.1)
SOFTPLUS = Activation("softplus")


@dataclass(frozen=True, eq=False)
class ConvLayer:
    """Circular convolution plus optional bias and an activation.

    ``weights`` has shape [out_channels, in_channels, k] for 1-D layers or
    [out_channels, in_channels, k, k] for 2-D layers, with odd k (centered,
    same-size circular padding).
    """

    weights: np.ndarray
    bias: np.ndarray | None = None
    activation: Activation = LEAKY_RELU
    norm_certificate: float | None = None

    def __post_init__(self) -> None:
        weights = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if weights.ndim not in (3, 4):
            raise ShapeError("weights must be [out, in, k] or [out, in, k, k]")
        if weights.shape[2] % 2 == 0 or (weights.ndim == 4 and weights.shape[3] % 2 == 0):
            raise ShapeError("kernel sizes must be odd (centered circular padding)")
        if not np.all(np.isfinite(weights)):
            raise NonFiniteError("layer weights must be finite")
        object.__setattr__(self, "weights", weights)
        if self.bias is not None:
            bias = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float64))
            if bias.shape != (weights.shape[0],):
                raise ShapeError("bias must have one entry per output channel")
            if not np.all(np.isfinite(bias)):
                raise NonFiniteError("layer bias must be finite")
            object.__setattr__(self, "bias", bias)
        if self.norm_certificate is not None and self.norm_certificate < 0.0:
            raise ValueError("norm certificate must be nonnegative")

    @property
    def is_2d(self) -> bool:
        return self.weights.ndim == 4

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


def _conv_linear(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply the linear part of a layer; x may carry leading batch axes."""
    k = weights.shape[2]
    c = k // 2
    if weights.ndim == 3:
        out = np.zeros(x.shape[:-2] + (weights.shape[0], x.shape[-1]))
        for d in range(k):
            out += np.einsum("oi,...iw->...ow", weights[:, :, d], np.roll(x, c - d, axis=-1))
        return out
    k2 = weights.shape[3]
    c2 = k2 // 2
    out = np.zeros(x.shape[:-3] + (weights.shape[0],) + x.shape[-2:])
    for d in range(k):
        for e in range(k2):
            shifted = np.roll(x, (c - d, c2 - e), axis=(-2, -1))
            out += np.einsum("oi,...ihw->...ohw", weights[:, :, d, e], shifted)
    return out


def _conv_linear_transpose(weights: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_conv_linear` in the same geometry."""
    k = weights.shape[2]
    c = k // 2
    if weights.ndim == 3:
        out = np.zeros(g.shape[:-2] + (weights.shape[1], g.shape[-1]))
        for d in range(k):
            out += np.einsum("oi,...ow->...iw", weights[:, :, d], np.roll(g, d - c, axis=-1))
        return out
    k2 = weights.shape[3]
    c2 = k2 // 2
    out = np.zeros(g.shape[:-3] + (weights.shape[1],) + g.shape[-2:])
    for d in range(k):
        for e in range(k2):
            shifted = np.roll(g, (d - c, e - c2), axis=(-2, -1))
            out += np.einsum("oi,...ohw->...ihw", weights[:, :, d, e], shifted)
    return out


@dataclass(frozen=True, eq=False)
class ConvNet:
    """A stack of ConvLayers with a scalar output scale."""

    layers: tuple
    scale: float = 1.0

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_channels != b.in_channels or a.is_2d != b.is_2d:
                raise ShapeError("consecutive layers disagree on channels or rank")
        if not np.isfinite(self.scale):
            raise NonFiniteError("scale must be finite")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def is_2d(self) -> bool:
        return self.layers[0].is_2d

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def parameters(self) -> list:
        """Weights and biases in layer order, biases after their weights."""
        params = []
        for layer in self.layers:
            params.append(layer.weights)
            if layer.bias is not None:
                params.append(layer.bias)
        return params

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def flatten_parameters(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.parameters()])

    def with_parameters(self, vector: np.ndarray) -> "ConvNet":
        """Rebuild the net from a flat parameter vector; certificates drop."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.parameter_count,):
            raise ShapeError(
                f"expected a parameter vector of length {self.parameter_count}"
            )
        layers = []
        offset = 0
        for layer in self.layers:
            w = vector[offset : offset + layer.weights.size].reshape(layer.weights.shape)
            offset += layer.weights.size
            b = None
            if layer.bias is not None:
                b = vector[offset : offset + layer.bias.size]
                offset += layer.bias.size
            layers.append(
                ConvLayer(w, b, activation=layer.activation, norm_certificate=None)
            )
        return ConvNet(tuple(layers), self.scale)


@dataclass
class ForwardCache:
    """Intermediate values retained by forward for the matching backward."""

    net: ConvNet
    inputs: list
    preactivations: list


def forward(net: ConvNet, x: np.ndarray):
    """Run the network; returns (output, cache).

    ``x`` is [in_channels, width] or [in_channels, height, width], with any
    number of leading batch axes allowed.
    """
    x = np.asarray(x, dtype=np.float64)
    spatial = 3 if net.is_2d else 2
    if x.ndim < spatial or x.shape[-spatial] != net.in_channels:
        raise ShapeError(
            f"input shape {x.shape} does not feed a net with {net.in_channels} input channels"
        )
    inputs = []
    preactivations = []
    for layer in net.layers:
        inputs.append(x)
        z = _conv_linear(layer.weights, x)
        if layer.bias is not None:
            z += layer.bias.reshape((-1,) + (1,) * (spatial - 1))
        preactivations.append(z)
        x = layer.activation(z)
    return net.scale * x, ForwardCache(net, inputs, preactivations)


def backward(net: ConvNet, cache: ForwardCache, upstream: np.ndarray):
    """Backpropagate; returns (parameter gradients, input gradient).

    Gradients are ordered exactly like ``net.parameters()``.  Batch axes in
    the cache are summed into the parameter gradients.
    """
    if cache.net is not net:
        raise ValueError("cache was produced by a different network instance")
    spatial = 3 if net.is_2d else 2
    g = np.asarray(upstream, dtype=np.float64) * net.scale
    grads = [None] * len(net.parameters())
    slot = len(grads)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        x_in = cache.inputs[idx]
        dz = g * layer.activation.derivative(cache.preactivations[idx])
        if layer.bias is not None:
            slot -= 1
            axes = tuple(i for i in range(dz.ndim) if i != dz.ndim - spatial)
            grads[slot] = np.sum(dz, axis=axes)
        slot -= 1
        grads[slot] = _weight_gradient(layer.weights, x_in, dz)
        g = _conv_linear_transpose(layer.weights, dz)
    return grads, g


def _weight_gradient(weights: np.ndarray, x: np.ndarray, dz: np.ndarray) -> np.ndarray:
    k = weights.shape[2]
    c = k // 2
    grad = np.zeros_like(weights)
    if weights.ndim == 3:
        xb = x.reshape((-1,) + x.shape[-2:])
        dzb = dz.reshape((-1,) + dz.shape[-2:])
        for d in range(k):
            grad[:, :, d] = np.einsum("bow,biw->oi", dzb, np.roll(xb, c - d, axis=-1))
        return grad
    k2 = weights.shape[3]
    c2 = k2 // 2
    xb = x.reshape((-1,) + x.shape[-3:])
    dzb = dz.reshape((-1,) + dz.shape[-3:])
    for d in range(k):
        for e in range(k2):
            shifted = np.roll(xb, (c - d, c2 - e), axis=(-2, -1))
            grad[:, :, d, e] = np.einsum("bohw,bihw->oi", dzb, shifted)
    return grad


def layer_operator_norm(
    layer: ConvLayer,
    input_shape: tuple,
    iterations: int = 200,
    seed: int = 0,
    tolerance: float = 0.0,
) -> float:
    """Estimate the operator norm of the layer's linear part by power iteration.

    ``input_shape`` is the spatial geometry, (width,) or (height, width).
    The estimate is a monotone nondecreasing function of the iteration count
    (it is a Rayleigh quotient along the power sequence of W^T W), so more
    iterations can only tighten it from below.
    """
    expected = 2 if layer.is_2d else 1
    if len(input_shape) != expected:
        raise ShapeError(f"input_shape must have {expected} spatial dims")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((layer.in_channels,) + tuple(input_shape))
    norm_v = np.linalg.norm(v)
    if norm_v == 0.0:
        return 0.0
    v /= norm_v
    estimate = 0.0
    for _ in range(max(1, iterations)):
        u = _conv_linear(layer.weights, v)
        new_estimate = float(np.linalg.norm(u))
        v = _conv_linear_transpose(layer.weights, u)
        norm_v = float(np.linalg.norm(v))
        if norm_v == 0.0:
            return 0.0
        v /= norm_v
        if tolerance > 0.0 and new_estimate - estimate <= tolerance * max(new_estimate, 1e-300):
            estimate = new_estimate
            break
        estimate = new_estimate
    return estimate


def circulant_operator_norm(layer: ConvLayer, input_shape: tuple) -> float:
    """Exact operator norm of the layer's linear part on the given geometry.

    A circular convolution block-diagonalizes in the Fourier basis: for each
    spatial frequency the operator acts as the [out, in] matrix of kernel
    transforms at that frequency, so the overall norm is the maximum top
    singular value across frequencies.  Exact up to FFT rounding, unlike the
    power-iteration estimate.
    """
    expected = 2 if layer.is_2d else 1
    if len(input_shape) != expected:
        raise ShapeError(f"input_shape must have {expected} spatial dims")
    w = layer.weights
    if layer.is_2d:
        height, width = input_shape
        k1, k2 = w.shape[2], w.shape[3]
        kernel = np.zeros((w.shape[0], w.shape[1], height, width))
        for d in range(k1):
            for e in range(k2):
                kernel[:, :, (d - k1 // 2) % height, (e - k2 // 2) % width] += w[:, :, d, e]
        transfer = np.fft.fft2(kernel, axes=(-2, -1))
        blocks = np.moveaxis(transfer, (0, 1), (2, 3)).reshape(-1, w.shape[0], w.shape[1])
    else:
        (width,) = input_shape
        k = w.shape[2]
        kernel = np.zeros((w.shape[0], w.shape[1], width))
        for d in range(k):
            kernel[:, :, (d - k // 2) % width] += w[:, :, d]
        transfer = np.fft.fft(kernel, axis=-1)
        blocks = np.moveaxis(transfer, (0, 1), (1, 2)).reshape(-1, w.shape[0], w.shape[1])
    return float(np.max(np.linalg.svd(blocks, compute_uv=False)))


def spectral_normalize(
    layer: ConvLayer,
    input_shape: tuple,
    target: float = 1.0,
    iterations: int = 2000,
    seed: int = 0,
) -> ConvLayer:
    """Rescale the layer so its certified operator norm equals ``target``.

    The measured norm gets a 1e-6 safety margin before rescaling, so the true
    norm of the result sits just below the recorded certificate.  A zero
    layer cannot be rescaled and is returned with a zero certificate.
    """
    if target <= 0.0:
        raise ValueError("target norm must be positive")
    measured = layer_operator_norm(
        layer, input_shape, iterations=iterations, seed=seed, tolerance=1e-14
    )
    if measured == 0.0:
        return replace(layer, norm_certificate=0.0)
    guarded = measured + 1e-6
    return ConvLayer(
        layer.weights * (target / guarded),
        bias=layer.bias,
        activation=layer.activation,
        norm_certificate=float(target),
    )


def lipschitz_upper_bound(net: ConvNet) -> float:
    """Certified bound: product of layer certificates, activation constants,
    and the absolute output scale. Raises if any layer lacks a certificate."""
    bound = abs(net.scale)
    for i, layer in enumerate(net.layers):
        if layer.norm_certificate is None:
            raise UncertifiedError(f"layer {i} carries no norm certificate")
        bound *= layer.norm_certificate * layer.activation.lipschitz
    return bound


@dataclass(frozen=True)
class AdamState:
    """Adam moment estimates plus hyperparameters; treat as immutable."""

    first_moment: tuple
    second_moment: tuple
    step_count: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, params, learning_rate: float = 1e-4, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            first_moment=tuple(np.zeros_like(p) for p in params),
            second_moment=tuple(np.zeros_like(p) for p in params),
            step_count=0,
            learning_rate=float(learning_rate),
            beta1=float(beta1),
            beta2=float(beta2),
            epsilon=float(epsilon),
        )


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns (new params, new state)."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("parameter, gradient, and state lists must align")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError("gradient shape does not match its parameter")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient would poison the Adam state")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    new_state = replace(
        state, first_moment=tuple(new_m), second_moment=tuple(new_v), step_count=t
    )
    return new_params, new_state


# ------------------------------------------------------------ serialization

_MAGIC = b"LSAMNET1"
_VERSION = 1
_ACT_CODES = {"identity": 0, "leaky_relu": 1, "softplus": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def save_weights(net: ConvNet) -> bytes:
    """Serialize a network to a versioned, checksummed byte string."""
    chunks = [struct.pack("<dI", net.scale, len(net.layers))]
    for layer in net.layers:
        header = struct.pack(
            "<BBdBBd",
            layer.weights.ndim,
            _ACT_CODES[layer.activation.kind],
            layer.activation.slope,
            1 if layer.bias is not None else 0,
            1 if layer.norm_certificate is not None else 0,
            layer.norm_certificate if layer.norm_certificate is not None else 0.0,
        )
        shape = struct.pack(f"<{layer.weights.ndim}I", *layer.weights.shape)
        chunks.append(header)
        chunks.append(shape)
        chunks.append(np.ascontiguousarray(layer.weights).tobytes())
        if layer.bias is not None:
            chunks.append(np.ascontiguousarray(layer.bias).tobytes())
    payload = b"".join(chunks)
    return (
        _MAGIC
        + struct.pack("<I", _VERSION)
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError("truncated weight stream")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(data: bytes) -> ConvNet:
    """Parse bytes produced by :func:`save_weights`, validating the checksum."""
    if len(data) < len(_MAGIC) + 8 or data[: len(_MAGIC)] != _MAGIC:
        raise FormatError("not a serialized network (bad magic)")
    (version,) = struct.unpack("<I", data[len(_MAGIC) : len(_MAGIC) + 4])
    if version != _VERSION:
        raise FormatError(f"unsupported weight format version {version}")
    payload = data[len(_MAGIC) + 4 : -4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError("weight stream checksum mismatch")
    reader = _Reader(payload)
    scale, layer_count = reader.unpack("<dI")
    layers = []
    for _ in range(layer_count):
        ndim, act_code, slope, has_bias, has_cert, cert = reader.unpack("<BBdBBd")
        if ndim not in (3, 4):
            raise FormatError(f"invalid layer rank {ndim}")
        if act_code not in _ACT_NAMES:
            raise FormatError(f"unknown activation code {act_code}")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape))
        weights = np.frombuffer(reader.take(size * 8), dtype=np.float64).reshape(shape)
        bias = None
        if has_bias:
            bias = np.frombuffer(reader.take(shape[0] * 8), dtype=np.float64)
        layers.append(
            ConvLayer(
                weights.copy(),
                bias.copy() if bias is not None else None,
                activation=Activation(_ACT_NAMES[act_code], slope),
                norm_certificate=float(cert) if has_cert else None,
            )
        )
    if reader.offset != len(payload):
        raise FormatError("trailing bytes after final layer")
    return ConvNet(tuple(layers), scale)


def save_net(path, net: ConvNet, metadata: dict | None = None) -> None:
    """Write weight bytes plus a JSON sidecar describing the architecture."""
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(save_weights(net))
    sidecar = {
        "format_version": _VERSION,
        "scale": net.scale,
        "layers": [
            {
                "shape": list(layer.weights.shape),
                "activation": layer.activation.kind,
                "slope": layer.activation.slope,
                "bias": layer.bias is not None,
                "norm_certificate": layer.norm_certificate,
            }
            for layer in net.layers
        ],
    }
    if metadata:
        sidecar.update(metadata)
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_net(path) -> ConvNet:
    with open(str(path), "rb") as fh:
        return load_weights(fh.read())
