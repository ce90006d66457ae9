"""Empirical Lipschitz analysis of amplitude modifiers.

The headline tool is ``estimate_B``: a multi-restart projected gradient
ascent that searches input coefficients (and, for parametric families, the
inner-network weights) for large Jacobian operator norms.  The resulting
maximum is a lower bound on the true Lipschitz constant, to be compared
against the certified upper bound of safeguarded architectures.

Modifiers act on complex arrays but are not holomorphic, so all Jacobians
are taken of the realified map: complex coefficients are interleaved into
real vectors (Re, Im, Re, Im, ...) and derivatives are ordinary real ones.

Non-smooth inner nets (leaky relu) get no gradient search; for those,
``pairwise_quotient_search`` hill-climbs difference quotients directly, and
``counterexample_bias`` / ``counterexample_permutation`` reproduce the two
analytic blow-up constructions for unguarded architectures.
"""

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (
    DomainError,
    NonFiniteError,
    ShapeError,
    UnboundedModifierError,
    UncertifiedError,
)
from .modifier import (
    KINDS,
    SAFEGUARDED_KINDS,
    BiasAdd,
    ModifierArchitecture,
    NetMap,
    PermutationMap,
    _amplitude_with_cache,
    amplitude_backward,
    apply_to_values,
    complex_sign,
    theoretical_bound,
)
from .network import (
    IDENTITY,
    SOFTPLUS,
    ConvLayer,
    ConvNet,
    circulant_operator_norm,
)

_STEP_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# realified coordinates


def realify(values: np.ndarray) -> np.ndarray:
    """Flatten a complex array into an interleaved (Re, Im, ...) real vector."""
    flat = np.asarray(values, dtype=np.complex128).reshape(-1)
    out = np.empty(2 * flat.size)
    out[0::2] = flat.real
    out[1::2] = flat.imag
    return out


def unrealify(vector: np.ndarray, shape: tuple) -> np.ndarray:
    """Inverse of ``realify`` for the given complex shape."""
    vector = np.asarray(vector, dtype=np.float64)
    size = 2 * int(np.prod(shape, dtype=np.int64))
    if vector.shape != (size,):
        raise ShapeError(f"expected a real vector of length {size}, got {vector.shape}")
    return (vector[0::2] + 1j * vector[1::2]).reshape(shape)


@dataclass(frozen=True, eq=False)
class RealifiedMap:
    """A complex array map viewed as a real vector map.

    ``fn`` must take and return complex arrays of ``shape``.  Calling the
    wrapper with an interleaved real vector applies ``fn`` and interleaves
    the result, which is what finite-difference Jacobians and the quotient
    search operate on.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    shape: tuple

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if not shape or any(s <= 0 for s in shape):
            raise ShapeError(f"shape must be nonempty and positive, got {self.shape}")
        object.__setattr__(self, "shape", shape)

    @property
    def dimension(self) -> int:
        return 2 * int(np.prod(self.shape, dtype=np.int64))

    def __call__(self, vector: np.ndarray) -> np.ndarray:
        z = unrealify(vector, self.shape)
        out = np.asarray(self.fn(z), dtype=np.complex128)
        if out.shape != z.shape:
            raise ShapeError(f"map changed shape {z.shape} -> {out.shape}")
        return realify(out)

    @classmethod
    def from_modifier(cls, arch: ModifierArchitecture, shape: tuple) -> "RealifiedMap":
        return cls(lambda z: apply_to_values(arch, z), tuple(shape))


# ---------------------------------------------------------------------------
# jacobians and operator norms


def jacobian_fd(fn: Callable, point: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a real vector map at ``point``.

    ``fn`` maps 1-D real vectors to real arrays; the result has one column
    per input coordinate.  Non-finite map values raise NonFiniteError.
    """
    point = np.asarray(point, dtype=np.float64)
    if point.ndim != 1:
        raise ShapeError("jacobian_fd expects a 1-D point")
    if epsilon <= 0.0:
        raise DomainError("epsilon must be positive")
    columns = []
    for j in range(point.size):
        hi = point.copy()
        hi[j] += epsilon
        lo = point.copy()
        lo[j] -= epsilon
        diff = np.asarray(fn(hi), dtype=np.float64) - np.asarray(fn(lo), dtype=np.float64)
        columns.append(diff.reshape(-1) / (2.0 * epsilon))
    jac = np.stack(columns, axis=1) if columns else np.zeros((0, 0))
    if not np.all(np.isfinite(jac)):
        raise NonFiniteError("jacobian contains non-finite entries")
    return jac


def modifier_jacobian(
    arch: ModifierArchitecture, values: np.ndarray, epsilon: float = 1e-5
) -> np.ndarray:
    """Realified Jacobian of a modifier at the complex point ``values``.

    Equivalent to ``jacobian_fd`` on ``RealifiedMap.from_modifier`` but
    evaluates all perturbed points in one batched forward pass.
    """
    values = np.asarray(values, dtype=np.complex128)
    if epsilon <= 0.0:
        raise DomainError("epsilon must be positive")
    shape = values.shape
    n = 2 * values.size
    base = realify(values)
    shifts = epsilon * np.eye(n)
    points = np.concatenate([base[None, :] + shifts, base[None, :] - shifts])
    batch = (points[:, 0::2] + 1j * points[:, 1::2]).reshape((2 * n,) + shape)
    out = apply_to_values(arch, batch).reshape(2 * n, -1)
    flat = np.empty((2 * n, n))
    flat[:, 0::2] = out.real
    flat[:, 1::2] = out.imag
    jac = (flat[:n] - flat[n:]).T / (2.0 * epsilon)
    if not np.all(np.isfinite(jac)):
        raise NonFiniteError("jacobian contains non-finite entries")
    return jac


def operator_norm(
    matrix: np.ndarray, method: str = "dense_svd", iterations: int = 200, seed: int = 0
) -> float:
    """Top singular value of a dense matrix.

    ``dense_svd`` is exact; ``power`` runs alternating power iteration and
    is a lower estimate that converges from below.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError("operator_norm expects a matrix")
    if matrix.size == 0:
        return 0.0
    if not np.all(np.isfinite(matrix)):
        raise NonFiniteError("matrix contains non-finite entries")
    if method == "dense_svd":
        return float(np.linalg.svd(matrix, compute_uv=False)[0])
    if method != "power":
        raise DomainError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(matrix.shape[1])
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return 0.0
    v /= norm
    for _ in range(max(1, iterations)):
        u = matrix @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = matrix.T @ (u / nu)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
    return float(np.linalg.norm(matrix @ v))


def top_singular_triple(matrix: np.ndarray):
    """(sigma, u, v) for the top singular direction of a dense matrix."""
    u, s, vh = np.linalg.svd(np.asarray(matrix, dtype=np.float64), full_matrices=False)
    return float(s[0]), u[:, 0], vh[0]


# ---------------------------------------------------------------------------
# search configuration and results


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for the adversarial bound search.

    ``gradient`` selects how ascent directions are obtained: ``backprop``
    differentiates a two-point secant surrogate of the top singular value
    through the modifier's backward pass (two forward and two backward
    passes per step), ``fd`` takes central differences of the objective
    itself (one Jacobian per coordinate per step, exact but far slower).
    Both climb the same objective; ``fd`` exists as the cross-check.
    """

    restarts: int = 100
    max_iterations: int = 100
    step_size: float = 0.1
    termination_threshold: float = 5.0
    fd_epsilon: float = 1e-5
    input_scale: float = 1.0
    seed: int = 0
    gradient: str = "backprop"

    def __post_init__(self):
        if self.restarts < 1 or self.max_iterations < 0:
            raise DomainError("restarts must be >= 1 and max_iterations >= 0")
        if self.step_size <= 0.0 or self.fd_epsilon <= 0.0 or self.input_scale <= 0.0:
            raise DomainError("step_size, fd_epsilon and input_scale must be positive")
        if self.termination_threshold <= 0.0:
            raise DomainError("termination_threshold must be positive")
        if self.gradient not in ("backprop", "fd"):
            raise DomainError(f"gradient must be 'backprop' or 'fd', got {self.gradient!r}")


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    value: float
    iterations: int
    terminated_early: bool
    wall_time: float


@dataclass(frozen=True, eq=False)
class LipschitzEstimate:
    """Outcome of one ``estimate_B`` run.

    ``value`` is the largest Jacobian norm found, an empirical lower bound
    on the true Lipschitz constant.  ``certified_bound`` is the family's
    theoretical upper bound, or None when the family certifies nothing.
    """

    value: float
    certified_bound: Optional[float]
    witness_values: np.ndarray
    witness_parameters: np.ndarray
    witness_trial: int
    records: tuple

    @property
    def trials(self) -> int:
        return len(self.records)

    @property
    def total_iterations(self) -> int:
        return sum(r.iterations for r in self.records)

    def violates_bound(self, tolerance: float = 0.01) -> bool:
        """True when the empirical value exceeds the certificate it should obey."""
        if self.certified_bound is None:
            return False
        return self.value > self.certified_bound + tolerance


# ---------------------------------------------------------------------------
# modifier families


@dataclass(frozen=True, eq=False)
class ModifierFamily:
    """A parametric set of modifiers sharing one architecture kind.

    ``sample_parameters`` draws a flat parameter vector, ``build`` turns one
    into a concrete architecture, and ``project`` (optional) maps parameters
    back onto the feasible set after each ascent step; constrained families
    use it to keep every inner layer inside the unit operator-norm ball so
    that ``certified_bound`` stays valid throughout the search.
    """

    kind: str
    input_shape: tuple
    parameter_count: int
    sample_parameters: Callable[[np.random.Generator], np.ndarray]
    build: Callable[[np.ndarray], ModifierArchitecture]
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None
    certified_bound: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"kind must be one of {KINDS}, got {self.kind!r}")
        shape = tuple(int(s) for s in self.input_shape)
        if not shape or any(s <= 0 for s in shape):
            raise ShapeError("input_shape must be nonempty and positive")
        object.__setattr__(self, "input_shape", shape)
        if self.parameter_count < 0:
            raise DomainError("parameter_count must be nonnegative")


def conv2d_family(
    kind: str,
    scale: float = 1.0,
    constrained: Optional[bool] = None,
    hidden_channels: tuple = (3, 3),
    kernel_size: int = 3,
    input_shape: tuple = (4, 4),
    use_bias: Optional[bool] = None,
    label: str = "",
) -> ModifierFamily:
    """Small 2-D convolutional inner nets on single-channel magnitude patches.

    Hidden layers are SoftPlus (the search needs a smooth map), the final
    layer is linear, and ``scale`` multiplies the net output.  Constrained
    families (the default for safeguarded kinds) project every layer onto
    the unit operator-norm ball, so the inner map is ``scale``-Lipschitz and
    the family carries the matching certified bound.  Unconstrained
    families default to biased layers, giving the search the offsets it
    needs to expose unguarded blow-ups near zero.
    """
    if kind not in KINDS:
        raise DomainError(f"kind must be one of {KINDS}, got {kind!r}")
    if constrained is None:
        constrained = kind in SAFEGUARDED_KINDS
    if use_bias is None:
        use_bias = not constrained
    if scale <= 0.0:
        raise DomainError("scale must be positive")
    spatial = tuple(int(s) for s in input_shape)
    if len(spatial) != 2:
        raise ShapeError("conv2d_family expects a 2-D input_shape")

    chain = (1,) + tuple(int(c) for c in hidden_channels) + (1,)
    layers = []
    for index, (c_in, c_out) in enumerate(zip(chain, chain[1:])):
        act = IDENTITY if index == len(chain) - 2 else SOFTPLUS
        bias = np.zeros(c_out) if use_bias else None
        layers.append(
            ConvLayer(np.zeros((c_out, c_in, kernel_size, kernel_size)), bias, activation=act)
        )
    template = ConvNet(tuple(layers), scale=scale)

    def sample_parameters(rng: np.random.Generator) -> np.ndarray:
        parts = []
        for layer in template.layers:
            fan_in = layer.weights.shape[1] * layer.weights.shape[2] * layer.weights.shape[3]
            parts.append(rng.standard_normal(layer.weights.size) / np.sqrt(fan_in))
            if layer.bias is not None:
                parts.append(0.3 * rng.standard_normal(layer.bias.size))
        return np.concatenate(parts)

    def build(theta: np.ndarray) -> ModifierArchitecture:
        return ModifierArchitecture(kind, NetMap(template.with_parameters(theta)))

    project = None
    if constrained:

        def project(theta: np.ndarray) -> np.ndarray:
            net = template.with_parameters(theta)
            parts = []
            for layer in net.layers:
                norm = circulant_operator_norm(layer, spatial)
                w = layer.weights
                if norm > 1.0:
                    w = w / (norm * (1.0 + 1e-12))
                parts.append(w.reshape(-1))
                if layer.bias is not None:
                    parts.append(layer.bias)
            return np.concatenate(parts)

    certified = None
    if constrained and kind == "lipsam_se":
        certified = float(np.sqrt(scale * scale + 1.0))
    elif constrained and kind == "lipsam_re":
        certified = float(scale + 1.0)

    return ModifierFamily(
        kind=kind,
        input_shape=spatial,
        parameter_count=template.parameter_count,
        sample_parameters=sample_parameters,
        build=build,
        project=project,
        certified_bound=certified,
        label=label or kind,
    )


def fixed_modifier_family(
    arch: ModifierArchitecture, input_shape: tuple, label: str = ""
) -> ModifierFamily:
    """Wrap one concrete modifier so the search optimizes inputs only."""
    try:
        bound = theoretical_bound(arch)
    except (UnboundedModifierError, UncertifiedError):
        bound = None
    return ModifierFamily(
        kind=arch.kind,
        input_shape=tuple(input_shape),
        parameter_count=0,
        sample_parameters=lambda rng: np.zeros(0),
        build=lambda theta: arch,
        project=None,
        certified_bound=bound,
        label=label or arch.kind,
    )


# ---------------------------------------------------------------------------
# gradient machinery


def _scalar_vjp(arch: ModifierArchitecture, z: np.ndarray, u: np.ndarray):
    """Gradients of Re<u, D(z)> with respect to net parameters and z.

    The modifier splits into amplitude times phase, D(z) = A(|z|) * sign(z),
    so with c = Re(conj(u) * sign(z)) the objective is sum(c * A(|z|)).  The
    amplitude path backpropagates through the architecture; the phase path
    contributes a * (u - c * sign(z)) / |z| on nonzero coordinates, and the
    zero subgradient is used at z = 0 where sign is flat.

    Returns (flat parameter gradient, complex z gradient) where the complex
    array packs d/dRe as the real part and d/dIm as the imaginary part.
    """
    x = np.abs(z)
    s = complex_sign(z)
    a, cache = _amplitude_with_cache(arch, x)
    c = np.real(np.conj(u) * s)
    param_grads, grad_x = amplitude_backward(arch, cache, c)
    grad_z = grad_x * s
    nonzero = x > 0.0
    grad_z[nonzero] += a[nonzero] * (u[nonzero] - c[nonzero] * s[nonzero]) / x[nonzero]
    if param_grads is None:
        flat = np.zeros(0)
    else:
        flat = np.concatenate([g.reshape(-1) for g in param_grads])
    return flat, grad_z


def _objective(family: ModifierFamily, theta: np.ndarray, z: np.ndarray, epsilon: float):
    """(sigma, u, v) of the modifier Jacobian, or (nan, None, None) if sick."""
    try:
        jac = modifier_jacobian(family.build(theta), z, epsilon)
        sigma, u, v = top_singular_triple(jac)
    except (NonFiniteError, np.linalg.LinAlgError):
        return float("nan"), None, None
    if not np.isfinite(sigma):
        return float("nan"), None, None
    return sigma, u, v


def _ascent_gradient(family, theta, z, u, v, sigma, config):
    """Ascent direction on (z, theta), complex z part plus flat theta part."""
    shape = family.input_shape
    if config.gradient == "backprop":
        u_c = unrealify(u, shape)
        v_c = unrealify(v, shape)
        eps = config.fd_epsilon
        grad_z = np.zeros(shape, dtype=np.complex128)
        grad_t = np.zeros(family.parameter_count)
        arch = family.build(theta)
        for sign in (1.0, -1.0):
            flat, gz = _scalar_vjp(arch, z + sign * eps * v_c, u_c)
            grad_z += (sign / (2.0 * eps)) * gz
            # a fixed family carries no search parameters even when the
            # wrapped net itself has weights, so key off grad_t, not flat
            if grad_t.size and flat.size:
                grad_t += (sign / (2.0 * eps)) * flat
        return grad_z, grad_t
    # objective finite differences, one evaluation pair per coordinate
    h = config.fd_epsilon
    zr = realify(z)
    grad_flat = np.zeros(zr.size + theta.size)
    for j in range(grad_flat.size):
        point = np.concatenate([zr, theta])
        point[j] += h
        hi, _, _ = _objective(family, point[zr.size :], unrealify(point[: zr.size], shape), h)
        point[j] -= 2.0 * h
        lo, _, _ = _objective(family, point[zr.size :], unrealify(point[: zr.size], shape), h)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            return None, None
        grad_flat[j] = (hi - lo) / (2.0 * h)
    return unrealify(grad_flat[: zr.size], shape), grad_flat[zr.size :]


def _run_trial(family: ModifierFamily, config: SearchConfig, trial: int):
    start = time.perf_counter()
    rng = np.random.default_rng([config.seed, trial])
    shape = family.input_shape
    # Redraw dead starts: a start whose amplitude vanishes on the whole patch
    # has an exactly zero Jacobian and no ascent direction.
    for _ in range(20):
        theta = family.sample_parameters(rng)
        if family.project is not None:
            theta = family.project(theta)
        z = config.input_scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        sigma, u, v = _objective(family, theta, z, config.fd_epsilon)
        if np.isfinite(sigma) and sigma > 1e-9:
            break
    if not np.isfinite(sigma):
        record = TrialRecord(trial, float("nan"), 0, False, time.perf_counter() - start)
        return record, z, theta
    iterations = 0
    early = sigma > config.termination_threshold
    step = config.step_size
    while not early and iterations < config.max_iterations:
        iterations += 1
        grad_z, grad_t = _ascent_gradient(family, theta, z, u, v, sigma, config)
        if grad_z is None or not (
            np.all(np.isfinite(grad_z)) and np.all(np.isfinite(grad_t))
        ):
            break
        norm = np.sqrt(np.sum(np.abs(grad_z) ** 2) + np.sum(grad_t**2))
        if norm == 0.0:
            break
        # normalized direction with an adaptive trust region: double the step
        # after a success, backtrack while the objective refuses to climb
        accepted = False
        while step >= _STEP_FLOOR:
            z_new = z + (step / norm) * grad_z
            theta_new = theta + (step / norm) * grad_t
            if family.project is not None:
                theta_new = family.project(theta_new)
            sigma_new, u_new, v_new = _objective(family, theta_new, z_new, config.fd_epsilon)
            if np.isfinite(sigma_new) and sigma_new > sigma:
                z, theta, sigma, u, v = z_new, theta_new, sigma_new, u_new, v_new
                accepted = True
                step *= 2.0
                break
            step *= 0.5
        if not accepted:
            break
        if sigma > config.termination_threshold:
            early = True
    record = TrialRecord(trial, float(sigma), iterations, early, time.perf_counter() - start)
    return record, z, theta


def estimate_B(family: ModifierFamily, config: SearchConfig) -> LipschitzEstimate:
    """Adversarial lower bound on the Lipschitz constant of a modifier family.

    Runs ``config.restarts`` independent trials of projected gradient ascent
    on the top singular value of the realified Jacobian, each seeded from
    ``(config.seed, trial)`` so results are reproducible bit for bit.  Tri-
    als stop early once the objective clears ``termination_threshold``: by
    then the family is already past every certificate of interest.

    The gradient modes need a smooth inner map, so inner nets must avoid
    leaky relu activations; certify those with ``pairwise_quotient_search``.
    """
    probe = family.build(family.sample_parameters(np.random.default_rng([config.seed, 0])))
    if isinstance(probe.inner, NetMap):
        for layer in probe.inner.net.layers:
            if layer.activation.kind == "leaky_relu":
                raise DomainError(
                    "estimate_B differentiates the inner net and needs smooth "
                    "activations; use pairwise_quotient_search for leaky relu"
                )

    records = []
    best = None
    for trial in range(config.restarts):
        record, z, theta = _run_trial(family, config, trial)
        records.append(record)
        if np.isfinite(record.value) and (best is None or record.value > best[0]):
            best = (record.value, z, theta, trial)
    if best is None:
        raise NonFiniteError("every search trial produced a non-finite objective")
    value, z, theta, trial = best
    return LipschitzEstimate(
        value=float(value),
        certified_bound=family.certified_bound,
        witness_values=z,
        witness_parameters=theta,
        witness_trial=trial,
        records=tuple(records),
    )


# ---------------------------------------------------------------------------
# difference-quotient search (no smoothness assumptions)


@dataclass(frozen=True, eq=False)
class QuotientEstimate:
    """Best difference quotient found, with the realified witness pair."""

    value: float
    left: np.ndarray
    right: np.ndarray
    trials: int
    iterations: int


def pairwise_quotient_search(mapping: RealifiedMap, config: SearchConfig) -> QuotientEstimate:
    """Coordinate hill climbing on ||f(x) - f(y)|| / ||x - y||.

    Works for any realified map, smooth or not.  Each restart draws a random
    pair and greedily perturbs single coordinates of either point, halving
    the step once a sweep yields no improvement.  The result is a lower
    bound on the Lipschitz constant with the achieving pair attached.
    """
    dim = mapping.dimension
    best_value = -np.inf
    best_pair = None
    total_sweeps = 0
    for restart in range(config.restarts):
        rng = np.random.default_rng([config.seed, restart])
        x = config.input_scale * rng.standard_normal(dim)
        y = config.input_scale * rng.standard_normal(dim)
        while np.linalg.norm(x - y) < 1e-9:
            y = y + config.input_scale * rng.standard_normal(dim)
        fx, fy = mapping(x), mapping(y)

        def quotient(fx_, fy_, x_, y_):
            gap = np.linalg.norm(x_ - y_)
            if gap < 1e-12:
                return -np.inf
            return float(np.linalg.norm(fx_ - fy_) / gap)

        value = quotient(fx, fy, x, y)
        step = config.step_size * config.input_scale
        for _ in range(config.max_iterations):
            total_sweeps += 1
            improved = False
            for j in range(dim):
                for sign in (1.0, -1.0):
                    x_try = x.copy()
                    x_try[j] += sign * step
                    fx_try = mapping(x_try)
                    v = quotient(fx_try, fy, x_try, y)
                    if v > value:
                        x, fx, value = x_try, fx_try, v
                        improved = True
                    y_try = y.copy()
                    y_try[j] += sign * step
                    fy_try = mapping(y_try)
                    v = quotient(fx, fy_try, x, y_try)
                    if v > value:
                        y, fy, value = y_try, fy_try, v
                        improved = True
            if value > config.termination_threshold:
                break
            if not improved:
                step *= 0.5
                if step < _STEP_FLOOR:
                    break
        if value > best_value:
            best_value = value
            best_pair = (x.copy(), y.copy())
        if best_value > config.termination_threshold:
            break
    return QuotientEstimate(
        value=float(best_value),
        left=best_pair[0],
        right=best_pair[1],
        trials=config.restarts,
        iterations=total_sweeps,
    )


# ---------------------------------------------------------------------------
# analytic counterexamples for the unguarded architectures


def _pair_quotient(arch: ModifierArchitecture, z: np.ndarray, w: np.ndarray) -> float:
    num = np.linalg.norm(apply_to_values(arch, z) - apply_to_values(arch, w))
    return float(num / np.linalg.norm(z - w))


def counterexample_bias(epsilon: float = 1e-3, bias: float = 1.0) -> float:
    """Difference quotient (bias + eps) / eps of a biased spectral estimator.

    The inner map adds a constant, so amplitudes near zero stay pinned at
    ``bias`` while the phase flips sign across the origin: the quotient at
    the pair (eps, -eps) grows without bound as eps shrinks.  The analytic
    value is asserted against the measured one before returning it.
    """
    if epsilon <= 0.0 or bias <= 0.0:
        raise DomainError("epsilon and bias must be positive")
    arch = ModifierArchitecture("am_se", BiasAdd(bias))
    z = np.array([complex(epsilon, 0.0)])
    w = np.array([complex(-epsilon, 0.0)])
    measured = _pair_quotient(arch, z, w)
    expected = (bias + epsilon) / epsilon
    if abs(measured - expected) > 1e-9 * expected:
        raise AssertionError(
            f"bias counterexample drifted: measured {measured!r}, expected {expected!r}"
        )
    return measured


def counterexample_permutation(epsilon: float = 1e-3) -> float:
    """Difference quotient 1 / eps of a coefficient-swapping estimator.

    Swapping two bins hands the small coordinate's phase to the large
    coordinate's amplitude: at the pair ((eps, 1), (-eps, 1)) the outputs
    differ by 2 while the inputs differ by 2 eps.  The analytic value is
    asserted against the measured one before returning it.
    """
    if epsilon <= 0.0:
        raise DomainError("epsilon must be positive")
    arch = ModifierArchitecture("am_se", PermutationMap(np.array([1, 0])))
    z = np.array([complex(epsilon, 0.0), 1.0 + 0.0j])
    w = np.array([complex(-epsilon, 0.0), 1.0 + 0.0j])
    measured = _pair_quotient(arch, z, w)
    expected = 1.0 / epsilon
    if abs(measured - expected) > 1e-9 * expected:
        raise AssertionError(
            f"permutation counterexample drifted: measured {measured!r}, expected {expected!r}"
        )
    return measured
