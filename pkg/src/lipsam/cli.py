"""Command-line entry point: experiments as subcommands with CSV outputs.

Every subcommand reads optional parameters from a strict JSON config
(unknown keys are rejected before any computation), takes its seed from
--seed, and writes machine-readable CSV. Exit codes: 0 success, 1 usage or
configuration error, 2 assertion or bound violation, 3 divergence only.
"""

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    InvalidWindowError,
    NonFiniteError,
    ShapeError,
    UndefinedMetricError,
)
from .lipschitz import (
    RealifiedMap,
    SearchConfig,
    conv2d_family,
    counterexample_bias,
    counterexample_permutation,
    estimate_B,
    fixed_modifier_family,
    pairwise_quotient_search,
)
from .modifier import KINDS, NetMap, architecture_from_config, theoretical_bound
from .pnp import Observation, SolverConfig, lambda_sweep, precompute_inverse_filter, run
from .signal import StftConfig, TimeSignal, istft, read_wav, stft, write_wav
from .trainer import SynthCorpusConfig, TrainConfig, train_denoiser
from .errors import UnboundedModifierError, UncertifiedError
from .network import load_net, save_net

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VIOLATION = 2
EXIT_DIVERGED = 3

BOUND_TOLERANCE = 0.01


# ---------------------------------------------------------------------------
# CSV and config plumbing


def _format_cell(value) -> str:
    """Deterministic CSV cell: NaN literal, lowercase booleans, repr floats."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "NaN"
        return repr(value)
    return str(value)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(cell) for cell in row])


def _load_json(path) -> dict:
    try:
        with open(path) as handle:
            document = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(document, dict):
        raise ConfigError("config document must be a JSON object")
    return document


def _load_config(path, allowed) -> dict:
    """Strict schema gate: any key outside ``allowed`` rejects the document."""
    if path is None:
        return {}
    document = _load_json(path)
    unknown = sorted(set(document) - set(allowed))
    if unknown:
        raise ConfigError(
            f"unknown config keys {unknown}; allowed keys are {sorted(allowed)}"
        )
    return document


def _pick(args_value, config, key, default):
    """Resolution order: explicit CLI flag, then config file, then default."""
    if args_value is not None:
        return args_value
    if key in config:
        return config[key]
    return default


def _out_path(args, name_or_path) -> Path:
    path = Path(name_or_path)
    if not path.is_absolute():
        path = Path(args.out_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _stft_from_config(config: dict) -> StftConfig:
    return StftConfig(
        window_length=int(config.get("window_length", 512)),
        hop=int(config.get("hop", 256)),
    )


# ---------------------------------------------------------------------------
# validate-bounds

_VALIDATE_KEYS = ("restarts", "max_iterations", "scales", "step_size", "termination_threshold")


def _bounds_task(task):
    """One architecture x constraint x scale cell; primitives only, so the
    task can cross a process boundary."""
    kind, constrained, scale, restarts, iterations, step, threshold, seed = task
    family = conv2d_family(kind, scale=scale, constrained=constrained)
    config = SearchConfig(
        restarts=restarts,
        max_iterations=iterations,
        step_size=step,
        termination_threshold=threshold,
        seed=seed,
    )
    estimate = estimate_B(family, config)
    bound = estimate.certified_bound
    rows = [
        (
            kind,
            constrained,
            scale,
            record.trial,
            record.value,
            float("nan") if bound is None else bound,
            record.terminated_early,
            record.iterations,
        )
        for record in estimate.records
    ]
    violated = bound is not None and estimate.value > bound + BOUND_TOLERANCE
    return rows, (kind, constrained, scale, estimate.value, bound, violated)


def cmd_validate_bounds(args) -> int:
    config = _load_config(args.config, _VALIDATE_KEYS)
    restarts = int(_pick(None, config, "restarts", 100))
    iterations = int(_pick(None, config, "max_iterations", 100))
    scales = [float(s) for s in _pick(None, config, "scales", [0.5, 1.0, 2.0, 4.0])]
    step = float(_pick(None, config, "step_size", 0.1))
    threshold = float(_pick(None, config, "termination_threshold", 5.0))

    tasks = []
    index = 0
    for kind in KINDS:
        for constrained in (True, False):
            for scale in scales:
                tasks.append(
                    (kind, constrained, scale, restarts, iterations, step, threshold,
                     args.seed + index)
                )
                index += 1

    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            outcomes = list(pool.map(_bounds_task, tasks))
    else:
        outcomes = [_bounds_task(task) for task in tasks]

    rows = [row for cell_rows, _ in outcomes for row in cell_rows]
    csv_path = _out_path(args, "validate_bounds.csv")
    write_csv(
        csv_path,
        ("architecture", "constrained", "scale", "trial", "empirical_B",
         "theoretical_bound", "terminated_early", "iterations"),
        rows,
    )

    violations = 0
    for _, (kind, constrained, scale, best, bound, violated) in outcomes:
        if bound is None:
            verdict = "unbounded"
            bound_text = "NaN"
        else:
            verdict = "FAIL" if violated else "PASS"
            bound_text = f"{bound:.6f}"
        print(
            f"{kind} scale={scale:g} constrained={str(constrained).lower()}: "
            f"max B {best:.6f} bound {bound_text} {verdict}"
        )
        violations += int(violated)
    print(f"wrote {csv_path}")
    if violations:
        print(f"{violations} cell(s) exceeded their certified bound", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_TRAIN_KEYS = (
    "batch_size", "learning_rate", "snr_range", "frames", "channel_width",
    "kernel_size", "window_length", "hop", "item_count", "duration_seconds",
    "corpus_seed", "epochs", "arch", "lipschitz",
)


def cmd_train(args) -> int:
    config = _load_config(args.config, _TRAIN_KEYS)
    stft_config = _stft_from_config(config)
    train_config = TrainConfig(
        epochs=int(_pick(args.epochs, config, "epochs", 2)),
        batch_size=int(_pick(None, config, "batch_size", 32)),
        learning_rate=float(_pick(None, config, "learning_rate", 1e-4)),
        snr_range=tuple(_pick(None, config, "snr_range", (20.0, 40.0))),
        frames=int(_pick(None, config, "frames", 32)),
        arch=_pick(args.arch, config, "arch", "re"),
        lipschitz=_pick(args.lipschitz, config, "lipschitz", "none"),
        channel_width=int(_pick(None, config, "channel_width", 64)),
        kernel_size=int(_pick(None, config, "kernel_size", 5)),
        seed=args.seed,
        stft=stft_config,
    )
    corpus = SynthCorpusConfig(
        item_count=int(_pick(None, config, "item_count", 64)),
        duration_seconds=float(
            _pick(None, config, "duration_seconds",
                  train_config.segment_samples / 8000.0)
        ),
        seed=int(_pick(None, config, "corpus_seed", args.seed)),
    )

    result = train_denoiser(train_config, corpus)

    weights_path = _out_path(args, args.out)
    save_net(
        weights_path,
        result.net,
        metadata={
            "kind": result.modifier_kind,
            "arch": result.arch,
            "lipschitz": result.lipschitz,
            "window_length": stft_config.window_length,
            "hop": stft_config.hop,
            "best_epoch": result.best_epoch,
        },
    )
    log_path = _out_path(args, "train_log.csv")
    write_csv(
        log_path,
        ("epoch", "train_loss", "val_loss"),
        [(row["epoch"], row["train_loss"], row["val_loss"]) for row in result.log],
    )
    # Deployment config for the safeguarded wrapper around the trained net,
    # directly consumable by dereverb, sweep-lambda, and certify. The plain
    # trained kind is deliberately not emitted here: wrapping it is a choice
    # the user should make knowing it carries no certified bound.
    deploy_path = weights_path.with_name(weights_path.stem + ".deploy.json")
    deploy_document = {
        "kind": "lipsam_" + result.arch,
        "inner": {"variant": "net", "file": weights_path.name},
    }
    with open(deploy_path, "w", encoding="utf-8") as handle:
        json.dump(deploy_document, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(
        f"status {result.status}: best epoch {result.best_epoch}, "
        f"validation loss {result.best_val_loss:.4f}"
    )
    print(f"wrote {weights_path}")
    print(f"wrote {log_path}")
    print(f"wrote {deploy_path}")
    if result.status != "completed":
        print(f"training aborted at {result.poisoned_at}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# dereverb and sweep-lambda

_DEREVERB_KEYS = ("lambda", "iters", "window_length", "hop")
_SWEEP_KEYS = ("grid", "iters", "window_length", "hop")


def _load_denoiser(path):
    document = _load_json(path)
    try:
        return architecture_from_config(document, base_dir=Path(path).parent)
    except (KeyError, DomainError, ShapeError, FormatError) as exc:
        raise ConfigError(f"invalid denoiser config {path}: {exc}")


def _observation_from_files(input_path, rir_path) -> Observation:
    return Observation(read_wav(input_path), read_wav(rir_path))


def cmd_dereverb(args) -> int:
    config = _load_config(args.config, _DEREVERB_KEYS)
    lam = float(_pick(args.lam, config, "lambda", 1.0))
    iters = int(_pick(args.iters, config, "iters", 500))
    observation = _observation_from_files(args.input, args.rir)
    denoiser = _load_denoiser(args.denoiser)
    reference = read_wav(args.reference) if args.reference else None
    solver = SolverConfig(lam=lam, max_iterations=iters, stft=_stft_from_config(config))

    result = run(observation, denoiser, solver, reference=reference)

    out_path = _out_path(args, args.out)
    write_wav(out_path, result.x_hat)
    print(f"wrote {out_path}")
    if args.trace:
        header = ["iteration", "delta_x"]
        rows = [[k + 1, d] for k, d in enumerate(result.delta_x)]
        if result.si_snr_trace is not None:
            header.append("si_snr")
            for row, value in zip(rows, result.si_snr_trace):
                row.append(value)
        trace_path = _out_path(args, args.trace)
        write_csv(trace_path, header, rows)
        print(f"wrote {trace_path}")
    print(f"status {result.status_text} after {result.iterations} iteration(s)")
    if result.diverged:
        return EXIT_DIVERGED
    return EXIT_OK


def parse_lambda_grid(text: str) -> np.ndarray:
    """Grid syntax: 'lo:hi:Nlog', 'lo:hi:Nlin' (or bare N, linear), or a
    single value."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            return np.array([float(parts[0])])
        if len(parts) != 3:
            raise ValueError
        lo, hi = float(parts[0]), float(parts[1])
        count_text = parts[2]
        spacing = "lin"
        if count_text.endswith("log"):
            spacing, count_text = "log", count_text[:-3]
        elif count_text.endswith("lin"):
            count_text = count_text[:-3]
        count = int(count_text)
        if count < 1 or lo <= 0.0 and spacing == "log":
            raise ValueError
        if spacing == "log":
            return np.logspace(np.log10(lo), np.log10(hi), count)
        return np.linspace(lo, hi, count)
    except ValueError:
        raise ConfigError(
            f"cannot parse lambda grid {text!r}; expected 'lo:hi:Nlog', 'lo:hi:Nlin', or a number"
        )


def cmd_sweep_lambda(args) -> int:
    config = _load_config(args.config, _SWEEP_KEYS)
    grid = parse_lambda_grid(str(_pick(args.grid, config, "grid", "1e-3:1e2:26log")))
    iters = int(_pick(args.iters, config, "iters", 500))
    observation = _observation_from_files(args.input, args.rir)
    denoiser = _load_denoiser(args.denoiser)
    reference = read_wav(args.reference) if args.reference else None
    solver = SolverConfig(lam=1.0, max_iterations=iters, stft=_stft_from_config(config))

    results = lambda_sweep(observation, denoiser, grid, solver, reference=reference)

    csv_path = _out_path(args, args.out)
    write_csv(
        csv_path,
        ("lambda", "final_si_snr", "status", "best"),
        [(r["lambda"], r["final_si_snr"], r["status"], r["best"]) for r in results],
    )
    print(f"wrote {csv_path}")
    for r in results:
        if r["best"]:
            print(f"best lambda {r['lambda']:g} with SI-SNR {r['final_si_snr']:.4f}")
    if all(r["status"].startswith("diverged") for r in results):
        return EXIT_DIVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# certify

_CERTIFY_KEYS = ("restarts", "max_iterations", "frames", "shape")


def _certify_input_shape(arch, args, config) -> tuple:
    shape_text = _pick(args.shape, config, "shape", None)
    if shape_text is not None:
        try:
            dims = tuple(int(d) for d in str(shape_text).lower().split("x"))
        except ValueError:
            raise ConfigError(f"cannot parse shape {shape_text!r}; expected e.g. '4x4'")
        if len(dims) != 2 or min(dims) < 1:
            raise ConfigError("shape must be two positive dimensions, e.g. '4x4'")
        return dims
    # Default small: the derivative-free fallback for non-smooth nets scales
    # with the coordinate count, so wide default shapes would crawl.
    frames = int(_pick(None, config, "frames", 8))
    if isinstance(arch.inner, NetMap) and not arch.inner.net.is_2d:
        return (arch.inner.net.in_channels, frames)
    return (4, 4)


def cmd_certify(args) -> int:
    config = _load_config(args.config, _CERTIFY_KEYS)
    arch = _load_denoiser(args.modifier)
    shape = _certify_input_shape(arch, args, config)
    restarts = int(_pick(args.restarts, config, "restarts", 8))
    iterations = int(_pick(None, config, "max_iterations", 40))
    scale = arch.inner.net.scale if isinstance(arch.inner, NetMap) else float("nan")
    try:
        bound = theoretical_bound(arch)
    except (UnboundedModifierError, UncertifiedError):
        bound = float("nan")

    search = SearchConfig(restarts=restarts, max_iterations=iterations, seed=args.seed)
    try:
        estimate = estimate_B(fixed_modifier_family(arch, shape), search)
        best = estimate.value
        rows = [
            (record.trial, arch.kind, scale, record.value, bound,
             record.terminated_early, record.wall_time)
            for record in estimate.records
        ]
    except DomainError:
        # Non-smooth inner nets fall back to the derivative-free search.
        print("non-smooth inner map: using the pairwise quotient search")
        quotient = pairwise_quotient_search(RealifiedMap.from_modifier(arch, shape), search)
        best = quotient.value
        rows = [(0, arch.kind, scale, quotient.value, bound, False, float("nan"))]

    csv_path = _out_path(args, args.out)
    write_csv(
        csv_path,
        ("trial_id", "architecture", "scale", "empirical_B", "theoretical_bound",
         "terminated_early", "wall_time"),
        rows,
    )
    print(f"wrote {csv_path}")
    if math.isnan(bound):
        print(f"{arch.kind}: empirical B {best:.6f}, no certified bound")
        return EXIT_OK
    verdict = "PASS" if best <= bound + BOUND_TOLERANCE else "FAIL"
    print(f"{arch.kind}: empirical B {best:.6f} vs bound {bound:.6f} {verdict}")
    return EXIT_OK if verdict == "PASS" else EXIT_VIOLATION


# ---------------------------------------------------------------------------
# selfcheck

_CHECK_NAMES = ("stft-round-trip", "prox-closed-form", "inverse-filter", "counterexamples")


def _check_stft_round_trip(fault: bool):
    config = StftConfig()
    if fault:
        # Simulated corruption: denormalize the tight window after validation.
        object.__setattr__(config, "window", config.window * 1.0005)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        x = TimeSignal(rng.standard_normal(4096), 8000)
        back = istft(stft(x, config), config, 8000)
        worst = max(worst, float(np.max(np.abs(back.samples - x.samples))))
    return worst < 1e-10, f"max round-trip error {worst:.3e}"


def _check_prox_closed_form(fault: bool):
    import scipy.optimize

    from .pnp import AdmmState, u_update
    from .signal import circular_convolve

    rng = np.random.default_rng(1)
    rate = 8000
    small = StftConfig(window_length=16, hop=8)
    y = TimeSignal(rng.standard_normal(32), rate)
    h = TimeSignal(rng.standard_normal(4), rate)
    observation = Observation(y, h)
    zero_spec = stft(TimeSignal(np.zeros(32), rate), small)
    state = AdmmState(
        x=TimeSignal(rng.standard_normal(32), rate),
        u=y,
        v=zero_spec,
        xi1=TimeSignal(rng.standard_normal(32), rate),
        xi2=zero_spec,
    )
    worst = 0.0
    for lam in (1e-3, 1.0, 1e2):
        u = u_update(state, observation, lam).samples
        w = (
            circular_convolve(state.x, observation.h).samples
            + state.xi1.samples
            - y.samples
        )
        lam_oracle = lam * 1.01 if fault else lam

        solution = scipy.optimize.minimize(
            lambda p: np.sum(p * p) / (2.0 * lam_oracle) + 0.5 * np.sum((p - w) ** 2),
            np.zeros(w.size),
            jac=lambda p: p / lam_oracle + (p - w),
            method="BFGS",
            options={"gtol": 1e-14},
        )
        worst = max(worst, float(np.max(np.abs((u - y.samples) - solution.x))))
    return worst < 1e-8, f"max prox deviation {worst:.3e}"


def _check_inverse_filter(fault: bool):
    rng = np.random.default_rng(2)
    h = rng.standard_normal(8)
    filt = precompute_inverse_filter(TimeSignal(h, 8000), 48)
    if fault:
        filt = filt + 1e-3
    r = rng.standard_normal(48)
    fast = np.fft.ifft(np.fft.fft(r) * filt).real
    padded = np.zeros(48)
    padded[:8] = h
    dense_h = np.stack([np.roll(padded, k) for k in range(48)], axis=1)
    dense = np.linalg.solve(dense_h.T @ dense_h + np.eye(48), r)
    worst = float(np.max(np.abs(fast - dense)))
    return worst < 1e-8, f"max inverse-filter deviation {worst:.3e}"


def _check_counterexamples(fault: bool):
    bias = counterexample_bias(1e-3)
    permutation = counterexample_permutation(1e-3)
    expected_bias = 1001.0 + (0.5 if fault else 0.0)
    ok = (
        abs(bias - expected_bias) <= 1e-9 * expected_bias
        and abs(permutation - 1000.0) <= 1e-9 * 1000.0
    )
    return ok, f"bias 1e-3 -> {round(bias, 6)}, permutation 1e-3 -> {round(permutation, 6)}"


def cmd_selfcheck(args) -> int:
    checks = (
        ("stft-round-trip", _check_stft_round_trip),
        ("prox-closed-form", _check_prox_closed_form),
        ("inverse-filter", _check_inverse_filter),
        ("counterexamples", _check_counterexamples),
    )
    failures = 0
    for name, check in checks:
        ok, detail = check(fault=(args.inject_fault == name))
        print(f"check {name}: {'ok' if ok else 'FAIL'} ({detail})")
        failures += int(not ok)
    if failures:
        print(f"{failures} check(s) failed", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    """Routes argparse usage errors through the exit-code contract."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON parameter document (strict schema)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out-dir", default=".")

    parser = _Parser(prog="lipsam", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = commands.add_parser("validate-bounds", parents=[common],
                            help="empirical Lipschitz search over the architecture grid")
    p.set_defaults(handler=cmd_validate_bounds)

    p = commands.add_parser("train", parents=[common], help="train a denoiser")
    p.add_argument("--arch", choices=("se", "re"))
    p.add_argument("--lipschitz", choices=("none", "spectral"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="denoiser.npz")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("dereverb", parents=[common], help="run the ADMM solver")
    p.add_argument("--input", required=True)
    p.add_argument("--rir", required=True)
    p.add_argument("--denoiser", required=True, help="architecture config JSON")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--out", default="dereverbed.wav")
    p.add_argument("--trace", help="per-iteration trace CSV path")
    p.add_argument("--reference", help="clean WAV for SI-SNR tracing")
    p.set_defaults(handler=cmd_dereverb)

    p = commands.add_parser("sweep-lambda", parents=[common],
                            help="run the solver across a lambda grid")
    p.add_argument("--input", required=True)
    p.add_argument("--rir", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--grid", help="'lo:hi:Nlog', 'lo:hi:Nlin', or a single value")
    p.add_argument("--iters", type=int)
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--reference", help="clean WAV for SI-SNR ranking")
    p.set_defaults(handler=cmd_sweep_lambda)

    p = commands.add_parser("certify", parents=[common],
                            help="empirical Lipschitz estimate for a saved modifier")
    p.add_argument("--modifier", required=True, help="architecture config JSON")
    p.add_argument("--restarts", type=int)
    p.add_argument("--shape", help="complex input shape, e.g. '4x4'")
    p.add_argument("--out", default="certify.csv")
    p.set_defaults(handler=cmd_certify)

    p = commands.add_parser("selfcheck", parents=[common],
                            help="run the built-in oracle suites")
    p.add_argument("--inject-fault", choices=_CHECK_NAMES)
    p.set_defaults(handler=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        DomainError,
        ShapeError,
        FormatError,
        InvalidWindowError,
        UndefinedMetricError,
        NonFiniteError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
