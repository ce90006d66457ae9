"""Full-budget empirical validation of the certified modifier bounds.

Runs the adversarial Jacobian-norm search over every architecture kind, both
with and without the spectral constraint, across a set of net output scales.
Safeguarded constrained cells must stay below their certified bound; the
unguarded cells document how often the search escapes past the termination
threshold.  Writes one CSV row per trial and prints a per-cell summary.

Default budget (100 restarts x 100 ascent steps) takes a couple of minutes
on a laptop CPU.
"""

import argparse
from pathlib import Path

import numpy as np

from lipsam.cli import write_csv
from lipsam.lipschitz import KINDS, SearchConfig, conv2d_family, estimate_B


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--restarts", type=int, default=100)
    parser.add_argument("--iterations", type=int, default=100)
    parser.add_argument("--scales", type=float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])
    parser.add_argument("--threshold", type=float, default=8.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default="results")
    args = parser.parse_args()

    out_dir = Path(args.out_dir)
    rows = []
    for kind in KINDS:
        for constrained in (True, False):
            for scale in args.scales:
                family = conv2d_family(kind, scale=scale, constrained=constrained)
                search = SearchConfig(
                    restarts=args.restarts,
                    max_iterations=args.iterations,
                    termination_threshold=args.threshold,
                    seed=args.seed,
                )
                estimate = estimate_B(family, search)
                finite = [r.value for r in estimate.records if np.isfinite(r.value)]
                worst = max(finite, default=float("nan"))
                escaped = sum(1 for v in finite if v > args.threshold)
                bound = estimate.certified_bound
                if bound is None:
                    verdict = f"unbounded, {escaped}/{len(estimate.records)} escaped"
                else:
                    verdict = "OK" if worst <= bound + 0.01 else "VIOLATION"
                    verdict += f" (bound {bound:.6f})"
                print(
                    f"{kind} scale={scale:g} constrained={constrained}: "
                    f"max B {worst:.6f} {verdict}"
                )
                for record in estimate.records:
                    rows.append(
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
                    )
    csv_path = out_dir / "bound_validation.csv"
    write_csv(
        csv_path,
        (
            "architecture",
            "constrained",
            "scale",
            "trial",
            "empirical_B",
            "theoretical_bound",
            "terminated_early",
            "iterations",
        ),
        rows,
    )
    print(f"wrote {csv_path}")


if __name__ == "__main__":
    main()
