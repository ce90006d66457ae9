"""Train matching plain and safeguarded denoisers, then compare them.

Trains one amplitude-modifier net on the synthetic speech-like corpus, wraps
the same weights both ways (plain and safeguarded), and evaluates output SNR
across a range of input noise levels.  The safeguarded wrapper reuses the
trained weights byte-for-byte, so the comparison isolates the safeguard
layers themselves.
"""

import argparse
from pathlib import Path

from lipsam.cli import write_csv
from lipsam.modifier import ModifierArchitecture, NetMap
from lipsam.network import save_net
from lipsam.signal import StftConfig
from lipsam.trainer import (
    SynthCorpusConfig,
    TrainConfig,
    evaluate_denoiser,
    synth_speechlike,
    train_denoiser,
)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--arch", choices=("se", "re"), default="re")
    parser.add_argument("--lipschitz", choices=("none", "spectral"), default="spectral")
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--items", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default="results")
    args = parser.parse_args()

    stft_config = StftConfig(window_length=64, hop=32)
    train_config = TrainConfig(
        epochs=args.epochs,
        batch_size=8,
        learning_rate=1e-2,
        frames=4,
        arch=args.arch,
        lipschitz=args.lipschitz,
        channel_width=16,
        kernel_size=5,
        seed=args.seed,
        stft=stft_config,
    )
    corpus = SynthCorpusConfig(
        item_count=args.items, duration_seconds=0.128, seed=args.seed
    )
    result = train_denoiser(train_config, corpus)
    print(
        f"training {result.status}: best epoch {result.best_epoch} "
        f"val loss {result.best_val_loss:.3f} dB"
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net_path = out_dir / f"denoiser_{args.arch}.npz"
    save_net(net_path, result.net, {"kind": result.modifier_kind})
    print(f"wrote {net_path}")

    eval_corpus = SynthCorpusConfig(item_count=32, duration_seconds=0.128, seed=args.seed + 1)
    items = [synth_speechlike(eval_corpus, i) for i in range(eval_corpus.item_count)]
    levels = [0.0, 10.0, 20.0, 30.0]

    rows = []
    for label, kind in (
        ("plain", result.modifier_kind),
        ("safeguarded", "lipsam_" + args.arch),
    ):
        arch = ModifierArchitecture(kind, NetMap(result.net))
        for row in evaluate_denoiser(arch, items, levels, stft_config, seed=args.seed):
            print(
                f"{label:12s} input {row['input_snr_db']:5.1f} dB -> "
                f"SNR {row['mean_snr_db']:6.2f} dB, SI-SNR {row['mean_si_snr_db']:6.2f} dB"
            )
            rows.append(
                (label, row["input_snr_db"], row["mean_snr_db"], row["mean_si_snr_db"])
            )
    csv_path = out_dir / "denoiser_evaluation.csv"
    write_csv(csv_path, ("wrapper", "input_snr_db", "mean_snr_db", "mean_si_snr_db"), rows)
    print(f"wrote {csv_path}")


if __name__ == "__main__":
    main()
