"""Train every fusion variant for N = 1..4 on synthetic lesions and report held-out Dice.

Mirrors the decoder-count ablation at desk scale; absolute scores are not comparable
to dermoscopy results.
"""

import argparse
import time

from nablanet import data as D
from nablanet.config import RunConfig
from nablanet.train import evaluate_model, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--n-images", type=int, default=40)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    records = D.synth_lesions(args.n_images, args.size, seed=args.seed)
    plan = D.split(records, 0.8, args.seed)
    train_recs, test_recs = plan.partition(records)
    print(f"{'model':12s} {'test dice':>9s} {'micro iou':>9s} {'seconds':>8s}")
    for n in (1, 2, 3, 4):
        for variant in ("A", "B", "AB") if n > 1 else ("AB",):
            cfg = RunConfig(
                task="segment", variant=variant, n_decoders=n, widths=[4, 8, 16, 32, 64], input_size=args.size,
                epochs=args.epochs, lr=1e-3, val_fraction=0, seed=args.seed, output_dir="runs/ablation",
            )
            start = time.perf_counter()
            result = train(cfg, train_recs, write=False)
            micro = evaluate_model(result.model, test_recs).micro
            print(f"nabla-{n} {variant:4s} {micro.dice:9.4f} {micro.iou:9.4f} {time.perf_counter() - start:8.0f}")


if __name__ == "__main__":
    main()
