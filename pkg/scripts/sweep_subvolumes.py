"""Segmentation accuracy and wall-clock time against the number of sampled subvolumes N.

    python3 scripts/sweep_subvolumes.py runs/desk/model.ckpt --n 0 8 50 200 1000
"""
import argparse
from dataclasses import replace

from meshnet.checkpoint import load_checkpoint
from meshnet.experiment import DeskConfig, segment_phantom
from meshnet.metrics import evaluate
from meshnet.phantom import make_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, nargs="+", default=[0, 8, 50, 200])
    p.add_argument("--seed", type=int, default=1)
    args = p.parse_args()

    spec, params, manifest = load_checkpoint(args.checkpoint)
    cfg = DeskConfig()
    side = manifest.get("extra", {}).get("sampler", {}).get("side", cfg.side)
    cfg = replace(cfg, side=side)
    phantoms = make_dataset(cfg.phantom)
    print(f"{'N':>6} {'refs':>6} {'seconds':>8} {'mean dice':>10}  per phantom")
    for n in args.n:
        total, dices = 0.0, []
        for i in cfg.test_indices:
            labels, secs = segment_phantom(cfg, spec, params, phantoms[i], n, seed=args.seed)
            total += secs
            dices.append(evaluate(labels, phantoms[i].clean).mean_dice())
        grid = (-(-64 // side)) ** 3
        print(f"{n:>6} {grid + n:>6} {total:>8.1f} {sum(dices) / len(dices):>10.4f}  "
              + " ".join(f"{d:.4f}" for d in dices))


if __name__ == "__main__":
    main()
