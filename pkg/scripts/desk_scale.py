"""Desk-scale unsupervised run: train on simulated scenes, score held-out tracking.

    python3 scripts/desk_scale.py --iters 5000 --out runs/desk
"""

import argparse
import dataclasses
import json
import logging

from deeptrack.experiment import DESK_TRAIN, DeskScaleConfig, run_desk_scale
from deeptrack.sim import WorldConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=5000)
    ap.add_argument("--train-seqs", type=int, default=200)
    ap.add_argument("--test-seqs", type=int, default=20)
    ap.add_argument("--length", type=int, default=100)
    ap.add_argument("--max-objects", type=int, default=6)
    ap.add_argument("--shape", default="circle", choices=["circle", "square"])
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--optimizer", choices=["sgd", "rmsprop"], default=DESK_TRAIN.optimizer)
    ap.add_argument("--lr", type=float, default=DESK_TRAIN.lr)
    ap.add_argument("--init-scale", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = DeskScaleConfig(
        train_sequences=args.train_seqs, test_sequences=args.test_seqs, length=args.length,
        world=WorldConfig(min_objects=2, max_objects=args.max_objects, shape=args.shape, seed=args.seed),
        noise_rate=args.noise,
        train=dataclasses.replace(DESK_TRAIN, optimizer=args.optimizer, lr=args.lr,
                                  iterations=args.iters, init_scale=args.init_scale,
                                  seed=args.seed, checkpoint_every=500),
    )
    result = run_desk_scale(cfg, args.out)
    print(json.dumps(result.summary(), indent=2))


if __name__ == "__main__":
    main()
