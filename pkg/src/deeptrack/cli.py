"""Command-line entry point: gen, train, filter, eval, render.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
``DT_SEED`` in the environment overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .dataio import read_dataset, write_dataset
from .evaluate import evaluate, filter_stream, predict_future, render_frame, write_frames
from .generate import generate_dataset
from .model import TrackerParams
from .sensor import SensorConfig
from .sim import WorldConfig
from .train import MODES, OPTIMIZERS, TrainConfig, train, write_loss_csv

log = logging.getLogger("deeptrack")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (env DT_SEED overrides)")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="deeptrack", description="Occupancy tracking with a recurrent conv net.")
    sub = ap.add_subparsers(dest="command", metavar="{gen,train,filter,eval,render}",
                            parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen", help="simulate sequences into a DTDS dataset")
    g.add_argument("--config", help="world config JSON (defaults: 50x50 grid, 2-12 objects)")
    g.add_argument("--sequences", type=int, default=10)
    g.add_argument("--length", type=int, default=100)
    g.add_argument("--noise-rate", type=float, default=0.0)
    g.add_argument("--out", required=True)
    _add_common(g)

    t = sub.add_parser("train", help="fit the tracker by truncated BPTT")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=MODES, default="unsupervised")
    t.add_argument("--iters", type=int, default=TrainConfig.iterations)
    t.add_argument("--lr", type=float, default=None,
                   help=f"step size (default {TrainConfig.lr} for sgd, 0.003 for rmsprop)")
    t.add_argument("--optimizer", choices=OPTIMIZERS, default=TrainConfig.optimizer)
    t.add_argument("--bptt", type=int, default=TrainConfig.bptt_len)
    t.add_argument("--dropout-len", type=int, default=TrainConfig.dropout_len)
    t.add_argument("--dropout-duty", type=float, default=TrainConfig.dropout_duty)
    t.add_argument("--init-scale", type=float, default=TrainConfig.init_scale)
    t.add_argument("--full-sequence", action="store_true", help="one window per whole sequence")
    t.add_argument("--sum-loss", action="store_true", help="sum BCE over cells and steps")
    t.add_argument("--no-prior-init", action="store_true",
                   help="keep the decoder bias at zero instead of the data's occupancy logit")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--init", help="resume from this checkpoint")
    t.add_argument("--out", required=True, help="checkpoint path (DTPK)")
    t.add_argument("--loss-csv", help="loss curve path (default: <out stem>_loss.csv)")
    _add_common(t)

    f = sub.add_parser("filter", help="run the filter on one sequence and write probability frames")
    f.add_argument("--data", required=True)
    f.add_argument("--model", required=True)
    f.add_argument("--sequence", type=int, default=0)
    f.add_argument("--steps", type=int, default=None, help="observed prefix length (default all)")
    f.add_argument("--future", type=int, default=0, help="extra steps predicted with empty input")
    f.add_argument("--out", required=True, help="output directory for PGM frames")
    _add_common(f)

    e = sub.add_parser("eval", help="score a model against ground truth and baselines")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--report", required=True, help="JSON report path")
    e.add_argument("--dropout-len", type=int, default=TrainConfig.dropout_len)
    e.add_argument("--dropout-duty", type=float, default=TrainConfig.dropout_duty)
    e.add_argument("--no-per-frame", action="store_true", help="omit per-frame rows from the report")
    e.add_argument("--render", help="also write panels for one sequence into this directory")
    e.add_argument("--render-sequence", type=int, default=0)
    _add_common(e)

    r = sub.add_parser("render", help="write observation | prediction | truth panels")
    r.add_argument("--data", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--sequence", type=int, default=0)
    r.add_argument("--out", required=True)
    _add_common(r)
    return ap


def resolve_seed(arg_seed: int | None, default: int = 0) -> int:
    env = os.environ.get("DT_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"DT_SEED must be an integer, got {env!r}") from None
    return default if arg_seed is None else arg_seed


def load_params(path) -> TrackerParams:
    return TrackerParams.from_dict(nn.load_checkpoint(path))


def _pick_sequence(dataset, index: int) -> int:
    if not 0 <= index < dataset.n_sequences:
        raise UsageError(f"sequence {index} out of range (dataset has {dataset.n_sequences})")
    return index


def _render_sequence(params, dataset, seq: int, out_dir) -> list[str]:
    obs = dataset.observations(seq)
    probs = filter_stream(params, obs)
    truth = dataset.y[seq] if dataset.has_ground_truth else [None] * len(obs)
    return write_frames(out_dir, [render_frame(o, p, y) for o, p, y in zip(obs, probs, truth)])


def cmd_gen(args) -> None:
    world = WorldConfig.from_json(Path(args.config).read_text()) if args.config else WorldConfig()
    seed = resolve_seed(args.seed, world.seed)
    world = dataclasses.replace(world, seed=seed)
    if args.sequences < 0 or args.length < 1:
        raise UsageError("--sequences must be >= 0 and --length >= 1")
    ds = generate_dataset(world, SensorConfig(noise_rate=args.noise_rate, seed=seed),
                          args.sequences, args.length)
    write_dataset(args.out, ds)
    log.info("wrote %d sequences of %d steps to %s", ds.n_sequences, ds.seq_len, args.out)


def cmd_train(args) -> None:
    seed = resolve_seed(args.seed)
    lr = args.lr if args.lr is not None else (0.003 if args.optimizer == "rmsprop" else TrainConfig.lr)
    cfg = TrainConfig(mode=args.mode, lr=lr, optimizer=args.optimizer, iterations=args.iters,
                      bptt_len=args.bptt, dropout_len=args.dropout_len, dropout_duty=args.dropout_duty, seed=seed,
                      full_sequence=args.full_sequence, sum_loss=args.sum_loss,
                      init_scale=args.init_scale, prior_init=not args.no_prior_init,
                      checkpoint_every=args.checkpoint_every)
    data = read_dataset(args.data)
    params = load_params(args.init) if args.init else None

    def progress(it, loss):
        if it % 100 == 0:
            log.info("iter %d loss %.5f", it, loss)

    params, curve = train(data, cfg, params, checkpoint_path=args.out, callback=progress)
    nn.save_checkpoint(args.out, params.as_dict())
    csv = args.loss_csv or str(Path(args.out).with_suffix("")) + "_loss.csv"
    write_loss_csv(csv, curve)
    log.info("saved %s and %s", args.out, csv)


def cmd_filter(args) -> None:
    data = read_dataset(args.data)
    seq = _pick_sequence(data, args.sequence)
    if args.future < 0:
        raise UsageError("--future must be >= 0")
    obs = data.observations(seq)
    if args.steps is not None:
        if not 1 <= args.steps <= len(obs):
            raise UsageError(f"--steps must lie in [1, {len(obs)}]")
        obs = obs[:args.steps]
    params = load_params(args.model)
    probs = filter_stream(params, obs) + predict_future(params, obs, args.future)
    frames = [np.rint(np.clip(p, 0, 1) * 255).astype(np.uint8) for p in probs]
    write_frames(args.out, frames)
    log.info("wrote %d frames (%d filtered, %d predicted) to %s",
             len(frames), len(obs), args.future, args.out)


def cmd_eval(args) -> None:
    seed = resolve_seed(args.seed)
    data = read_dataset(args.data)
    params = load_params(args.model)
    report = evaluate(params, data, args.dropout_len, args.dropout_duty, seed,
                      per_frame=not args.no_per_frame)
    Path(args.report).write_text(report.to_json() + "\n")
    if args.render:
        _render_sequence(params, data, _pick_sequence(data, args.render_sequence), args.render)
    log.info("visible %.4f occluded %.4f f1 %.3f", report.masked_bce_visible,
             report.masked_bce_occluded, report.f1_at_half)


def cmd_render(args) -> None:
    data = read_dataset(args.data)
    names = _render_sequence(load_params(args.model), data, _pick_sequence(data, args.sequence),
                             args.out)
    log.info("wrote %d panels to %s", len(names), args.out)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "filter": cmd_filter, "eval": cmd_eval,
            "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as exit_:
        # --help
        return int(exit_.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("deeptrack: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args)
    except UsageError as err:
        print(f"deeptrack {args.command}: error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError, RuntimeError) as err:
        print(f"deeptrack {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
