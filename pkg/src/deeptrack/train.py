"""Supervised and observation-dropout training of the tracker."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .model import TrackerParams, forward_sequence, init_params

log = logging.getLogger(__name__)

MODES = ("supervised", "unsupervised")
OPTIMIZERS = ("sgd", "rmsprop")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "unsupervised"
    lr: float = 0.9
    iterations: int = 50_000
    bptt_len: int = 40
    dropout_len: int = 10
    dropout_duty: float = 0.5
    seed: int = 0
    # gradient window spans the whole sequence instead of bptt_len steps
    full_sequence: bool = False
    # literal summed log-likelihood instead of the per-cell, per-step mean
    sum_loss: bool = False
    init_scale: float = 1.0
    # start the decoder bias at the logit of the data's occupancy rate
    prior_init: bool = True
    # "rmsprop" rescales each weight's step by its gradient RMS; lr then means
    # a step size in weight units, not a gradient multiplier
    optimizer: str = "sgd"
    rms_decay: float = 0.99
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0.0 <= self.rms_decay < 1.0:
            raise ValueError("rms_decay must lie in [0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 0.0 <= self.dropout_duty < 1.0:
            raise ValueError("dropout_duty must lie in [0, 1)")
        if self.dropout_len < 1:
            raise ValueError("dropout_len must be at least 1")
        if self.mode == "unsupervised" and not self.full_sequence \
                and self.bptt_len < 2 * self.dropout_len:
            raise ValueError("unsupervised training needs bptt_len >= 2 * dropout_len")


def build_dropout_schedule(seq_len: int, config: TrainConfig, rng=None) -> np.ndarray:
    """Boolean array, True on dropped steps.

    Dropped steps come in contiguous blocks of exactly ``dropout_len``. The
    number of blocks is round(duty * seq_len / dropout_len), reduced until
    every block can be preceded by at least one observed step. The remaining
    observed steps are scattered at random over the gaps, so step 0 is always
    observed and the schedule is a pure function of ``rng``.
    """
    if seq_len < 2:
        raise ValueError("seq_len must be at least 2")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n = config.dropout_len
    blocks = int(np.floor(config.dropout_duty * seq_len / n + 0.5))
    while blocks > 0 and seq_len - blocks * n < blocks:
        blocks -= 1
    dropped = np.zeros(seq_len, dtype=bool)
    if blocks == 0:
        return dropped
    spare = seq_len - blocks * n - blocks
    # gaps before each block get >= 1 observed step, the tail gap >= 0
    gaps = rng.multinomial(spare, np.full(blocks + 1, 1.0 / (blocks + 1)))
    gaps[:blocks] += 1
    t = 0
    for b in range(blocks):
        t += gaps[b]
        dropped[t:t + n] = True
        t += n
    return dropped


@dataclass
class TargetPlan:
    """Per-step network input, training target and loss mask for one window."""

    inputs: np.ndarray   # (T, H, W, 2)
    targets: np.ndarray  # (T, H, W)
    masks: np.ndarray    # (T, H, W)
    dropped: np.ndarray  # (T,) bool

    def __len__(self):
        return len(self.inputs)


def build_targets(observations: np.ndarray, schedule, mode: str, ground_truth=None,
                  dtype=np.float32) -> TargetPlan:
    """Turn raw frames into a TargetPlan.

    ``observations`` is (T, H, W, 2) with channels [v, r]. Supervised mode
    grades every cell against ``ground_truth``. Unsupervised mode never looks
    at ground truth: dropped steps get a zero input and are graded on the
    cells the sensor saw (target r, mask v); observed steps are not graded.
    """
    obs = np.asarray(observations)
    if obs.ndim != 4 or obs.shape[-1] != 2 or len(obs) == 0:
        raise ValueError(f"expected non-empty (T, H, W, 2) observations, got {obs.shape}")
    dropped = np.asarray(schedule, dtype=bool)
    if dropped.shape != (len(obs),):
        raise ValueError("schedule length does not match the observations")
    v = obs[..., 0].astype(dtype)
    r = obs[..., 1].astype(dtype)
    if mode == "supervised":
        if ground_truth is None:
            raise ValueError("supervised mode needs ground truth")
        return TargetPlan(obs.astype(dtype), np.asarray(ground_truth, dtype=dtype),
                          np.ones_like(v), np.zeros(len(obs), dtype=bool))
    if mode != "unsupervised":
        raise ValueError(f"unknown mode {mode!r}")
    inputs = obs.astype(dtype)
    inputs[dropped] = 0.0
    keep = dropped[:, None, None].astype(dtype)
    return TargetPlan(inputs, r * keep, v * keep, dropped)


def _window_gradients(params: TrackerParams, plan: TargetPlan, initial_belief=None,
                      sum_loss: bool = False):
    """Loss, gradients and final belief for one unrolled window."""
    steps = len(plan)
    graded = [t for t in range(steps) if plan.masks[t].any()]
    # decode from logits here: the fused loss has no clamp dead zone
    trace = forward_sequence(params, plan.inputs, outputs=[], initial_belief=initial_belief)
    scale = 1.0 if sum_loss else 1.0 / max(1, len(graded))

    loss = 0.0
    grad_z = {}
    for t in graded:
        z = nn.conv2d_same_forward(trace.beliefs[t + 1], params.decoder)[..., 0]
        l, gz = nn.masked_bce_logits(z, plan.targets[t], plan.masks[t], normalize=not sum_loss)
        if not np.isfinite(l):
            raise FloatingPointError(f"non-finite loss at step {t}")
        loss += l * scale
        grad_z[t] = gz * scale

    grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    final_belief = trace.beliefs[-1]
    if not graded:
        return loss, grads, final_belief

    ce = params.embed_channels
    g_belief = np.zeros_like(final_belief)
    for t in range(graded[-1], -1, -1):
        belief = trace.beliefs[t + 1]
        if t in grad_z:
            g_in, g_k, g_b = nn.conv2d_same_backward(belief, params.decoder, grad_z[t][..., None])
            grads["decoder.kernel"] += g_k
            grads["decoder.bias"] += g_b
            g_belief = g_belief + g_in
        gz = nn.sigmoid_backward(belief, g_belief)
        e = trace.embeddings[t]
        u = np.concatenate([e, trace.beliefs[t]], axis=-1)
        g_u, g_k, g_b = nn.conv2d_same_backward(u, params.belief, gz)
        grads["belief.kernel"] += g_k
        grads["belief.bias"] += g_b
        g_belief = g_u[..., ce:]
        gz = nn.sigmoid_backward(e, g_u[..., :ce])
        _, g_k, g_b = nn.conv2d_same_backward(trace.inputs[t], params.encoder, gz,
                                              need_input_grad=False)
        grads["encoder.kernel"] += g_k
        grads["encoder.bias"] += g_b

    if initial_belief is None:
        b0 = params.b0_seed
        grads["b0_seed"] = (g_belief.sum(axis=(0, 1)) if b0.ndim == 1 else g_belief).astype(b0.dtype)
    return loss, grads, final_belief


def bptt_gradients(params: TrackerParams, plan: TargetPlan, initial_belief=None,
                   sum_loss: bool = False) -> tuple[float, TrackerParams]:
    """Exact loss gradient by reverse accumulation through the belief chain.

    The loss is the mean, over steps with a non-empty mask, of the per-cell
    masked BCE (or the plain sum with ``sum_loss``). When ``initial_belief`` is
    given it is treated as a constant and b0_seed receives no gradient.
    """
    if len(plan) == 0:
        raise ValueError("empty plan")
    loss, grads, _ = _window_gradients(params, plan, initial_belief, sum_loss)
    return loss, TrackerParams.from_dict(grads)


class TrainingDiverged(RuntimeError):
    pass


def occupancy_rate(dataset, mode: str) -> float:
    """Fraction of occupied cells in what the loss grades: y, or r over visible cells."""
    if mode == "supervised":
        return float(dataset.y.mean())
    seen = float(dataset.v.sum())
    return float(dataset.r.sum()) / seen if seen else 0.5


def with_prior_bias(params: TrackerParams, rate: float) -> TrackerParams:
    """Copy of ``params`` whose decoder bias is logit(rate), clipped away from 0 and 1."""
    rate = min(max(rate, 1e-4), 1.0 - 1e-4)
    d = params.as_dict()
    d["decoder.bias"] = np.full_like(d["decoder.bias"], np.log(rate / (1.0 - rate)))
    return TrackerParams.from_dict(d)


def train(dataset, config: TrainConfig, params: TrackerParams | None = None,
          checkpoint_path=None,
          callback: Callable[[int, float], None] | None = None):
    """Gradient descent over windows drawn from ``dataset``; returns (params, loss_curve).

    Each iteration takes the next ``bptt_len`` window of the current sequence,
    carrying the belief forward detached; when a sequence is used up a new one
    is drawn at random and the belief restarts from b0_seed.
    """
    if dataset.n_sequences == 0:
        raise ValueError("dataset is empty")
    if config.mode == "supervised" and not dataset.has_ground_truth:
        raise ValueError("supervised training needs a dataset with ground truth")
    if params is None:
        params = init_params(config.seed, config.init_scale)
        if config.prior_init:
            # without this the first updates spend themselves pushing every
            # output toward the sparse occupancy rate and saturate the belief
            params = with_prior_bias(params, occupancy_rate(dataset, config.mode))
    rng = np.random.default_rng(config.seed)
    seq_len = dataset.seq_len
    window = seq_len if config.full_sequence else min(config.bptt_len, seq_len)
    current = {k: v.copy() for k, v in params.as_dict().items()}
    curve: list[float] = []
    seq, pos, carried = None, 0, None
    if config.optimizer == "rmsprop":
        step = nn.RMSProp(config.lr, config.rms_decay).step
    else:
        def step(cur, grads):
            return nn.sgd_step(cur, grads, config.lr)

    for it in range(config.iterations):
        if seq is None or pos + window > seq_len:
            seq = int(rng.integers(dataset.n_sequences))
            pos = int(rng.integers(0, seq_len % window + 1))
            carried = None
        obs = dataset.observations(seq)[pos:pos + window]
        gt = dataset.ground_truth(seq)[pos:pos + window] if config.mode == "supervised" else None
        schedule = build_dropout_schedule(window, config, rng)
        plan = build_targets(obs, schedule, config.mode, gt)
        p = TrackerParams.from_dict(current)
        try:
            loss, grads, last = _window_gradients(p, plan, carried, config.sum_loss)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss {loss}")
            current = step(current, grads)
        except FloatingPointError as err:
            if checkpoint_path is not None:
                nn.save_checkpoint(checkpoint_path, current)
            raise TrainingDiverged(f"iteration {it}: {err}") from err
        carried = last
        pos += window
        curve.append(loss)
        if callback is not None:
            callback(it, loss)
        if config.checkpoint_every and checkpoint_path is not None \
                and (it + 1) % config.checkpoint_every == 0:
            nn.save_checkpoint(checkpoint_path, current)
    return TrackerParams.from_dict(current), curve


def write_loss_csv(path, curve) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,loss\n")
        for i, loss in enumerate(curve):
            fh.write(f"{i},{loss!r}\n")
