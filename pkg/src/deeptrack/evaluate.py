"""Inference, metrics against ground truth and baselines, and frame rendering."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .dataio import write_pgm
from .model import TrackerParams, decode, forward_sequence, step_belief
from .sim import rasterize_objects
from .train import TrainConfig, build_dropout_schedule, build_targets


def filter_stream(params: TrackerParams, observations) -> list[np.ndarray]:
    """Causal left-to-right pass; returns one (H, W) probability grid per step."""
    trace = forward_sequence(params, observations)
    return [p[..., 0] for p in trace.prob_list()]


def predict_future(params: TrackerParams, observations, n: int) -> list[np.ndarray]:
    """Filter over ``observations`` then decode ``n`` further steps fed with empty observations.

    n = 0 returns an empty list.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    trace = forward_sequence(params, observations, outputs=[])
    belief = trace.beliefs[-1]
    empty = np.zeros(trace.inputs.shape[1:], params.dtype)
    out = []
    for _ in range(n):
        belief = step_belief(params, belief, empty)
        out.append(decode(params, belief)[..., 0])
    return out


def copy_last(v: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Persistence baseline over (T, H, W): each cell repeats its last observed r, 0.5 before."""
    pred = np.empty(v.shape, dtype=np.float64)
    memory = np.full(v.shape[1:], 0.5)
    for t in range(len(v)):
        seen = v[t] != 0
        memory = np.where(seen, r[t].astype(np.float64), memory)
        pred[t] = memory
    return pred


class _Pool:
    """Running pooled BCE sum / cell count plus F1 counts."""

    def __init__(self):
        self.loss = 0.0
        self.cells = 0.0
        self.tp = self.fp = self.fn = 0

    def add(self, p, target, mask, f1: bool = False) -> float:
        count = float(mask.sum())
        loss, _ = nn.masked_bce(np.asarray(p, np.float64), target, mask, normalize=False)
        self.loss += loss
        self.cells += count
        if f1:
            m = mask.astype(bool)
            hit = np.asarray(p)[m] >= 0.5
            truth = np.asarray(target)[m] >= 0.5
            self.tp += int(np.sum(hit & truth))
            self.fp += int(np.sum(hit & ~truth))
            self.fn += int(np.sum(~hit & truth))
        return loss / count if count else 0.0

    @property
    def bce(self) -> float:
        return self.loss / self.cells if self.cells else 0.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 1.0


@dataclass
class EvalReport:
    masked_bce_visible: float
    masked_bce_occluded: float
    f1_at_half: float
    baselines: dict
    dropout: dict = field(default_factory=dict)
    per_frame: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _metrics_block(pv: _Pool, po: _Pool) -> dict:
    return {"masked_bce_visible": pv.bce, "masked_bce_occluded": po.bce, "f1_at_half": po.f1}


def evaluate(params: TrackerParams, dataset, dropout_len: int = 10, dropout_duty: float = 0.5,
             seed: int = 0, per_frame: bool = True) -> EvalReport:
    """Score filtering against ground truth, plus dropped-step prediction of observations.

    Filtering metrics grade p_t against y_t on visible (v=1) and occluded
    (v=0) cells. The dropout block replays each sequence with the same
    observation-dropout schedule used in training and grades dropped steps on
    what the sensor saw (target r, mask v). Baselines: ``constant_prior``
    predicts the dataset-wide mean of the graded target, ``copy_last`` repeats
    the last observation of each cell.
    """
    if not dataset.has_ground_truth:
        raise ValueError("evaluation needs a dataset with ground truth")
    y_all, v_all, r_all = dataset.y, dataset.v, dataset.r
    prior_y = float(y_all.mean()) if y_all.size else 0.5
    vis = v_all.sum()
    prior_r = float(r_all.sum() / vis) if vis else 0.5
    drop_cfg = TrainConfig(mode="unsupervised", dropout_len=dropout_len,
                           dropout_duty=dropout_duty, seed=seed, full_sequence=True)
    rng = np.random.default_rng(seed)

    names = ("model", "constant_prior", "copy_last")
    vis_pool = {k: _Pool() for k in names}
    occ_pool = {k: _Pool() for k in names}
    drop_pool = {k: _Pool() for k in names}
    frames = []
    for s in range(dataset.n_sequences):
        obs = dataset.observations(s)
        y = y_all[s].astype(np.float64)
        v = v_all[s].astype(np.float64)
        preds = {
            "model": np.stack(filter_stream(params, obs)),
            "constant_prior": np.full(y.shape, prior_y),
            "copy_last": copy_last(v_all[s], r_all[s]),
        }
        for t in range(dataset.seq_len):
            row = {"sequence": s, "t": t}
            for k in names:
                bv = vis_pool[k].add(preds[k][t], y[t], v[t])
                bo = occ_pool[k].add(preds[k][t], y[t], 1.0 - v[t], f1=True)
                if k == "model":
                    row.update(bce_visible=bv, bce_occluded=bo)
            frames.append(row)

        if dataset.seq_len >= 2:
            schedule = build_dropout_schedule(dataset.seq_len, drop_cfg, rng)
            plan = build_targets(obs, schedule, "unsupervised", dtype=np.float64)
            zv = plan.inputs[..., 0]
            dpred = {
                "model": np.stack(filter_stream(params, plan.inputs)),
                "constant_prior": np.full(y.shape, prior_r),
                "copy_last": copy_last(zv, plan.inputs[..., 1]),
            }
            for t in np.flatnonzero(schedule):
                for k in names:
                    drop_pool[k].add(dpred[k][t], plan.targets[t], plan.masks[t])

    baselines = {k: _metrics_block(vis_pool[k], occ_pool[k]) for k in names[1:]}
    dropout = {"masked_bce_dropped": drop_pool["model"].bce,
               "baselines": {k: {"masked_bce_dropped": drop_pool[k].bce} for k in names[1:]},
               "dropout_len": dropout_len, "dropout_duty": dropout_duty}
    return EvalReport(vis_pool["model"].bce, occ_pool["model"].bce, occ_pool["model"].f1,
                      baselines, dropout, frames if per_frame else [])


def occlusion_tracking(params: TrackerParams, sequences, world, max_steps: int = 5) -> dict:
    """Mean predicted probability on objects hidden from the sensor.

    A sample is an (object, frame) pair where every in-grid cell of the
    object's footprint is invisible, the object has been fully hidden for at
    most ``max_steps`` consecutive frames, and it was at least partly visible
    just before the occlusion began. ``sequences`` are SimulatedSequence
    objects recorded with ``keep_objects``.
    """
    samples = []
    for seq in sequences:
        probs = filter_stream(params, seq.observations())
        hidden_for: dict[int, int] = {}
        visible_prev: set[int] = set()
        for t, objs in enumerate(seq.objects):
            current, visible = {}, set()
            prints = rasterize_objects(objs, world).astype(bool) if objs else []
            for obj, fp in zip(objs, prints):
                if not fp.any():
                    continue
                if (seq.v[t][fp] != 0).any():
                    visible.add(obj.id)
                    continue
                if obj.id in hidden_for:
                    current[obj.id] = hidden_for[obj.id] + 1
                elif obj.id in visible_prev:
                    current[obj.id] = 1
                else:
                    continue
                if current[obj.id] <= max_steps:
                    samples.append(float(probs[t][fp].mean()))
            hidden_for, visible_prev = current, visible
    return {"mean_probability": float(np.mean(samples)) if samples else float("nan"),
            "n_samples": len(samples)}


SEPARATOR = 128


def render_frame(obs, p, y=None) -> np.ndarray:
    """Side-by-side 8-bit panels: observation | prediction [| ground truth].

    Observation panel: invisible 0, visible-free 128, observed-occupied 255.
    Panels are separated by one mid-grey column.
    """
    v = np.asarray(obs[..., 0] if not hasattr(obs, "v") else obs.v)
    r = np.asarray(obs[..., 1] if not hasattr(obs, "r") else obs.r)
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 3:
        p = p[..., 0]
    if p.shape != v.shape:
        raise ValueError(f"prediction shape {p.shape} does not match observation {v.shape}")
    obs_panel = np.where(r != 0, 255, np.where(v != 0, 128, 0)).astype(np.uint8)
    pred_panel = np.rint(np.clip(p, 0.0, 1.0) * 255.0).astype(np.uint8)
    panels = [obs_panel, pred_panel]
    if y is not None:
        y = np.asarray(y)
        if y.shape != v.shape:
            raise ValueError("ground truth shape does not match observation")
        panels.append(np.where(y != 0, 255, 0).astype(np.uint8))
    sep = np.full((v.shape[0], 1), SEPARATOR, np.uint8)
    parts = []
    for k, panel in enumerate(panels):
        if k:
            parts.append(sep)
        parts.append(panel)
    return np.concatenate(parts, axis=1)


def write_frames(out_dir, images, prefix: str = "frame") -> list[str]:
    """Write PGM frames plus ``index.txt`` listing them in temporal order."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for t, img in enumerate(images):
        name = f"{prefix}_{t:05d}.pgm"
        write_pgm(os.path.join(out_dir, name), img)
        names.append(name)
    with open(os.path.join(out_dir, "index.txt"), "w") as fh:
        fh.writelines(n + "\n" for n in names)
    return names
