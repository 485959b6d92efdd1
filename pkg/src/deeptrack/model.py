"""Recurrent occupancy tracker: encoder -> belief tracker -> decoder.

Layer shapes for the default network on a 50x50 grid::

    observation (50, 50, 2) -> embedding (50, 50, 8) -> belief (50, 50, 16) -> p (50, 50, 1)

The belief tracker sees concat(embedding, previous belief), i.e. 24 channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import ConvLayer

DEFAULT_CHANNELS = (2, 8, 16, 1)
DEFAULT_KERNELS = (7, 5, 7)
DEFAULT_CONV_WEIGHTS = 11_193

PARAM_NAMES = ("encoder.kernel", "encoder.bias", "belief.kernel", "belief.bias",
               "decoder.kernel", "decoder.bias", "b0_seed")


@dataclass
class TrackerParams:
    encoder: ConvLayer
    belief: ConvLayer
    decoder: ConvLayer
    # (C,) tiled over the grid, or a full (H, W, C) initial belief
    b0_seed: np.ndarray

    @property
    def embed_channels(self) -> int:
        return self.encoder.out_channels

    @property
    def belief_channels(self) -> int:
        return self.belief.out_channels

    @property
    def dtype(self):
        return self.encoder.kernel.dtype

    @property
    def n_conv_weights(self) -> int:
        return self.encoder.n_weights + self.belief.n_weights + self.decoder.n_weights

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "encoder.kernel": self.encoder.kernel, "encoder.bias": self.encoder.bias,
            "belief.kernel": self.belief.kernel, "belief.bias": self.belief.bias,
            "decoder.kernel": self.decoder.kernel, "decoder.bias": self.decoder.bias,
            "b0_seed": self.b0_seed,
        }

    @classmethod
    def from_dict(cls, d) -> "TrackerParams":
        missing = set(PARAM_NAMES) - set(d)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        params = cls(ConvLayer(d["encoder.kernel"], d["encoder.bias"]),
                     ConvLayer(d["belief.kernel"], d["belief.bias"]),
                     ConvLayer(d["decoder.kernel"], d["decoder.bias"]),
                     d["b0_seed"])
        _check_topology(params)
        return params

    def astype(self, dtype) -> "TrackerParams":
        return TrackerParams.from_dict({k: v.astype(dtype) for k, v in self.as_dict().items()})

    def zeros_like(self) -> "TrackerParams":
        return TrackerParams.from_dict({k: np.zeros_like(v) for k, v in self.as_dict().items()})

    def initial_belief(self, shape) -> np.ndarray:
        if self.b0_seed.ndim == 1:
            return np.broadcast_to(self.b0_seed, tuple(shape) + self.b0_seed.shape).copy()
        if self.b0_seed.shape[:2] != tuple(shape):
            raise ValueError(f"per-cell b0_seed {self.b0_seed.shape} does not fit grid {shape}")
        return self.b0_seed.copy()


def _check_topology(p: TrackerParams) -> None:
    if p.encoder.in_channels != 2:
        raise ValueError("encoder must take the 2-channel (v, r) observation")
    if p.belief.in_channels != p.embed_channels + p.belief_channels:
        raise ValueError(
            f"belief tracker expects {p.embed_channels} + {p.belief_channels} input channels, "
            f"kernel has {p.belief.in_channels}")
    if p.decoder.in_channels != p.belief_channels or p.decoder.out_channels != 1:
        raise ValueError("decoder must map the belief to a single probability channel")
    if p.b0_seed.shape[-1] != p.belief_channels:
        raise ValueError(f"b0_seed has {p.b0_seed.shape[-1]} channels, belief has {p.belief_channels}")


def init_params(seed: int = 0, init_scale: float = 1.0, channels=DEFAULT_CHANNELS,
                kernels=DEFAULT_KERNELS, per_cell_grid=None, dtype=np.float32) -> TrackerParams:
    """Uniform(-s, s) kernels with s = init_scale / sqrt(fan_in); zero biases and b0_seed.

    ``per_cell_grid`` = (H, W) switches the initial belief to a full free tensor.
    """
    if init_scale < 0:
        raise ValueError("init_scale must be non-negative")
    c_obs, c_emb, c_bel, c_out = channels
    if c_obs != 2 or c_out != 1:
        raise ValueError("channels must have the form (2, embed, belief, 1)")
    rng = np.random.default_rng(seed)

    def layer(k, c_in, c_out):
        s = init_scale / np.sqrt(k * k * c_in)
        kernel = rng.uniform(-s, s, size=(k, k, c_in, c_out)).astype(dtype)
        return ConvLayer(kernel, np.zeros(c_out, dtype))

    b0_shape = (c_bel,) if per_cell_grid is None else tuple(per_cell_grid) + (c_bel,)
    params = TrackerParams(layer(kernels[0], c_obs, c_emb),
                           layer(kernels[1], c_emb + c_bel, c_bel),
                           layer(kernels[2], c_bel, c_out),
                           np.zeros(b0_shape, dtype))
    _check_topology(params)
    if tuple(channels) == DEFAULT_CHANNELS and tuple(kernels) == DEFAULT_KERNELS:
        assert params.n_conv_weights == DEFAULT_CONV_WEIGHTS, params.n_conv_weights
    return params


def as_input(obs, dtype=np.float32) -> np.ndarray:
    """Observation, (H, W, 2) array or None (the empty observation) -> network input."""
    if hasattr(obs, "stack"):
        return obs.stack(dtype)
    return np.asarray(obs, dtype=dtype)


def encode(params: TrackerParams, x: np.ndarray) -> np.ndarray:
    return nn.sigmoid(nn.conv2d_same_forward(x, params.encoder))


def update(params: TrackerParams, embedding: np.ndarray, belief: np.ndarray) -> np.ndarray:
    u = np.concatenate([embedding, belief], axis=-1)
    return nn.sigmoid(nn.conv2d_same_forward(u, params.belief))


def step_belief(params: TrackerParams, belief: np.ndarray, obs) -> np.ndarray:
    """One filter update B_t = F(B_{t-1}, x_t)."""
    x = as_input(obs, params.dtype)
    if x.shape[:2] != belief.shape[:2] or x.shape[2] != 2:
        raise ValueError(f"observation {x.shape} does not match belief {belief.shape}")
    if belief.shape[2] != params.belief_channels:
        raise ValueError(f"belief has {belief.shape[2]} channels, expected {params.belief_channels}")
    return update(params, encode(params, x), belief)


def decode(params: TrackerParams, belief: np.ndarray) -> np.ndarray:
    """Per-cell occupancy probabilities, shape (H, W, 1)."""
    if belief.ndim != 3 or belief.shape[2] != params.belief_channels:
        raise ValueError(f"belief shape {belief.shape} does not match decoder")
    return nn.sigmoid(nn.conv2d_same_forward(belief, params.decoder))


@dataclass
class SequenceTrace:
    """Activations of one unrolled pass; beliefs[0] is the initial belief."""

    inputs: np.ndarray
    embeddings: list[np.ndarray]
    beliefs: list[np.ndarray]
    probs: dict[int, np.ndarray] = field(default_factory=dict)

    def prob_list(self) -> list[np.ndarray]:
        return [self.probs[t] for t in sorted(self.probs)]


def forward_sequence(params: TrackerParams, observations, outputs=None,
                     initial_belief=None) -> SequenceTrace:
    """Run the filter over a sequence.

    ``observations`` is a (T, H, W, 2) array or a list of Observation / None,
    where None stands for the empty observation. ``outputs`` selects which
    0-based steps are decoded (default: all). Step t of the result holds
    B_{t+1} = beliefs[t + 1] and probs[t].
    """
    if observations is None or len(observations) == 0:
        raise ValueError("observation sequence is empty")
    xs = _stack_inputs(observations, params.dtype)
    steps = len(xs)
    wanted = range(steps) if outputs is None else sorted(set(outputs))
    wanted_set = set(wanted)
    belief = (params.initial_belief(xs.shape[1:3]) if initial_belief is None
              else np.asarray(initial_belief, dtype=params.dtype))
    trace = SequenceTrace(xs, [], [belief])
    for t in range(steps):
        e = encode(params, xs[t])
        belief = update(params, e, belief)
        trace.embeddings.append(e)
        trace.beliefs.append(belief)
        if t in wanted_set:
            trace.probs[t] = decode(params, belief)
    return trace


def _stack_inputs(observations, dtype) -> np.ndarray:
    if isinstance(observations, np.ndarray):
        if observations.ndim != 4 or observations.shape[-1] != 2:
            raise ValueError(f"expected (T, H, W, 2) observations, got {observations.shape}")
        return observations.astype(dtype, copy=False)
    shape = next((as_input(o).shape for o in observations if o is not None), None)
    if shape is None:
        raise ValueError("cannot infer grid shape from an all-empty sequence")
    return np.stack([np.zeros(shape, dtype) if o is None else as_input(o, dtype)
                     for o in observations])
