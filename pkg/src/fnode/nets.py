"""Network building blocks.

Two forward paths exist for the same architecture: :func:`mlp_forward` reads
weights from a named parameter set, while :func:`functional_forward` reads
them from a single flat vector.  Both route through one shared layer stack, so
a flattened parameter set reproduces the standard forward bit for bit: that is
what lets a hypernetwork emit the weights of the transition network as data
that gradients flow through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import ParamSet, Tensor

__all__ = [
    "MLPSpec",
    "MLP",
    "GaussianParams",
    "Hypernetwork",
    "weight_count",
    "init_mlp_params",
    "mlp_forward",
    "functional_forward",
    "flatten_params",
    "split_weight_vector",
    "init_hypernetwork",
    "hypernet_map",
    "trajectory_features",
    "split_gaussian",
    "encode_z0",
    "encode_gamma",
    "encode_batch",
    "decode",
]


@dataclass(frozen=True)
class MLPSpec:
    """Fully connected architecture: layer widths plus activation choices.

    ``layer_widths[0]`` is the input width; tanh is applied between layers and
    optionally after the last one.
    """

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    final_activation: str = "none"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"bad layer widths {widths}")
        if self.activation != "tanh" or self.final_activation not in ("none", "tanh"):
            raise ValueError("unsupported activation")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]


def weight_count(spec: MLPSpec) -> int:
    """Total parameter count: sum over layers of in*out + out."""
    ws = spec.layer_widths
    return sum(i * o + o for i, o in zip(ws[:-1], ws[1:]))


def init_mlp_params(spec: MLPSpec, rng: np.random.Generator) -> ParamSet:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    params = ParamSet()
    ws = spec.layer_widths
    for layer, (n_in, n_out) in enumerate(zip(ws[:-1], ws[1:])):
        bound = 1.0 / np.sqrt(n_in)
        params.add(f"w{layer}", Tensor(rng.uniform(-bound, bound, size=(n_out, n_in))))
        params.add(f"b{layer}", Tensor(rng.uniform(-bound, bound, size=n_out)))
    return params


def _forward_layers(layers: Sequence[tuple[Tensor, Tensor]], x: Tensor, final_tanh: bool) -> Tensor:
    # Shared by the standard and the flat-vector paths; weights are [out, in].
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        if h.data.ndim == 1:
            h = tg.matmul(w, h) + b
        else:
            h = tg.broadcast_add(tg.matmul(h, tg.transpose(w)), b)
        if i < last or final_tanh:
            h = tg.tanh(h)
    return h


def _check_input_width(spec: MLPSpec, x: Tensor) -> None:
    width = x.data.shape[-1] if x.data.ndim > 0 else 0
    if x.data.ndim not in (1, 2) or width != spec.in_width:
        raise tg.ShapeMismatch(f"input shape {x.shape} does not match in_width {spec.in_width}")


def mlp_forward(spec: MLPSpec, params: ParamSet, x: Tensor) -> Tensor:
    """Forward pass with named parameters w0, b0, w1, b1, ...

    ``x`` may be a single input vector or a [batch, in_width] matrix.
    """
    _check_input_width(spec, x)
    layers = [(params[f"w{i}"], params[f"b{i}"]) for i in range(spec.n_layers)]
    return _forward_layers(layers, x, spec.final_activation == "tanh")


def split_weight_vector(spec: MLPSpec, theta: Tensor) -> list[tuple[Tensor, Tensor]]:
    """Slice a flat weight vector into per-layer (weight, bias) tensors.

    Slicing order is fixed: for each layer, the [out, in] weight matrix in
    row-major order, then the bias.
    """
    expected = weight_count(spec)
    if theta.data.ndim != 1 or theta.data.shape[0] != expected:
        raise tg.ShapeMismatch(
            f"weight vector has {theta.data.size} entries, spec needs {expected}"
        )
    layers = []
    pos = 0
    ws = spec.layer_widths
    for n_in, n_out in zip(ws[:-1], ws[1:]):
        w = tg.reshape(tg.slice1d(theta, pos, pos + n_in * n_out), (n_out, n_in))
        pos += n_in * n_out
        b = tg.slice1d(theta, pos, pos + n_out)
        pos += n_out
        layers.append((w, b))
    return layers


def functional_forward(spec: MLPSpec, theta: Tensor, x: Tensor) -> Tensor:
    """Forward pass reading weights from a flat vector; differentiable in both.

    Identical numerics to :func:`mlp_forward` when ``theta`` is the flattening
    of the same parameters.
    """
    _check_input_width(spec, x)
    return _forward_layers(split_weight_vector(spec, theta), x, spec.final_activation == "tanh")


def flatten_params(spec: MLPSpec, params: ParamSet) -> np.ndarray:
    """Flatten named MLP parameters in the :func:`split_weight_vector` order."""
    pieces = []
    for i in range(spec.n_layers):
        pieces.append(params[f"w{i}"].data.reshape(-1))
        pieces.append(params[f"b{i}"].data)
    return np.concatenate(pieces)


@dataclass
class MLP:
    """An architecture together with its (trainable) parameters."""

    spec: MLPSpec
    params: ParamSet

    @classmethod
    def init(cls, widths: Sequence[int], rng: np.random.Generator, final_activation="none") -> "MLP":
        spec = MLPSpec(tuple(widths), final_activation=final_activation)
        return cls(spec, init_mlp_params(spec, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.spec, self.params, x)


@dataclass
class GaussianParams:
    """Diagonal Gaussian in (mean, log-variance) form."""

    mean: Tensor
    log_var: Tensor

    @property
    def dim(self) -> int:
        return self.mean.data.shape[-1]


@dataclass
class Hypernetwork:
    """Maps a dynamics code to the flat weights of the transition network.

    The body ends in tanh and the result is scaled by a learned scalar, so
    every produced weight is bounded by ``|lambda|`` no matter how large the
    code is.
    """

    body: MLPSpec
    params: ParamSet  # body weights plus the scalar "lambda"

    @property
    def lam(self) -> Tensor:
        return self.params["lambda"]


def init_hypernetwork(
    code_dim: int,
    target: MLPSpec,
    hidden: Sequence[int],
    rng: np.random.Generator,
    lambda_init: float = 0.1,
) -> Hypernetwork:
    body = MLPSpec((code_dim, *hidden, weight_count(target)), final_activation="tanh")
    params = init_mlp_params(body, rng)
    # Small initial scale keeps early ODE solves well inside the stable regime.
    params.add("lambda", Tensor(np.float64(lambda_init)))
    return Hypernetwork(body, params)


def hypernet_map(h: Hypernetwork, gamma: Tensor) -> Tensor:
    """theta = lambda * tanh(body(gamma)); accepts a single code or a batch."""
    out = mlp_forward(h.body, h.params, gamma)
    return tg.scalar_mul(out, h.lam)


# -- encoders / decoder -------------------------------------------------------


def trajectory_features(times: np.ndarray, values: np.ndarray, obs_scale: float = 1.0) -> np.ndarray:
    """Interleaved (timestamp, scaled values) blocks, one per observation."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if times.shape[0] != values.shape[0] or times.shape[0] < 1:
        raise ValueError("trajectory needs matching, non-empty times and values")
    blocks = np.concatenate([times[:, None], values / obs_scale], axis=1)
    return blocks.reshape(-1)


def split_gaussian(out: Tensor, d: int) -> GaussianParams:
    if out.data.ndim == 1:
        return GaussianParams(tg.slice1d(out, 0, d), tg.slice1d(out, d, 2 * d))
    return GaussianParams(tg.cols(out, 0, d), tg.cols(out, d, 2 * d))


def encode_z0(enc: MLP, traj, obs_scale: float = 1.0) -> GaussianParams:
    """Map a full observed trajectory to the initial-state posterior."""
    feats = Tensor(trajectory_features(traj.times, traj.values, obs_scale))
    out = enc(feats)
    return split_gaussian(out, enc.spec.out_width // 2)


def encode_gamma(enc: MLP, traj, obs_scale: float = 1.0) -> GaussianParams:
    """Map a full observed trajectory to the dynamics-code posterior."""
    return encode_z0(enc, traj, obs_scale)


def encode_batch(enc: MLP, trajs, obs_scale: float = 1.0) -> GaussianParams:
    """Vectorized encoding of several equal-length trajectories."""
    feats = Tensor(
        np.stack([trajectory_features(t.times, t.values, obs_scale) for t in trajs])
    )
    out = enc(feats)
    return split_gaussian(out, enc.spec.out_width // 2)


def decode(dec: MLP, z: Tensor) -> Tensor:
    """Observation-space mean for one latent state (or a batch of them)."""
    return dec(z)
