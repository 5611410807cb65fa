"""The trainable trajectory model and its evidence-bound objective.

A trajectory is represented by two latent draws: an initial state ``z0`` and a
low-dimensional dynamics code ``gamma``.  The code is mapped by the
hypernetwork to the flat weights of the transition network, which drives a
fixed-step RK4 rollout over the trajectory's own timestamps; a shared decoder
maps latent states back to observation space.  Training maximizes the usual
Gaussian-likelihood evidence lower bound with a linear KL warm-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorgrad as tg
from .nets import (
    MLP,
    GaussianParams,
    Hypernetwork,
    MLPSpec,
    encode_gamma,
    encode_z0,
    hypernet_map,
    init_hypernetwork,
    split_weight_vector,
    weight_count,
    _forward_layers,
)
from .odeint import IntegrationBlowUp, SolverConfig, TimeGrid, integrate, integrate_batch
from .tensorgrad import ParamSet, Tensor

__all__ = [
    "FNODEModel",
    "TrainConfig",
    "ELBOBreakdown",
    "FNODEOutputs",
    "TrainingDiverged",
    "reparameterize",
    "kl_gaussian",
    "kl_schedule",
    "make_field",
    "forward",
    "elbo_loss",
    "fit",
    "reconstruct",
    "decode_path",
    "Adam",
]

LOG_2PI = math.log(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str = "non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    kl_anneal_epochs: int = 50
    seed: int = 0
    mc_samples: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if min(self.batch_size, self.kl_anneal_epochs, self.mc_samples) < 1:
            raise ValueError("batch_size, kl_anneal_epochs, mc_samples must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs > 0 and self.kl_anneal_epochs > self.epochs:
            raise ValueError("kl_anneal_epochs must not exceed epochs")


@dataclass
class ELBOBreakdown:
    """Evidence-bound terms: total = recon_loglik - kl_weight*(kl_z0 + kl_gamma)."""

    total: float
    recon_loglik: float
    kl_z0: float
    kl_gamma: float
    kl_weight: float


@dataclass
class FNODEOutputs:
    recon: list[Tensor]
    z_path: list[Tensor]
    gamma: Tensor
    q_z0: GaussianParams
    q_gamma: GaussianParams


@dataclass
class FNODEModel:
    """All trainable pieces plus solver and likelihood configuration.

    ``params`` holds every trainable tensor under a component prefix
    (``enc_z0.``, ``enc_gamma.``, ``hyper.``, ``dec.``); the component objects
    share those tensors, so in-place optimizer updates are visible everywhere.
    """

    enc_z0: MLP
    enc_gamma: MLP
    hyper: Hypernetwork
    f_spec: MLPSpec
    dec: MLP
    solver: SolverConfig
    sigma_x: float
    p: int
    d_gamma: int
    obs_dim: int
    n_points: int
    obs_scale: float
    params: ParamSet

    def __post_init__(self):
        if self.hyper.body.out_width != weight_count(self.f_spec):
            raise ValueError("hypernetwork output width != transition weight count")
        if self.f_spec.in_width != self.p + 1 or self.f_spec.out_width != self.p:
            raise ValueError("transition net must map [p+1] -> [p]")
        if not self.sigma_x > 0:
            raise ValueError("sigma_x must be positive")

    @classmethod
    def build(
        cls,
        obs_dim: int,
        n_points: int,
        p: int = 8,
        d_gamma: int = 16,
        f_hidden: Sequence[int] = (100, 100),
        enc_hidden: Sequence[int] = (64, 64),
        dec_hidden: Sequence[int] = (64, 64),
        hyper_hidden: Sequence[int] = (128, 128),
        step_size: float = 0.1,
        sigma_x: float = 0.05,
        obs_scale: float = 1.0,
        lambda_init: float = 0.1,
        seed: int = 0,
    ) -> "FNODEModel":
        rng = np.random.default_rng(seed)
        feat = n_points * (1 + obs_dim)
        enc_z0 = MLP.init((feat, *enc_hidden, 2 * p), rng)
        enc_gamma = MLP.init((feat, *enc_hidden, 2 * d_gamma), rng)
        f_spec = MLPSpec((p + 1, *f_hidden, p))
        hyper = init_hypernetwork(d_gamma, f_spec, hyper_hidden, rng, lambda_init)
        dec = MLP.init((p, *dec_hidden, obs_dim), rng)

        params = ParamSet()
        for prefix, ps in (
            ("enc_z0.", enc_z0.params),
            ("enc_gamma.", enc_gamma.params),
            ("hyper.", hyper.params),
            ("dec.", dec.params),
        ):
            for name, t in ps.items():
                params.add(prefix + name, t)

        return cls(
            enc_z0=enc_z0,
            enc_gamma=enc_gamma,
            hyper=hyper,
            f_spec=f_spec,
            dec=dec,
            solver=SolverConfig(step_size=step_size),
            sigma_x=sigma_x,
            p=p,
            d_gamma=d_gamma,
            obs_dim=obs_dim,
            n_points=n_points,
            obs_scale=obs_scale,
            params=params,
        )


# -- elementary pieces ---------------------------------------------------------


def reparameterize(g: GaussianParams, noise: Tensor) -> Tensor:
    """mean + exp(log_var / 2) * noise, differentiable through both moments."""
    return tg.mul(tg.exp(tg.scale(g.log_var, 0.5)), noise) + g.mean


def _kl_term(mean: Tensor, log_var: Tensor) -> Tensor:
    # Closed-form KL(N(mu, diag(exp(lv))) || N(0, I)), summed over all entries.
    inner = tg.exp(log_var) + tg.square(mean) - log_var - 1.0
    return tg.scale(tg.tensor_sum(inner), 0.5)


def kl_gaussian(q: GaussianParams) -> float:
    """KL divergence of a diagonal Gaussian from the standard-normal prior."""
    return _kl_term(q.mean, q.log_var).item()


def kl_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to 1 over the first ``kl_anneal_epochs`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(1.0, (epoch + 1) / cfg.kl_anneal_epochs)


def make_field(f_spec: MLPSpec, theta: Tensor):
    """Vector field z' = f([z, t]) with weights read from a flat vector.

    The per-layer slices of ``theta`` are prepared once so repeated solver
    evaluations reuse them.
    """
    layers = split_weight_vector(f_spec, theta)
    final_tanh = f_spec.final_activation == "tanh"

    def fld(z: Tensor, t: float) -> Tensor:
        zin = tg.concat([z, Tensor(np.array([t]))])
        return _forward_layers(layers, zin, final_tanh)

    return fld


# -- forward / objective ---------------------------------------------------------


def forward(m: FNODEModel, x, noise_z0: Tensor, noise_gamma: Tensor) -> FNODEOutputs:
    """Single-trajectory pass: encode, sample, roll out, decode."""
    q_z0 = encode_z0(m.enc_z0, x, m.obs_scale)
    q_gamma = encode_gamma(m.enc_gamma, x, m.obs_scale)
    z0 = reparameterize(q_z0, noise_z0)
    gamma = reparameterize(q_gamma, noise_gamma)
    theta = hypernet_map(m.hyper, gamma)
    fld = make_field(m.f_spec, theta)
    try:
        z_path = integrate(fld, z0, TimeGrid(x.times), m.solver)
    except IntegrationBlowUp as e:
        raise IntegrationBlowUp(e.t) from e
    recon = [m.dec(z) for z in z_path]
    return FNODEOutputs(recon, z_path, gamma, q_z0, q_gamma)


def make_batch_field(f_spec: MLPSpec, theta_all: Tensor):
    """Batched vector field with per-row weight vectors ([B, weight_count]).

    One fused layer node per call keeps the solver loop off the Python floor;
    the per-layer slices of the weight block are taken once and reused.
    """
    slices = []
    pos = 0
    ws = f_spec.layer_widths
    for n_in, n_out in zip(ws[:-1], ws[1:]):
        wf = tg.cols(theta_all, pos, pos + n_in * n_out)
        pos += n_in * n_out
        bf = tg.cols(theta_all, pos, pos + n_out)
        pos += n_out
        slices.append((wf, bf, n_in, n_out))
    final_tanh = f_spec.final_activation == "tanh"
    last = len(slices) - 1

    def fld(Z: Tensor, t_row: np.ndarray) -> Tensor:
        h = tg.concat([Z, Tensor(t_row[:, None], _op="const")], axis=1)
        for i, (wf, bf, n_in, n_out) in enumerate(slices):
            h = tg.rowwise_linear(h, wf, bf, n_in, n_out, i < last or final_tanh)
        return h

    return fld


def _pack_batch(m: FNODEModel, trajs):
    from .nets import trajectory_features

    feats = np.stack([trajectory_features(t.times, t.values, m.obs_scale) for t in trajs])
    times = np.stack([np.asarray(t.times, dtype=np.float64) for t in trajs])
    targets = np.stack(
        [np.asarray(t.values, dtype=np.float64).reshape(-1, m.obs_dim) for t in trajs]
    )
    return feats, times, targets


def _elbo_core(m: FNODEModel, feats, times, targets, kl_weight: float, noises):
    """Scalar mean-ELBO tensor over a packed batch, plus its float breakdown.

    ``feats`` is [B, F] encoder input, ``times`` [B, T], ``targets``
    [B, T, obs_dim]; ``noises`` is one (noise_z0, noise_gamma) tensor pair per
    Monte-Carlo draw.
    """
    from .nets import mlp_forward, split_gaussian

    B, T = times.shape
    feat_t = Tensor(feats, _op="const")
    q_z0 = split_gaussian(mlp_forward(m.enc_z0.spec, m.enc_z0.params, feat_t), m.p)
    q_gamma = split_gaussian(mlp_forward(m.enc_gamma.spec, m.enc_gamma.params, feat_t), m.d_gamma)

    # time-major targets to match the concatenated solver states
    targets_tm = Tensor(np.concatenate([targets[:, j, :] for j in range(T)]), _op="const")
    log_norm = -(math.log(m.sigma_x) + 0.5 * LOG_2PI) * targets_tm.data.size

    recon_draws = []
    for nz, ng in noises:
        z0_all = reparameterize(q_z0, nz)
        gamma_all = reparameterize(q_gamma, ng)
        theta_all = hypernet_map(m.hyper, gamma_all)
        fld = make_batch_field(m.f_spec, theta_all)
        states = integrate_batch(fld, z0_all, times, m.solver)
        recon = m.dec(tg.concat(states, axis=0))
        sq = tg.tensor_sum(tg.square(recon - targets_tm))
        recon_draws.append(tg.scale(sq, -1.0 / (2.0 * m.sigma_x**2)) + log_norm)

    recon_ll = recon_draws[0]
    for extra in recon_draws[1:]:
        recon_ll = recon_ll + extra
    if len(recon_draws) > 1:
        recon_ll = tg.scale(recon_ll, 1.0 / len(recon_draws))

    kl_z0 = _kl_term(q_z0.mean, q_z0.log_var)
    kl_gamma = _kl_term(q_gamma.mean, q_gamma.log_var)
    kl_sum = kl_z0 + kl_gamma

    total = recon_ll - tg.scale(kl_sum, kl_weight)
    mean_total = tg.scale(total, 1.0 / B)
    breakdown = ELBOBreakdown(
        total=mean_total.item(),
        recon_loglik=recon_ll.item() / B,
        kl_z0=kl_z0.item() / B,
        kl_gamma=kl_gamma.item() / B,
        kl_weight=kl_weight,
    )
    return mean_total, breakdown


def _batch_elbo(m: FNODEModel, trajs, kl_weight: float, noises, sample_offset: int = 0):
    """Mean-ELBO tensor plus breakdown for a list of equal-length trajectories."""
    if any(len(t.times) != len(trajs[0].times) for t in trajs):
        raise ValueError("batch trajectories must share the number of observations")
    feats, times, targets = _pack_batch(m, trajs)
    return _elbo_core(m, feats, times, targets, kl_weight, noises)


def elbo_loss(m: FNODEModel, x, cfg: TrainConfig, kl_weight: float) -> ELBOBreakdown:
    """Monte-Carlo ELBO estimate for one trajectory (loss to minimize is -total)."""
    if not 0.0 <= kl_weight <= 1.0:
        raise ValueError("kl_weight must lie in [0, 1]")
    rng = np.random.default_rng(cfg.seed)
    noises = [
        (
            Tensor(rng.standard_normal((1, m.p))),
            Tensor(rng.standard_normal((1, m.d_gamma))),
        )
        for _ in range(cfg.mc_samples)
    ]
    _, breakdown = _batch_elbo(m, [x], kl_weight, noises)
    return breakdown


# -- optimizer -------------------------------------------------------------------


class Adam:
    """Adaptive-moment estimation with bias correction; updates are in place.

    Scratch buffers are reused across steps because the largest parameter
    (the hypernetwork output layer) makes per-step temporaries expensive.
    """

    def __init__(self, params: ParamSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._s = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            m, v, s = self._m[name], self._v[name], self._s[name]
            m *= self.b1
            np.multiply(g, 1.0 - self.b1, out=s)
            m += s
            v *= self.b2
            np.multiply(g, g, out=s)
            s *= 1.0 - self.b2
            v += s
            np.divide(v, c2, out=s)
            np.sqrt(s, out=s)
            s += self.eps
            np.divide(m, s, out=s)
            s *= self.lr / c1
            t.data -= s


# -- training ---------------------------------------------------------------------


def fit(m: FNODEModel, data, cfg: TrainConfig, on_epoch=None):
    """Mini-batch ELBO maximization; returns the model and per-epoch history.

    Deterministic given ``cfg.seed``: shuffling and every reparameterization
    draw come from one generator consumed in a fixed order.  ``on_epoch`` is
    called as ``on_epoch(epoch, breakdown)`` after each epoch, letting callers
    keep a partial log if training aborts.
    """
    trajs = data.trajectories
    if not trajs:
        raise ValueError("dataset is empty")
    if any(t.values.shape[1] != m.obs_dim or len(t.times) != m.n_points for t in trajs):
        raise ValueError("every trajectory must match the model's obs_dim and point count")
    feats, times, targets = _pack_batch(m, trajs)

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(m.params, cfg.learning_rate)
    history: list[ELBOBreakdown] = []
    n = len(trajs)

    with tg.finite_checks(False):
        for epoch in range(cfg.epochs):
            w = kl_schedule(epoch, cfg)
            order = rng.permutation(n)
            sums = np.zeros(4)
            for bi, lo in enumerate(range(0, n, cfg.batch_size)):
                idx = order[lo : lo + cfg.batch_size]
                B = len(idx)
                noises = [
                    (
                        Tensor(rng.standard_normal((B, m.p))),
                        Tensor(rng.standard_normal((B, m.d_gamma))),
                    )
                    for _ in range(cfg.mc_samples)
                ]
                try:
                    loss_t, bd = _elbo_core(m, feats[idx], times[idx], targets[idx], w, noises)
                except IntegrationBlowUp as e:
                    raise TrainingDiverged(epoch, bi, str(e)) from e
                if not math.isfinite(bd.total):
                    raise TrainingDiverged(epoch, bi)
                m.params.zero_grads()
                tg.backward(tg.neg(loss_t))
                opt.step()
                sums += np.array([bd.total, bd.recon_loglik, bd.kl_z0, bd.kl_gamma]) * B
            avg = sums / n
            epoch_bd = ELBOBreakdown(avg[0], avg[1], avg[2], avg[3], w)
            history.append(epoch_bd)
            if on_epoch is not None:
                on_epoch(epoch, epoch_bd)
    return m, history


# -- deterministic reconstruction ---------------------------------------------------


def decode_path(m: FNODEModel, z0: Tensor, theta: Tensor, anchor_t: float, times) -> list[Tensor]:
    """Decode latent states at ``times`` for a rollout anchored at ``anchor_t``.

    Times earlier than the anchor are reached by integrating the negated field
    backwards; later ones by the ordinary forward solve.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size < 1:
        raise ValueError("times must be a non-empty 1-d array")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    fld = make_field(m.f_spec, theta)

    eps = 1e-12
    n_before = int(np.sum(times < anchor_t - eps))
    before = times[:n_before]
    after = times[n_before:]

    states: dict[int, Tensor] = {}
    if after.size:
        if abs(after[0] - anchor_t) <= eps:
            grid = after
            offset = 0
        else:
            grid = np.concatenate([[anchor_t], after])
            offset = 1
        path = integrate(fld, z0, TimeGrid(grid), m.solver)
        for j, z in enumerate(path[offset:]):
            states[n_before + j] = z
    if before.size:

        def fld_rev(z: Tensor, tau: float) -> Tensor:
            return tg.neg(fld(z, anchor_t - tau))

        tau_grid = np.concatenate([[0.0], anchor_t - before[::-1]])
        path = integrate(fld_rev, z0, TimeGrid(tau_grid), m.solver)
        for j, z in enumerate(path[1:]):
            states[n_before - 1 - j] = z

    zmat = tg.stack_rows([states[i] for i in range(times.size)])
    recon = m.dec(zmat)
    return [tg.row(recon, i) for i in range(times.size)]


def reconstruct(m: FNODEModel, x, times, use_posterior_mean: bool = True, seed: int = 0) -> list[Tensor]:
    """Decoded trajectory over ``times`` (which may extend past the data).

    With ``use_posterior_mean`` the encoder means are used directly; otherwise
    one reparameterized draw of (z0, gamma) is taken.
    """
    q_z0 = encode_z0(m.enc_z0, x, m.obs_scale)
    q_gamma = encode_gamma(m.enc_gamma, x, m.obs_scale)
    if use_posterior_mean:
        z0, gamma = q_z0.mean, q_gamma.mean
    else:
        rng = np.random.default_rng(seed)
        z0 = reparameterize(q_z0, Tensor(rng.standard_normal(m.p)))
        gamma = reparameterize(q_gamma, Tensor(rng.standard_normal(m.d_gamma)))
    theta = hypernet_map(m.hyper, gamma)
    times = np.asarray(times, dtype=np.float64) if not isinstance(times, TimeGrid) else times.times
    return decode_path(m, z0, theta, float(np.asarray(x.times)[0]), times)
