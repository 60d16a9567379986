"""Training loop: noisy states, score-matching targets, loss and gradients.

One step draws a random diffusion time and noise per molecule, builds the
diffused state, runs the variational-noising encoder and the dual score
network, and regresses both score channels onto the exact perturbation-
kernel gradients.  Gradients are exact reverse-mode derivatives from the
in-repo tape; the finite-difference tests arbitrate their correctness.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import MolecularGeometry, build_edges, zero_com
from .params import ModelParams, grads_of, map_leaves, named_leaves, wrap_in_vars
from .schedule import (NoiseSchedule, q_sample, score_target_coords,
                       score_target_features)
from .score_net import NetConfig, dual_score, schedule_score_scale
from .varnoise import encode, kl_loss, reparameterize


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    gamma_weighting: bool = False
    kl_weight: float = 1.0
    standard_reparam: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 500
    max_steps: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class LossBreakdown:
    """Per-step loss terms (batch means).  ``gamma_weight`` is the loss
    weight of the simplified objective, recorded even though the default
    objective drops it."""

    score_feature_loss: float
    score_coord_loss: float
    vn_loss: float
    total: float
    gamma_weight: float


@dataclass
class StepDraws:
    """Frozen per-molecule randomness of one step, so the same loss can be
    re-evaluated under perturbed parameters (finite differences)."""

    t: list[int]
    eps_features: list[np.ndarray]
    eps_coords: list[np.ndarray]
    z: list[np.ndarray]


def _normalize_batch(batch):
    out = []
    for item in batch:
        if isinstance(item, MolecularGeometry):
            out.append((item, None))
        else:
            geom, cond = item
            out.append((geom, cond))
    return out


def draw_step_randomness(batch, schedule: NoiseSchedule, cfg: NetConfig,
                         train_cfg: TrainConfig, rng: np.random.Generator) -> StepDraws:
    """Sample (t, feature noise, zero-COM coordinate noise, latent noise)
    for each molecule.  With gamma weighting on, t starts at 2 — the
    weighted objective sums from there and its weight diverges at t=1
    under the deterministic final step."""
    t_lo = 2 if train_cfg.gamma_weighting else 1
    ts, eps_a, eps_r, zs = [], [], [], []
    for geom, _ in _normalize_batch(batch):
        ts.append(int(rng.integers(t_lo, schedule.T + 1)))
        eps_a.append(rng.standard_normal(geom.atom_features.shape))
        eps_r.append(zero_com(rng.standard_normal(geom.coords.shape)))
        zs.append(rng.standard_normal(cfg.zv_dim))
    return StepDraws(t=ts, eps_features=eps_a, eps_coords=eps_r, z=zs)


def gamma_weight(t: int, schedule: NoiseSchedule) -> float:
    """Weight of the simplified objective at step t: beta^2 over
    2 (1 - beta)(1 - alpha_bar) sigma^2.  Infinite where sigma_t = 0."""
    i = schedule.index(t)
    beta = schedule.beta[i]
    sig2 = schedule.sigma[i] ** 2
    denom = 2.0 * (1.0 - beta) * (1.0 - schedule.alpha_bar[i]) * sig2
    return float("inf") if denom == 0 else beta ** 2 / denom


def batch_loss(batch, draws: StepDraws, model, schedule: NoiseSchedule,
               cfg: NetConfig, train_cfg: TrainConfig):
    """Mean loss over the batch under frozen randomness.

    ``model`` may hold plain arrays (pure evaluation) or tape variables
    (training).  Returns the scalar loss (same flavor as the parameters)
    and the float breakdown.
    """
    batch = _normalize_batch(batch)
    feat_sum, coord_sum, vn_sum, total, gamma_sum = 0.0, 0.0, 0.0, 0.0, 0.0
    for k, (g0, cond) in enumerate(batch):
        t = draws.t[k]
        state = q_sample(g0, t, schedule, (draws.eps_features[k], draws.eps_coords[k]))
        mu_v, sigma_v = encode(state.geometry_t, t, schedule.T, model, cfg, cond)
        z_v = reparameterize(mu_v, sigma_v, draws.z[k],
                             standard=train_cfg.standard_reparam)
        out = dual_score(state.geometry_t, t, schedule.T, cond, z_v, model, cfg,
                         score_scale=schedule_score_scale(schedule, t))
        target_a = score_target_features(g0, state, schedule)
        edges = build_edges(state.geometry_t, cfg.tau)
        target_r = score_target_coords(g0, state, schedule, edges)

        diff_a = out.feature_score - target_a
        diff_r = out.coord_score - target_r
        lf = (diff_a * diff_a).sum()
        lc = (diff_r * diff_r).sum()
        vn = kl_loss(mu_v, sigma_v)
        gamma = gamma_weight(t, schedule)
        weight = gamma if train_cfg.gamma_weighting else 1.0

        mol_total = weight * (lf + lc) + train_cfg.kl_weight * vn
        if not np.isfinite(ad.value_of(mol_total)):
            raise ValueError(f"numerical divergence at molecule index {k}")
        feat_sum = feat_sum + lf
        coord_sum = coord_sum + lc
        vn_sum = vn_sum + vn
        total = total + mol_total
        gamma_sum += gamma

    n = len(batch)
    loss = total / n
    breakdown = LossBreakdown(
        score_feature_loss=float(ad.value_of(feat_sum)) / n,
        score_coord_loss=float(ad.value_of(coord_sum)) / n,
        vn_loss=float(ad.value_of(vn_sum)) / n,
        total=float(ad.value_of(loss)),
        gamma_weight=gamma_sum / n,
    )
    return loss, breakdown


def _loss_and_grads(batch, draws: StepDraws, model, schedule, cfg, train_cfg):
    pvars = wrap_in_vars(model)
    loss, breakdown = batch_loss(batch, draws, pvars, schedule, cfg, train_cfg)
    ad.backward(loss)
    return breakdown, grads_of(pvars)


def training_step(batch, model: ModelParams, schedule: NoiseSchedule,
                  cfg: NetConfig, train_cfg: TrainConfig,
                  rng: np.random.Generator):
    """One stochastic step: returns the loss breakdown and the exact
    gradient tree (same structure as the parameters)."""
    draws = draw_step_randomness(batch, schedule, cfg, train_cfg, rng)
    return _loss_and_grads(batch, draws, model, schedule, cfg, train_cfg)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(model, grads, state: AdamState, train_cfg: TrainConfig):
    """Standard Adam with bias correction; purely functional."""
    b1, b2, eps = train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps
    step = state.step + 1
    new_m, new_v = {}, {}
    grad_by_name = dict(named_leaves(grads))
    names = iter([name for name, _ in named_leaves(model)])

    def update(leaf):
        name = next(names)
        g = grad_by_name[name]
        m = b1 * state.m.get(name, np.zeros_like(leaf)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(leaf)) + (1 - b2) * g * g
        new_m[name], new_v[name] = m, v
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        return leaf - train_cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)

    updated = map_leaves(model, update)
    return updated, AdamState(step=step, m=new_m, v=new_v)


def train(dataset, model: ModelParams, schedule: NoiseSchedule, cfg: NetConfig,
          train_cfg: TrainConfig, rng: np.random.Generator,
          metrics_sink=None, checkpoint_sink=None,
          shuffle_rng: np.random.Generator | None = None) -> ModelParams:
    """Epochs of shuffled mini-batches over ``dataset`` (a list of
    geometries or (geometry, condition) pairs).

    ``rng`` drives the per-step noise; ``shuffle_rng`` (defaulting to the
    same stream) orders the batches.  ``metrics_sink(row_dict)`` receives
    one row per step; ``checkpoint_sink(step, model)`` fires every
    checkpoint interval and after the final step.  On numerical divergence
    the last completed checkpoint is left untouched and the error
    propagates.
    """
    items = _normalize_batch(dataset)
    if not items:
        raise ValueError("empty dataset")
    if shuffle_rng is None:
        shuffle_rng = rng
    opt_state = AdamState()
    step = 0
    done = False
    for _ in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(items))
        for start in range(0, len(items), train_cfg.batch_size):
            batch = [items[i] for i in order[start:start + train_cfg.batch_size]]
            draws = draw_step_randomness(batch, schedule, cfg, train_cfg, rng)
            breakdown, grads = _loss_and_grads(batch, draws, model, schedule,
                                               cfg, train_cfg)
            model, opt_state = adam_update(model, grads, opt_state, train_cfg)
            step += 1
            if metrics_sink is not None:
                metrics_sink({
                    "step": step,
                    "t_mean": float(np.mean(draws.t)),
                    "feature_loss": breakdown.score_feature_loss,
                    "coord_loss": breakdown.score_coord_loss,
                    "vn_loss": breakdown.vn_loss,
                    "total": breakdown.total,
                })
            if checkpoint_sink is not None and step % train_cfg.checkpoint_interval == 0:
                checkpoint_sink(step, model)
            if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                done = True
                break
        if done:
            break
    if checkpoint_sink is not None:
        checkpoint_sink(step, model)
    return model


METRICS_COLUMNS = ("step", "t_mean", "feature_loss", "coord_loss", "vn_loss", "total")


def csv_metrics_sink(path):
    """Metrics sink writing the standard CSV log."""
    handle = open(path, "w", newline="")
    writer = csv.DictWriter(handle, fieldnames=METRICS_COLUMNS)
    writer.writeheader()

    def sink(row):
        writer.writerow(row)
        handle.flush()

    sink.close = handle.close
    return sink


# -- ELBO reporting ----------------------------------------------------------

def _gaussian_kl_vs_std(mean: np.ndarray, var: float) -> float:
    """Closed-form KL of N(mean, var I) from N(0, I), summed over entries."""
    m2 = float(np.sum(np.square(mean)))
    k = mean.size
    return 0.5 * (m2 + k * (var - 1.0 - math.log(var)))


L0_BIN_WIDTH = 2.0 / 255.0


def elbo_report(geoms, model: ModelParams, schedule: NoiseSchedule,
                cfg: NetConfig, rng: np.random.Generator,
                num_draws: int = 8) -> dict[str, float]:
    """Monte Carlo estimates of the variational-bound terms, averaged over
    the supplied molecules.

    The terminal term is exact (Gaussian KL); the stepwise term and the
    latent KL are uniform-over-t Monte Carlo; the reconstruction term uses
    a discretized Gaussian on the feature channel (fixed bin width) and the
    plain density on coordinates.  Reporting only — none of this is
    optimized.
    """
    geoms = [g if isinstance(g, MolecularGeometry) else g[0] for g in geoms]
    l_T = 0.0
    l_t_sum = 0.0
    l_vn_sum = 0.0
    l_0 = 0.0
    ab_T = schedule.alpha_bar[-1]
    for g0 in geoms:
        data = np.concatenate([g0.atom_features.ravel(), zero_com(g0.coords).ravel()])
        l_T += _gaussian_kl_vs_std(np.sqrt(ab_T) * data, 1.0 - ab_T)

        # stepwise KL and latent KL, uniform over t in [2, T]
        kl_steps, kl_vn = [], []
        for _ in range(num_draws if schedule.T >= 2 else 0):
            t = int(rng.integers(2, schedule.T + 1))
            i = schedule.index(t)
            eps = (rng.standard_normal(g0.atom_features.shape),
                   zero_com(rng.standard_normal(g0.coords.shape)))
            state = q_sample(g0, t, schedule, eps)
            mu_v, sigma_v = encode(state.geometry_t, t, schedule.T, model, cfg)
            kl_vn.append(float(ad.value_of(kl_loss(mu_v, sigma_v))))
            z_v = reparameterize(mu_v, sigma_v, rng.standard_normal(cfg.zv_dim))
            out = dual_score(state.geometry_t, t, schedule.T, None, z_v, model,
                             cfg, score_scale=schedule_score_scale(schedule, t))
            mu_model_a = (state.geometry_t.atom_features
                          + schedule.beta[i] * out.feature_score) / np.sqrt(schedule.alpha[i])
            mu_model_r = (state.geometry_t.coords
                          + schedule.beta[i] * out.coord_score) / np.sqrt(schedule.alpha[i])
            mu_true_a = _posterior_mean_arr(g0.atom_features,
                                            state.geometry_t.atom_features, i, schedule)
            mu_true_r = _posterior_mean_arr(zero_com(g0.coords),
                                            state.geometry_t.coords, i, schedule)
            bt = schedule.beta_tilde[i]
            sig2 = schedule.sigma[i] ** 2
            gap = (np.sum((mu_true_a - mu_model_a) ** 2)
                   + np.sum((mu_true_r - mu_model_r) ** 2))
            size = g0.atom_features.size + g0.coords.size
            kl_steps.append(size * (0.5 * math.log(sig2 / bt)
                                    + (bt - sig2) / (2 * sig2)) + gap / (2 * sig2))
        if schedule.T >= 2:
            l_t_sum += (schedule.T - 1) * float(np.mean(kl_steps))
            l_vn_sum += (schedule.T - 1) * float(np.mean(kl_vn))

        # reconstruction term at t=1
        recon = []
        sigma_1 = schedule.sigma[0] if schedule.sigma[0] > 0 else math.sqrt(schedule.beta[0])
        for _ in range(num_draws):
            eps = (rng.standard_normal(g0.atom_features.shape),
                   zero_com(rng.standard_normal(g0.coords.shape)))
            state = q_sample(g0, 1, schedule, eps)
            mu_v, sigma_v = encode(state.geometry_t, 1, schedule.T, model, cfg)
            z_v = reparameterize(mu_v, sigma_v, rng.standard_normal(cfg.zv_dim))
            out = dual_score(state.geometry_t, 1, schedule.T, None, z_v, model,
                             cfg, score_scale=schedule_score_scale(schedule, 1))
            mu_a = (state.geometry_t.atom_features
                    + schedule.beta[0] * out.feature_score) / np.sqrt(schedule.alpha[0])
            mu_r = (state.geometry_t.coords
                    + schedule.beta[0] * out.coord_score) / np.sqrt(schedule.alpha[0])
            log_a = _log_normal_pdf(g0.atom_features, mu_a, sigma_1) \
                + g0.atom_features.size * math.log(L0_BIN_WIDTH)
            log_r = _log_normal_pdf(zero_com(g0.coords), mu_r, sigma_1)
            recon.append(-(log_a + log_r))
        l_0 += float(np.mean(recon))

    n = len(geoms)
    return {"L_T": l_T / n, "L_t_sum": l_t_sum / n,
            "L_vn_sum": l_vn_sum / n, "L_0": l_0 / n}


def _posterior_mean_arr(x0, xt, i, schedule):
    coef_t = np.sqrt(schedule.alpha[i]) * (1 - schedule.alpha_bar_prev[i]) \
        / (1 - schedule.alpha_bar[i])
    coef_0 = np.sqrt(schedule.alpha_bar_prev[i]) * schedule.beta[i] \
        / (1 - schedule.alpha_bar[i])
    return coef_t * xt + coef_0 * x0


def _log_normal_pdf(x, mean, sigma) -> float:
    z = (x - mean) / sigma
    return float(np.sum(-0.5 * z ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)))
