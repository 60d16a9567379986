"""Ancestral sampling: reverse chain, size sampling, decoding.

The chain is initialized once from the standard normal (coordinates
projected to zero center of mass) and walked from t = T down to 1; the
per-molecule latent is drawn once and held fixed across all steps.  The
final step adds no noise, so the chain ends on the predicted mean.

The reverse mean uses the score-consistent coefficient on both channels:
mu = (state + beta_t * score) / sqrt(alpha_t).  With a network trained on
exact kernel gradients this inverts the forward process (substituting the
known analytic score reproduces the data statistics, which is how the
sampler is tested).  The distance-decomposed coordinate target overcounts
the kernel score by roughly the neighbor multiplicity, so the final steps
apply more pull than a pure Gaussian analysis would; schedules with a
small starting variance keep the late-chain noise that this amplifies
negligible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import MolecularGeometry, zero_com
from .params import ModelParams
from .schedule import NoiseSchedule
from .score_net import NetConfig, ScoreOutput, dual_score, schedule_score_scale
from .varnoise import sample_prior

ZV_MODES = ("gaussian", "uniform")


@dataclass
class SamplerConfig:
    num_samples: int = 1
    zv_mode: str = "uniform"
    size_mode: str | int = "histogram"
    condition: tuple[str, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be at least 1")
        if self.zv_mode not in ZV_MODES:
            raise ValueError(f"unknown zv mode: {self.zv_mode!r}")
        if isinstance(self.size_mode, int) and self.size_mode < 1:
            raise ValueError("fixed size must be at least 1")


def reverse_step(state: MolecularGeometry, t: int, model: ModelParams,
                 schedule: NoiseSchedule, cfg: NetConfig, z_v, condition,
                 rng: np.random.Generator, score_fn=None,
                 noise=None) -> MolecularGeometry:
    """One denoising step from t to t-1.

    ``score_fn(state, t) -> ScoreOutput`` substitutes for the network when
    given (diagnostics and the analytic-score chain tests).  ``noise``
    optionally injects the (feature, coordinate) noise pair; the
    coordinate noise is always projected to zero COM, and no noise at all
    is added at t = 1.
    """
    i = schedule.index(t)
    if score_fn is not None:
        score = score_fn(state, t)
    else:
        score = dual_score(state, t, schedule.T, condition, z_v, model, cfg,
                           score_scale=schedule_score_scale(schedule, t))
    beta = schedule.beta[i]
    root_alpha = np.sqrt(schedule.alpha[i])
    mu_a = (state.atom_features + beta * score.feature_score) / root_alpha
    mu_r = (state.coords + beta * score.coord_score) / root_alpha
    if t > 1:
        if noise is None:
            xi_a = rng.standard_normal(mu_a.shape)
            xi_r = rng.standard_normal(mu_r.shape)
        else:
            xi_a, xi_r = noise
        xi_r = zero_com(xi_r)
        sigma = schedule.sigma[i]
        feats = mu_a + sigma * xi_a
        coords = mu_r + sigma * xi_r
    else:
        feats, coords = mu_a, mu_r
    if not (np.isfinite(feats).all() and np.isfinite(coords).all()):
        raise ValueError(f"sampler divergence at step {t}")
    return MolecularGeometry(feats, zero_com(coords), state.elements)


def decode(geometry_0: MolecularGeometry) -> MolecularGeometry:
    """Snap a continuous final state to a discrete molecule.

    Element by argmax over the one-hot block (ties resolve to the lowest
    element index), charge to the nearest integer clamped to [-2, 2],
    coordinates passed through.
    """
    n_el = len(geometry_0.elements)
    block = geometry_0.atom_features[:, :n_el]
    idx = np.argmax(block, axis=1)
    feats = np.zeros_like(geometry_0.atom_features)
    feats[np.arange(geometry_0.n), idx] = 1.0
    feats[:, -1] = np.clip(np.rint(geometry_0.atom_features[:, -1]), -2, 2)
    return MolecularGeometry(feats, geometry_0.coords, geometry_0.elements)


def sample_molecule(n: int, model: ModelParams, schedule: NoiseSchedule,
                    cfg: NetConfig, sampler_cfg: SamplerConfig,
                    rng: np.random.Generator, condition_std: float | None = None,
                    score_fn=None, trajectory_sink=None) -> MolecularGeometry:
    """Generate one molecule with n atoms and return its decoded form.

    ``condition_std`` is the already-standardized property value for
    conditional models.  ``trajectory_sink(t, geometry)`` observes every
    intermediate state, including the initial noise (t = T) and the final
    continuous state (t = 0).
    """
    if n < 1:
        raise ValueError("molecule size must be at least 1")
    feats = rng.standard_normal((n, cfg.f))
    coords = zero_com(rng.standard_normal((n, 3)))
    state = MolecularGeometry(feats, coords, cfg.elements)
    z_v = sample_prior(sampler_cfg.zv_mode, cfg.zv_dim, rng)
    if trajectory_sink is not None:
        trajectory_sink(schedule.T, state)
    for t in range(schedule.T, 0, -1):
        state = reverse_step(state, t, model, schedule, cfg, z_v,
                             condition_std, rng, score_fn=score_fn)
        if trajectory_sink is not None:
            trajectory_sink(t - 1, state)
    return decode(state)


def sample_size(histogram: dict[int, float], rng: np.random.Generator) -> int:
    """Draw an atom count from the training-set size distribution."""
    if not histogram:
        raise ValueError("no size histogram in checkpoint")
    sizes = sorted(histogram)
    weights = np.array([histogram[s] for s in sizes], dtype=np.float64)
    probs = weights / weights.sum()
    return int(rng.choice(sizes, p=probs))


def sample_conditional(n: int, model: ModelParams, schedule: NoiseSchedule,
                       condition: tuple[str, float], cfg: NetConfig,
                       sampler_cfg: SamplerConfig, rng: np.random.Generator,
                       model_condition_name: str | None,
                       property_stats: dict[str, tuple[float, float]],
                       trajectory_sink=None) -> MolecularGeometry:
    """Conditional generation: the requested property value is standardized
    with the training statistics and injected at every score evaluation."""
    name, value = condition
    if not model_condition_name or not cfg.condition_dim:
        raise ValueError("model is unconditional / wrong property: "
                         f"cannot condition on {name!r}")
    if name != model_condition_name:
        raise ValueError("model is unconditional / wrong property: "
                         f"model was trained on {model_condition_name!r}, got {name!r}")
    mean, std = property_stats[name]
    std_value = (value - mean) / (std if std > 0 else 1.0)
    return sample_molecule(n, model, schedule, cfg, sampler_cfg, rng,
                           condition_std=std_value, trajectory_sink=trajectory_sink)
