"""Noise schedules and the closed-form pieces of the diffusion process.

Everything here is exact Gaussian bookkeeping: the forward marginal at an
arbitrary step, the true denoising posterior, and the score-matching
targets the network is trained against.  Steps are 1-based (t in [1, T]);
the stored vectors are 0-indexed, so entry ``t - 1`` belongs to step t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import EdgeSet, MolecularGeometry, pairwise_distances, zero_com

MIN_DIFFUSED_DISTANCE = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and everything derived from them.

    ``alpha_bar_prev[t-1]`` holds the cumulative product one step earlier,
    with the t=1 entry fixed to 1 so the step-1 posterior variance
    ``beta_tilde[0]`` is exactly zero (the final reverse step is
    deterministic).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    beta_tilde: np.ndarray
    sigma: np.ndarray
    sigma_mode: str = "posterior"

    def index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"step out of range: t={t} not in [1, {self.T}]")
        return t - 1


@dataclass(frozen=True)
class DiffusedState:
    """A molecule partway through the forward process, with the noise that
    produced it (the training targets need both)."""

    geometry_t: MolecularGeometry
    t: int
    eps_features: np.ndarray
    eps_coords: np.ndarray


SCHEDULE_KINDS = ("linear", "polynomial")
SIGMA_MODES = ("posterior", "beta")


def make_schedule(kind: str, T: int, beta_min: float, beta_max: float,
                  sigma_mode: str = "posterior") -> NoiseSchedule:
    """Build a variance schedule and derive all downstream vectors.

    ``linear`` interpolates the per-step variance from beta_min to
    beta_max; ``polynomial`` does the same along (t/T)^2.  The reverse-step
    standard deviation is sqrt of the posterior variance by default, or
    sqrt(beta_t) with ``sigma_mode="beta"``.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind: {kind!r}")
    if sigma_mode not in SIGMA_MODES:
        raise ValueError(f"unknown sigma mode: {sigma_mode!r}")
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("invalid beta range")

    frac = np.zeros(T) if T == 1 else np.arange(T) / (T - 1)
    if kind == "polynomial":
        frac = frac ** 2
    beta = beta_min + frac * (beta_max - beta_min)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    sigma = np.sqrt(beta_tilde) if sigma_mode == "posterior" else np.sqrt(beta)
    return NoiseSchedule(T=int(T), beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         alpha_bar_prev=alpha_bar_prev, beta_tilde=beta_tilde,
                         sigma=sigma, sigma_mode=sigma_mode)


def q_sample(g0: MolecularGeometry, t: int, schedule: NoiseSchedule,
             eps: tuple[np.ndarray, np.ndarray]) -> DiffusedState:
    """Jump straight to step t of the forward process.

    Both channels are scaled by sqrt(alpha_bar_t) and perturbed by
    sqrt(1 - alpha_bar_t) times the supplied noise.  The coordinate noise
    must already have zero center of mass, and the clean coordinates are
    centered first, so the diffused coordinates stay in the zero-COM
    subspace.
    """
    i = schedule.index(t)
    eps_a, eps_r = (np.asarray(e, dtype=np.float64) for e in eps)
    if eps_a.shape != g0.atom_features.shape or eps_r.shape != g0.coords.shape:
        raise ValueError("noise shapes do not match the geometry")
    if np.abs(eps_r.mean(axis=0)).max() > 1e-9:
        raise ValueError("coordinate noise must have zero center of mass")
    root_ab = np.sqrt(schedule.alpha_bar[i])
    root_var = np.sqrt(1.0 - schedule.alpha_bar[i])
    feats = root_ab * g0.atom_features + root_var * eps_a
    coords = root_ab * zero_com(g0.coords) + root_var * eps_r
    gt = MolecularGeometry(feats, coords, g0.elements)
    return DiffusedState(geometry_t=gt, t=int(t), eps_features=eps_a, eps_coords=eps_r)


def posterior_mean(x0: np.ndarray, xt: np.ndarray, t: int,
                   schedule: NoiseSchedule) -> np.ndarray:
    """Mean of the true denoising posterior q(x_{t-1} | x_t, x_0)."""
    if t < 2:
        raise ValueError("no posterior at t=1")
    i = schedule.index(t)
    coef_t = np.sqrt(schedule.alpha[i]) * (1.0 - schedule.alpha_bar_prev[i]) \
        / (1.0 - schedule.alpha_bar[i])
    coef_0 = np.sqrt(schedule.alpha_bar_prev[i]) * schedule.beta[i] \
        / (1.0 - schedule.alpha_bar[i])
    return coef_t * np.asarray(xt) + coef_0 * np.asarray(x0)


def posterior_params(g0: MolecularGeometry, gt: MolecularGeometry, t: int,
                     schedule: NoiseSchedule) -> tuple[MolecularGeometry, float]:
    """True posterior mean (as a geometry) and variance for step t >= 2."""
    mu_feats = posterior_mean(g0.atom_features, gt.atom_features, t, schedule)
    mu_coords = posterior_mean(g0.coords, gt.coords, t, schedule)
    mu = MolecularGeometry(mu_feats, mu_coords, g0.elements)
    return mu, float(schedule.beta_tilde[schedule.index(t)])


def score_target_features(g0: MolecularGeometry, state: DiffusedState,
                          schedule: NoiseSchedule) -> np.ndarray:
    """Exact gradient of the log forward kernel in the feature channel:
    -(A_t - sqrt(alpha_bar_t) A_0) / (1 - alpha_bar_t)."""
    i = schedule.index(state.t)
    ab = schedule.alpha_bar[i]
    return -(state.geometry_t.atom_features - np.sqrt(ab) * g0.atom_features) / (1.0 - ab)


def score_target_coords(g0: MolecularGeometry, state: DiffusedState,
                        schedule: NoiseSchedule, edges: EdgeSet) -> np.ndarray:
    """Coordinate target decomposed over pairwise distances.

    Per-pair 1-D kernel gradient -sqrt(alpha_bar)(d_noisy - d_clean) /
    (1 - alpha_bar), pushed back to coordinates through the chain rule
    (r_i - r_j) / d_ij evaluated at the diffused positions.  Equals the
    exact coordinate gradient of the summed per-edge log kernel, which is
    what makes it finite-difference-checkable.
    """
    i = schedule.index(state.t)
    ab = schedule.alpha_bar[i]
    d_clean = pairwise_distances(g0.coords)
    coords_t = state.geometry_t.coords
    d_noisy = pairwise_distances(coords_t)
    out = np.zeros_like(coords_t)
    for a, b in edges.all_edges:
        dn = d_noisy[a, b]
        if dn < MIN_DIFFUSED_DISTANCE:
            raise ValueError(f"coincident atoms in diffused state: pair ({a}, {b})")
        grad_d = -np.sqrt(ab) * (dn - d_clean[a, b]) / (1.0 - ab)
        direction = (coords_t[a] - coords_t[b]) / dn
        out[a] += grad_d * direction
        out[b] -= grad_d * direction
    return out
