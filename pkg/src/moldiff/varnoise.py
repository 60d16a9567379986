"""Variational noising: the per-molecule latent that diversifies sampling.

An invariant encoder reads the diffused molecule and produces a Gaussian
posterior over a small latent vector; the reparameterized sample
conditions every score evaluation.  A KL penalty keeps the posterior near
the prior so that, at generation time, latents drawn from the prior (or
the polarized uniform alternative) land in-distribution.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .geometry import MolecularGeometry
from .params import ModelParams
from .score_net import NetConfig, dense, schnet_forward


def encode(geometry_t: MolecularGeometry, t: int, T: int, model: ModelParams,
           cfg: NetConfig, condition=None):
    """Posterior parameters (mu_v, sigma_v) for one diffused molecule.

    Runs the invariant encoder over the all-pairs edge set, mean-pools the
    node embeddings, and maps the pooled vector through two linear heads;
    sigma_v is the exponential of the log-sigma head, so zero weights give
    the standard normal posterior.  Invariant to rigid transforms and atom
    permutations.
    """
    n = geometry_t.n
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    h = schnet_forward(geometry_t, pairs, "local", (t, T), condition, None,
                       model.vn.encoder, cfg)
    pooled = h.mean(axis=0)
    mu_v = pooled @ model.vn.mu_head.w + model.vn.mu_head.b
    log_sigma = pooled @ model.vn.logsig_head.w + model.vn.logsig_head.b
    return mu_v, ad.exp(log_sigma)


def reparameterize(mu_v, sigma_v, z: np.ndarray, standard: bool = False):
    """Draw the latent from its posterior given standard-normal ``z``.

    The default scales the noise by sigma_v squared; ``standard=True``
    switches to the usual sigma_v scaling.
    """
    scale = sigma_v if standard else sigma_v * sigma_v
    return mu_v + scale * z


def kl_loss(mu_v, sigma_v):
    """KL divergence of the diagonal-Gaussian posterior from the standard
    normal prior; zero exactly when mu_v = 0 and sigma_v = 1."""
    sig = ad.value_of(sigma_v)
    if np.any(sig <= 0):
        raise ValueError("invalid sigma: must be strictly positive")
    var = sigma_v * sigma_v
    terms = mu_v * mu_v + var - 1.0 - ad.log(var)
    return 0.5 * terms.sum()


def sample_prior(mode: str, d_z: int, rng: np.random.Generator) -> np.ndarray:
    """Latent draw used at generation time: standard normal, or the
    polarized uniform on [-1, 1]."""
    if d_z < 1:
        raise ValueError("latent dimension must be at least 1")
    if mode == "gaussian":
        return rng.standard_normal(d_z)
    if mode == "uniform":
        return rng.uniform(-1.0, 1.0, size=d_z)
    raise ValueError(f"unknown prior mode: {mode!r}")
