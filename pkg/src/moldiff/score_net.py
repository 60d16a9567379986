"""Dual equivariant score network.

Two structurally identical invariant encoders see the same molecule
through different edge sets: short-range pairs (within the cutoff, where
covalent bonding dominates) and the remaining long-range pairs.  Each
encoder embeds distances with radial basis functions, runs continuous-
filter message passing, and emits a per-atom feature score plus per-edge
distance scores.  Distance scores become coordinate scores through the
radial chain-rule transition, which is what makes the coordinate output
rotation-equivariant while the feature output stays invariant.  The two
encoders' outputs are summed.

All forward functions run on plain arrays (inference) or on autodiff
variables (training) — see :mod:`moldiff.autodiff`.  ``time`` arguments
are (step, total_steps) tuples, or None for time-free encoders such as
the property regressor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import (DEFAULT_ELEMENTS, DEFAULT_TAU, MolecularGeometry,
                       build_edges)
from .params import (Dense, DualParams, EncoderParams, ModelParams,
                     SchNetLayer, VarNoiseParams)


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters shared by both score encoders and the
    variational-noising encoder."""

    elements: tuple[str, ...] = DEFAULT_ELEMENTS
    hidden_dim: int = 128
    n_layers: int = 4
    rbf_count: int = 64
    rbf_cutoff: float = 10.0
    time_embed_dim: int = 32
    tau: float = DEFAULT_TAU
    literal_coord_embed: bool = False
    condition_dim: int = 0
    zv_dim: int = 8

    @property
    def f(self) -> int:
        return len(self.elements) + 1

    def __post_init__(self):
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if self.condition_dim not in (0, 1):
            raise ValueError("condition_dim must be 0 or 1")


@dataclass
class ScoreOutput:
    """Per-atom scores for one diffused state: n x f features and n x 3
    coordinates (coordinate part zero-COM projected)."""

    feature_score: np.ndarray
    coord_score: np.ndarray


def gaussian_rbf(d, count: int, cutoff: float) -> np.ndarray:
    """Expand distances on a grid of Gaussians over [0, cutoff]."""
    d = np.atleast_1d(np.asarray(d, dtype=np.float64))
    centers = np.linspace(0.0, cutoff, count)
    width = cutoff / max(count - 1, 1)
    return np.exp(-((d[:, None] - centers[None, :]) ** 2) / (2.0 * width ** 2))


def time_embedding(t: int, T: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the normalized step t/T."""
    u = t / T
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(1000.0), half))
    return np.concatenate([np.sin(freqs * u), np.cos(freqs * u)])


def act(x):
    return ad.shifted_softplus(x)


def dense(x, p: Dense):
    out = x @ p.w
    return out if p.b is None else out + p.b


def mlp2(x, hidden: Dense, out: Dense):
    return dense(act(dense(x, hidden)), out)


EDGE_TYPE_FLAG = {"local": 1.0, "global": 0.0}


def _sorted_pairs(pairs) -> list[tuple[int, int]]:
    # canonical order keeps float summation deterministic across runs
    return sorted((min(a, b), max(a, b)) for a, b in pairs)


def edge_embed_batch(dists: np.ndarray, edge_type: str, enc: EncoderParams,
                     cfg: NetConfig):
    """Embed each distance together with its local/global flag."""
    rbf = gaussian_rbf(dists, cfg.rbf_count, cfg.rbf_cutoff)
    flag = np.full((rbf.shape[0], 1), EDGE_TYPE_FLAG[edge_type])
    return mlp2(np.concatenate([rbf, flag], axis=1), enc.edge_hidden, enc.edge_out)


def edge_embed(d_ij: float, edge_type: str, enc: EncoderParams,
               cfg: NetConfig) -> np.ndarray:
    """Embedding vector for a single edge."""
    if d_ij < 0:
        raise ValueError("distances are nonnegative")
    out = edge_embed_batch(np.array([float(d_ij)]), edge_type, enc, cfg)
    return ad.value_of(out)[0]


def _input_embedding(geom: MolecularGeometry, time, condition, z_v,
                     enc: EncoderParams, cfg: NetConfig):
    n = geom.n
    cols = [geom.atom_features]
    if cfg.condition_dim:
        if condition is None:
            raise ValueError("condition shape mismatch: model expects a condition value")
        cols.append(np.full((n, 1), float(condition)))
    elif condition is not None:
        raise ValueError("condition shape mismatch: model is unconditional")
    if time is not None:
        step, total = time
        cols.append(np.tile(time_embedding(step, total, cfg.time_embed_dim), (n, 1)))
    const_block = np.concatenate(cols, axis=1)
    if z_v is None:
        feat_in = const_block
    else:
        # broadcast the per-molecule latent to every atom; the matmul keeps
        # the broadcast differentiable when z_v sits on the tape
        row = z_v.reshape(1, -1)
        feat_in = ad.concat([const_block, np.ones((n, 1)) @ row], axis=1)
    h_a = act(dense(feat_in, enc.embed_feat))
    if cfg.literal_coord_embed:
        coord_feat = geom.coords
    else:
        centered = geom.coords - geom.coords.mean(axis=0, keepdims=True)
        coord_feat = np.linalg.norm(centered, axis=1, keepdims=True)
    h_r = act(dense(coord_feat, enc.embed_coord))
    return ad.concat([h_a, h_r], axis=1)


def schnet_forward(geometry_t: MolecularGeometry, pairs, edge_type: str,
                   time, condition, z_v, enc: EncoderParams, cfg: NetConfig):
    """Node embeddings after the continuous-filter convolution stack.

    ``pairs`` is this encoder's unordered edge list.  The output is
    invariant to rigid transforms: coordinates enter only through
    interatomic distances and the centered-norm input feature.  With an
    empty edge list every atom is processed by the self-connection alone.
    """
    n = geometry_t.n
    pairs = _sorted_pairs(pairs)
    h = _input_embedding(geometry_t, time, condition, z_v, enc, cfg)
    if pairs:
        pa = np.array([p[0] for p in pairs])
        pb = np.array([p[1] for p in pairs])
        idx_i = np.concatenate([pa, pb])   # directed: each pair both ways
        idx_j = np.concatenate([pb, pa])
        dists = np.linalg.norm(geometry_t.coords[idx_i] - geometry_t.coords[idx_j],
                               axis=1)
        rbf = gaussian_rbf(dists, cfg.rbf_count, cfg.rbf_cutoff)
    for layer in enc.layers:
        agg = 0.0
        if pairs:
            filt = mlp2(rbf, layer.filter_hidden, layer.filter_out)
            msg = (filt @ layer.w_filter) * (ad.gather(h, idx_j) @ layer.w_neighbor)
            agg = ad.segment_sum(msg, idx_i, n)
        h = act(dense(h, layer.w_self) + agg)
    return h


def node_score(node_embeddings, enc: EncoderParams):
    """Per-atom feature scores from the final node embeddings."""
    return mlp2(node_embeddings, enc.node_hidden, enc.node_out)


def distance_score_batch(node_embeddings, edge_embeddings, pairs,
                         enc: EncoderParams):
    """Scalar score per unordered edge from the symmetrized pair features."""
    pa = np.array([p[0] for p in pairs])
    pb = np.array([p[1] for p in pairs])
    prod = ad.gather(node_embeddings, pa) * ad.gather(node_embeddings, pb)
    x = ad.concat([prod, edge_embeddings], axis=1)
    return mlp2(x, enc.dist_hidden, enc.dist_out)


def distance_score(node_embeddings, edge_embedding, pair: tuple[int, int],
                   enc: EncoderParams) -> float:
    """Score of one pairwise distance; symmetric in the pair because the
    elementwise product of the end-node embeddings is."""
    h = ad.value_of(node_embeddings)
    e = np.atleast_2d(ad.value_of(edge_embedding))
    out = distance_score_batch(h, e, [tuple(pair)], enc)
    return float(ad.value_of(out)[0, 0])


def coord_score(geometry_t: MolecularGeometry, pairs, distance_scores):
    """Turn per-edge distance scores into per-atom coordinate scores.

    Each edge pushes its score along the unit separation vector, with
    opposite signs at the two ends; the result is then projected onto the
    zero-center-of-mass subspace (a no-op up to rounding, since opposite
    contributions already cancel in the column sums).  ``distance_scores``
    must be an (E, 1) column aligned with ``pairs``.
    """
    n = geometry_t.n
    pairs = list(pairs)
    if not pairs:
        zeros = np.zeros((n, 3))
        return ad.Var(zeros) if isinstance(distance_scores, ad.Var) else zeros
    pa = np.array([p[0] for p in pairs])
    pb = np.array([p[1] for p in pairs])
    diffs = geometry_t.coords[pa] - geometry_t.coords[pb]
    dists = np.linalg.norm(diffs, axis=1, keepdims=True)
    if dists.min() < 1e-8:
        k = int(np.argmin(dists))
        raise ValueError(f"coincident atoms: pair {pairs[k]}")
    contrib = distance_scores * (diffs / dists)
    raw = ad.segment_sum(contrib, pa, n) - ad.segment_sum(contrib, pb, n)
    return raw - raw.mean(axis=0, keepdims=True)


def encoder_score(geometry_t: MolecularGeometry, pairs, edge_type: str, time,
                  condition, z_v, enc: EncoderParams, cfg: NetConfig,
                  score_scale: float = 1.0):
    """Run one encoder end to end: (feature_score, coord_score)."""
    h = schnet_forward(geometry_t, pairs, edge_type, time, condition, z_v, enc, cfg)
    feat = node_score(h, enc)
    pairs = _sorted_pairs(pairs)
    if pairs:
        dists = np.array([np.linalg.norm(geometry_t.coords[a] - geometry_t.coords[b])
                          for a, b in pairs])
        h_e = edge_embed_batch(dists, edge_type, enc, cfg)
        d_scores = distance_score_batch(h, h_e, pairs, enc)
    else:
        d_scores = np.zeros((0, 1))
    if score_scale != 1.0:
        feat = feat * score_scale
        d_scores = d_scores * score_scale
    coord = coord_score(geometry_t, pairs, d_scores)
    return feat, coord


def dual_score(geometry_t: MolecularGeometry, t: int, T: int, condition, z_v,
               model: ModelParams, cfg: NetConfig,
               score_scale: float = 1.0) -> ScoreOutput:
    """Sum of the short-range and long-range encoder scores.

    ``t`` is the 1-based diffusion step and ``T`` the schedule length (they
    fix the time embedding).  Coordinates of ``geometry_t`` are expected to
    be zero-COM; the feature score is invariant and the coordinate score
    equivariant under rigid transforms either way.

    ``score_scale`` multiplies both heads.  Score targets grow like
    1 / (1 - alpha_bar_t) as the noise vanishes, far beyond what a
    fixed-size head can reach in a short optimization; callers that know
    the schedule pass 1 / sqrt(1 - alpha_bar_t) so the raw heads learn the
    bounded noise-like part instead (the usual score/noise conversion).
    """
    edges = build_edges(geometry_t, cfg.tau)
    time = (t, T)
    f_loc, c_loc = encoder_score(geometry_t, edges.local_edges, "local", time,
                                 condition, z_v, model.dual.local, cfg,
                                 score_scale)
    f_glo, c_glo = encoder_score(geometry_t, edges.global_edges, "global", time,
                                 condition, z_v, model.dual.global_, cfg,
                                 score_scale)
    return ScoreOutput(feature_score=f_loc + f_glo, coord_score=c_loc + c_glo)


def schedule_score_scale(schedule, t: int) -> float:
    """The score/noise conversion factor 1 / sqrt(1 - alpha_bar_t)."""
    return float(1.0 / np.sqrt(1.0 - schedule.alpha_bar[schedule.index(t)]))


# -- initialization ---------------------------------------------------------

def init_dense(rng: np.random.Generator, n_in: int, n_out: int,
               bias: bool = True) -> Dense:
    w = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
    return Dense(w=w, b=np.zeros(n_out) if bias else None)


def init_encoder(rng: np.random.Generator, cfg: NetConfig,
                 with_time: bool = True, with_zv: bool = True) -> EncoderParams:
    h = cfg.hidden_dim
    # the coordinate branch embeds a 1- or 3-dim feature; most of the width
    # belongs to the feature branch
    h_r = max(2, h // 8)
    h_a = h - h_r
    feat_in = (cfg.f + cfg.condition_dim
               + (cfg.time_embed_dim if with_time else 0)
               + (cfg.zv_dim if with_zv else 0))
    coord_in = 3 if cfg.literal_coord_embed else 1
    layers = [SchNetLayer(
        w_self=init_dense(rng, h, h),
        w_filter=rng.standard_normal((h, h)) / np.sqrt(h),
        w_neighbor=rng.standard_normal((h, h)) / np.sqrt(h),
        filter_hidden=init_dense(rng, cfg.rbf_count, h),
        filter_out=init_dense(rng, h, h),
    ) for _ in range(cfg.n_layers)]
    return EncoderParams(
        edge_hidden=init_dense(rng, cfg.rbf_count + 1, h),
        edge_out=init_dense(rng, h, h),
        embed_feat=init_dense(rng, feat_in, h_a),
        embed_coord=init_dense(rng, coord_in, h_r),
        layers=layers,
        node_hidden=init_dense(rng, h, h),
        node_out=init_dense(rng, h, cfg.f),
        dist_hidden=init_dense(rng, 2 * h, h),
        dist_out=init_dense(rng, h, 1),
    )


def init_model(rng: np.random.Generator, cfg: NetConfig) -> ModelParams:
    """Fresh random weights for the dual score networks and the
    variational-noising encoder."""
    dual = DualParams(local=init_encoder(rng, cfg),
                      global_=init_encoder(rng, cfg))
    vn = VarNoiseParams(
        encoder=init_encoder(rng, cfg, with_zv=False),
        mu_head=init_dense(rng, cfg.hidden_dim, cfg.zv_dim),
        logsig_head=init_dense(rng, cfg.hidden_dim, cfg.zv_dim),
    )
    return ModelParams(dual=dual, vn=vn)
