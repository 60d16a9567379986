"""moldiff: an equivariant denoising-diffusion engine for 3D molecules.

Trains on molecular geometries (atom types, charges, coordinates),
generates new ones by ancestral sampling, infers bonds from the generated
geometry, and scores the results with the standard generation metrics.
"""

from .chem_eval import (BondGraph, BondLengthTable, ValenceTable,
                        canonical_key, conditional_mae_eval, infer_bonds,
                        load_bond_table, metrics_report, predict_property,
                        stability, train_property_regressor, validity)
from .geometry import (EdgeSet, MolecularGeometry, RigidTransform,
                       aligned_rmsd, apply_rigid, build_edges, kabsch_rmsd,
                       pairwise_distances, zero_com)
from .harness import (Dataset, RunConfig, load_checkpoint, load_config,
                      load_dataset, parse_config, rng_stream, save_checkpoint,
                      write_xyz)
from .params import DualParams, EncoderParams, ModelParams, VarNoiseParams
from .sampling import (SamplerConfig, decode, reverse_step, sample_conditional,
                       sample_molecule, sample_size)
from .schedule import (DiffusedState, NoiseSchedule, make_schedule,
                       posterior_params, q_sample, score_target_coords,
                       score_target_features)
from .score_net import (NetConfig, ScoreOutput, coord_score, distance_score,
                        dual_score, edge_embed, init_model, node_score,
                        schnet_forward)
from .training import (LossBreakdown, TrainConfig, adam_update, elbo_report,
                       train, training_step)
from .varnoise import encode, kl_loss, reparameterize, sample_prior

__version__ = "0.1.0"
