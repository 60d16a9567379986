"""Abbreviated end-to-end run: train on the bundled toy file, generate,
and score.  Short on purpose (a few hundred steps, around a minute); the
acceptance suite runs the full-length version of this loop.
"""

import numpy as np

from moldiff.chem_eval import ValenceTable, evaluate_sample, load_bond_table
from moldiff.geometry import aligned_rmsd
from moldiff.harness import load_dataset, methane_like, rng_stream
from moldiff.sampling import SamplerConfig, sample_molecule, sample_size
from moldiff.schedule import make_schedule
from moldiff.score_net import NetConfig, init_model
from moldiff.training import TrainConfig, train

cfg = NetConfig(hidden_dim=32, n_layers=2, rbf_count=32, rbf_cutoff=10.0,
                time_embed_dim=16, zv_dim=4)
sched = make_schedule("polynomial", 100, 0.002, 0.12)
dataset = load_dataset("data/toy_200.xyz")
print(f"loaded {len(dataset)} molecules, sizes {dataset.size_histogram}")

losses = []
model = init_model(rng_stream(0, "init"), cfg)
model = train(dataset.molecules, model, sched, cfg,
              TrainConfig(learning_rate=2e-3, batch_size=16, epochs=100,
                          max_steps=400),
              rng_stream(0, "noise"),
              metrics_sink=lambda row: losses.append(row["total"]),
              shuffle_rng=rng_stream(0, "shuffle"))
print(f"trained 400 steps; loss {np.mean(losses[:20]):.1f} -> "
      f"{np.mean(losses[-20:]):.1f}")

template = methane_like()
valence, table = ValenceTable(), load_bond_table()
rng = rng_stream(0, "sampler")
for k in range(5):
    n = sample_size(dataset.size_histogram, rng)
    geom = sample_molecule(n, model, sched, cfg, SamplerConfig(zv_mode="uniform"),
                           rng)
    valid, stable, _ = evaluate_sample(geom, valence, table)
    rmsd = aligned_rmsd(geom, template)
    print(f"sample {k}: {''.join(geom.element_symbols())} valid={valid} "
          f"stable={stable} rmsd_to_template={rmsd:.3f}")
print("(400 steps is a teaser; the acceptance run uses 3000)")
