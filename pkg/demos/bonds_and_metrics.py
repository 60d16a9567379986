"""Bond inference and the four generation metrics on handcrafted cases.

Bonds come purely from interatomic distances: each element pair has
reference lengths per bond order and the closest matching window wins.
Validity checks total bond order against charge-adjusted valences,
stability asks for one connected component, and uniqueness/novelty
compare canonical graph keys.
"""

import numpy as np

from moldiff.chem_eval import (ValenceTable, canonical_key, infer_bonds,
                               load_bond_table, metrics_report, stability,
                               validity)
from moldiff.geometry import MolecularGeometry
from moldiff.harness import methane_like, water_like

table = load_bond_table()
valence = ValenceTable()

for name, geom in [("methane", methane_like()), ("water", water_like())]:
    graph = infer_bonds(geom, table)
    print(f"{name}: bonds {sorted(graph.bonds)} valid={validity(graph, valence)} "
          f"stable={stability(graph)}")

# ethene-like C=C at 1.33 A: the double-bond window catches it
feats = np.zeros((2, 6))
feats[:, 1] = 1.0
cc = MolecularGeometry(feats, np.array([[0.0, 0, 0], [1.33, 0, 0]]))
print("C-C at 1.33 A:", sorted(infer_bonds(cc, table).bonds))

# a detached pair of hydrogen molecules: each valence is fine, but the
# graph has two components, so the sample counts as unstable
h4 = np.zeros((4, 6))
h4[:, 0] = 1.0
fragments = MolecularGeometry(h4, np.array(
    [[0.0, 0, 0], [0.74, 0, 0], [9.0, 0, 0], [9.74, 0, 0]]))
graph = infer_bonds(fragments, table)
print("fragments:", f"valid={validity(graph, valence)} stable={stability(graph)}")

samples = [methane_like(), methane_like(), water_like(), fragments]
training_keys = {canonical_key(infer_bonds(water_like(), table))}
print("metrics over 4 samples (water in the training set):")
for key, value in metrics_report(samples, training_keys, valence, table).items():
    print(f"  {key:11s} {value:6.1f}%")
