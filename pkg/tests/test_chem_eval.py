import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from moldiff.chem_eval import (BondGraph, ValenceTable, canonical_key,
                               infer_bonds, load_bond_table, metrics_report,
                               stability, validity)
from moldiff.geometry import (MolecularGeometry, RigidTransform, apply_rigid,
                              random_rotation, zero_com)
from moldiff.harness import methane_like, water_like

TABLE = load_bond_table()
VALENCE = ValenceTable()


def exact_isomorphic(g1: BondGraph, g2: BondGraph) -> bool:
    """Brute-force label-preserving graph isomorphism; the fallback oracle
    guarding the refinement key against collisions on small graphs."""
    if g1.n != g2.n:
        return False
    label1 = [(g1.elements[i], g1.charges[i]) for i in range(g1.n)]
    label2 = [(g2.elements[i], g2.charges[i]) for i in range(g2.n)]
    if sorted(label1) != sorted(label2):
        return False
    edges1 = {(min(i, j), max(i, j)): o for i, j, o in g1.bonds}
    for perm in itertools.permutations(range(g2.n)):
        if any(label1[i] != label2[perm[i]] for i in range(g1.n)):
            continue
        mapped = {(min(perm[i], perm[j]), max(perm[i], perm[j])): o
                  for (i, j), o in edges1.items()}
        if mapped == {(min(i, j), max(i, j)): o for i, j, o in g2.bonds}:
            return True
    return False


def graph_of(symbols, bonds, charges=None):
    return BondGraph(elements=tuple(symbols),
                     charges=tuple(charges or [0] * len(symbols)),
                     bonds=frozenset(bonds))


def permuted_geometry(geom, perm):
    return MolecularGeometry(geom.atom_features[list(perm)],
                             geom.coords[list(perm)], geom.elements)


# -- bond inference ------------------------------------------------------------

def test_no_bond_far_apart():
    geom = MolecularGeometry(
        np.array([[1.0, 0, 0, 0, 0, 0], [1.0, 0, 0, 0, 0, 0]]),
        np.array([[0.0, 0, 0], [5.0, 0, 0]]))
    graph = infer_bonds(geom, TABLE)
    assert not graph.bonds


def test_cc_single_vs_double():
    def cc_at(dist):
        feats = np.zeros((2, 6))
        feats[:, 1] = 1.0
        geom = MolecularGeometry(feats, np.array([[0.0, 0, 0], [dist, 0, 0]]))
        return infer_bonds(geom, TABLE)

    assert cc_at(1.54).bonds == {(0, 1, 1)}
    assert cc_at(1.33).bonds == {(0, 1, 2)}
    assert cc_at(1.18).bonds == {(0, 1, 3)}
    assert cc_at(1.63).bonds == {(0, 1, 1)}    # within the outer margin
    assert not cc_at(1.66).bonds
    assert not cc_at(1.05).bonds               # below the triple window


def test_single_bonds_only_mode():
    feats = np.zeros((2, 6))
    feats[:, 1] = 1.0
    geom = MolecularGeometry(feats, np.array([[0.0, 0, 0], [1.33, 0, 0]]))
    graph = infer_bonds(geom, TABLE, single_bonds_only=True)
    assert graph.bonds == {(0, 1, 1)}


def test_infer_bonds_invariant_under_reordering():
    geom = methane_like()
    graph = infer_bonds(geom, TABLE)
    perm = [2, 0, 4, 1, 3]
    graph_p = infer_bonds(permuted_geometry(geom, perm), TABLE)
    assert exact_isomorphic(graph, graph_p)
    assert canonical_key(graph) == canonical_key(graph_p)


def test_methane_and_water_bond_counts():
    methane = infer_bonds(methane_like(), TABLE)
    assert len(methane.bonds) == 4
    assert all(o == 1 for _, _, o in methane.bonds)
    water = infer_bonds(water_like(), TABLE)
    assert len(water.bonds) == 2


def test_unknown_pair_logs_and_skips(caplog):
    geom = MolecularGeometry(
        np.array([[1.0, 0, 0], [1.0, 0, 0]]),
        np.array([[0.0, 0, 0], [1.0, 0, 0]]),
        elements=("Xe", "H"))
    with caplog.at_level("WARNING"):
        graph = infer_bonds(geom, TABLE)
    assert not graph.bonds
    assert "Xe" in caplog.text


# -- validity -------------------------------------------------------------------

def test_methane_valid():
    assert validity(infer_bonds(methane_like(), TABLE), VALENCE)


def test_pentavalent_carbon_invalid():
    bonds = {(0, k, 1) for k in range(1, 6)}
    graph = graph_of(["C", "H", "H", "H", "H", "H"], bonds)
    assert not validity(graph, VALENCE)


def test_water_missing_bond_invalid():
    graph = graph_of(["O", "H", "H"], {(0, 1, 1)})
    assert not validity(graph, VALENCE)   # O has valence 1, H idx 2 has 0


def test_charge_adjusted_valence():
    # ammonium-like: N with +1 charge takes four bonds
    bonds = {(0, k, 1) for k in range(1, 5)}
    graph = graph_of(["N", "H", "H", "H", "H"], bonds, charges=[1, 0, 0, 0, 0])
    assert validity(graph, VALENCE)
    neutral = graph_of(["N", "H", "H", "H", "H"], bonds)
    assert not validity(neutral, VALENCE)
    # hydroxide-like: O with -1 charge takes one bond
    graph = graph_of(["O", "H"], {(0, 1, 1)}, charges=[-1, 0])
    assert validity(graph, VALENCE)


def test_unknown_element_invalid(caplog):
    graph = graph_of(["Xe"], set())
    with caplog.at_level("WARNING"):
        assert not validity(graph, VALENCE)


def test_validity_invariant_under_rigid_motion():
    rng = np.random.default_rng(0)
    geom = methane_like()
    moved = apply_rigid(geom, RigidTransform(random_rotation(rng),
                                             rng.uniform(-4, 4, 3)))
    assert validity(infer_bonds(moved, TABLE), VALENCE)
    assert canonical_key(infer_bonds(moved, TABLE)) == \
        canonical_key(infer_bonds(geom, TABLE))


# -- stability -------------------------------------------------------------------

def test_stability_cases():
    methane = infer_bonds(methane_like(), TABLE)
    assert stability(methane)
    two_fragments = graph_of(["H", "H", "H", "H"], {(0, 1, 1), (2, 3, 1)})
    assert not stability(two_fragments)
    single_atom = graph_of(["F"], set())
    assert stability(single_atom)


# -- canonical keys ----------------------------------------------------------------

def test_key_differs_for_different_molecules():
    ch4 = infer_bonds(methane_like(), TABLE)
    nh3 = graph_of(["N", "H", "H", "H"], {(0, 1, 1), (0, 2, 1), (0, 3, 1)})
    assert canonical_key(ch4) != canonical_key(nh3)


def chain_graph(symbols, extra_bonds=()):
    bonds = {(k, k + 1, 1) for k in range(len(symbols) - 1)}
    bonds.update(extra_bonds)
    return graph_of(symbols, bonds)


def test_propanol_vs_isopropanol():
    # C-C-C-O versus C-C(-O)-C: same formula, different connectivity
    propanol = chain_graph(["C", "C", "C", "O"])
    isopropanol = graph_of(["C", "C", "C", "O"],
                           {(0, 1, 1), (1, 2, 1), (1, 3, 1)})
    assert not exact_isomorphic(propanol, isopropanol)
    assert canonical_key(propanol) != canonical_key(isopropanol)


def test_key_agrees_with_exact_isomorphism_on_random_graphs():
    """Refinement keys must match exact isomorphism for molecule-sized
    graphs: equal keys for permuted copies, distinct keys whenever the
    exact check says non-isomorphic."""
    rng = np.random.default_rng(1)
    symbols_pool = ["C", "N", "O", "H"]
    graphs = []
    for _ in range(30):
        n = int(rng.integers(3, 9))
        symbols = [symbols_pool[i] for i in rng.integers(0, 4, n)]
        by_pair = {(k, k + 1): int(rng.integers(1, 3)) for k in range(n - 1)}
        for _ in range(int(rng.integers(0, 3))):
            i, j = sorted(rng.choice(n, 2, replace=False))
            by_pair.setdefault((int(i), int(j)), 1)
        bonds = {(i, j, o) for (i, j), o in by_pair.items()}
        graphs.append(graph_of(symbols, bonds))
    for g in graphs:
        perm = list(np.random.default_rng(2).permutation(g.n))
        relabeled = {(min(perm[i], perm[j]), max(perm[i], perm[j]), o)
                     for i, j, o in g.bonds}
        permuted = BondGraph(
            elements=tuple(g.elements[perm.index(k)] for k in range(g.n)),
            charges=tuple(g.charges[perm.index(k)] for k in range(g.n)),
            bonds=frozenset(relabeled))
        assert exact_isomorphic(g, permuted)
        assert canonical_key(g) == canonical_key(permuted)
    for a, b in itertools.combinations(graphs, 2):
        if canonical_key(a) == canonical_key(b):
            assert exact_isomorphic(a, b)
        if not exact_isomorphic(a, b):
            assert canonical_key(a) != canonical_key(b)


# -- metrics ----------------------------------------------------------------------

def shifted(geom, offset):
    return geom.with_coords(geom.coords + offset)


def test_metrics_counting_example():
    """Three samples, two isomorphic, all valid and stable."""
    rng = np.random.default_rng(3)
    methane = methane_like()
    samples = [methane, permuted_geometry(methane, [1, 0, 2, 3, 4]), water_like()]
    report = metrics_report(samples, set(), VALENCE, TABLE)
    assert report["validity"] == pytest.approx(100.0)
    assert report["uniqueness"] == pytest.approx(100.0 * 2 / 3)
    assert report["stability"] == pytest.approx(100.0)
    assert report["novelty"] == pytest.approx(100.0 * 2 / 3)


def test_metrics_novelty_zero_when_all_in_training_set():
    methane = methane_like()
    key = canonical_key(infer_bonds(methane, TABLE))
    report = metrics_report([methane, methane], {key}, VALENCE, TABLE)
    assert report["novelty"] == 0.0
    assert report["uniqueness"] == pytest.approx(50.0)


def test_metrics_bounds_and_ordering():
    rng = np.random.default_rng(4)
    samples = [methane_like(), water_like()]
    # an invalid pentavalent carbon geometry: 5 hydrogens at bond range
    coords = np.zeros((6, 3))
    coords[1:] = np.array([[1.09, 0, 0], [-1.09, 0, 0], [0, 1.09, 0],
                           [0, -1.09, 0], [0, 0, 1.09]])
    feats = np.zeros((6, 6))
    feats[0, 1] = 1.0
    feats[1:, 0] = 1.0
    samples.append(MolecularGeometry(feats, coords))
    report = metrics_report(samples, set(), VALENCE, TABLE)
    assert 0 <= report["novelty"] <= report["uniqueness"] <= report["validity"] <= 100
    assert 0 <= report["stability"] <= 100


def test_metrics_requires_samples():
    with pytest.raises(ValueError):
        metrics_report([], set(), VALENCE, TABLE)
