"""Bond inference, generation metrics, and the conditional evaluation
harness.

Generated molecules are bare point clouds; bonds are read off interatomic
distances against a reference length table, after which validity
(valence conformance), stability (single connected component),
uniqueness and novelty (canonical-key comparisons) follow.  Valency
checking is table-driven and internal — no cheminformatics toolkit.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import autodiff as ad
from .geometry import MolecularGeometry, pairwise_distances
from .params import Dense, EncoderParams, grads_of, wrap_in_vars
from .score_net import init_dense, init_encoder, schnet_forward

logger = logging.getLogger(__name__)

BOND_ORDERS = (1, 2, 3)


@dataclass(frozen=True)
class BondGraph:
    """Element-labeled multigraph over one molecule's atoms."""

    elements: tuple[str, ...]
    charges: tuple[int, ...]
    bonds: frozenset[tuple[int, int, int]]   # (i, j, order), i < j
    coords: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.elements)

    def total_order(self, atom: int) -> int:
        return sum(o for i, j, o in self.bonds if atom in (i, j))

    def neighbors(self, atom: int) -> list[tuple[int, int]]:
        out = []
        for i, j, o in self.bonds:
            if i == atom:
                out.append((j, o))
            elif j == atom:
                out.append((i, o))
        return out


@dataclass
class BondLengthTable:
    """Reference length and margin per (element pair, bond order)."""

    entries: dict[tuple[str, str], dict[int, tuple[float, float]]]

    def lookup(self, el_a: str, el_b: str) -> dict[int, tuple[float, float]] | None:
        key = (el_a, el_b) if el_a <= el_b else (el_b, el_a)
        return self.entries.get(key)


def load_bond_table(path=None) -> BondLengthTable:
    """Parse a `El1 El2 order length margin` table; defaults to the
    packaged reference list."""
    if path is None:
        text = resources.files("moldiff").joinpath("data/bond_lengths.txt").read_text()
    else:
        with open(path) as handle:
            text = handle.read()
    entries: dict[tuple[str, str], dict[int, tuple[float, float]]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"bond table line {lineno}: expected 5 fields")
        a, b, order, length, margin = parts[0], parts[1], int(parts[2]), \
            float(parts[3]), float(parts[4])
        if order not in BOND_ORDERS or length <= 0 or margin < 0:
            raise ValueError(f"bond table line {lineno}: invalid entry")
        key = (a, b) if a <= b else (b, a)
        entries.setdefault(key, {})[order] = (length, margin)
    for key, by_order in entries.items():
        lengths = [by_order[o][0] for o in sorted(by_order)]
        if lengths != sorted(lengths, reverse=True):
            raise ValueError(f"bond table {key}: higher orders must be shorter")
    return BondLengthTable(entries)


@dataclass
class ValenceTable:
    """Allowed total bond order per element, adjusted by formal charge.

    Electronegative elements gain capacity with positive charge (and lose
    it with negative); carbon and hydrogen lose capacity with any charge.
    """

    base: dict[str, frozenset[int]] = field(default_factory=lambda: {
        "H": frozenset({1}), "C": frozenset({4}), "N": frozenset({3}),
        "O": frozenset({2}), "F": frozenset({1}),
    })
    gains_with_charge: frozenset[str] = frozenset({"N", "O", "F"})

    def allowed(self, element: str, charge: int = 0) -> frozenset[int] | None:
        base = self.base.get(element)
        if base is None:
            return None
        shift = charge if element in self.gains_with_charge else -abs(charge)
        return frozenset(v + shift for v in base if v + shift >= 0)


def infer_bonds(geometry: MolecularGeometry, table: BondLengthTable,
                single_bonds_only: bool = False) -> BondGraph:
    """Assign bond orders from interatomic distances.

    For each pair the highest order whose distance window contains d wins:
    single covers [double reference, single reference + margin], double
    covers [triple reference, double reference), and so on; where a lower
    order is missing the window closes at reference - margin.  With
    ``single_bonds_only`` every assigned bond is recorded as order 1.
    """
    symbols = geometry.element_symbols()
    charges = geometry.charges()
    d = pairwise_distances(geometry.coords)
    bonds = set()
    for i in range(geometry.n):
        for j in range(i + 1, geometry.n):
            refs = table.lookup(symbols[i], symbols[j])
            if refs is None:
                logger.warning("no bond-length entry for pair (%s, %s)",
                               symbols[i], symbols[j])
                continue
            order = _assign_order(d[i, j], refs)
            if order:
                bonds.add((i, j, 1 if single_bonds_only else order))
    return BondGraph(elements=tuple(symbols), charges=tuple(int(c) for c in charges),
                     bonds=frozenset(bonds), coords=geometry.coords)


def _assign_order(dist: float, refs: dict[int, tuple[float, float]]) -> int:
    length_s, margin_s = refs[1]
    upper = length_s + margin_s
    if dist > upper:
        return 0
    for order in (1, 2, 3):
        if order not in refs:
            return 0
        length, margin = refs[order]
        nxt = refs.get(order + 1)
        lower = nxt[0] if nxt is not None else length - margin
        if lower <= dist <= upper:
            return order
        upper = lower
    return 0


def validity(graph: BondGraph, valence: ValenceTable) -> bool:
    """True when every atom's total bond order is an allowed valence for
    its element and formal charge."""
    for atom in range(graph.n):
        allowed = valence.allowed(graph.elements[atom], graph.charges[atom])
        if allowed is None:
            logger.warning("unknown element %r fails the valence check",
                           graph.elements[atom])
            return False
        if graph.total_order(atom) not in allowed:
            return False
    return True


def stability(graph: BondGraph) -> bool:
    """True when the bond graph is one connected component (no detached
    fragments, i.e. no ion pairs)."""
    if graph.n <= 1:
        return True
    adj = {i: set() for i in range(graph.n)}
    for i, j, _ in graph.bonds:
        adj[i].add(j)
        adj[j].add(i)
    seen = {0}
    stack = [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == graph.n


def canonical_key(graph: BondGraph, rounds: int = 3) -> bytes:
    """Isomorphism-invariant key: iterative neighborhood-label refinement
    over (element, charge) node labels and bond-order edge labels,
    finished with a hash of the sorted label multiset.  Coordinates are
    ignored."""
    labels = [_h(f"{el}|{q}") for el, q in zip(graph.elements, graph.charges)]
    for _ in range(rounds):
        new = []
        for atom in range(graph.n):
            nb = sorted(f"{order}:{labels[other]}" for other, order in graph.neighbors(atom))
            new.append(_h(labels[atom] + "|" + ",".join(nb)))
        labels = new
    return hashlib.sha256("!".join(sorted(labels)).encode()).digest()


def _h(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def evaluate_sample(geometry: MolecularGeometry, valence: ValenceTable,
                    bond_table: BondLengthTable,
                    single_bonds_only: bool = False) -> tuple[bool, bool, bytes]:
    """(valid, stable, canonical key) for one decoded molecule."""
    graph = infer_bonds(geometry, bond_table, single_bonds_only=single_bonds_only)
    return validity(graph, valence), stability(graph), canonical_key(graph)


def metrics_report(samples, training_keys: set[bytes], valence: ValenceTable,
                   bond_table: BondLengthTable,
                   single_bonds_only: bool = False) -> dict[str, float]:
    """The four generation metrics, each as a percentage of all samples.

    Validity counts valence-conformant molecules; uniqueness counts
    distinct canonical keys among the valid ones; novelty counts distinct
    valid keys absent from the training set; stability counts connected
    bond graphs.
    """
    if not samples:
        raise ValueError("metrics need at least one sample")
    total = len(samples)
    n_valid = n_stable = 0
    valid_keys: set[bytes] = set()
    for geom in samples:
        valid, stable, key = evaluate_sample(geom, valence, bond_table,
                                             single_bonds_only=single_bonds_only)
        n_valid += valid
        n_stable += stable
        if valid:
            valid_keys.add(key)
    novel = {k for k in valid_keys if k not in training_keys}
    return {
        "validity": 100.0 * n_valid / total,
        "uniqueness": 100.0 * len(valid_keys) / total,
        "novelty": 100.0 * len(novel) / total,
        "stability": 100.0 * n_stable / total,
    }


# -- conditional evaluation ---------------------------------------------------

@dataclass
class RegressorParams:
    """Invariant encoder with a pooled scalar head, plus the target
    normalization it was trained with."""

    encoder: EncoderParams
    head: Dense
    property_name: str
    target_mean: float
    target_std: float


def predict_property(geometry: MolecularGeometry, reg: RegressorParams, cfg) -> float:
    """Predicted property value for one molecule."""
    n = geometry.n
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    h = schnet_forward(geometry, pairs, "local", None, None, None, reg.encoder, cfg)
    pooled = h.mean(axis=0)
    out = pooled @ reg.head.w + reg.head.b
    return reg.target_mean + reg.target_std * float(ad.value_of(out)[0])


def train_property_regressor(data, property_name: str, cfg,
                             rng: np.random.Generator, steps: int = 400,
                             batch_size: int = 16,
                             learning_rate: float = 1e-3) -> RegressorParams:
    """Fit the invariant regressor on (geometry, value) pairs by Adam on
    the squared error of standardized targets."""
    from .training import AdamState, TrainConfig, adam_update

    if not data:
        raise ValueError("empty regressor training set")
    values = np.array([c for _, c in data], dtype=np.float64)
    mean, std = float(values.mean()), float(values.std())
    if std == 0:
        std = 1.0
    reg = RegressorParams(
        encoder=init_encoder(rng, cfg, with_time=False, with_zv=False),
        head=init_dense(rng, cfg.hidden_dim, 1),
        property_name=property_name,
        target_mean=mean,
        target_std=std,
    )
    opt = AdamState()
    tc = TrainConfig(learning_rate=learning_rate, batch_size=batch_size)
    for _ in range(steps):
        picks = rng.integers(0, len(data), size=batch_size)
        pvars = wrap_in_vars(reg)
        loss = 0.0
        for k in picks:
            geom, value = data[int(k)]
            n = geom.n
            pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
            h = schnet_forward(geom, pairs, "local", None, None, None,
                               pvars.encoder, cfg)
            pooled = h.mean(axis=0)
            pred = pooled @ pvars.head.w + pvars.head.b
            target = (value - mean) / std
            diff = pred - target
            loss = loss + (diff * diff).sum()
        loss = loss / batch_size
        ad.backward(loss)
        reg, opt = adam_update(reg, grads_of(pvars), opt, tc)
    return reg


def conditional_mae_eval(generated, regressor: RegressorParams | None, cfg,
                         eval_split, train_split,
                         rng: np.random.Generator) -> dict[str, float]:
    """MAE of conditionally generated samples against their targets, with
    the three reference baselines.

    ``generated`` holds (geometry, target value) pairs; ``eval_split`` and
    ``train_split`` hold (geometry, true value) pairs from the two dataset
    halves.  The naive baseline scores the regressor against shuffled
    labels on the evaluation split; the size baseline predicts the
    per-atom-count mean value fit on the regressor's half; the lower bound
    is the regressor's error on real held-out data.
    """
    if regressor is None:
        raise ValueError("untrained regressor")
    model_mae = float(np.mean([abs(predict_property(g, regressor, cfg) - c)
                               for g, c in generated]))
    eval_preds = np.array([predict_property(g, regressor, cfg) for g, _ in eval_split])
    eval_true = np.array([c for _, c in eval_split], dtype=np.float64)
    perm = rng.permutation(len(eval_true))
    naive_mae = float(np.mean(np.abs(eval_preds - eval_true[perm])))
    lower_bound_mae = float(np.mean(np.abs(eval_preds - eval_true)))

    by_n: dict[int, list[float]] = {}
    for g, c in train_split:
        by_n.setdefault(g.n, []).append(c)
    global_mean = float(np.mean([c for _, c in train_split]))
    size_pred = {n: float(np.mean(v)) for n, v in by_n.items()}
    natoms_mae = float(np.mean([abs(size_pred.get(g.n, global_mean) - c)
                                for g, c in eval_split]))
    return {"model_mae": model_mae, "naive_mae": naive_mae,
            "natoms_mae": natoms_mae, "lower_bound_mae": lower_bound_mae}
