"""Molecular geometries, rigid transforms, distances and edge construction.

A molecule is a pair of arrays: per-atom features (one-hot element block
plus a trailing formal-charge column) and Cartesian coordinates in
Angstrom.  While a geometry is being diffused the feature entries are
real-valued; :func:`moldiff.sampling.decode` turns them back into a
discrete molecule.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_ELEMENTS = ("H", "C", "N", "O", "F")

#: Local/global cutoff radius in Angstrom; covalent bonds are essentially
#: never longer than this.
DEFAULT_TAU = 2.0


@dataclass(frozen=True)
class MolecularGeometry:
    """One molecule: ``atom_features`` is n x f with the first ``len(elements)``
    columns an element one-hot block and the last column the formal charge;
    ``coords`` is n x 3 in Angstrom."""

    atom_features: np.ndarray
    coords: np.ndarray
    elements: tuple[str, ...] = DEFAULT_ELEMENTS

    def __post_init__(self):
        feats = np.asarray(self.atom_features, dtype=np.float64)
        coords = np.asarray(self.coords, dtype=np.float64)
        if feats.ndim != 2 or coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError("atom_features must be n x f and coords n x 3")
        if feats.shape[0] != coords.shape[0] or feats.shape[0] < 1:
            raise ValueError("empty geometry")
        if feats.shape[1] != len(self.elements) + 1:
            raise ValueError(
                f"expected {len(self.elements) + 1} feature columns for "
                f"elements {self.elements}, got {feats.shape[1]}"
            )
        if not (np.isfinite(feats).all() and np.isfinite(coords).all()):
            raise ValueError("non-finite entries in geometry")
        object.__setattr__(self, "atom_features", feats)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def f(self) -> int:
        return self.atom_features.shape[1]

    def element_symbols(self) -> list[str]:
        """Element symbol per atom, by argmax over the one-hot block."""
        block = self.atom_features[:, : len(self.elements)]
        return [self.elements[i] for i in np.argmax(block, axis=1)]

    def charges(self) -> np.ndarray:
        """Formal charges rounded to the nearest integer in [-2, 2]."""
        return np.clip(np.rint(self.atom_features[:, -1]), -2, 2).astype(int)

    def with_coords(self, coords: np.ndarray) -> "MolecularGeometry":
        return replace(self, coords=np.asarray(coords, dtype=np.float64))

    def with_features(self, feats: np.ndarray) -> "MolecularGeometry":
        return replace(self, atom_features=np.asarray(feats, dtype=np.float64))


@dataclass(frozen=True)
class EdgeSet:
    """Partition of all atom pairs into local (d <= tau) and global (d > tau)
    unordered index pairs."""

    local_edges: frozenset[tuple[int, int]]
    global_edges: frozenset[tuple[int, int]]
    tau: float

    @property
    def all_edges(self) -> frozenset[tuple[int, int]]:
        return self.local_edges | self.global_edges


@dataclass(frozen=True)
class RigidTransform:
    """Proper rotation plus translation; used by the equivariance tests."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if (np.abs(rot.T @ rot - np.eye(3)).max() > 1e-10
                or abs(np.linalg.det(rot) - 1.0) > 1e-10):
            raise ValueError("invalid rotation")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)


def zero_com(coords: np.ndarray) -> np.ndarray:
    """Shift coordinates (or coordinate-shaped noise) to zero center of mass."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] < 1:
        raise ValueError("empty geometry")
    return coords - coords.mean(axis=0, keepdims=True)


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    """Symmetric n x n matrix of Euclidean distances."""
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, 0.0)
    return d


def build_edges(geometry: MolecularGeometry, tau: float = DEFAULT_TAU) -> EdgeSet:
    """Split all unordered atom pairs at the cutoff ``tau``.

    Pairs at distance <= tau are local (covalent-bond-like); the rest are
    global (long-range, van-der-Waals-like).  Together they always form the
    complete graph.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = pairwise_distances(geometry.coords)
    local, glob = [], []
    n = geometry.n
    for i in range(n):
        for j in range(i + 1, n):
            (local if d[i, j] <= tau else glob).append((i, j))
    return EdgeSet(frozenset(local), frozenset(glob), float(tau))


def apply_rigid(geometry: MolecularGeometry, transform: RigidTransform) -> MolecularGeometry:
    """Rotate and translate the coordinates; features are untouched."""
    coords = geometry.coords @ transform.rotation.T + transform.translation
    return geometry.with_coords(coords)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random proper rotation (QR of a Gaussian matrix, det fixed up)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def kabsch_rmsd(coords_a: np.ndarray, coords_b: np.ndarray) -> float:
    """RMSD of two point sets after optimal rigid superposition.

    Rows must already correspond; both sets are centered, the optimal
    rotation comes from the SVD of the cross-covariance (with the usual
    sign fix to exclude reflections).
    """
    a = zero_com(coords_a)
    b = zero_com(coords_b)
    if a.shape != b.shape:
        raise ValueError("point sets must have identical shapes")
    u, _, vt = np.linalg.svd(a.T @ b)
    sign = np.sign(np.linalg.det(u @ vt))
    dmat = np.diag([1.0, 1.0, sign])
    rot = u @ dmat @ vt
    return float(np.sqrt(np.mean(np.sum((a @ rot - b) ** 2, axis=1))))


def aligned_rmsd(geom_a: MolecularGeometry, geom_b: MolecularGeometry) -> float:
    """Minimum Kabsch RMSD over element-preserving atom permutations.

    Generated molecules carry no canonical atom order, so the match to a
    template must consider every assignment of same-element atoms.  Brute
    force; intended for small templates (factorial in the largest element
    group).
    """
    import itertools

    if geom_a.n != geom_b.n:
        raise ValueError("atom counts differ")
    syms_a = geom_a.element_symbols()
    syms_b = geom_b.element_symbols()
    if sorted(syms_a) != sorted(syms_b):
        return float("inf")

    groups: dict[str, tuple[list[int], list[int]]] = {}
    for idx, s in enumerate(syms_a):
        groups.setdefault(s, ([], []))[0].append(idx)
    for idx, s in enumerate(syms_b):
        groups[s][1].append(idx)

    best = float("inf")
    group_items = sorted(groups.items())
    perm_sets = [list(itertools.permutations(b_idx)) for _, (_, b_idx) in group_items]
    for combo in itertools.product(*perm_sets):
        order = np.empty(geom_a.n, dtype=int)
        for (_, (a_idx, _)), perm in zip(group_items, combo):
            for src, dst in zip(a_idx, perm):
                order[src] = dst
        rmsd = kabsch_rmsd(geom_a.coords, geom_b.coords[order])
        best = min(best, rmsd)
    return best
