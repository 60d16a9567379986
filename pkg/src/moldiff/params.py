"""Parameter containers and tree utilities.

Model weights live in small nested dataclasses whose leaves are float64
arrays.  The helpers below walk such trees generically: flattening to
named blocks (for checkpoints, Adam state and finite-difference checks)
and mapping a function over the leaves (for wrapping parameters on the
autodiff tape and applying optimizer updates).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import Var


@dataclass
class Dense:
    """One linear layer; ``b`` may be None for bias-free maps."""

    w: np.ndarray
    b: np.ndarray | None = None


@dataclass
class SchNetLayer:
    """Weights of one continuous-filter convolution layer."""

    w_self: Dense
    w_filter: np.ndarray
    w_neighbor: np.ndarray
    filter_hidden: Dense
    filter_out: Dense


@dataclass
class EncoderParams:
    """All weights of one invariant encoder (edge embedding, input
    embedding, message-passing stack, and the two score heads)."""

    edge_hidden: Dense
    edge_out: Dense
    embed_feat: Dense
    embed_coord: Dense
    layers: list[SchNetLayer]
    node_hidden: Dense
    node_out: Dense
    dist_hidden: Dense
    dist_out: Dense


@dataclass
class DualParams:
    """The pair of encoders: one over short-range edges, one over the rest."""

    local: EncoderParams
    global_: EncoderParams


@dataclass
class VarNoiseParams:
    """Invariant encoder plus pooled heads for the per-molecule latent."""

    encoder: EncoderParams
    mu_head: Dense
    logsig_head: Dense


@dataclass
class ModelParams:
    """Everything the trainer updates: the dual score networks and the
    variational-noising encoder."""

    dual: DualParams
    vn: VarNoiseParams


def _is_leaf(x) -> bool:
    return isinstance(x, (np.ndarray, Var))


def _is_metadata(x) -> bool:
    # non-array dataclass fields (names, normalization constants) ride
    # along untouched
    return x is None or isinstance(x, (str, int, float, bool))


def named_leaves(tree, prefix: str = "") -> list[tuple[str, np.ndarray]]:
    """Depth-first (name, array) pairs for every array leaf in the tree."""
    out = []
    if _is_metadata(tree):
        return out
    if _is_leaf(tree):
        out.append((prefix, tree))
    elif dataclasses.is_dataclass(tree):
        for field in dataclasses.fields(tree):
            name = f"{prefix}.{field.name}" if prefix else field.name
            out.extend(named_leaves(getattr(tree, field.name), name))
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            out.extend(named_leaves(item, f"{prefix}.{i}"))
    else:
        raise TypeError(f"unsupported node in parameter tree: {type(tree)!r}")
    return out


def map_leaves(tree, fn):
    """Rebuild the tree with ``fn`` applied to every array leaf."""
    if _is_metadata(tree):
        return tree
    if _is_leaf(tree):
        return fn(tree)
    if dataclasses.is_dataclass(tree):
        kwargs = {f.name: map_leaves(getattr(tree, f.name), fn)
                  for f in dataclasses.fields(tree)}
        return type(tree)(**kwargs)
    if isinstance(tree, (list, tuple)):
        return type(tree)(map_leaves(item, fn) for item in tree)
    raise TypeError(f"unsupported node in parameter tree: {type(tree)!r}")


def to_blocks(tree) -> dict[str, np.ndarray]:
    """Ordered name -> array mapping (the checkpoint's parameter blocks)."""
    return {name: np.asarray(leaf, dtype=np.float64) for name, leaf in named_leaves(tree)}


def from_blocks(template, blocks: dict[str, np.ndarray]):
    """Rebuild a tree shaped like ``template`` from named blocks."""
    expected = [name for name, _ in named_leaves(template)]
    missing = [n for n in expected if n not in blocks]
    extra = [n for n in blocks if n not in expected]
    if missing or extra:
        raise ValueError(f"parameter blocks mismatch: missing {missing}, extra {extra}")
    it = iter(expected)
    return map_leaves(template, lambda leaf: blocks[next(it)].reshape(np.shape(leaf)))


def wrap_in_vars(tree):
    """Put every leaf on the autodiff tape."""
    return map_leaves(tree, Var)


def grads_of(tree_of_vars):
    """Extract accumulated gradients after a backward pass (zeros where a
    leaf never influenced the loss)."""
    return map_leaves(
        tree_of_vars,
        lambda v: v.grad if v.grad is not None else np.zeros_like(v.value),
    )
