"""Rotated views of the feature map, per-view graph head, fusion and projection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph_head import GCN, SCG, GraphBundle, nodes_to_grid
from .layers import Module
from .numerics import ContractError, RngState, Var, ops
from .numerics.autodiff import as_var

DEFAULT_TURNS = (0, 1, 2)


@dataclass
class ViewBundle:
    turns: tuple[int, ...]
    views: list[Var]
    graphs: list[GraphBundle] = field(default_factory=list)
    outputs: list[Var] = field(default_factory=list)   # per view, b x n x c (residual + GCN)


def augment_views(x, turns=DEFAULT_TURNS) -> ViewBundle:
    x = as_var(x)
    if x.shape[-1] != x.shape[-2]:
        raise ContractError(f"multi-view augmentation needs a square map, got {x.shape[-2:]}")
    return ViewBundle(tuple(turns), [ops.rot90(x, k) for k in turns])


def view_contributions(outputs, turns, side: int) -> list[Var]:
    """Each view's ``n x c`` output as a grid, rotated back into the input frame."""
    return [ops.rot90(nodes_to_grid(out, side), -k) for out, k in zip(outputs, turns)]


def fuse(outputs, turns, weights=None) -> Var:
    """Sum of reverse-rotated per-view grids (``b x c x h' x w'``).

    ``weights`` optionally scales each view's contribution; summation order is
    view 0, 1, 2.
    """
    if not outputs:
        raise ContractError("fuse needs at least one view")
    n = outputs[0].shape[-2]
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ContractError(f"{n} nodes is not a perfect square")
    grids = view_contributions(outputs, turns, side)
    total = None
    for i, g in enumerate(grids):
        if weights is not None:
            g = g * weights[i]
        total = g if total is None else total + g
    return total


def project(fused, out_h: int, out_w: int) -> Var:
    """Bilinear upsampling of fused class scores to the image resolution."""
    return ops.upsample_bilinear(fused, out_h, out_w)


class MultiViewHead(Module):
    """Weight-tied SCG + GCN applied to every rotated view, then fused."""

    def __init__(self, in_channels: int, hidden_dim: int, num_classes: int, node_side: int,
                 rng: RngState, turns=DEFAULT_TURNS, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "turns", tuple(turns))
        object.__setattr__(self, "view_weights", None)
        self.scg = SCG(in_channels, num_classes, node_side, rng.substream("scg"), dtype=dtype)
        self.gcn = GCN(in_channels, hidden_dim, num_classes, rng.substream("gcn"), dtype=dtype)

    @property
    def node_side(self) -> int:
        return self.scg.node_side

    def run_views(self, x, train: bool, rng: RngState | None = None) -> ViewBundle:
        bundle = augment_views(x, self.turns)
        for i, view in enumerate(bundle.views):
            graph = self.scg(view, train, rng.substream("view", i) if rng is not None else None)
            z2 = self.gcn(graph.a_hat, graph.node_features, train)
            bundle.graphs.append(graph)
            bundle.outputs.append(graph.residual + z2)
        return bundle

    def __call__(self, x, train: bool, rng: RngState | None = None) -> tuple[Var, ViewBundle]:
        bundle = self.run_views(x, train, rng)
        return fuse(bundle.outputs, bundle.turns, self.view_weights), bundle
