"""MSCG-Net: backbone -> rotated views -> SCG/GCN -> fusion -> projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone
from .layers import Module, check_finite
from .multiview import DEFAULT_TURNS, MultiViewHead, ViewBundle, project
from .numerics import RngState, Var, ops


@dataclass
class ModelOutput:
    logits: Var          # b x C x h x w
    fused: Var           # b x C x h' x w'
    views: ViewBundle
    kl: Var              # mean over views
    dl: Var


class MSCGNet(Module):
    def __init__(self, num_classes: int = 7, feature_dim: int = 128, hidden_dim: int = 128,
                 node_side: int = 4, turns=DEFAULT_TURNS, seed: int = 0, dtype=np.float32,
                 widths=(32, 64, 128)):
        super().__init__()
        object.__setattr__(self, "num_classes", num_classes)
        rng = RngState(seed).substream("init")
        self.backbone = Backbone(rng.substream("backbone"), feature_dim, widths=widths, dtype=dtype)
        self.head = MultiViewHead(feature_dim, hidden_dim, num_classes, node_side,
                                  rng.substream("head"), turns, dtype)

    def __call__(self, images, train: bool, rng: RngState | None = None) -> ModelOutput:
        images = np.asarray(images, dtype=self.dtype)
        feats = self.backbone(images, train)
        check_finite("backbone", feats)
        fused, bundle = self.head(feats, train, rng)
        check_finite("fusion", fused)
        logits = project(fused, images.shape[-2], images.shape[-1])
        nv = len(bundle.graphs)
        kl = ops.sum(ops.stack([g.kl_loss for g in bundle.graphs])) / nv
        dl = ops.sum(ops.stack([g.dl_loss for g in bundle.graphs])) / nv
        return ModelOutput(logits, fused, bundle, kl, dl)

    @property
    def dtype(self):
        return self.backbone.conv1.weight.dtype
