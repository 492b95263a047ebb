"""Stride-16 convolutional feature extractor for 4-channel NIR-RGB input."""
from __future__ import annotations

import numpy as np

from .layers import BatchNorm, Conv2d, Module
from .numerics import ContractError, RngState, Var, ops

STRIDE = 16


def adapt_rgb_weights_to_nirrgb(w3: np.ndarray) -> np.ndarray:
    """Extend an RGB input-conv kernel to NIR, R, G, B by copying the red slice."""
    w3 = np.asarray(w3)
    if w3.ndim != 4 or w3.shape[1] != 3:
        raise ContractError(f"expected a cout x 3 x kh x kw kernel, got {w3.shape}")
    return np.concatenate([w3[:, :1], w3], axis=1)


class Backbone(Module):
    """Four (conv 3x3 stride 2, batch norm, ReLU) stages: 4 -> 32 -> 64 -> 128 -> out_channels."""

    def __init__(self, rng: RngState, out_channels: int = 128, in_channels: int = 4,
                 widths=(32, 64, 128), dtype=np.float32):
        super().__init__()
        chans = [in_channels, *widths, out_channels]
        object.__setattr__(self, "out_channels", out_channels)
        object.__setattr__(self, "num_stages", len(chans) - 1)
        for i in range(len(chans) - 1):
            # no conv bias: the following batch norm cancels it, so its gradient is pure roundoff
            setattr(self, f"conv{i + 1}", Conv2d(chans[i], chans[i + 1], 3, rng.substream("conv", i),
                                                 stride=2, padding=1, bias=False, dtype=dtype))
            setattr(self, f"bn{i + 1}", BatchNorm(chans[i + 1], dtype=dtype))

    def __call__(self, x, train: bool) -> Var:
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ContractError(f"backbone input extents {h}x{w} must be divisible by {STRIDE}")
        for i in range(1, self.num_stages + 1):
            x = getattr(self, f"conv{i}")(x)
            x = ops.relu(getattr(self, f"bn{i}")(x, train))
        return x
