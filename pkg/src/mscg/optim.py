"""Parameter groups, cosine schedule and the two-phase Adam -> SGD optimiser."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Var


def cosine_lr(it: int, total_iters: int, base_lr: float) -> float:
    if not 0 <= it <= total_iters:
        raise ValueError(f"iteration {it} outside [0, {total_iters}]")
    if total_iters == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * it / total_iters))


@dataclass
class ParamGroup:
    name: str
    params: list[tuple[str, Var]]
    lr_mult: float
    weight_decay: float


def build_param_groups(named_params, kinds: dict[str, str], weight_decay: float = 2e-5,
                       bias_lr_multiplier: float = 2.0) -> list[ParamGroup]:
    """Weights get decay; biases get no decay and a larger LR; norm params get neither."""
    groups = {
        "weight": ParamGroup("weight", [], 1.0, weight_decay),
        "bias": ParamGroup("bias", [], bias_lr_multiplier, 0.0),
        "norm": ParamGroup("norm", [], 1.0, 0.0),
    }
    for name, p in named_params:
        groups[kinds[name]].params.append((name, p))
    return [g for g in groups.values() if g.params]


class PhasedOptimizer:
    """Adam for the first ``adam_iters`` steps, then momentum SGD with fresh state.

    Weight decay is added to the gradient (coupled L2) before the update.
    """

    def __init__(self, groups: list[ParamGroup], adam_iters: int, momentum: float = 0.9,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.adam_iters = adam_iters
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.phase = "adam" if adam_iters > 0 else "sgd"

    def _phase_for(self, step: int) -> str:
        return "adam" if step < self.adam_iters else "sgd"

    def step(self, lr: float) -> None:
        phase = self._phase_for(self.step_count)
        if phase != self.phase:
            self.state = {}
            self.phase = phase
        self.step_count += 1
        for group in self.groups:
            glr = lr * group.lr_mult
            for name, p in group.params:
                g = p.grad
                if group.weight_decay:
                    g = g + group.weight_decay * p.value
                if phase == "adam":
                    self._adam(name, p, g, glr)
                else:
                    self._sgd(name, p, g, glr)

    def _adam(self, name, p, g, lr):
        st = self.state.setdefault(name, {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value),
                                          "t": np.zeros(())})
        b1, b2 = self.betas
        st["t"] = st["t"] + 1
        t = int(st["t"])
        st["m"] = b1 * st["m"] + (1 - b1) * g
        st["v"] = b2 * st["v"] + (1 - b2) * g * g
        mhat = st["m"] / (1 - b1 ** t)
        vhat = st["v"] / (1 - b2 ** t)
        p.value = (p.value - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)

    def _sgd(self, name, p, g, lr):
        st = self.state.setdefault(name, {"buf": np.zeros_like(p.value)})
        st["buf"] = self.momentum * st["buf"] + g
        p.value = (p.value - lr * st["buf"]).astype(p.value.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"{name}/{k}": np.asarray(v) for name, st in self.state.items() for k, v in st.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], phase: str, step_count: int) -> None:
        self.phase = phase
        self.step_count = step_count
        self.state = {}
        for key, v in arrays.items():
            name, k = key.rsplit("/", 1)
            self.state.setdefault(name, {})[k] = np.array(v)
