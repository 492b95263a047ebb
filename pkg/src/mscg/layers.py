"""Minimal parameter containers: named parameters, buffers and child modules."""
from __future__ import annotations

import numpy as np

from .numerics import RngState, Var, ops, param


class NumericalFault(FloatingPointError):
    """A non-finite value appeared; ``stage`` names where."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"non-finite values at stage '{stage}'" + (f": {detail}" if detail else ""))


def check_finite(stage: str, v) -> None:
    arr = v.value if isinstance(v, Var) else np.asarray(v)
    if not np.all(np.isfinite(arr)):
        raise NumericalFault(stage)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_kinds", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Var) and value.requires_grad:
            self._params[name] = value
            self._kinds.setdefault(name, "bias" if name.endswith("bias") else "weight")
        object.__setattr__(self, name, value)

    def add_param(self, name: str, value, kind: str | None = None) -> Var:
        v = param(value, name=name)
        if kind is not None:
            self._kinds[name] = kind
        setattr(self, name, v)
        return v

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, v in self._params.items():
            yield prefix + name, v
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def param_kinds(self, prefix: str = "") -> dict[str, str]:
        """``weight`` / ``bias`` / ``norm`` tag for every parameter name."""
        out = {prefix + k: self._kinds[k] for k in self._params}
        for cname, child in self._children.items():
            out.update(child.param_kinds(f"{prefix}{cname}."))
        return out

    def named_buffers(self, prefix: str = ""):
        for name, v in self._buffers.items():
            yield prefix + name, v
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Var]:
        return [v for _, v in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: v.value for name, v in self.named_parameters()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, v in params.items():
            if state[name].shape != v.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model shape {v.shape}")
            v.value = np.array(state[name], dtype=v.dtype)
        for name, b in buffers.items():
            b[...] = state[name]

    def astype(self, dtype) -> "Module":
        for _, v in self.named_parameters():
            v.value = v.value.astype(dtype)
        # buffers stay float64 so running statistics do not depend on precision
        return self


def he_normal(rng: RngState, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng: RngState, stride=1, padding=0, bias=True, dtype=np.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = cin * kernel * kernel
        self.add_param("weight", he_normal(rng, (cout, cin, kernel, kernel), fan_in, dtype))
        object.__setattr__(self, "has_bias", bias)
        if bias:
            self.add_param("bias", np.zeros(cout, dtype=dtype))

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias if self.has_bias else None, self.stride, self.padding)


class BatchNorm(Module):
    """Per-channel normalisation; ``channel_axis`` picks the feature axis."""

    def __init__(self, channels, channel_axis=1, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "channel_axis", channel_axis)
        object.__setattr__(self, "momentum", momentum)
        object.__setattr__(self, "eps", eps)
        self.add_param("scale", np.ones(channels, dtype=dtype), kind="norm")
        self.add_param("shift", np.zeros(channels, dtype=dtype), kind="norm")
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x, train: bool):
        return ops.batch_norm(x, self.scale, self.shift, self.running_mean, self.running_var,
                              channel_axis=self.channel_axis, train=train,
                              momentum=self.momentum, eps=self.eps)
