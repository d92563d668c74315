"""Parameterized layers on top of the autodiff engine.

Every layer exposes its parameters through ``named_parameters`` with
dot-separated names, which is also the checkpoint naming scheme.
Weights use Kaiming-normal initialization from an explicit Generator.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine
from .engine import Tensor, parameter


class Module:
    """Base class: children and parameters discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}"))
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_arrays(self) -> dict:
        """Parameters plus non-trainable buffers (running stats)."""
        out = {k: v.data for k, v in self.named_parameters().items()}
        out.update(self._buffers(""))
        return out

    def _buffers(self, prefix: str) -> dict:
        out = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Module):
                out.update(value._buffers(name))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item._buffers(f"{name}.{i}"))
            elif isinstance(value, dict) and set(value) == {"mean", "var"}:
                out[f"{name}.mean"] = value["mean"]
                out[f"{name}.var"] = value["var"]
        return out

    def load_state(self, arrays: dict, prefix: str = "") -> None:
        params = self.named_parameters(prefix)
        buffers = self._buffers(prefix)
        for name, arr in arrays.items():
            if name in params:
                if params[name].data.shape != arr.shape:
                    raise ValueError(
                        f"checkpoint shape mismatch for {name}: "
                        f"{arr.shape} vs {params[name].data.shape}"
                    )
                params[name].data = np.asarray(arr, dtype=np.float64)
            elif name in buffers:
                buffers[name][...] = arr


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = parameter(kaiming_normal(rng, (in_dim, out_dim), in_dim))
        self.bias = parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return engine.add(engine.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0):
        fan_in = in_ch * kernel * kernel
        self.weight = parameter(kaiming_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = parameter(np.zeros(out_ch))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return engine.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=2, pad=1):
        fan_in = in_ch * kernel * kernel
        self.weight = parameter(kaiming_normal(rng, (in_ch, out_ch, kernel, kernel), fan_in))
        self.bias = parameter(np.zeros(out_ch))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return engine.transposed_conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running = {"mean": np.zeros(channels), "var": np.ones(channels)}
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        return engine.batch_norm(
            x, self.gamma, self.beta, self.running, training, self.eps, self.momentum
        )


class GRUCell(Module):
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        for gate in ("update", "reset", "cand"):
            setattr(self, f"w_{gate}", parameter(kaiming_normal(rng, (in_dim, hidden), in_dim)))
            setattr(self, f"u_{gate}", parameter(kaiming_normal(rng, (hidden, hidden), hidden)))
            setattr(self, f"b_{gate}", parameter(np.zeros(hidden)))

    def params(self) -> dict:
        return {
            k: getattr(self, k)
            for k in ("w_update", "u_update", "b_update",
                      "w_reset", "u_reset", "b_reset",
                      "w_cand", "u_cand", "b_cand")
        }

    def initial_state(self, batch: int = 1) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden)))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return engine.gru_cell(x, h, self.params())
