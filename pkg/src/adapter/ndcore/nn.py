"""Parameter containers and the handful of layers the models are built from."""

from __future__ import annotations

import math
from typing import Dict, Iterator, Tuple

import numpy as np

from adapter.errors import ShapeError
from adapter.ndcore import functional as F
from adapter.ndcore.tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None, name=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


class Module:
    """Attribute-walking parameter container, in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        bad = [f"{k}: have {own[k].shape}, got {tuple(np.shape(v))}"
               for k, v in state.items() if own[k].shape != tuple(np.shape(v))]
        if bad:
            raise ShapeError("parameter shape mismatch: " + "; ".join(bad))
        for k, v in state.items():
            own[k].data = np.array(v, dtype=own[k].dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws truncated to two standard deviations (by resampling)."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(get_default_dtype())


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, init: str = "trunc_normal"):
        if init == "trunc_normal":
            w = trunc_normal(rng, (d_in, d_out))
            b = np.zeros(d_out)
        elif init == "uniform":
            bound = 1.0 / math.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
            b = rng.uniform(-bound, bound, size=d_out)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(b) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=False):
        fan_in = c_in * kernel * kernel
        w = rng.standard_normal((c_out, c_in, kernel, kernel)) * math.sqrt(2.0 / fan_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MLP(Module):
    """Stack of Linear layers with an activation between consecutive ones."""

    def __init__(self, d_in, d_hidden, d_out, n_hidden, rng, activation="gelu", init="trunc_normal"):
        dims = [d_in] + [d_hidden] * n_hidden + [d_out]
        self.layers = [Linear(a, b, rng, init=init) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.activation(x, self.activation)
        return x
