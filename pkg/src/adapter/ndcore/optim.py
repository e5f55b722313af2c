"""SGD (momentum + dampening) and AdamW over :class:`Parameter` lists.

Weight decay is decoupled in both: parameters shrink by ``lr * wd`` before
the gradient step, independent of the moment buffers.
"""

from __future__ import annotations

from typing import Dict, List

import numpy as np
from scipy.linalg import blas

from adapter.errors import ParameterError


def _axpy(a: float, x: np.ndarray, y: np.ndarray) -> None:
    """``y += a * x`` in place without a temporary."""
    if y.flags.c_contiguous and x.flags.c_contiguous and x.dtype == y.dtype and y.dtype.char in "fd":
        fn = blas.saxpy if y.dtype.char == "f" else blas.daxpy
        fn(x.ravel(), y.ravel(), a=a)
    else:
        y += a * x


class Optimizer:
    def __init__(self, params, defaults: Dict):
        params = list(params)
        if params and isinstance(params[0], dict):
            groups = [dict(defaults, **g) for g in params]
        else:
            groups = [dict(defaults, params=params)]
        for g in groups:
            g["params"] = list(g["params"])
        self.param_groups: List[Dict] = groups
        # one dict of buffers per parameter, in group order
        self.state: List[Dict[str, np.ndarray]] = [{} for g in groups for _ in g["params"]]
        self.step_count = 0

    def _params(self):
        i = 0
        for group in self.param_groups:
            for p in group["params"]:
                yield group, p, self.state[i]
                i += 1

    def zero_grad(self) -> None:
        for group in self.param_groups:
            for p in group["params"]:
                p.grad = None

    def _check(self, group) -> None:
        if group["lr"] < 0:
            raise ParameterError(f"learning rate must be >= 0, got {group['lr']}")
        if group.get("weight_decay", 0.0) < 0:
            raise ParameterError(f"weight decay must be >= 0, got {group['weight_decay']}")

    def step(self) -> None:
        for group in self.param_groups:
            self._check(group)
        self.step_count += 1
        for group, p, state in self._params():
            if p.grad is None:
                continue
            self._update(group, p, state)

    def _update(self, group, p, state):
        raise NotImplementedError

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Flat name -> array view of every buffer, for checkpointing."""
        out = {}
        for i, state in enumerate(self.state):
            for key, buf in state.items():
                out[f"{i}.{key}"] = buf
        return out

    def load_state_dict(self, buffers: Dict[str, np.ndarray], step_count: int) -> None:
        params = [p for g in self.param_groups for p in g["params"]]
        self.state = [{} for _ in params]
        for name, buf in buffers.items():
            index, key = name.split(".", 1)
            p = params[int(index)]
            if tuple(buf.shape) != p.shape:
                raise ParameterError(f"optimizer buffer {name} shape {buf.shape} != parameter {p.shape}")
            self.state[int(index)][key] = np.array(buf, dtype=p.dtype)
        self.step_count = int(step_count)


class SGD(Optimizer):
    """``buf = momentum * buf + (1 - dampening) * g`` with zero-initialised ``buf``."""

    def __init__(self, params, lr: float, momentum: float = 0.0, dampening: float = 0.0, weight_decay: float = 0.0):
        if lr < 0:
            raise ParameterError(f"learning rate must be >= 0, got {lr}")
        super().__init__(params, dict(lr=lr, momentum=momentum, dampening=dampening, weight_decay=weight_decay))

    def _update(self, group, p, state):
        g = p.grad
        if group["momentum"]:
            buf = state.get("momentum_buffer")
            if buf is None:
                buf = state["momentum_buffer"] = np.zeros_like(p.data)
            buf *= group["momentum"]
            _axpy(1.0 - group["dampening"], g, buf)
            step = -group["lr"]
            g = buf
        else:
            step = -group["lr"] * (1.0 - group["dampening"])
        if group["weight_decay"]:
            p.data *= 1.0 - group["lr"] * group["weight_decay"]
        _axpy(step, g, p.data)


class AdamW(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        if lr < 0:
            raise ParameterError(f"learning rate must be >= 0, got {lr}")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay))

    def _update(self, group, p, state):
        b1, b2 = group["betas"]
        g = p.grad
        if "exp_avg" not in state:
            state["exp_avg"] = np.zeros_like(p.data)
            state["exp_avg_sq"] = np.zeros_like(p.data)
        m, v = state["exp_avg"], state["exp_avg_sq"]
        t = self.step_count
        if group["weight_decay"]:
            p.data *= 1.0 - group["lr"] * group["weight_decay"]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= group["lr"] * m_hat / (np.sqrt(v_hat) + group["eps"])
