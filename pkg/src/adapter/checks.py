"""Numerical invariants shared by ``adapter selftest`` and the test suite.

Each check returns a :class:`CheckResult`; none of them raises on failure.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from adapter import labelprop
from adapter import model
from adapter import ndcore as nd
from adapter.ndcore.nn import Module, Parameter, trunc_normal
from adapter.ndcore.tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} value={self.value:.3e}  threshold={self.threshold:.1e}  ({self.seconds:.1f}s)"


class QuadStack(Module):
    """Quadruple blocks + final norm + sequence pooling over given token streams."""

    def __init__(self, dim: int, depth: int, heads: int, rng):
        self.blocks = [model.QuadrupleBlock(dim, heads, 2.0, rng) for _ in range(depth)]
        self.norm = nd.LayerNorm(dim)
        self.pool = Parameter(trunc_normal(rng, (dim,), std=0.5))
        # keep LayerNorm affine parameters away from their trivial init
        for name, p in self.named_parameters():
            if name.endswith(("gain", "bias")):
                p.data = p.data + rng.normal(0.0, 0.3, size=p.shape)

    def forward(self, base: Tensor, target: Tensor) -> Tensor:
        quad = model.StreamQuad(base, target, base, target)
        for block in self.blocks:
            quad = block(quad)
        pooled = [model.sequence_pool(self.norm(s), self.pool) for s in quad.as_list()]
        return model.concat_quad(model.StreamQuad(*pooled))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``array`` (modified in place, restored)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def gradient_check(depth: int = 2, dim: int = 16, tokens: int = 3, heads: int = 2, batch: int = 2,
                   seed: int = 0, eps: float = 1e-6) -> Dict[str, float]:
    """Per-tensor relative error of reverse-mode vs central-difference gradients (64-bit)."""
    with nd.precision("float64"):
        rng = np.random.default_rng(seed)
        net = QuadStack(dim, depth, heads, rng)
        base = Tensor(rng.normal(size=(batch, tokens, dim)), requires_grad=True)
        target = Tensor(rng.normal(size=(batch, tokens, dim)), requires_grad=True)
        weights = rng.normal(size=(batch, 4 * dim))

        def loss_fn():
            return (net(base, target) * weights).sum()

        net.zero_grad()
        base.grad = target.grad = None
        loss_fn().backward()

        def value():
            with nd.no_grad():
                return float(loss_fn().data)

        errors = {}
        named = list(net.named_parameters()) + [("input.base", base), ("input.target", target)]
        for name, p in named:
            errors[name] = relative_error(p.grad, numeric_gradient(value, p.data, eps))
        return errors


def check_gradients(threshold: float = 1e-4) -> CheckResult:
    t = time.perf_counter()
    worst = max(gradient_check().values())
    return CheckResult("gradient_fidelity", worst < threshold, worst, threshold, time.perf_counter() - t)


def degeneracy_gap(n_inputs: int = 100, seed: int = 0) -> float:
    """Largest |cross_attention(x, x) - self_attention(x)| over random inputs (64-bit)."""
    worst = 0.0
    with nd.precision("float64"), nd.no_grad():
        rng = np.random.default_rng(seed)
        for _ in range(n_inputs):
            dim = int(rng.choice([8, 16, 32]))
            heads = int(rng.choice([1, 2, 4]))
            attn = model.Attention(dim, heads, rng)
            x = Tensor(rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 10)), dim)))
            a = model.cross_attention(x, x, attn).data
            b = model.self_attention(x, attn).data
            worst = max(worst, float(np.abs(a - b).max()))
    return worst


def check_degeneracy() -> CheckResult:
    t = time.perf_counter()
    gap = degeneracy_gap()
    return CheckResult("cross_attention_degeneracy", gap == 0.0, gap, 0.0, time.perf_counter() - t)


def labelprop_gap(n_graphs: int = 50, alpha: float = 0.99, seed: int = 0) -> float:
    """Largest max-abs gap between the closed-form fixed point (rcond 1e-12) and 10,000 iterations."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(n_graphs):
        n = int(rng.integers(5, 31))
        k = int(rng.integers(2, 6))
        z = rng.normal(size=(n, int(rng.integers(2, 9))))
        graph = labelprop.build_affinity(z, sigma=float(rng.uniform(0.5, 2.0)))
        Y = labelprop.one_hot(rng.integers(0, k, size=n), k)
        closed = labelprop.fixed_point(graph, Y, alpha, rcond=1e-12)
        iterated = labelprop.propagate_iterative(graph, Y, alpha, max_iter=10_000, tol=0.0)
        worst = max(worst, float(np.abs(closed - iterated).max()))
    return worst


def check_labelprop(threshold: float = 1e-6) -> CheckResult:
    t = time.perf_counter()
    gap = labelprop_gap()
    return CheckResult("labelprop_equivalence", gap < threshold, gap, threshold, time.perf_counter() - t)


ALL_CHECKS: List[Callable[[], CheckResult]] = [check_gradients, check_degeneracy, check_labelprop]


def run_all() -> List[CheckResult]:
    return [check() for check in ALL_CHECKS]
