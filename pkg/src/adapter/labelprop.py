"""Transductive label smoothing over query embeddings.

Graph: ``a_ij = exp(-|z_i - z_j|^2 / (2 sigma^2))`` for ``i != j``, zero
diagonal, normalised as ``D^-1/2 A D^-1/2``. Labels evolve as
``F <- alpha * A_hat @ F + (1 - alpha) * Y`` or are solved in closed form
with a truncated-SVD pseudo-inverse of ``I - alpha * A_hat``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from adapter.errors import ContractError, NumericError, ParameterError, ShapeError


@dataclass
class LabelPropConfig:
    enabled: bool = True
    alpha: float = 0.99
    sigma: Union[float, str] = 50.0
    rcond: float = 0.1
    include_support: bool = False
    mode: str = "closed"
    max_iter: int = 10_000
    tol: float = 1e-8


@dataclass
class AffinityGraph:
    A: np.ndarray
    A_hat: np.ndarray
    sigma: float

    @property
    def degree(self) -> np.ndarray:
        return self.A.sum(axis=1)


def resolve_sigma(embeddings: np.ndarray, sigma) -> float:
    if isinstance(sigma, str):
        if sigma != "auto":
            raise ParameterError(f"sigma must be a positive number or 'auto', got {sigma!r}")
        sigma = float(np.std(embeddings))
    sigma = float(sigma)
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    return sigma


def build_affinity(embeddings, sigma=50.0) -> AffinityGraph:
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError(f"need at least 2 embeddings as an (n, d) array, got shape {z.shape}")
    sigma = resolve_sigma(z, sigma)
    diff = z[:, None, :] - z[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    A = np.exp(-sq / (2.0 * sigma * sigma))
    np.fill_diagonal(A, 0.0)
    deg = A.sum(axis=1)
    # isolated nodes keep a zero row/column and therefore their initial label
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    A_hat = inv_sqrt[:, None] * A * inv_sqrt[None, :]
    return AffinityGraph(A, A_hat, sigma)


def _check_alpha(alpha: float) -> None:
    if alpha < 0:
        raise ParameterError(f"alpha must lie in [0, 1), got {alpha}")
    if alpha >= 1:
        raise ContractError(f"alpha={alpha}: propagation is only a contraction for alpha < 1")


def _check_labels(graph: AffinityGraph, Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != graph.A_hat.shape[0]:
        raise ShapeError(f"label matrix {Y.shape} does not match graph of {graph.A_hat.shape[0]} nodes")
    return Y


def propagate_iterative(graph: AffinityGraph, Y, alpha: float, max_iter: int = 10_000, tol: float = 1e-8) -> np.ndarray:
    """Iterate from ``F = Y`` until the max-abs change drops below ``tol`` (or ``max_iter``)."""
    _check_alpha(alpha)
    Y = _check_labels(graph, Y)
    F = Y.copy()
    base = (1.0 - alpha) * Y
    for _ in range(max_iter):
        nxt = alpha * (graph.A_hat @ F) + base
        delta = np.abs(nxt - F).max()
        F = nxt
        if delta < tol:
            break
    return F


def pinv(M: np.ndarray, rcond: float) -> np.ndarray:
    """Pseudo-inverse zeroing singular values below ``rcond * max(singular values)``."""
    if rcond < 0:
        raise ParameterError(f"rcond must be >= 0, got {rcond}")
    if not np.isfinite(M).all():
        raise NumericError(f"matrix has non-finite entries (|M|_F={np.linalg.norm(np.nan_to_num(M)):.3g})")
    try:
        U, s, Vt = np.linalg.svd(M)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed for {M.shape} matrix, |M|_F={np.linalg.norm(M):.3g}: {exc}") from exc
    if s.size == 0 or s[0] == 0:
        return np.zeros(M.T.shape)
    keep = s > rcond * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def propagate_closed(graph: AffinityGraph, Y, alpha: float, rcond: float = 0.1) -> np.ndarray:
    """``F* = pinv(I - alpha * A_hat, rcond) @ Y``."""
    _check_alpha(alpha)
    Y = _check_labels(graph, Y)
    n = graph.A_hat.shape[0]
    return pinv(np.eye(n) - alpha * graph.A_hat, rcond) @ Y


def fixed_point(graph: AffinityGraph, Y, alpha: float, rcond: float = 1e-12) -> np.ndarray:
    """Limit of :func:`propagate_iterative`: ``(1 - alpha)`` times the closed form.

    The positive factor leaves every row's argmax unchanged, so predictions
    from either form agree.
    """
    return (1.0 - alpha) * propagate_closed(graph, Y, alpha, rcond)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def smooth_predictions(query_embeddings, classifier_logits, cfg: LabelPropConfig,
                       support_embeddings: Optional[np.ndarray] = None,
                       support_labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Query labels after propagating the classifier's argmax pseudo-labels over the query graph.

    With ``cfg.include_support`` the support rows join the graph with their
    known labels and are dropped again before returning.
    """
    logits = np.asarray(classifier_logits)
    z = np.asarray(query_embeddings, dtype=np.float64)
    if logits.ndim != 2 or z.ndim != 2 or len(logits) != len(z):
        raise ShapeError(f"need one logit row per embedding, got {logits.shape} and {z.shape}")
    pseudo = logits.argmax(axis=1)
    if not cfg.enabled or len(z) < 2:
        return pseudo
    n_classes = logits.shape[1]
    Y = one_hot(pseudo, n_classes)
    n_s = 0
    if cfg.include_support:
        if support_embeddings is None or support_labels is None:
            raise ContractError("include_support requires support embeddings and labels")
        n_s = len(support_embeddings)
        z = np.vstack([np.asarray(support_embeddings, dtype=np.float64), z])
        Y = np.vstack([one_hot(support_labels, n_classes), Y])
    graph = build_affinity(z, cfg.sigma)
    if cfg.mode == "closed":
        F = propagate_closed(graph, Y, cfg.alpha, cfg.rcond)
    elif cfg.mode == "iterative":
        F = propagate_iterative(graph, Y, cfg.alpha, cfg.max_iter, cfg.tol)
    else:
        raise ParameterError(f"unknown label propagation mode {cfg.mode!r}")
    return F[n_s:].argmax(axis=1)
