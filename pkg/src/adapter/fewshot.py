"""Episodic N-way K-shot evaluation on a frozen backbone.

Each episode trains a fresh MLP head on replicated self-attention features of
the support set, scores the queries, and optionally smooths the predictions
with label propagation. Query labels are only touched when accuracy is
computed at the very end.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from adapter import ndcore as nd
from adapter.data import Dataset
from adapter.errors import AdapterError, ContractError, DataError
from adapter.labelprop import LabelPropConfig, smooth_predictions
from adapter.model import Backbone, forward_single
from adapter.ndcore import functional as F
from adapter.ndcore.nn import MLP, Linear, Module
from adapter.ndcore.tensor import Tensor, concat


@dataclass
class FewShotConfig:
    ways: int = 5
    shots: int = 5
    queries: int = 15
    episodes: int = 600
    epochs: int = 0                 # 0: 500 for 1-shot, 100 otherwise
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    dampening: float = 0.9
    weight_decay: float = 0.001
    head_layers: int = 3
    hidden_factor: int = 4
    finetune: bool = False
    finetune_iterations: int = 0    # 0: 500 for 1-shot, 250 otherwise
    finetune_batch_size: int = 5

    @property
    def n_epochs(self) -> int:
        return self.epochs or (500 if self.shots == 1 else 100)

    @property
    def n_finetune_iterations(self) -> int:
        return self.finetune_iterations or (500 if self.shots == 1 else 250)


@dataclass
class Episode:
    ways: int
    shots: int
    classes: np.ndarray             # dataset class ids, position = episode label
    support_indices: np.ndarray
    support_labels: np.ndarray
    query_indices: np.ndarray
    query_labels: np.ndarray        # scoring only


@dataclass
class EpisodeResult:
    raw_accuracy: float
    smoothed_accuracy: float


def half_width(accuracies: Sequence[float], z: float = 1.96) -> float:
    """95% confidence half-width: ``z * sample_std / sqrt(n)`` (NaN for n < 2)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if len(acc) < 2:
        return float("nan")
    return float(z * acc.std(ddof=1) / math.sqrt(len(acc)))


@dataclass
class BenchmarkResult:
    """Per-episode raw and smoothed accuracies with their mean and 95% CI half-width."""

    raw_accuracies: List[float] = field(default_factory=list)
    smoothed_accuracies: List[float] = field(default_factory=list)

    @property
    def episodes(self) -> int:
        return len(self.smoothed_accuracies)

    @property
    def accuracies(self) -> List[float]:
        return self.smoothed_accuracies

    @property
    def mean(self) -> float:
        return float(np.mean(self.smoothed_accuracies))

    @property
    def half_width(self) -> float:
        return half_width(self.smoothed_accuracies)

    @property
    def raw_mean(self) -> float:
        return float(np.mean(self.raw_accuracies))

    @property
    def raw_half_width(self) -> float:
        return half_width(self.raw_accuracies)


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for episode ``index``; independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def check_population(dataset: Dataset, ways: int, per_class: int) -> None:
    by_class = dataset.indices_by_class()
    for c, idx in by_class.items():
        if len(idx) < per_class:
            raise DataError(f"class {dataset.class_names[c]!r} has {len(idx)} samples; an episode needs {per_class}")
    if len(by_class) < ways:
        raise DataError(f"dataset has {len(by_class)} classes; {ways}-way episodes need {ways}")


def sample_episode(dataset: Dataset, ways: int, shots: int, queries: int, rng: np.random.Generator) -> Episode:
    check_population(dataset, ways, shots + queries)
    by_class = dataset.indices_by_class()
    classes = rng.choice(len(by_class), size=ways, replace=False)
    s_idx, s_lab, q_idx, q_lab = [], [], [], []
    for label, c in enumerate(classes):
        picked = rng.choice(by_class[int(c)], size=shots + queries, replace=False)
        s_idx.extend(picked[:shots])
        s_lab.extend([label] * shots)
        q_idx.extend(picked[shots:])
        q_lab.extend([label] * queries)
    return Episode(ways, shots, classes, np.array(s_idx), np.array(s_lab), np.array(q_idx), np.array(q_lab))


class ClassifierHead(MLP):
    """ReLU MLP on replicated features; hidden width = ``hidden_factor`` x input width."""

    def __init__(self, in_dim: int, n_classes: int, cfg: FewShotConfig, rng):
        super().__init__(in_dim, cfg.hidden_factor * in_dim, n_classes, cfg.head_layers, rng,
                         activation="relu", init="uniform")


def extract_features(images: np.ndarray, backbone: Backbone, chunk: int = 64) -> np.ndarray:
    """Replicated double-target embeddings of (B, C, H, W) images, without recording a tape."""
    dtype = next(iter(backbone.parameters())).dtype
    out = []
    with nd.no_grad():
        for i in range(0, len(images), chunk):
            out.append(forward_single(images[i:i + chunk].astype(dtype, copy=False), backbone).data)
    return np.concatenate(out)


def fit_head(features: np.ndarray, labels: np.ndarray, n_classes: int, cfg: FewShotConfig,
             rng: np.random.Generator, return_losses: bool = False):
    """SGD with momentum/dampening on cross-entropy over shuffled mini-batches."""
    if len(features) == 0:
        raise ContractError("cannot train a head on an empty support set")
    head = ClassifierHead(features.shape[1], n_classes, cfg, rng)
    opt = nd.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum, dampening=cfg.dampening,
                 weight_decay=cfg.weight_decay)
    features = features.astype(nd.get_default_dtype(), copy=False)
    losses = []
    for _ in range(cfg.n_epochs):
        order = rng.permutation(len(features))
        epoch_loss = 0.0
        for i in range(0, len(order), cfg.batch_size):
            batch = order[i:i + cfg.batch_size]
            loss = F.cross_entropy(head(Tensor(features[batch], dtype=features.dtype)), labels[batch])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(batch)
        losses.append(epoch_loss / len(features))
    return (head, losses) if return_losses else head


def train_head(support_images: np.ndarray, support_labels: np.ndarray, backbone: Backbone, cfg: FewShotConfig,
               rng: np.random.Generator, n_classes: Optional[int] = None) -> ClassifierHead:
    """Fit a fresh head on frozen-backbone features of the support images."""
    if len(support_images) == 0:
        raise ContractError("empty support set")
    feats = extract_features(support_images, backbone)
    return fit_head(feats, np.asarray(support_labels), n_classes or int(np.max(support_labels)) + 1, cfg, rng)


def predict_logits(head: Module, features: np.ndarray) -> np.ndarray:
    with nd.no_grad():
        return head(Tensor(features, dtype=features.dtype)).data


def evaluate_episode(episode: Episode, dataset: Dataset, backbone: Backbone, cfg: FewShotConfig,
                     lp_cfg: LabelPropConfig, rng: np.random.Generator, image_size: int = None) -> EpisodeResult:
    """Train a head on the support set, then score raw and label-smoothed query predictions."""
    image_size = image_size or backbone.cfg.image_size
    if cfg.finetune:
        raise ContractError("finetune episodes need base data; use evaluate_episode_finetune")
    xs = dataset.stack(episode.support_indices, image_size)
    xq = dataset.stack(episode.query_indices, image_size)
    fs = extract_features(xs, backbone)
    fq = extract_features(xq, backbone)
    head = fit_head(fs, episode.support_labels, episode.ways, cfg, rng)
    return score_queries(head, fs, fq, episode, lp_cfg, backbone.embed_dim)


def score_queries(head, fs, fq, episode: Episode, lp_cfg: LabelPropConfig, embed_dim: int) -> EpisodeResult:
    logits = predict_logits(head, fq)
    raw = logits.argmax(axis=1)
    # graph over the raw Z_T slice; replication only rescales distances
    smoothed = smooth_predictions(fq[:, :embed_dim], logits, lp_cfg, fs[:, :embed_dim], episode.support_labels)
    truth = episode.query_labels
    return EpisodeResult(float(np.mean(raw == truth)), float(np.mean(smoothed == truth)))


def run_benchmark(dataset: Dataset, backbone: Backbone, cfg: FewShotConfig, lp_cfg: LabelPropConfig,
                  n_episodes: Optional[int] = None, seed: int = 0, threads: int = 1,
                  episode_fn=None) -> BenchmarkResult:
    """Independent episodes (fresh head each), aggregated into a :class:`BenchmarkResult`."""
    n_episodes = cfg.episodes if n_episodes is None else n_episodes
    check_population(dataset, cfg.ways, cfg.shots + cfg.queries)
    episode_fn = episode_fn or (lambda ep, rng: evaluate_episode(ep, dataset, backbone, cfg, lp_cfg, rng))

    def one(index: int) -> EpisodeResult:
        rng = episode_rng(seed, index)
        try:
            ep = sample_episode(dataset, cfg.ways, cfg.shots, cfg.queries, rng)
            return episode_fn(ep, rng)
        except AdapterError as exc:
            raise type(exc)(f"episode {index}: {exc}") from exc
        except Exception as exc:
            raise RuntimeError(f"episode {index} failed: {exc!r}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_episodes)))
    else:
        results = [one(i) for i in range(n_episodes)]
    return BenchmarkResult([r.raw_accuracy for r in results], [r.smoothed_accuracy for r in results])


# -- "supervised, fine-tuned" ablation wiring -----------------------------------------

def evaluate_episode_finetune(episode: Episode, dataset: Dataset, base: Dataset, backbone: Backbone,
                              cfg: FewShotConfig, lp_cfg: LabelPropConfig, rng: np.random.Generator) -> EpisodeResult:
    """Unfrozen backbone trained jointly on base batches and the support set.

    Two linear heads read ``[Z_B, Z_T->B]`` (base labels) and ``[Z_T, Z_B->T]``
    (support labels). Queries are scored by the target head on ``[Z_T, Z_T]``.
    """
    import copy

    size = backbone.cfg.image_size
    net = copy.deepcopy(backbone)
    net.requires_grad_(True)
    d = net.embed_dim
    head_b = Linear(2 * d, len(base.class_names), rng, init="uniform")
    head_t = Linear(2 * d, episode.ways, rng, init="uniform")
    params = net.parameters() + head_b.parameters() + head_t.parameters()
    opt = nd.SGD(params, lr=cfg.lr, momentum=cfg.momentum, dampening=cfg.dampening, weight_decay=cfg.weight_decay)
    base_labels = base.labels
    xs_all = dataset.stack(episode.support_indices, size)
    dtype = next(iter(params)).dtype
    for _ in range(cfg.n_finetune_iterations):
        sb = rng.choice(len(episode.support_indices), size=min(cfg.finetune_batch_size, len(xs_all)), replace=False)
        bb = rng.choice(len(base), size=len(sb), replace=False)
        quad = net.forward_pair(base.stack(bb, size).astype(dtype), xs_all[sb].astype(dtype))
        loss = F.cross_entropy(head_b(concat([quad.base, quad.t2b], axis=-1)), base_labels[bb]) + \
            F.cross_entropy(head_t(concat([quad.target, quad.b2t], axis=-1)), episode.support_labels[sb])
        opt.zero_grad()
        loss.backward()
        opt.step()
    with nd.no_grad():
        fs = forward_single(xs_all.astype(dtype), net, replicas=2).data
        fq = forward_single(dataset.stack(episode.query_indices, size).astype(dtype), net, replicas=2).data
    return score_queries(head_t, fs, fq, episode, lp_cfg, d)
