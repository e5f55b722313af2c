"""Supervised base-class pretraining, the ``ssl = false`` ablation.

A linear classifier over the pooled self-attention embedding of base images
is trained on base labels with SGD; target images are not used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from adapter import ndcore as nd
from adapter.data import Dataset
from adapter.dino import DinoConfig, step_batches, step_rng
from adapter.model import Backbone, ModelConfig
from adapter.ndcore import functional as F
from adapter.ndcore.nn import Linear


@dataclass
class SupervisedConfig:
    lr: float = 0.025
    momentum: float = 0.9
    dampening: float = 0.0
    weight_decay: float = 1e-5


class SupervisedState:
    def __init__(self, model_cfg: ModelConfig, dino_cfg: DinoConfig, n_base_classes: int, seed: int = 0,
                 sup_cfg: SupervisedConfig = None):
        sup_cfg = sup_cfg or SupervisedConfig()
        rng = np.random.default_rng(seed)
        self.model_cfg = model_cfg
        self.cfg = dino_cfg
        self.seed = seed
        self.backbone = Backbone(model_cfg, rng)
        self.head = Linear(model_cfg.embed_dim, n_base_classes, rng)
        self.optimizer = nd.SGD(self.backbone.parameters() + self.head.parameters(), lr=sup_cfg.lr,
                                momentum=sup_cfg.momentum, dampening=sup_cfg.dampening,
                                weight_decay=sup_cfg.weight_decay)
        self.step = 0


def supervised_step(base: Dataset, state: SupervisedState) -> float:
    cfg = state.cfg
    ib, _ = step_batches(len(base), 1, cfg.batch_size, state.step, state.seed)
    rng = step_rng(state.seed, state.step)
    x = base.stack(ib, cfg.global_size, cfg.norm_mean, cfg.norm_std)
    flip = rng.random(len(x)) < cfg.flip_p
    x[flip] = x[flip][..., ::-1]
    logits = state.head(state.backbone.encode_target(x.astype(nd.get_default_dtype())))
    loss = F.cross_entropy(logits, base.labels[ib])
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(loss.item())


def pretrain_supervised(base: Dataset, state: SupervisedState, steps: int, callback=None) -> List[Tuple[int, float]]:
    log = []
    for _ in range(steps):
        s = state.step
        loss = supervised_step(base, state)
        log.append((s, loss))
        if callback is not None:
            callback(state, s, loss)
    return log
