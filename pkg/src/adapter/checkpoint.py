"""Training-state and backbone checkpoints on top of the manifest+blob format.

A training checkpoint holds student and teacher parameters, both centres,
the AdamW moments and the step counter. Mini-batches and augmentation draws
are derived from ``(seed, step)``, so the seed and step fully describe the
random state and resumption is exact.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from adapter.dino import TeacherStudent
from adapter.errors import CheckpointError
from adapter.model import Backbone, ModelConfig
from adapter.ndcore import serialize

KIND_TRAINING = "training"
KIND_BACKBONE = "backbone"


def _model_meta(cfg: ModelConfig) -> Dict[str, str]:
    return {f"model.{k}": str(v) for k, v in vars(cfg).items()}


def save_training(directory, state: TeacherStudent) -> None:
    meta = {"kind": KIND_TRAINING, "step": state.step, "seed": state.seed,
            "optim_step": state.optimizer.step_count, "schedule_steps": state.cfg.total_schedule_steps,
            "rng": "derived:seed,step"}
    meta.update(_model_meta(state.model_cfg))
    serialize.save(directory, state.state_tensors(), meta)


def _check_shapes(expected: Dict[str, Tuple[int, ...]], found: Dict[str, np.ndarray], what: str) -> None:
    problems = []
    for name, shape in expected.items():
        if name not in found:
            problems.append(f"{name}: missing (expected {shape})")
        elif tuple(found[name].shape) != tuple(shape):
            problems.append(f"{name}: checkpoint {tuple(found[name].shape)} vs config {tuple(shape)}")
    problems += [f"{name}: not in model" for name in found if name not in expected]
    if problems:
        raise CheckpointError(f"{what} incompatible with [model] config:\n  " + "\n  ".join(problems))


def load_training(directory, state: TeacherStudent) -> TeacherStudent:
    """Restore ``state`` in place from ``directory``; shapes must match its configuration."""
    tensors, meta = serialize.load(directory)
    if meta.get("kind") != KIND_TRAINING:
        raise CheckpointError(f"{directory} is not a training checkpoint (kind={meta.get('kind')!r})")
    expected = {k: v.shape for k, v in state.state_tensors().items() if not k.startswith("optim.")}
    _check_shapes(expected, {k: v for k, v in tensors.items() if not k.startswith("optim.")}, str(directory))
    if int(meta.get("seed", -1)) != state.seed:
        raise CheckpointError(f"checkpoint seed {meta.get('seed')} differs from run seed {state.seed}")
    if int(meta.get("schedule_steps", -1)) != state.cfg.total_schedule_steps:
        raise CheckpointError(f"checkpoint schedules span {meta.get('schedule_steps')} steps, "
                              f"this run {state.cfg.total_schedule_steps}; resume with the same total steps")
    try:
        state.load_state_tensors(tensors, int(meta["optim_step"]))
        state.step = int(meta["step"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{directory}: corrupt training state ({exc})") from exc
    return state


def save_backbone(directory, backbone: Backbone, extra_meta: Dict[str, str] = None) -> None:
    meta = {"kind": KIND_BACKBONE}
    meta.update(_model_meta(backbone.cfg))
    meta.update(extra_meta or {})
    serialize.save(directory, {n: p.data for n, p in backbone.named_parameters()}, meta)


def load_backbone(directory, cfg: ModelConfig) -> Backbone:
    """Build a backbone from ``cfg`` and fill it from a backbone or training checkpoint."""
    tensors, meta = serialize.load(directory)
    if meta.get("kind") == KIND_TRAINING:
        prefix = "teacher.backbone."
        tensors = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    elif meta.get("kind") != KIND_BACKBONE:
        raise CheckpointError(f"{directory}: unknown checkpoint kind {meta.get('kind')!r}")
    backbone = Backbone(cfg, np.random.default_rng(0))
    _check_shapes({n: p.shape for n, p in backbone.named_parameters()}, tensors, str(directory))
    backbone.load_state_dict(tensors)
    backbone.requires_grad_(False)
    return backbone


def resolve(path, subdirs=("teacher_backbone", "checkpoint")) -> Path:
    """Accept a checkpoint directory, or a run directory holding one of ``subdirs``."""
    path = Path(path)
    if (path / "manifest.txt").exists():
        return path
    for sub in subdirs:
        if (path / sub / "manifest.txt").exists():
            return path / sub
    raise CheckpointError(f"no checkpoint manifest found at {path}")
