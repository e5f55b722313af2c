"""Self-distillation over base and target domains at once.

The student sees every crop, the teacher only the two global crops. Base
logits come from a head over ``[Z_B, Z_T->B]`` and target logits from a
second head over ``[Z_T, Z_B->T]``; the total loss is the sum of both
domains' multi-crop cross-entropies. The teacher is an EMA of the student
and never receives gradients. Its logits are centred with a running mean
and sharpened by a low temperature before the softmax.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from adapter import ndcore as nd
from adapter.data import color_jitter, gaussian_blur, random_resized_crop, resize_normalize
from adapter.errors import ContractError, DataError, ParameterError, ShapeError
from adapter.model import Backbone, ModelConfig
from adapter.ndcore import functional as F
from adapter.ndcore.nn import MLP, Module, trunc_normal
from adapter.ndcore.tensor import Tensor, concat


@dataclass
class DinoConfig:
    out_dim: int = 256
    head_hidden: int = 128
    head_layers: int = 3
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    teacher_momentum: float = 0.996
    teacher_momentum_end: float = 1.0
    lr: float = 2.5e-4
    min_lr: float = 5e-7
    warmup_steps: int = 10
    weight_decay: float = 1e-5
    weight_decay_end: float = 0.4
    steps: int = 50
    schedule_steps: int = 0          # 0: same as ``steps``
    batch_size: int = 8
    n_local_crops: int = 8
    global_size: int = 16
    local_size: int = 8
    global_scale: Tuple[float, float] = (0.4, 1.0)
    local_scale: Tuple[float, float] = (0.05, 0.4)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strength: Tuple[float, float, float] = (0.4, 0.4, 0.2)
    blur_p: Tuple[float, float, float] = (1.0, 0.1, 0.5)
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    norm_mean: float = 0.5
    norm_std: float = 0.5

    @property
    def total_schedule_steps(self) -> int:
        return self.schedule_steps or self.steps


# -- schedules ------------------------------------------------------------------

@dataclass
class ScheduleSpec:
    start: float
    end: float
    total_steps: int
    warmup_steps: int = 0
    warmup_start: float = 0.0


def cosine_schedule(spec: ScheduleSpec, step: int) -> float:
    """Linear warmup ``warmup_start -> start``, then half-cosine ``start -> end``.

    Steps beyond ``total_steps`` clamp to ``end``.
    """
    if step < 0:
        raise ParameterError(f"schedule step must be >= 0, got {step}")
    if step >= spec.total_steps:
        return spec.end
    if step < spec.warmup_steps:
        return spec.warmup_start + (spec.start - spec.warmup_start) * step / spec.warmup_steps
    span = spec.total_steps - spec.warmup_steps
    progress = (step - spec.warmup_steps) / span
    if progress == 0.0:
        return spec.start
    return spec.end + 0.5 * (spec.start - spec.end) * (1.0 + math.cos(math.pi * progress))


# -- multi-crop --------------------------------------------------------------------

@dataclass
class MultiCropSet:
    global_views: List[np.ndarray]
    local_views: List[np.ndarray]

    @property
    def views(self) -> List[np.ndarray]:
        return self.global_views + self.local_views

    def __len__(self):
        return len(self.global_views) + len(self.local_views)


def min_image_extent(cfg: DinoConfig) -> int:
    """Smallest image side whose smallest local crop still spans a pixel."""
    return max(1, math.ceil(1.0 / math.sqrt(max(cfg.local_scale[0], 1e-12))))


def _augment(pixels, size, scale, blur_p, cfg: DinoConfig, rng):
    view = random_resized_crop(pixels, size, scale, rng)
    if rng.random() < cfg.flip_p:
        view = view[:, :, ::-1]
    if rng.random() < cfg.jitter_p:
        view = color_jitter(view, rng, *cfg.jitter_strength)
    if rng.random() < blur_p:
        view = gaussian_blur(view, rng.uniform(*cfg.blur_sigma))
    return resize_normalize(np.ascontiguousarray(view, dtype=np.float32), None, cfg.norm_mean, cfg.norm_std)


def multi_crop(pixels: np.ndarray, cfg: DinoConfig, rng: np.random.Generator) -> MultiCropSet:
    """Two global and ``n_local_crops`` local augmented views of one (C, H, W) image in [0, 1]."""
    floor = min_image_extent(cfg)
    if min(pixels.shape[1:]) < floor:
        raise DataError(f"image {pixels.shape[1:]} smaller than crop floor {floor}")
    glob = [_augment(pixels, cfg.global_size, cfg.global_scale, cfg.blur_p[i], cfg, rng) for i in range(2)]
    loc = [_augment(pixels, cfg.local_size, cfg.local_scale, cfg.blur_p[2], cfg, rng)
           for _ in range(cfg.n_local_crops)]
    return MultiCropSet(glob, loc)


def multi_crop_batch(images: Sequence[np.ndarray], cfg: DinoConfig, rng) -> List[np.ndarray]:
    """Per-view stacks: element ``v`` is the (B, C, h, w) array of view ``v`` for every image."""
    crops = [multi_crop(img, cfg, rng) for img in images]
    n_views = len(crops[0])
    return [np.stack([c.views[v] for c in crops]) for v in range(n_views)]


# -- networks ---------------------------------------------------------------------------

class DinoHead(MLP):
    """Plain MLP projection head (no weight-normalised last layer)."""

    # Initial logit std, matching what an L2-normalised bottleneck + normalised
    # last layer would emit; without it the logits start ~1e-4 and the
    # teacher/student pair sits at the uniform fixed point.
    LOGIT_STD = 0.06

    def __init__(self, in_dim: int, cfg: DinoConfig, rng):
        super().__init__(in_dim, cfg.head_hidden, cfg.out_dim, cfg.head_layers, rng, activation="gelu")
        dtype = nd.get_default_dtype()
        for layer in self.layers[:-1]:
            fan_in = layer.weight.shape[0]
            layer.weight.data = (rng.standard_normal(layer.weight.shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
        last = self.layers[-1]
        std = self.LOGIT_STD / (0.6 * math.sqrt(last.weight.shape[0]))
        last.weight.data = trunc_normal(rng, last.weight.shape, std=std)


class DinoModel(Module):
    """Backbone plus the base and target projection heads."""

    def __init__(self, model_cfg: ModelConfig, dino_cfg: DinoConfig, rng):
        self.backbone = Backbone(model_cfg, rng)
        self.head_base = DinoHead(2 * model_cfg.embed_dim, dino_cfg, rng)
        self.head_target = DinoHead(2 * model_cfg.embed_dim, dino_cfg, rng)

    def forward(self, views_base: Sequence[np.ndarray], views_target: Sequence[np.ndarray]):
        """Per-view base and target logits; view ``v`` of each domain is paired with view ``v``."""
        if len(views_base) != len(views_target):
            raise ShapeError(f"{len(views_base)} base views vs {len(views_target)} target views")
        out_b: List[Optional[Tensor]] = [None] * len(views_base)
        out_t: List[Optional[Tensor]] = [None] * len(views_base)
        groups: Dict[tuple, List[int]] = {}
        for v, arr in enumerate(views_base):
            groups.setdefault(arr.shape, []).append(v)
        for idx in groups.values():
            xb = np.concatenate([views_base[v] for v in idx])
            xt = np.concatenate([views_target[v] for v in idx])
            quad = self.backbone.forward_pair(xb, xt)
            lb = self.head_base(concat([quad.base, quad.t2b], axis=-1))
            lt = self.head_target(concat([quad.target, quad.b2t], axis=-1))
            n = views_base[idx[0]].shape[0]
            for j, v in enumerate(idx):
                out_b[v] = lb[j * n:(j + 1) * n]
                out_t[v] = lt[j * n:(j + 1) * n]
        return out_b, out_t


# -- loss / EMA / centring ----------------------------------------------------------------

def teacher_probs(teacher_out: np.ndarray, center: np.ndarray, tau_t: float) -> np.ndarray:
    z = (teacher_out - center) / tau_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dino_loss(teacher_out, student_out: Tensor, center, tau_t: float, tau_s: float) -> Tensor:
    """Cross-entropy of softmax((t - c) / tau_t) against log_softmax(s / tau_s), batch-averaged."""
    if tau_t <= 0 or tau_s <= 0:
        raise ParameterError(f"temperatures must be > 0, got tau_t={tau_t}, tau_s={tau_s}")
    if isinstance(teacher_out, Tensor):
        if teacher_out.requires_grad:
            raise ContractError("teacher output must be detached from the tape")
        teacher_out = teacher_out.data
    student_out = nd.tensor.as_tensor(student_out)
    if np.shape(teacher_out)[-1] != student_out.shape[-1]:
        raise ShapeError(f"teacher width {np.shape(teacher_out)} != student width {student_out.shape}")
    p = teacher_probs(np.asarray(teacher_out), np.asarray(center), tau_t).astype(student_out.dtype)
    logq = F.log_softmax(student_out * (1.0 / tau_s), axis=-1)
    per_sample = (logq * Tensor(p, dtype=p.dtype)).sum(axis=-1)
    return -per_sample.mean()


def multicrop_loss(teacher_views: Sequence[np.ndarray], student_views: Sequence[Tensor], center,
                   tau_t: float, tau_s: float) -> Tensor:
    """Sum of ``dino_loss`` over (teacher global view i, student view v) with v != i."""
    total = None
    for i, t in enumerate(teacher_views):
        for v, s in enumerate(student_views):
            if v == i:
                continue
            term = dino_loss(t, s, center, tau_t, tau_s)
            total = term if total is None else total + term
    if total is None:
        raise ContractError("no view pairs to compare")
    return total


def ema_update(teacher: Module, student: Module, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise and in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"EMA momentum must lie in [0, 1], got {momentum}")
    t_params = list(teacher.named_parameters())
    s_params = list(student.named_parameters())
    if [(n, p.shape) for n, p in t_params] != [(n, p.shape) for n, p in s_params]:
        raise ShapeError("teacher and student parameter manifests differ")
    if momentum == 1.0:
        return
    for (_, t), (_, s) in zip(t_params, s_params):
        t.data *= momentum
        t.data += (1.0 - momentum) * s.data


def update_center(center: np.ndarray, teacher_batch_out: np.ndarray, momentum: float) -> np.ndarray:
    """c' = m * c + (1 - m) * mean over the batch of teacher outputs."""
    if not 0.0 <= momentum < 1.0:
        raise ParameterError(f"center momentum must lie in [0, 1), got {momentum}")
    teacher_batch_out = np.asarray(teacher_batch_out)
    if teacher_batch_out.ndim != 2 or teacher_batch_out.shape[0] == 0:
        raise ContractError(f"center update needs a non-empty (N, K) batch, got {teacher_batch_out.shape}")
    batch_mean = teacher_batch_out.mean(axis=0)
    # incremental form: a batch mean equal to the centre returns it unchanged, bit for bit
    return (center + (1.0 - momentum) * (batch_mean - center)).astype(center.dtype)


# -- training state ---------------------------------------------------------------------------

def _is_regularized(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return not (leaf in ("bias", "gain") or name.endswith("pos_embed") or name.endswith("pool"))


class TeacherStudent:
    """Student, EMA teacher, per-head centres, AdamW state and schedules."""

    def __init__(self, model_cfg: ModelConfig, dino_cfg: DinoConfig, seed: int = 0):
        self.model_cfg = model_cfg
        self.cfg = dino_cfg
        self.seed = seed
        self.student = DinoModel(model_cfg, dino_cfg, np.random.default_rng(seed))
        self.teacher = copy.deepcopy(self.student)
        self.teacher.requires_grad_(False)
        dtype = nd.get_default_dtype()
        self.centers = {"base": np.zeros(dino_cfg.out_dim, dtype=dtype),
                        "target": np.zeros(dino_cfg.out_dim, dtype=dtype)}
        named = list(self.student.named_parameters())
        self.optimizer = nd.AdamW([
            {"params": [p for n, p in named if _is_regularized(n)], "weight_decay": dino_cfg.weight_decay},
            {"params": [p for n, p in named if not _is_regularized(n)], "weight_decay": 0.0},
        ], lr=dino_cfg.lr)
        total = dino_cfg.total_schedule_steps
        self.lr_schedule = ScheduleSpec(dino_cfg.lr, dino_cfg.min_lr, total, min(dino_cfg.warmup_steps, total))
        self.wd_schedule = ScheduleSpec(dino_cfg.weight_decay, dino_cfg.weight_decay_end, total)
        self.momentum_schedule = ScheduleSpec(dino_cfg.teacher_momentum, dino_cfg.teacher_momentum_end, total)
        self.step = 0
        self.last_teacher_max_prob = float("nan")

    def teacher_backbone(self) -> Backbone:
        return self.teacher.backbone

    # flat name -> array for checkpointing
    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for n, p in self.student.named_parameters():
            out[f"student.{n}"] = p.data
        for n, p in self.teacher.named_parameters():
            out[f"teacher.{n}"] = p.data
        out["center.base"] = self.centers["base"]
        out["center.target"] = self.centers["target"]
        for n, buf in self.optimizer.state_dict().items():
            out[f"optim.{n}"] = buf
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], step: int) -> None:
        student = {k[len("student."):]: v for k, v in tensors.items() if k.startswith("student.")}
        teacher = {k[len("teacher."):]: v for k, v in tensors.items() if k.startswith("teacher.")}
        self.student.load_state_dict(student)
        self.teacher.load_state_dict(teacher)
        dtype = nd.get_default_dtype()
        self.centers = {"base": np.array(tensors["center.base"], dtype=dtype),
                        "target": np.array(tensors["center.target"], dtype=dtype)}
        optim = {k[len("optim."):]: v for k, v in tensors.items() if k.startswith("optim.")}
        self.optimizer.load_state_dict(optim, step)
        self.step = int(step)


def train_step(batch_base: Sequence[np.ndarray], batch_target: Sequence[np.ndarray], state: TeacherStudent,
               rng: np.random.Generator) -> Tuple[float, float]:
    """One distillation step over raw [0, 1] images of both domains; returns (loss_base, loss_target)."""
    if len(batch_base) == 0 or len(batch_target) == 0:
        raise ContractError("both domain batches must be non-empty")
    cfg = state.cfg
    views_b = multi_crop_batch(batch_base, cfg, rng)
    views_t = multi_crop_batch(batch_target, cfg, rng)
    dtype = nd.get_default_dtype()
    views_b = [v.astype(dtype, copy=False) for v in views_b]
    views_t = [v.astype(dtype, copy=False) for v in views_t]

    lr = cosine_schedule(state.lr_schedule, state.step)
    wd = cosine_schedule(state.wd_schedule, state.step)
    momentum = cosine_schedule(state.momentum_schedule, state.step)
    state.optimizer.param_groups[0]["lr"] = lr
    state.optimizer.param_groups[0]["weight_decay"] = wd
    state.optimizer.param_groups[1]["lr"] = lr

    with nd.no_grad():
        tb, tt = state.teacher(views_b[:2], views_t[:2])
    teacher_b = [t.data for t in tb]
    teacher_t = [t.data for t in tt]
    sb, st = state.student(views_b, views_t)

    loss_b = multicrop_loss(teacher_b, sb, state.centers["base"], cfg.teacher_temp, cfg.student_temp)
    loss_t = multicrop_loss(teacher_t, st, state.centers["target"], cfg.teacher_temp, cfg.student_temp)
    loss = loss_b + loss_t
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    ema_update(state.teacher, state.student, momentum)

    probs = [teacher_probs(t, state.centers["base"], cfg.teacher_temp) for t in teacher_b]
    probs += [teacher_probs(t, state.centers["target"], cfg.teacher_temp) for t in teacher_t]
    state.last_teacher_max_prob = float(np.mean([p.max(axis=-1).mean() for p in probs]))
    state.centers["base"] = update_center(state.centers["base"], np.concatenate(teacher_b), cfg.center_momentum)
    state.centers["target"] = update_center(state.centers["target"], np.concatenate(teacher_t), cfg.center_momentum)
    state.step += 1
    return float(loss_b.item()), float(loss_t.item())


# -- batching -------------------------------------------------------------------------------

def step_batches(n_base: int, n_target: int, batch_size: int, step: int, seed: int):
    """Indices of the base and target mini-batches for ``step``.

    Base indices walk a per-epoch permutation; the target side cycles through
    its own permutations independently, so a smaller target pool is simply
    revisited. Both depend only on (seed, step), which makes resumption exact.
    """
    def pick(n, stream):
        per_epoch = max(1, n // batch_size)
        epoch, pos = divmod(step, per_epoch)
        perm = np.random.default_rng([seed, stream, epoch]).permutation(n)
        if n < batch_size:
            return np.resize(perm, batch_size)
        return perm[pos * batch_size:(pos + 1) * batch_size]

    return pick(n_base, 0), pick(n_target, 1)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, step])


def pretrain(base_images: Sequence[np.ndarray], target_images: Sequence[np.ndarray], state: TeacherStudent,
             steps: int, callback=None) -> List[Tuple[int, float, float]]:
    """Run ``steps`` distillation steps starting at ``state.step``; returns (step, loss_b, loss_t) rows."""
    log = []
    for _ in range(steps):
        s = state.step
        ib, it = step_batches(len(base_images), len(target_images), state.cfg.batch_size, s, state.seed)
        lb, lt = train_step([base_images[i] for i in ib], [target_images[i] for i in it], state, step_rng(state.seed, s))
        log.append((s, lb, lt))
        if callback is not None:
            callback(state, s, lb, lt)
    return log
