"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The end-to-end
few-shot run (criterion 6) takes roughly ten minutes on one core.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest

from adapter import checks
from adapter import config as cfgmod
from adapter import ndcore as nd
from adapter.cli import main
from adapter.config import load_config
from adapter.data import split_target, synth_generate
from adapter.dino import TeacherStudent, pretrain, update_center
from adapter.fewshot import EpisodeResult, episode_rng, half_width, run_benchmark, sample_episode
from adapter.labelprop import LabelPropConfig, one_hot, smooth_predictions
from adapter.model import Backbone, ModelConfig, count_forward_flops

DESK = Path(cfgmod.__file__).parent / "configs" / "desk.toml"

# label propagation setting for the smoothing-direction criterion
SMOOTHING = LabelPropConfig(alpha=0.99, sigma="auto", rcond=0.1)


@pytest.fixture
def report(capsys):
    def emit(number, name, passed, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed
    return emit


def desk_run_config():
    cfg = load_config(DESK)
    nd.set_default_dtype(cfg.run.precision)
    return cfg


def desk_pools(cfg):
    base, target = synth_generate(cfg.data.synthetic)
    split = split_target(target, cfg.data.split_fraction, cfg.data.split_seed)
    return base, split


# 1 ----------------------------------------------------------------------------------------

def test_c1_gradient_fidelity(report):
    t = time.perf_counter()
    errors = checks.gradient_check(depth=2, dim=16, tokens=3)
    seconds = time.perf_counter() - t
    worst = max(errors.values())
    ok = worst < 1e-4 and seconds < 60
    assert report(1, "gradient fidelity", ok, f"max rel err {worst:.2e} (<1e-4), {seconds:.1f}s (<60s)")


# 2 ----------------------------------------------------------------------------------------

def test_c2_cross_attention_degeneracy(report):
    gap = checks.degeneracy_gap(n_inputs=100)
    assert report(2, "cross-attention degeneracy", gap == 0.0, f"max |cross(x,x) - self(x)| = {gap!r} over 100 inputs")


# 3 ----------------------------------------------------------------------------------------

def test_c3_labelprop_equivalence(report):
    t = time.perf_counter()
    gap = checks.labelprop_gap(n_graphs=50, alpha=0.99)
    seconds = time.perf_counter() - t
    ok = gap < 1e-6 and seconds < 30
    assert report(3, "closed form vs iteration", ok, f"max-abs gap {gap:.2e} (<1e-6), {seconds:.1f}s (<30s)")


# 4 ----------------------------------------------------------------------------------------

def gaussian_episode(seed, ways=5, queries=15, dim=8, sep=1.0, std_ratio=0.3, flip=0.2):
    """Orthogonal class centres ``sep`` apart; raw predictions flip ``flip`` of the labels."""
    rng = np.random.default_rng(seed)
    centres = np.eye(dim)[:ways] * sep / np.sqrt(2)
    truth = np.repeat(np.arange(ways), queries)
    z = centres[truth] + rng.normal(0, std_ratio * sep, size=(len(truth), dim))
    pseudo = truth.copy()
    wrong = rng.random(len(truth)) < flip
    pseudo[wrong] = (truth[wrong] + rng.integers(1, ways, size=wrong.sum())) % ways
    logits = np.eye(ways)[pseudo] + rng.normal(0, 0.1, size=(len(truth), ways))
    return z, logits, truth


def test_c4_smoothing_direction(report):
    # constructed instance: two tight clusters, one member of each flipped
    rng = np.random.default_rng(0)
    truth2 = np.repeat([0, 1], 6)
    z2 = np.array([[0.0, 0.0], [1.0, 0.0]])[truth2] + rng.normal(0, 0.05, size=(12, 2))
    logits2 = one_hot(truth2, 2)
    logits2[0], logits2[6] = [0, 1], [1, 0]
    flip_raw = np.mean(logits2.argmax(1) == truth2)
    flip_smooth = np.mean(smooth_predictions(z2, logits2, SMOOTHING) == truth2)

    raw, smoothed = [], []
    for seed in range(100):
        z, logits, truth = gaussian_episode(seed)
        raw.append(np.mean(logits.argmax(1) == truth))
        smoothed.append(np.mean(smooth_predictions(z, logits, SMOOTHING) == truth))
    raw, smoothed = np.array(raw), np.array(smoothed)
    strict = float(np.mean(smoothed > raw))
    ok = flip_smooth >= flip_raw and smoothed.mean() >= raw.mean() and strict >= 0.8
    assert report(4, "smoothing direction", ok,
                  f"two-cluster {flip_raw:.3f} -> {flip_smooth:.3f}; Gaussian episodes raw {raw.mean():.4f}, "
                  f"smoothed {smoothed.mean():.4f}, strict improvement {strict:.0%} (>=80%)")


# 5 ----------------------------------------------------------------------------------------

def test_c5_no_collapse_smoke(report):
    cfg = desk_run_config()
    base, split = desk_pools(cfg)
    base_imgs = [r.pixels for r in base.records]
    target_imgs = [r.pixels for r in split.unlabeled.records]
    t = time.perf_counter()
    trajectories, max_probs = [], []
    try:
        for _ in range(2):
            state = TeacherStudent(cfg.model, cfg.dino, seed=cfg.run.seed)
            probs = []
            log = pretrain(base_imgs, target_imgs, state, 50,
                           lambda st, *_: probs.append(st.last_teacher_max_prob))
            trajectories.append([(lb, lt) for _, lb, lt in log])
            max_probs.append(probs)
    finally:
        nd.set_default_dtype("float32")
    seconds = time.perf_counter() - t
    losses = np.array(trajectories[0])
    finite = bool(np.isfinite(losses).all())
    mean_max = float(np.mean(max_probs[0]))
    identical = trajectories[0] == trajectories[1]
    ok = finite and mean_max < 0.9 and identical and seconds < 300
    assert report(5, "no-collapse smoke", ok,
                  f"finite={finite}, teacher mean max-prob {mean_max:.4f} (<0.9), "
                  f"rerun bit-exact={identical}, {seconds:.0f}s for two runs (<300s)")


# 6 ----------------------------------------------------------------------------------------

def centroid_oracle(evaluation, n_episodes, ways, shots, queries, seed):
    accs = []
    for i in range(n_episodes):
        ep = sample_episode(evaluation, ways, shots, queries, episode_rng(seed, i))
        xs = np.stack([evaluation.records[j].pixels.ravel() for j in ep.support_indices])
        xq = np.stack([evaluation.records[j].pixels.ravel() for j in ep.query_indices])
        centres = np.stack([xs[ep.support_labels == c].mean(0) for c in range(ways)])
        pred = ((xq[:, None] - centres[None]) ** 2).sum(-1).argmin(1)
        accs.append(np.mean(pred == ep.query_labels))
    return float(np.mean(accs))


def test_c6_end_to_end_fewshot(report, tmp_path):
    cfg = desk_run_config()
    _, split = desk_pools(cfg)
    fs = cfg.fewshot
    oracle = centroid_oracle(split.evaluation, 50, fs.ways, fs.shots, fs.queries, cfg.run.seed)
    t = time.perf_counter()
    try:
        assert main(["pretrain", "--config", str(DESK), "--steps", "300", "--output", str(tmp_path)]) == 0
        assert main(["fewshot", "--config", str(DESK), "--checkpoint", str(tmp_path), "--episodes", "50",
                     "--output", str(tmp_path)]) == 0
    finally:
        nd.set_default_dtype("float32")
    seconds = time.perf_counter() - t
    with open(tmp_path / "fewshot_results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    smoothed = np.mean([float(r["smoothed_accuracy"]) for r in rows])
    raw = np.mean([float(r["raw_accuracy"]) for r in rows])
    ok = len(rows) == 50 and smoothed >= 0.95 and oracle == 1.0 and seconds < 900
    assert report(6, "end-to-end few-shot", ok,
                  f"smoothed {smoothed:.4f} (>=0.95), raw {raw:.4f}, centroid oracle {oracle:.3f}, "
                  f"{seconds:.0f}s (<900s)")


# 7 ----------------------------------------------------------------------------------------

def test_c7_protocol_statistics(report):
    cases = [
        ([0.0, 1.0], 1.96 * np.sqrt(0.5) / np.sqrt(2)),
        ([0.5, 0.7, 0.9], 1.96 * 0.2 / np.sqrt(3)),
        ([0.25, 0.75, 0.25, 0.75], 1.96 * np.sqrt(1 / 12) / 2),
    ]
    worst = max(abs(half_width(acc) - expected) for acc, expected in cases)

    from adapter.data import Dataset, ImageRecord
    tiny = Dataset([ImageRecord(np.zeros((3, 2, 2), np.float32), c, "") for c in range(5) for _ in range(20)],
                   [str(c) for c in range(5)])
    const = run_benchmark(tiny, None, cfgmod.FewShotConfig(), LabelPropConfig(), n_episodes=600,
                          episode_fn=lambda ep, rng: EpisodeResult(0.8, 0.84))
    ok = worst < 1e-9 and const.episodes == 600 and const.half_width == 0.0 and const.raw_half_width == 0.0
    assert report(7, "protocol statistics", ok,
                  f"hand-value error {worst:.1e} (<1e-9); 600 constant episodes half-width {const.half_width!r}")


# 8 ----------------------------------------------------------------------------------------

def tiny_state(momentum):
    from adapter.dino import DinoConfig
    model_cfg = ModelConfig(image_size=8, embed_dim=16, depth=1, heads=2, conv_channels=8)
    dino_cfg = DinoConfig(out_dim=16, head_hidden=16, batch_size=2, n_local_crops=2, global_size=8, local_size=4,
                          steps=100, warmup_steps=1, teacher_momentum=momentum, teacher_momentum_end=momentum)
    return TeacherStudent(model_cfg, dino_cfg, seed=0)


def test_c8_ema_and_center_contracts(report):
    rng = np.random.default_rng(0)
    imgs = [rng.uniform(0, 1, size=(3, 12, 12)).astype(np.float32) for _ in range(6)]

    frozen = tiny_state(1.0)
    before = {k: v.copy() for k, v in frozen.teacher.state_dict().items()}
    student_before = frozen.student.backbone.pool.data.copy()
    pretrain(imgs, imgs, frozen, 100)
    teacher_fixed = all(np.array_equal(v, before[k]) for k, v in frozen.teacher.state_dict().items())
    student_moved = not np.array_equal(student_before, frozen.student.backbone.pool.data)

    copying = tiny_state(0.0)
    pretrain(imgs, imgs, copying, 3)
    copied = all(np.array_equal(a.data, b.data) for (_, a), (_, b) in
                 zip(copying.teacher.named_parameters(), copying.student.named_parameters()))

    c = rng.normal(size=16).astype(np.float32)
    fixed_point = np.array_equal(update_center(c, np.tile(c, (8, 1)), 0.9), c)
    ok = teacher_fixed and student_moved and copied and fixed_point
    assert report(8, "EMA/center contracts", ok,
                  f"lambda=1 teacher unchanged over 100 steps={teacher_fixed} (student moved={student_moved}); "
                  f"lambda=0 copies student={copied}; center fixed point={fixed_point}")


# 9 ----------------------------------------------------------------------------------------

def test_c9_complexity_scaling(report):
    x = np.random.default_rng(0).uniform(-1, 1, size=(1, 3, 16, 16)).astype(np.float32)

    def flops(depth, dim):
        cfg = ModelConfig(image_size=16, embed_dim=dim, depth=depth, heads=2, conv_channels=32)
        return count_forward_flops(Backbone(cfg, np.random.default_rng(0)), x, encoder_only=True)

    depth_ratios = [flops(4, d) / flops(2, d) for d in (32, 64)]
    dim_ratios = [flops(L, 64) / flops(L, 32) for L in (2, 4)]
    depth_dev = max(abs(r / 2.0 - 1) for r in depth_ratios)
    dim_dev = max(abs(r / 4.0 - 1) for r in dim_ratios)
    ok = depth_dev <= 0.05 and dim_dev <= 0.10
    assert report(9, "complexity scaling", ok,
                  f"L 2->4 ratios {[round(r, 4) for r in depth_ratios]} (dev {depth_dev:.2%} <=5%); "
                  f"d 32->64 ratios {[round(r, 4) for r in dim_ratios]} (dev {dim_dev:.2%} <=10%)")
