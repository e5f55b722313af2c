"""``adapter`` command line: pretrain, fewshot, selftest, export-features.

Exit codes: 0 ok, 1 selftest failure, 2 config, 3 data, 4 checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from adapter import __version__
from adapter import checkpoint as ckpt
from adapter import ndcore as nd
from adapter.config import OUTPUT_DIR_ENV, Config, dumps, load_config
from adapter.data import Dataset, load_folder, split_target, synth_generate, write_split_manifest
from adapter.errors import CheckpointError, ConfigError, DataError
from adapter.ndcore.serialize import atomic_write

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def load_domains(cfg: Config):
    """(base dataset, target dataset) as configured in ``[data]``."""
    if cfg.data.source == "synthetic":
        return synth_generate(cfg.data.synthetic)
    return load_folder(cfg.data.base_dir), load_folder(cfg.data.target_dir)


def resolve_output(cfg: Config, flag: Optional[str]) -> Path:
    """``--output`` beats ``$ADAPTER_OUTPUT_DIR`` beats ``[run] output_dir``."""
    return Path(flag) if flag else cfg.output_dir()


def _prepare(args) -> Config:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1", key="run.threads")
        cfg.run.threads = args.threads
    nd.set_default_dtype(cfg.run.precision)
    return cfg


# -- pretrain -----------------------------------------------------------------------------

def _previous_rows(path: Path, before: int) -> List[List[str]]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if r and int(r[0]) < before]


def cmd_pretrain(args) -> int:
    from adapter.dino import TeacherStudent, cosine_schedule, pretrain

    cfg = _prepare(args)
    if args.steps is not None:
        if args.steps < 0:
            raise ConfigError("--steps must be >= 0", key="dino.steps")
        cfg.dino.steps = args.steps
    out = resolve_output(cfg, args.output)
    base, target = load_domains(cfg)
    split = split_target(target, cfg.data.split_fraction, cfg.data.split_seed)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.toml", dumps(cfg))
    write_split_manifest(out / "split_manifest.tsv", target, split)

    if not cfg.run.ssl:
        return _pretrain_supervised(cfg, base, out)

    state = TeacherStudent(cfg.model, cfg.dino, seed=cfg.run.seed)
    loss_path = out / "pretrain_loss.csv"
    rows: List[List[str]] = []
    if args.resume:
        ckpt.load_training(ckpt.resolve(args.resume, ("checkpoint",)), state)
        rows = _previous_rows(loss_path, state.step)
    base_imgs = [r.pixels for r in base.records]
    target_imgs = [r.pixels for r in split.unlabeled.records]
    header = ["step", "loss_base", "loss_target", "loss", "teacher_max_prob", "lr"]
    every = cfg.run.checkpoint_every
    started = time.perf_counter()

    def flush():
        atomic_write(loss_path, _csv_text(header, rows))
        ckpt.save_training(out / "checkpoint", state)

    def on_step(st, step, lb, lt):
        lr = cosine_schedule(st.lr_schedule, step)
        rows.append([str(step), _fmt(lb), _fmt(lt), _fmt(lb + lt), _fmt(st.last_teacher_max_prob), _fmt(lr)])
        if not np.isfinite(lb + lt):
            print(f"step {step}: non-finite loss", file=sys.stderr)
        if args.verbose and (step % 10 == 0 or step == cfg.dino.steps - 1):
            print(f"step {step:5d}  loss {lb + lt:.4f}  teacher max-prob {st.last_teacher_max_prob:.3f}"
                  f"  ({time.perf_counter() - started:.0f}s)")
        if every and (step + 1) % every == 0:
            flush()

    end = cfg.dino.steps if args.stop_after is None else min(args.stop_after, cfg.dino.steps)
    remaining = max(end - state.step, 0)
    with threadpool_limits(limits=cfg.run.threads):
        pretrain(base_imgs, target_imgs, state, remaining, on_step)
    flush()
    ckpt.save_backbone(out / "teacher_backbone", state.teacher.backbone, {"step": state.step})
    print(f"pretrained {state.step} steps; teacher backbone in {out / 'teacher_backbone'}")
    return EXIT_OK


def _pretrain_supervised(cfg: Config, base: Dataset, out: Path) -> int:
    from adapter.supervised import SupervisedState, pretrain_supervised

    state = SupervisedState(cfg.model, cfg.dino, len(base.class_names), seed=cfg.run.seed)
    rows = []

    def on_step(st, step, loss):
        rows.append([str(step), _fmt(loss)])

    with threadpool_limits(limits=cfg.run.threads):
        pretrain_supervised(base, state, cfg.dino.steps, on_step)
    atomic_write(out / "pretrain_loss.csv", _csv_text(["step", "loss"], rows))
    ckpt.save_backbone(out / "teacher_backbone", state.backbone, {"step": state.step, "ssl": "off"})
    print(f"supervised pretraining: {state.step} steps; backbone in {out / 'teacher_backbone'}")
    return EXIT_OK


# -- fewshot ------------------------------------------------------------------------------

def format_summary(name: str, mean: float, half_width: float) -> str:
    return f"{name}: {100 * mean:.2f} ± {100 * half_width:.2f}"


def cmd_fewshot(args) -> int:
    from adapter.fewshot import evaluate_episode_finetune, run_benchmark

    cfg = _prepare(args)
    if args.no_labelprop:
        cfg.labelprop.enabled = False
    out = resolve_output(cfg, args.output)
    backbone = ckpt.load_backbone(ckpt.resolve(args.checkpoint), cfg.model)
    base, target = load_domains(cfg)
    split = split_target(target, cfg.data.split_fraction, cfg.data.split_seed)
    evaluation = split.evaluation
    n = cfg.fewshot.episodes if args.episodes is None else args.episodes
    episode_fn = None
    if cfg.fewshot.finetune:
        episode_fn = lambda ep, rng: evaluate_episode_finetune(  # noqa: E731
            ep, evaluation, base, backbone, cfg.fewshot, cfg.labelprop, rng)

    with threadpool_limits(limits=1 if cfg.run.threads > 1 else None):
        result = run_benchmark(evaluation, backbone, cfg.fewshot, cfg.labelprop, n_episodes=n,
                               seed=cfg.run.seed, threads=cfg.run.threads, episode_fn=episode_fn)
    rows = [[str(i), _fmt(r), _fmt(s)] for i, (r, s) in enumerate(zip(result.raw_accuracies, result.smoothed_accuracies))]
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "fewshot_results.csv", _csv_text(["episode_index", "raw_accuracy", "smoothed_accuracy"], rows))
    summary = [
        f"{cfg.fewshot.ways}-way {cfg.fewshot.shots}-shot, {result.episodes} episodes",
        format_summary("raw", result.raw_mean, result.raw_half_width),
        format_summary("smoothed", result.mean, result.half_width),
    ]
    atomic_write(out / "fewshot_summary.txt", "\n".join(summary) + "\n")
    print("\n".join(summary))
    return EXIT_OK


# -- selftest -----------------------------------------------------------------------------

def cmd_selftest(args) -> int:
    from adapter import checks

    results = []
    for check in checks.ALL_CHECKS:
        result = check()
        print(result.line(), flush=True)
        results.append(result)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("selftest FAILED: " + ", ".join(failed))
        return EXIT_SELFTEST
    print("selftest passed")
    return EXIT_OK


# -- export-features ----------------------------------------------------------------------

def cmd_export_features(args) -> int:
    from adapter.fewshot import extract_features

    cfg = _prepare(args)
    out = resolve_output(cfg, args.output)
    backbone = ckpt.load_backbone(ckpt.resolve(args.checkpoint), cfg.model)
    base, target = load_domains(cfg)
    split = split_target(target, cfg.data.split_fraction, cfg.data.split_seed)
    pools = {"evaluation": split.evaluation, "unlabeled": split.unlabeled, "base": base}
    names = list(pools) if args.split == "all" else [args.split]
    rows = []
    width = 0
    with threadpool_limits(limits=cfg.run.threads):
        for name in names:
            ds = pools[name]
            feats = extract_features(ds.stack(range(len(ds)), cfg.model.image_size, cfg.data.mean, cfg.data.std),
                                     backbone)
            width = feats.shape[1]
            for i, (rec, z) in enumerate(zip(ds.records, feats)):
                rows.append([name, str(i), str(rec.label), ds.class_names[rec.label], *map(_fmt, z)])
    header = ["pool", "index", "label", "class_name"] + [f"z{j}" for j in range(width)]
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "features.csv", _csv_text(header, rows))
    print(f"wrote {len(rows)} embeddings of width {width} to {out / 'features.csv'}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adapter", description=__doc__.splitlines()[0],
                                     epilog=f"Output directory override: ${OUTPUT_DIR_ENV}")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_checkpoint=False):
        p.add_argument("--config", help="TOML run configuration (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--threads", type=int, help="override [run] threads")
        p.add_argument("--output", help="output directory (beats the config and the environment)")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True, help="backbone or training checkpoint, or a run directory")

    p = sub.add_parser("pretrain", help="self-distillation over base and target domains")
    common(p)
    p.add_argument("--steps", type=int, help="total optimisation steps (overrides [dino] steps)")
    p.add_argument("--resume", help="training checkpoint (or run directory) to continue from")
    p.add_argument("--stop-after", type=int, help="stop at this step; schedules still span --steps")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fewshot", help="episodic evaluation on the target evaluation pool")
    common(p, needs_checkpoint=True)
    p.add_argument("--episodes", type=int, help="override [fewshot] episodes")
    p.add_argument("--no-labelprop", action="store_true", help="score without label smoothing")
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("selftest", help="gradient, attention-degeneracy and label-propagation checks")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("export-features", help="dump double-target embeddings to CSV")
    common(p, needs_checkpoint=True)
    p.add_argument("--split", choices=["evaluation", "unlabeled", "base", "all"], default="evaluation")
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    previous = nd.get_default_dtype()
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f" [{exc.key}]" if exc.key else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    finally:
        nd.set_default_dtype(previous)


if __name__ == "__main__":
    sys.exit(main())
