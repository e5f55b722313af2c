import csv

import pytest

from adapter import checks, model
from adapter.cli import main
from adapter.config import OUTPUT_DIR_ENV

TINY = """
[model]
image_size = 8
embed_dim = 16
depth = 1
heads = 2
conv_channels = 8

[dino]
out_dim = 16
head_hidden = 16
batch_size = 2
n_local_crops = 2
global_size = 8
local_size = 4
steps = 4
warmup_steps = 1

[fewshot]
ways = 3
shots = 2
queries = 2
episodes = 2
epochs = 2

[data.synthetic]
n_classes = 3
samples_per_class = 10
base_classes = 3
base_samples_per_class = 4
image_size = 12

[run]
output_dir = "{out}"
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY.format(out=tmp_path / "default_out"))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_pretrain_writes_run_directory(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(tiny_cfg), "--output", str(out)]) == 0
    rows = read_csv(out / "pretrain_loss.csv")
    assert rows[0] == ["step", "loss_base", "loss_target", "loss", "teacher_max_prob", "lr"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    for name in ("config.toml", "split_manifest.tsv", "checkpoint/manifest.txt", "teacher_backbone/params.bin"):
        assert (out / name).exists(), name


def test_same_seed_gives_identical_loss_curves(tiny_cfg, tmp_path):
    for name in ("a", "b"):
        assert main(["pretrain", "--config", str(tiny_cfg), "--seed", "7", "--steps", "3",
                     "--output", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "pretrain_loss.csv").read_bytes()
    assert a == (tmp_path / "b" / "pretrain_loss.csv").read_bytes()


def test_resume_is_bit_exact(tiny_cfg, tmp_path):
    straight, split = tmp_path / "straight", tmp_path / "split"
    assert main(["pretrain", "--config", str(tiny_cfg), "--output", str(straight)]) == 0
    assert main(["pretrain", "--config", str(tiny_cfg), "--output", str(split), "--stop-after", "2"]) == 0
    assert len(read_csv(split / "pretrain_loss.csv")) == 3
    assert main(["pretrain", "--config", str(tiny_cfg), "--output", str(split), "--resume", str(split)]) == 0
    for name in ("pretrain_loss.csv", "checkpoint/params.bin", "checkpoint/manifest.txt",
                 "teacher_backbone/params.bin"):
        assert (straight / name).read_bytes() == (split / name).read_bytes(), name


def test_fewshot_and_export_features(tiny_cfg, tmp_path, monkeypatch, capsys):
    run = tmp_path / "run"
    assert main(["pretrain", "--config", str(tiny_cfg), "--steps", "2", "--output", str(run)]) == 0
    assert main(["fewshot", "--config", str(tiny_cfg), "--checkpoint", str(run), "--episodes", "1",
                 "--output", str(run)]) == 0
    rows = read_csv(run / "fewshot_results.csv")
    assert rows[0] == ["episode_index", "raw_accuracy", "smoothed_accuracy"]
    assert len(rows) == 2 and rows[1][0] == "0"
    summary = (run / "fewshot_summary.txt").read_text().splitlines()
    assert summary[1].startswith("raw: ") and " ± " in summary[1]
    assert summary[2].startswith("smoothed: ")

    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env_out"))
    assert main(["export-features", "--config", str(tiny_cfg), "--checkpoint", str(run / "teacher_backbone")]) == 0
    feats = read_csv(tmp_path / "env_out" / "features.csv")
    assert feats[0][:5] == ["pool", "index", "label", "class_name", "z0"]
    assert len(feats[0]) == 4 + 4 * 16
    assert len(feats) - 1 == 24   # evaluation pool: 3 classes x 8


def test_unknown_config_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nembed_dimm = 3\n")
    assert main(["pretrain", "--config", str(bad)]) == 2
    assert "model.embed_dimm" in capsys.readouterr().err


def test_missing_data_exits_3(tmp_path):
    cfg = tmp_path / "folder.toml"
    cfg.write_text('[data]\nsource = "folder"\nbase_dir = "nope_b"\ntarget_dir = "nope_t"\n')
    assert main(["pretrain", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 3


def test_checkpoint_problems_exit_4(tiny_cfg, tmp_path):
    assert main(["fewshot", "--config", str(tiny_cfg), "--checkpoint", str(tmp_path / "none")]) == 4
    run = tmp_path / "run"
    assert main(["pretrain", "--config", str(tiny_cfg), "--steps", "1", "--output", str(run)]) == 0
    wider = tmp_path / "wider.toml"
    wider.write_text(tiny_cfg.read_text().replace("embed_dim = 16", "embed_dim = 32"))
    assert main(["fewshot", "--config", str(wider), "--checkpoint", str(run)]) == 4


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == len(checks.ALL_CHECKS)


def test_selftest_catches_broken_cross_attention(monkeypatch, capsys):
    original = model.cross_attention
    monkeypatch.setattr(model, "cross_attention", lambda q, kv, attn: original(q, kv, attn) * -1.0)
    monkeypatch.setattr(checks, "ALL_CHECKS", [checks.check_degeneracy])
    assert main(["selftest"]) == 1
    assert "degeneracy" in capsys.readouterr().out
