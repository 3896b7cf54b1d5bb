import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from lsr.cli import main

from conftest import TINY_NET_OVERRIDES


def sets(*pairs):
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


TINY_SETS = sets(*TINY_NET_OVERRIDES)


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "make-data" in capsys.readouterr().out


def test_unknown_flag_exits_two():
    assert main(["train", "--wat"]) == 2


def test_missing_config_exits_two_and_names_path(capsys):
    code = main(["train", "--config", "missing.cfg"])
    assert code == 2
    assert "missing.cfg" in capsys.readouterr().err


def test_unknown_config_key_exits_two(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("data.wat = 3\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "data.wat" in capsys.readouterr().err


def test_dry_run_prints_resolved_config(tmp_path, capsys):
    code = main(["train", "--dry-run", "--res", "32", "--seed", "9",
                 "--set", "data.root=" + str(tmp_path)])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["data"]["resolution"] == 32
    assert payload["seed"] == 9
    assert "config_hash" in payload


def test_make_data_idempotent(tmp_path, capsys):
    args = ["make-data", "--out", str(tmp_path / "d"), "--ids", "3", "--frames", "2",
            "--res", "32", "--seed", "4"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert "3 identities / 6 frames" in first
    assert main(args) == 0
    second = capsys.readouterr().out
    checksum = lambda s: [l for l in s.splitlines() if l.startswith("checksum")]
    assert checksum(first) == checksum(second)


def test_config_file_and_set_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("data.resolution = 64\nschedule.lr = 0.002\n# comment\n")
    assert main(["train", "--config", str(cfg), "--dry-run",
                 "--set", "schedule.lr=0.005"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["data"]["resolution"] == 64
    assert payload["schedule"]["lr"] == 0.005


def test_grid_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        for i in range(2):
            Image.fromarray((rng.random((16, 16, 3)) * 255).astype(np.uint8)).save(d / f"{i}.png")
    assert main(["grid", "--row", f"top={tmp_path / 'a'}", "--row", f"bot={tmp_path / 'b'}",
                 "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "grid.png").exists()


def test_grid_empty_dir_exits_two(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["grid", "--row", f"a={empty}", "--out", str(tmp_path / "g")]) == 2


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    assert main(["make-data", "--out", str(data), "--ids", "4", "--frames", "5",
                 "--res", "32", "--seed", "2"]) == 0
    return root, data


def _common(data, root):
    return TINY_SETS + sets(
        f"data.root={data}", "data.resolution=32", "data.k_shots=2", "data.batch_size=2",
        "schedule.pretrain_steps=3", "schedule.full_steps=4", "logging.ckpt_every=10",
    ) + ["--seed", "5"]


def test_cli_train_embed_reenact_evaluate(cli_workspace, capsys):
    root, data = cli_workspace
    run = root / "run"
    code = main(["train", "--variants", "latent", "--out", str(run)] + _common(data, root))
    assert code == 0, capsys.readouterr().err
    ckpt = run / "full" / "checkpoint"
    assert (ckpt / "manifest.json").exists()

    emb_dir = root / "emb"
    assert main(["embed", "--ckpt", str(ckpt), "--identity", "0", "--out", str(emb_dir)]
                + _common(data, root)) == 0
    avatar = emb_dir / "avatar.bin"
    assert avatar.exists()

    reenact_dir = root / "re"
    assert main(["reenact", "--ckpt", str(ckpt), "--avatar", str(avatar),
                 "--driving", str(data / "1"), "--layouts", "--out", str(reenact_dir)]
                + _common(data, root)) == 0
    frames = sorted(reenact_dir.glob("[0-9]*.png"))
    assert len(frames) == 5
    assert len(sorted(reenact_dir.glob("layout_*.png"))) == 5

    # outputs vs the driving identity's ground-truth frames
    gt_dir = root / "gt"
    gt_dir.mkdir()
    gt_frames = [p for p in sorted((data / "1").glob("*.png")) if not p.name.endswith(".seg.png")]
    for i, src in enumerate(gt_frames):
        (gt_dir / f"{i:04d}.png").write_bytes(src.read_bytes())
    outputs_only = root / "outputs_only"
    outputs_only.mkdir()
    for frame in frames:
        (outputs_only / frame.name).write_bytes(frame.read_bytes())
    eval_dir = root / "eval"
    assert main(["evaluate", "--outputs", str(outputs_only), "--gt", str(gt_dir),
                 "--out", str(eval_dir)] + _common(data, root)) == 0
    report = json.loads((eval_dir / "report.json").read_text())
    assert len(report["per_sample"]) == 5
    assert (eval_dir / "report.csv").exists()
    out = capsys.readouterr().out
    assert "PSNR" in out


def test_cli_finetune(cli_workspace):
    root, data = cli_workspace
    ckpt = root / "run" / "full" / "checkpoint"
    ft = root / "ft"
    code = main(["finetune", "--ckpt", str(ckpt), "--identity", "1", "--k", "2",
                 "--out", str(ft)] + _common(data, root)
                + sets("schedule.finetune_steps_per_shot=2"))
    assert code == 0
    assert (ft / "checkpoint" / "manifest.json").exists()


def test_cli_ablate_smoke(cli_workspace, capsys):
    root, data = cli_workspace
    out = root / "ablate"
    code = main(["ablate", "--variants", "all", "--out", str(out)] + _common(data, root))
    assert code == 0, capsys.readouterr().err
    report = json.loads((out / "ablation.json").read_text())
    names = [row["variant"] for row in report["variants"]]
    assert names == ["baseline", "spade_landmarks", "learned_seg", "latent_layout", "upper_bound"]
    for variant in names:
        assert (out / variant / "full" / "checkpoint" / "manifest.json").exists()
    assert (out / "ablation.csv").exists()
    # identical seeds -> identical reported metrics on re-run of evaluation
    text = capsys.readouterr().out
    assert "latent_layout" in text


def test_cli_train_rejects_all_variants(cli_workspace):
    root, data = cli_workspace
    assert main(["train", "--variants", "all", "--out", str(root / "x")]
                + _common(data, root)) == 2
