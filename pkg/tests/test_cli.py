"""Command-line interface: dispatch, artifacts, exit codes, overrides."""

import numpy as np
import pytest

from occludrop.cli import main

TINY_ARGS = [
    "--set", "data.num_ids=6",
    "--set", "data.images_per_id=10",
    "--set", "data.image_size=32",
    "--set", "model.width_base=4",
    "--set", "model.embedding_dim=16",
    "--set", "train.epochs=1",
    "--set", "train.batch_size=24",
    "--set", "head.margin=0.2",
    "--set", "head.scale=16",
    "--set", "eval.genuine_pairs=20",
    "--set", "eval.impostor_pairs=60",
]


def test_gradcheck_prints_per_primitive(capsys):
    code = main(["gradcheck", "--seeds", "2"])
    out = capsys.readouterr().out
    assert code == 0
    for name in ("conv2d", "linear", "batchnorm", "masked_batchnorm", "relu",
                 "global_avg_pool", "lcd_apply", "sam", "filter_orthogonal_loss",
                 "response_orthogonal_loss", "margin_loss"):
        assert f"PASS {name}" in out


def test_train_writes_artifacts_and_reports(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path / "run"), *TINY_ARGS])
    assert code == 0
    out = capsys.readouterr().out
    assert "run complete" in out
    for name in ("config.resolved.cfg", "run_record.csv", "metrics.csv", "checkpoint.bin"):
        assert (tmp_path / "run" / name).is_file()


def test_train_twice_identical_outputs(tmp_path):
    assert main(["train", "--out", str(tmp_path / "a"), *TINY_ARGS]) == 0
    assert main(["train", "--out", str(tmp_path / "b"), *TINY_ARGS]) == 0
    for name in ("run_record.csv", "metrics.csv", "checkpoint.bin", "config.resolved.cfg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_unknown_config_key_exits_2(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path), "--set", "train.alpa=1"])
    assert code == 2
    assert "error[config]" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 2


def test_missing_dataset_root_exits_3(tmp_path):
    code = main(
        ["train", "--out", str(tmp_path), "--set", f"data.root={tmp_path / 'missing'}", *TINY_ARGS]
    )
    assert code == 3


def test_override_precedence_cli_over_file(tmp_path):
    cfgfile = tmp_path / "exp.cfg"
    cfgfile.write_text("train.epochs = 9\n")
    args = list(TINY_ARGS)  # still carries --set train.epochs=1, which must win
    args = ["--config", str(cfgfile), "--out", str(tmp_path / "run")] + args
    # file says 9, CLI says 1: CLI wins; run_record has 2 steps (1 epoch x 2 batches)
    assert main(["train", *args]) == 0
    lines = (tmp_path / "run" / "run_record.csv").read_text().splitlines()
    assert len(lines) - 1 == 2
    snapshot = (tmp_path / "run" / "config.resolved.cfg").read_text()
    assert "train.epochs = 1" in snapshot


def test_eval_from_checkpoint(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "run"), *TINY_ARGS]) == 0
    code = main(
        [
            "eval",
            "--checkpoint", str(tmp_path / "run" / "checkpoint.bin"),
            "--out", str(tmp_path / "eval"),
            *TINY_ARGS,
        ]
    )
    assert code == 0
    assert (tmp_path / "eval" / "metrics.csv").is_file()
    assert "rank1_clean" in capsys.readouterr().out


def test_gen_data_tree(tmp_path):
    code = main(
        [
            "gen-data", "--out", str(tmp_path / "data"),
            "--set", "data.num_ids=3", "--set", "data.images_per_id=2",
            "--set", "data.image_size=32",
        ]
    )
    assert code == 0
    pngs = sorted((tmp_path / "data").rglob("*.png"))
    assert len(pngs) == 6


def test_heatmaps_exports_pgm(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "run"), *TINY_ARGS]) == 0
    code = main(
        [
            "heatmaps",
            "--checkpoint", str(tmp_path / "run" / "checkpoint.bin"),
            "--out", str(tmp_path / "maps"),
            *TINY_ARGS,
        ]
    )
    assert code == 0
    pgms = sorted((tmp_path / "maps").glob("stage3.conv2_*.pgm"))
    assert len(pgms) == 16  # width_base 4 -> stage 3 width 16
    assert "mean pairwise map correlation" in capsys.readouterr().out


def test_master_seed_derives_three(tmp_path):
    assert main(["train", "--out", str(tmp_path / "run"), "--seed", "123", *TINY_ARGS]) == 0
    seeds = (tmp_path / "run" / "seeds.txt").read_text()
    values = dict(line.split("=") for line in seeds.strip().splitlines())
    assert len({values["data"], values["init"], values["dropout"]}) == 3


def test_mse_exp_writes_table(tmp_path, capsys):
    code = main(
        [
            "mse-exp", "--out", str(tmp_path / "mse"), *TINY_ARGS,
            "--set", "train.epochs=1",
        ]
    )
    assert code == 0
    table = (tmp_path / "mse" / "mse.csv").read_text().splitlines()
    assert table[0] == "model,mean_mse,seed_fingerprint"
    assert len(table) == 3


def test_ablate_emits_four_rows(tmp_path):
    code = main(["ablate", "--out", str(tmp_path / "abl"), "--seeds", "1", *TINY_ARGS])
    assert code == 0
    rows = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert rows[0] == "variant,occluded_rank1,clean_rank1,seeds,config_fingerprint"
    assert len(rows) == 5
    variants = [r.split(",")[0] for r in rows[1:]]
    assert variants == ["baseline", "cd", "cd_sr", "cd_sr_sam"]
    for r in rows[1:]:
        assert r.split(",")[-1]  # config fingerprint recorded
