import csv

import pytest

from ssnet.app import build_parser, main
from ssnet.checkpoint import save_checkpoint
from ssnet.config import TrainConfig
from ssnet.data import read_dataset
from ssnet.net import Encoder


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as stream:
        return list(csv.reader(stream))


def test_synth_writes_dataset(tmp_path):
    out = tmp_path / "scenes"
    assert main(["synth", "--seed", "2", "--count", "3", "--size", "32x40", "--out", str(out)]) == 0
    dataset = read_dataset(out)
    assert len(dataset) == 3
    assert dataset[0].size == (32, 40)
    assert dataset.seed == 2


def test_eval_sweeps_t(tmp_path, dataset_dir, tiny_encoder_cfg):
    ckpt = tmp_path / "model.ckpt"
    meta = {"epoch": 1, "train": TrainConfig(val_fraction=0.5, area_threshold=4).to_json()}
    save_checkpoint(ckpt, Encoder(tiny_encoder_cfg), meta)
    out = tmp_path / "eval.csv"
    argv = ["eval", "--ckpt", str(ckpt), "--data", str(dataset_dir), "--t", "0,2", "--fold-bn", "--out", str(out)]
    assert main(argv) == 0
    rows = read_rows(out)
    assert rows[0] == ["epoch", "split", "miou", "class_avg", "global_avg", "ap", "ap50", "t"]
    assert [row[-1] for row in rows[1:]] == ["0", "2"]
    assert all(row[1] == "val" for row in rows[1:])


def test_train_through_cli(tmp_path, dataset_dir):
    config = tmp_path / "run.cfg"
    config.write_text(
        "epochs=1\nbatch=3\nt_iterations=1\nval_fraction=0.5\narea_threshold=4\n"
        "widths=8,16\nmodule_counts=0,1\ndilations=2\n",
        encoding="utf-8",
    )
    metrics = tmp_path / "metrics.csv"
    ckpt = tmp_path / "best.ckpt"
    argv = ["train", "--config", str(config), "--data", str(dataset_dir), "--out", str(ckpt), "--metrics", str(metrics)]
    assert main(argv) == 0
    assert ckpt.exists()
    assert len(read_rows(metrics)) == 2


def test_gradcheck_single_op(tmp_path):
    out = tmp_path / "grad.csv"
    assert main(["gradcheck", "--op", "tanh", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["op", "max_rel_error", "passed"]
    assert rows[1][0] == "tanh" and rows[1][2] == "true"


def test_bench_one_row_per_channel_count(tmp_path):
    out = tmp_path / "bench.csv"
    argv = ["bench", "--scenario", "conv", "--channels", "2,3", "--size", "16x16", "--reps", "10", "--out", str(out)]
    assert main(argv) == 0
    rows = read_rows(out)
    assert [row[1] for row in rows[1:]] == ["2x16x16", "3x16x16"]


@pytest.mark.parametrize(
    "argv",
    [
        ["gradcheck", "--op", "softmax"],
        ["eval", "--ckpt", "missing.ckpt", "--data", "missing", "--t", "-1"],
        ["bench", "--scenario", "conv", "--reps", "3"],
    ],
)
def test_failures_return_one(argv):
    assert main(argv) == 1


def test_missing_dataset_returns_one(tmp_path):
    assert main(["synth", "--count", "1", "--size", "8x8", "--out", str(tmp_path / "x")]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path / "none")]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["synth", "--count", "1", "--size", "64", "--out", "x"],
        ["eval", "--ckpt", "a", "--data", "b", "--t", "x"],
        ["eval", "--ckpt", "a", "--data", "b", "--split", "test"],
    ],
)
def test_argument_errors_exit_two(argv):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(argv)
    assert info.value.code == 2
