import json

import pytest

from cortex.cli import git_blob_hash, main
from cortex.toy_scene import load_dataset


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["dataset-gen", "--n", "24", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_help_lists_commands(capsys):
    assert main(["--help"]) == 0
    text = capsys.readouterr().out
    for cmd in ("dataset-gen", "extract-rte", "train", "ablate", "eval", "caption", "direct-vlm"):
        assert cmd in text


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--bogus-flag"]) == 2
    assert main(["train", "--out", str(tmp_path), "--use-rte", "maybe"]) == 2
    assert main(["train", "--out", str(tmp_path), "--lambda", "-1"]) == 2
    assert main(["train", "--out", str(tmp_path), "--use-rte", "off"]) == 2  # ITDA still on
    assert main(["frobnicate"]) == 2


def test_runtime_failure_exit_1(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing")]) == 1
    assert "not a checkpoint" in capsys.readouterr().err


def test_dataset_gen_outputs_and_idempotence(data_dir, tmp_path):
    assert len(load_dataset(data_dir / "dataset.jsonl")) == 24
    assert len(list((data_dir / "images").glob("*.png"))) == 48
    manifest = json.loads((data_dir / "manifest.json").read_text())
    body = (data_dir / "dataset.jsonl").read_bytes()
    assert manifest["artifacts"]["dataset.jsonl"] == git_blob_hash(body)
    again = tmp_path / "again"
    main(["dataset-gen", "--n", "24", "--seed", "7", "--out", str(again)])
    assert (again / "dataset.jsonl").read_bytes() == body
    assert json.loads((again / "manifest.json").read_text())["artifacts"] == manifest["artifacts"]


def test_git_blob_hash_matches_git():
    assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_extract_rte_then_warm_rerun(data_dir, tmp_path, capsys):
    out = tmp_path / "rte.jsonl"
    args = ["extract-rte", "--dataset", str(data_dir), "--endpoint", "mock://", "--cap", "13", "--out"]
    assert main(args + [str(out)]) == 0
    first = json.loads(capsys.readouterr().out)
    assert first["records_written"] == 48 and first["max_sentences"] <= 13
    assert main(args + [str(tmp_path / "rte2.jsonl")]) == 0
    assert json.loads(capsys.readouterr().out)["network_calls"] == 0


def test_train_eval_caption_direct(data_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("lr = 1e-3\nmax_iters = 50\nbatch_size = 4\nchannels_unused = 1\n")
    run = tmp_path / "run"
    base = ["train", "--out", str(run), "--dataset", str(data_dir), "--channels", "16", "--layers", "1"]
    assert main(base + ["--config", str(cfg)]) == 2  # unknown key in config
    cfg.write_text("lr = 1e-3\nmax_iters = 50\nbatch_size = 4\nseed = 3\n")
    assert main(base + ["--config", str(cfg), "--max-iters", "5"]) == 0
    saved = (run / "config.txt").read_text()
    assert "max_iters = 5\n" in saved and "seed = 3\n" in saved and "lr = 0.001\n" in saved
    for name in ("weights.bin", "checkpoint.json", "vocab.txt", "metrics.jsonl", "loss_curves.png",
                 "eval_test/report.json", "eval_test/captions.tsv", "eval_test/report.png", "manifest.json"):
        assert (run / name).exists(), name
    log = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in log if "l_cap" in r] == [1, 2, 3, 4, 5]
    assert [r["iter"] for r in log if "val_l_cap" in r] == [5]
    capsys.readouterr()

    assert main(["eval", "--checkpoint", str(run), "--split", "test"]) == 0
    text = capsys.readouterr().out
    assert "Total Performance" in text and "Semantic Change" in text
    assert main(["eval", "--checkpoint", str(run), "--split", "nope"]) == 2

    pair_id = load_dataset(data_dir / "dataset.jsonl")[0].pair_id
    imgs = ["--before", str(data_dir / "images" / f"{pair_id}_bef.png"),
            "--after", str(data_dir / "images" / f"{pair_id}_aft.png")]
    capsys.readouterr()
    assert main(["caption", "--checkpoint", str(run)] + imgs) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 1
    assert main(["direct-vlm", "--endpoint", "mock://"] + imgs) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 1


def test_train_is_idempotent(data_dir, tmp_path):
    args = ["train", "--dataset", str(data_dir), "--channels", "16", "--layers", "1", "--max-iters", "3",
            "--batch-size", "4"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())["artifacts"]
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())["artifacts"]
    for name in ("weights.bin", "metrics.jsonl", "eval_test/report.json", "eval_test/captions.tsv"):
        assert a[name] == b[name], name
