import json
import os

import pytest

from slimseg import cli


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """generate + index a micro corpus once for all CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    cli.main(["generate", "--out", str(corpus), "--num-images", "10",
              "--size", "16", "--classes", "3", "--seed", "2"])
    cli.main(["index", "--manifest", str(corpus / "manifest.jsonl")])
    cfg = {"epochs": 2, "batch_size": 4, "num_classes": 3, "base_width": 8,
           "learning_rate": 0.05, "prune_stages": 2, "seed": 0}
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    return root, corpus, cfg_path


def test_generate_and_index_artifacts(cli_workspace):
    _, corpus, _ = cli_workspace
    assert (corpus / "manifest.jsonl").exists()
    assert (corpus / "index.jsonl").exists()
    assert len(list((corpus / "images").iterdir())) == 10
    assert len(list((corpus / "labels").iterdir())) == 10


def test_train_eval_report_pipeline(cli_workspace, capsys):
    root, corpus, cfg_path = cli_workspace
    run_dir = root / "runs" / "full"
    rc = cli.main(["train", "--manifest", str(corpus / "manifest.jsonl"),
                   "--out", str(run_dir), "--config", str(cfg_path)])
    assert rc == 0
    assert (run_dir / "checkpoint.bin").exists()
    assert "mIoU=" in capsys.readouterr().out

    rc = cli.main(["eval", "--manifest", str(corpus / "manifest.jsonl"),
                   "--checkpoint", str(run_dir / "checkpoint.bin"),
                   "--config", str(cfg_path), "--split", "test"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert 0.0 <= out["miou"] <= 1.0

    rc = cli.main(["report", "--runs", str(root / "runs"),
                   "--out", str(root / "report")])
    assert rc == 0
    assert (root / "report" / "figures" / "tradeoff.svg").exists()


def test_train_twice_is_byte_identical(cli_workspace):
    root, corpus, cfg_path = cli_workspace
    a, b = root / "det_a", root / "det_b"
    for out in (a, b):
        cli.main(["train", "--manifest", str(corpus / "manifest.jsonl"),
                  "--out", str(out), "--config", str(cfg_path)])
    for name in ("metrics.csv", "ledger.csv", "prune_report.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_flag_overrides_config(cli_workspace):
    root, corpus, cfg_path = cli_workspace
    out = root / "seeded"
    cli.main(["train", "--manifest", str(corpus / "manifest.jsonl"),
              "--out", str(out), "--config", str(cfg_path), "--seed", "9"])
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 9


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
