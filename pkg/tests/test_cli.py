import json

import pytest

from promptlab import backbone as B
from promptlab.cli import build_parser, main


@pytest.fixture
def config(tmp_path, tiny_checkpoint):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"backbone_path": str(tiny_checkpoint), "task_sizes": [16, 16, 16],
                                "m": 4, "bottleneck": 8, "epochs": 1}))
    return path


def test_pretrain_writes_a_loadable_checkpoint(tmp_path, capsys):
    cfg = tmp_path / "pre.json"
    cfg.write_text(json.dumps({
        "pretrain": {"steps": 2, "corpus_size": 40, "batch_size": 4},
        "backbone": {"model_dim": 16, "num_heads": 2, "num_layers": 1, "ffn_dim": 32},
    }))
    out = tmp_path / "bb.npz"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    bb = B.load_backbone(out)
    assert bb.config.seed == 3 and bb.config.model_dim == 16
    assert bb.weights_hash in capsys.readouterr().out


def test_run_twice_is_byte_identical(tmp_path, config):
    for d in ("a", "b"):
        assert main(["run", "--config", str(config), "--task", "order", "--method", "simple",
                     "--seed", "2", "--out", str(tmp_path / d)]) == 0
    for name in ("curve.csv", "result.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "result.json").read_text())
    assert summary["config"]["task"] == "order" and summary["seed"] == 2


def test_flags_override_config(tmp_path, config):
    main(["run", "--config", str(config), "--no-dropout", "--m", "2", "--epochs", "2",
          "--out", str(tmp_path)])
    cfg = json.loads((tmp_path / "result.json").read_text())["config"]
    assert cfg["dropout"] is False and cfg["m"] == 2 and cfg["epochs"] == 2


def test_backbone_flag(tmp_path, tiny_checkpoint):
    assert main(["run", "--backbone", str(tiny_checkpoint), "--epochs", "0",
                 "--out", str(tmp_path)]) == 0


def test_missing_backbone_is_reported(tmp_path):
    with pytest.raises(SystemExit, match="backbone"):
        main(["run", "--out", str(tmp_path)])


def test_compare_and_stability(tmp_path, config, capsys):
    two = tmp_path / "two.json"
    two.write_text(json.dumps({**json.loads(config.read_text()), "tasks": ["parity", "order"]}))
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(two), "--seed", "0", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "simple" in printed and "residual" in printed and "superpos" in printed
    assert main(["stability", "--out", str(out)]) == 0
    assert "mean±std" in capsys.readouterr().out


def test_analyze_prompts(tmp_path, config):
    main(["run", "--config", str(config), "--out", str(tmp_path / "r")])
    assert main(["analyze-prompts", "--out", str(tmp_path)]) == 0
    sim = json.loads((tmp_path / "r" / "similarity.json").read_text())
    assert len(sim["matrix"]) == 10


def test_ablations(tmp_path, config, capsys):
    assert main(["ablate-m", "--config", str(config), "--task", "parity", "--seed", "0",
                 "--m", "1", "--out", str(tmp_path / "m")]) == 0
    assert capsys.readouterr().out.startswith("m=1")
    assert main(["ablate-dropout", "--config", str(config), "--task", "parity", "--seed", "0",
                 "--method", "superpos", "--out", str(tmp_path / "d")]) == 0
    assert "superpos" in capsys.readouterr().out


def test_bad_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(SystemExit):
        main(["run", "--config", str(bad)])


def test_parser_choices():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "--method", "lora"])
