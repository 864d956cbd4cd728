import json
import shutil
from pathlib import Path

import filelock
import pytest
from PIL import Image

from irfuse import cli
from irfuse.translate import TranslatorConfig

TINY = ["--set", "widths=[4, 8, 8]", "--set", "meta_dim=8", "--set", "epochs_base=1", "--set", "epochs_meta=2",
        "--set", "early_stop_patience=1", "--set", "steps_per_epoch=1", "--set", "n_val=4"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["prepare", "--out", str(out), "--synthetic", "48"]) == 0
    assert cli.main(["train-fss", "--out", str(out), "--method", "baseline", "--fold", "0", *TINY]) == 0
    return out


def test_prepare_writes_four_folds(run_dir):
    folds = json.loads((run_dir / "dataset" / "folds.json").read_text())
    assert len(folds) == 4
    assert (run_dir / "manifests" / "prepare.json").is_file()


def test_prepare_is_idempotent(run_dir, tmp_path):
    before = {p.name: p.read_bytes() for p in (run_dir / "dataset").glob("*.txt")}
    before["folds.json"] = (run_dir / "dataset" / "folds.json").read_bytes()
    assert cli.main(["prepare", "--out", str(run_dir), "--synthetic", "48"]) == 0
    for name, data in before.items():
        assert (run_dir / "dataset" / name).read_bytes() == data, name


def test_prepare_bad_root(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert cli.main(["prepare", "--out", str(tmp_path / "o"), "--root", str(missing), "--layout", "soda"]) != 0
    assert str(missing) in capsys.readouterr().err


def test_train_fss_writes_checkpoint_and_manifest(run_dir):
    ckpt = run_dir / "fss" / "baseline_fold0" / "model.pt"
    assert ckpt.is_file()
    manifest = json.loads((run_dir / "manifests" / "train-fss-baseline-fold0.json").read_text())
    assert manifest["config"]["method"] == "baseline"
    assert manifest["config"]["widths"] == [4, 8, 8]
    assert len(manifest["input_hash"]) == 40


def test_method3_without_generated_data_fails(run_dir, tmp_path, capsys):
    rc = cli.main(["train-fss", "--out", str(run_dir), "--method", "method3", "--fold", "0", *TINY])
    assert rc != 0
    assert str(run_dir / "dataset" / "generated" / "ir_l") in capsys.readouterr().err
    # With only rgb_l absent, the error names rgb_l.
    data = tmp_path / "dataset"
    shutil.copytree(run_dir / "dataset", data)
    for sub, mode in (("ir_l", "L"), ("rgb_ir", "RGB")):
        (data / "generated" / sub).mkdir(parents=True)
        for img in (data / "images").glob("*.png"):
            Image.open(img).convert(mode).save(data / "generated" / sub / img.name)
    rc = cli.main(["train-fss", "--out", str(tmp_path / "o"), "--dataset", str(data), "--method", "method3",
                   "--fold", "0", *TINY])
    assert rc != 0
    assert str(data / "generated" / "rgb_l") in capsys.readouterr().err


def test_evaluate_and_report(run_dir):
    ckpt = run_dir / "fss" / "baseline_fold0" / "model.pt"
    args = ["evaluate", "--out", str(run_dir), "--checkpoint", str(ckpt), "--fold", "0", "--shot", "1", "5",
            "--runs", "2", "--episodes", "6"]
    assert cli.main(args) == 0
    rep = json.loads((run_dir / "reports" / "baseline_fold0" / "baseline_5shot.json").read_text())
    assert rep["shot"] == 5 and rep["seeds"] == [100, 101]
    assert cli.main(["report", "--out", str(run_dir)]) == 0
    assert "1s MIoU%" in (run_dir / "reports" / "table.txt").read_text()


def test_evaluate_fold_mismatch(run_dir, capsys):
    ckpt = run_dir / "fss" / "baseline_fold0" / "model.pt"
    base = ["evaluate", "--out", str(run_dir), "--checkpoint", str(ckpt), "--fold", "1", "--runs", "1",
            "--episodes", "4"]
    assert cli.main(base) == 1
    assert "--allow-fold-mismatch" in capsys.readouterr().err
    assert cli.main(base + ["--allow-fold-mismatch"]) == 0


def test_evaluate_rejects_zero_shot(run_dir):
    ckpt = run_dir / "fss" / "baseline_fold0" / "model.pt"
    assert cli.main(["evaluate", "--out", str(run_dir), "--checkpoint", str(ckpt), "--fold", "0",
                     "--shot", "0"]) == 2


def test_train_translator_missing_src(tmp_path, capsys):
    rc = cli.main(["train-translator", "--out", str(tmp_path), "--src", str(tmp_path / "ir"),
                   "--dst", str(tmp_path / "rgb"), "--direction", "ir2rgb"])
    assert rc != 0
    assert str(tmp_path / "ir") in capsys.readouterr().err


@pytest.mark.parametrize("direction,epochs", [("ir2rgb", 100), ("ir2l", 50)])
def test_paper_translator_epochs(direction, epochs, tmp_path):
    args = cli.build_parser().parse_args(["train-translator", "--out", str(tmp_path), "--profile", "paper",
                                          "--src", "a", "--dst", "b", "--direction", direction])
    cfg = cli._resolve(TranslatorConfig.paper(direction), args, {"epochs": args.epochs})
    assert cfg.epochs == epochs and cfg.resolution == 256


def _resolved_seed(argv, tmp_path):
    args = cli.build_parser().parse_args(["train-translator", "--out", str(tmp_path), "--src", "a", "--dst", "b",
                                          "--direction", "ir2l", *argv])
    return cli._resolve(TranslatorConfig.desk("ir2l"), args, {"epochs": args.epochs})


def test_seed_env_fallback_and_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("IRFUSE_SEED", raising=False)
    assert _resolved_seed([], tmp_path).seed == 0
    monkeypatch.setenv("IRFUSE_SEED", "7")
    assert _resolved_seed([], tmp_path).seed == 7
    cfg_file = tmp_path / "t.cfg"
    cfg_file.write_text("seed = 11\nepochs = 3\n")
    got = _resolved_seed(["--config", str(cfg_file)], tmp_path)
    assert (got.seed, got.epochs) == (11, 3)
    got = _resolved_seed(["--config", str(cfg_file), "--seed", "13", "--epochs", "4"], tmp_path)
    assert (got.seed, got.epochs) == (13, 4)
    got = _resolved_seed(["--config", str(cfg_file), "--set", "epochs=9"], tmp_path)
    assert got.epochs == 9
    monkeypatch.setenv("IRFUSE_SEED", "x")
    with pytest.raises(cli.CLIError):
        _resolved_seed([], tmp_path)


def test_env_seed_recorded_in_manifest(tmp_path, monkeypatch):
    monkeypatch.setenv("IRFUSE_SEED", "5")
    assert cli.main(["prepare", "--out", str(tmp_path), "--synthetic", "16"]) == 0
    assert json.loads((tmp_path / "manifests" / "prepare.json").read_text())["seed"] == 5


def test_lock_contention(tmp_path, capsys):
    tmp_path.mkdir(exist_ok=True)
    with filelock.FileLock(str(Path(tmp_path) / cli.LOCK_NAME)):
        assert cli.main(["prepare", "--out", str(tmp_path), "--synthetic", "16"]) == 1
    assert "another irfuse process" in capsys.readouterr().err
    assert cli.main(["prepare", "--out", str(tmp_path), "--synthetic", "16"]) == 0
