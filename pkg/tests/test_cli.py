import json
from pathlib import Path

import numpy as np
import pytest

from mgabrain import BinaryMask, Volume
from mgabrain.cli import RunConfig, dispatch
from mgabrain.errors import ConfigInvalid
from mgabrain.nifti import read_volume, write_volume
from mgabrain.phantoms import head_phantom

TABLE = Path(__file__).parent / "data" / "layer_shapes_n128.txt"


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    ph = head_phantom(shape=(32, 32, 28), brain_radius=9.0, skull=2.0, scalp=2.0)
    write_volume(ph.image, d / "img.nii.gz")
    write_volume(ph.brain, d / "mask.nii.gz")
    return d


def run(argv, capsys=None):
    code = dispatch([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


def test_shapes_prints_table(capsys):
    code, out = run(["shapes", "--n", "128"], capsys)
    assert code == 0 and out.out == TABLE.read_text()


def test_shapes_invalid_n(capsys):
    code, out = run(["shapes", "--n", "12"], capsys)
    assert code == 1 and "multiple of 8" in out.err


@pytest.mark.parametrize("argv", [["frobnicate"], [], ["shapes", "--bogus"], ["evaluate", "--pred", "x"]])
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv, capsys)[0] == 1


def test_missing_input_is_runtime_error(tmp_path, capsys):
    code, out = run(["sdt", "--mask", tmp_path / "none.nii", "--out", tmp_path / "s.nii"], capsys)
    assert code == 2 and not (tmp_path / "s.nii").exists()


def test_preprocess_and_sdt(files, tmp_path):
    assert run(["preprocess", "--in", files / "img.nii.gz", "--mask", files / "mask.nii.gz",
                "--out", tmp_path / "pp", "--n", 16])[0] == 0
    img = read_volume(tmp_path / "pp" / "image.nii.gz")
    assert img.shape == (16, 16, 16)
    record = json.loads((tmp_path / "pp" / "record.json").read_text())
    assert record["original_shape"] == [32, 32, 28]
    assert run(["sdt", "--mask", tmp_path / "pp" / "mask.nii.gz", "--out", tmp_path / "s.nii.gz"])[0] == 0
    s = read_volume(tmp_path / "s.nii.gz")
    assert np.abs(s.data).max() <= 5.0


def test_augment_preview_is_reproducible(files, tmp_path):
    for name in ("a", "b"):
        assert run(["augment-preview", "--in", files / "img.nii.gz", "--mask", files / "mask.nii.gz",
                    "--out", tmp_path / name, "--count", 2, "--seed", 11])[0] == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    params = json.loads((tmp_path / "a" / "params.json").read_text())
    assert params["seed"] == 11 and len(params["draws"]) == 2


def test_evaluate_identical_files(files, tmp_path, capsys):
    code, out = run(["evaluate", "--pred", files / "mask.nii.gz", "--gt", files / "mask.nii.gz",
                     "--recon", files / "img.nii.gz", "--ref", files / "img.nii.gz",
                     "--out", tmp_path / "r.json"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["cases"][0]["dice"] == 1.0
    assert report["cases"][0]["psnr_db"] == 99.0
    assert "mean(std)" in out.out


def test_sweep_from_sdt_file(files, tmp_path, capsys):
    run(["sdt", "--mask", files / "mask.nii.gz", "--out", tmp_path / "s.nii"])
    code, out = run(["sweep", "--sdt", tmp_path / "s.nii", "--gt", files / "mask.nii.gz",
                     "--taus", "0,2,4", "--out", tmp_path / "sw.json"], capsys)
    rows = json.loads((tmp_path / "sw.json").read_text())
    assert code == 0 and [r["tau"] for r in rows] == [0, 2, 4]
    assert rows[0]["dice"] == 1.0 and rows[0]["recall"] == 1.0


def _train(files, out, *extra):
    data = files / "data.json"
    data.write_text(json.dumps([{"image": "img.nii.gz", "mask": "mask.nii.gz", "modality": "mri"}]))
    argv = ["train", "--data", data, "--out", out, "--n", 16, "--steps", 2, "--batch-size", 1,
            "--lr", "1e-3", "--seed", 5, *extra]
    assert run(argv)[0] == 0
    return out


def test_train_infer_round_trip_is_byte_identical(files, tmp_path, capsys):
    a = _train(files, tmp_path / "a")
    b = _train(files, tmp_path / "b")
    for f in ("checkpoint/manifest.json", "checkpoint/params.bin", "history.jsonl"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    for name in ("ia", "ib"):
        code, out = run(["infer", "--model", a / "checkpoint", "--in", files / "img.nii.gz",
                         "--out", tmp_path / name, "--tau", 3], capsys)
        assert code == 0 and "TBV" in out.out
    for f in ("mask.nii.gz", "recon.nii.gz", "result.json"):
        assert (tmp_path / "ia" / f).read_bytes() == (tmp_path / "ib" / f).read_bytes()
    result = json.loads((tmp_path / "ia" / "result.json").read_text())
    assert result["tau"] == 3 and result["tbv_mL"] >= 0
    assert read_volume(tmp_path / "ia" / "mask.nii.gz").shape == (32, 32, 28)


def test_ablation_flags_give_distinct_runs(files, tmp_path):
    runs = {}
    for flag in ("", "--no-mga", "--no-spe", "--no-da"):
        out = _train(files, tmp_path / (flag or "base"), *([flag] if flag else []))
        runs[flag] = (out / "checkpoint" / "params.bin").read_bytes()
        manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
        if flag:
            assert manifest["config"]["use_" + flag[5:]] is False
    assert len(set(runs.values())) == 4


def test_phantom_training(tmp_path):
    assert run(["train", "--phantom", "--out", tmp_path, "--n", 16, "--steps", 1, "--batch-size", 1])[0] == 0
    assert (tmp_path / "checkpoint" / "params.bin").exists()


def test_run_config_validation(tmp_path, capsys):
    good = {"seed": 3, "model": {"input_side": 16}, "train": {"steps": 1, "batch_size": 1}, "metrics": {"taus": [0, 1]}}
    cfg = RunConfig.from_dict(good)
    assert cfg.model.input_side == 16 and cfg.train.steps == 1
    for bad in ({"sed": 1}, {"model": {"widht": 2}}, {"model": {"input_side": 12}}, {"seed": "x"},
                {"train": {"augment": {}}}, {"augment": {"p_blur": 2}}):
        with pytest.raises(ConfigInvalid):
            RunConfig.from_dict(bad)
    (tmp_path / "bad.json").write_text(json.dumps({"unknown": 1}))
    assert run(["--config", tmp_path / "bad.json", "shapes"], capsys)[0] == 1
    (tmp_path / "good.json").write_text(json.dumps(good))
    code, out = run(["--config", tmp_path / "good.json", "shapes", "--n", 16], capsys)
    assert code == 0 and "(64,2,2,2)" in out.out
