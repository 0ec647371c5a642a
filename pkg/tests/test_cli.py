import json

import numpy as np
import pytest

from mnetsat.cli import main
from mnetsat.data import read_mask


def _config(capsys):
    out = capsys.readouterr().out
    end = out.index("\n}") + 2
    return json.loads(out[:end]), out[end:]


def test_shapecheck_reference(capsys):
    assert main(["shapecheck", "--input", "512", "--base-filters", "64", "--stages", "5"]) == 0
    cfg, text = _config(capsys)
    assert cfg["input"] == 512 and cfg["ablation"]["egfe_sobel"] is True
    assert "16 x 16 x 1024" in text and "512 x 512 x 64" in text
    assert "match the reference" in text


def test_shapecheck_writes_csv(tmp_path):
    assert main(["shapecheck", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "shapes.csv").read_text().startswith("layer,H,W,C")


def test_missing_config_is_usage_error(capsys):
    assert main(["train", "--config", "missing.cfg"]) == 2
    assert "missing.cfg" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    assert main(["shapecheck", "--bogus"]) == 2


def test_unknown_ablation_is_usage_error(capsys):
    assert main(["shapecheck", "--ablation", "wings=true"]) == 2
    assert "wings" in capsys.readouterr().err


def test_ablation_appears_in_config(capsys):
    assert main(["shapecheck", "--ablation", "msfa_se=false", "--ablation", "egfe_sobel=0"]) == 0
    cfg, _ = _config(capsys)
    assert cfg["ablation"]["msfa_se"] is False and cfg["ablation"]["egfe_sobel"] is False


def test_config_file_and_flag_precedence(tmp_path, capsys):
    path = tmp_path / "run.cfg"
    path.write_text("stages = 3\nbase_filters = 4\nablation.seat_ln = off\n")
    assert main(["shapecheck", "--config", str(path), "--stages", "2"]) == 0
    cfg, _ = _config(capsys)
    assert (cfg["stages"], cfg["base_filters"], cfg["ablation"]["seat_ln"]) == (2, 4, False)


def test_shape_error_is_runtime_failure(capsys):
    assert main(["shapecheck", "--input", "100", "--stages", "5"]) == 1
    assert "ShapeError" in capsys.readouterr().err


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--cases", "matmul", "sobel", "bce_loss"]) == 0
    assert "3/3 cases" in capsys.readouterr().out


def test_gradcheck_fails_on_tiny_tolerance(capsys):
    assert main(["gradcheck", "--cases", "sigmoid", "--tolerance", "1e-30"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_unknown_case():
    assert main(["gradcheck", "--cases", "nope"]) == 2


def test_train_without_data_is_usage_error():
    assert main(["train", "--out", "x"]) == 2


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "none.ckpt")]) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> artefacts for eval and infer."""
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    common = ["--input", "32", "--base-filters", "4", "--stages", "2", "--seed", "1"]
    assert main(["synth", "--out", str(data), "--count", "12", "--input", "32", "--seed", "1"]) == 0
    assert main(["train", "--data", str(data), "--out", str(run), "--epochs", "2", "--augment", "0",
                 "--batch", "4", *common]) == 0
    return data, run, common


def test_train_outputs(pipeline):
    _, run, _ = pipeline
    for name in ("config.json", "train_log.csv", "best.ckpt", "final.ckpt"):
        assert (run / name).exists()
    assert len((run / "train_log.csv").read_text().splitlines()) == 3


def test_eval_writes_csvs(pipeline, tmp_path):
    data, run, common = pipeline
    assert main(["eval", "--data", str(data), "--checkpoint", str(run / "best.ckpt"),
                 "--out", str(tmp_path), "--split", "val", *common]) == 0
    assert (tmp_path / "metrics.csv").read_text().splitlines()[-1].startswith("AGGREGATE,")
    assert len((tmp_path / "roc_pr.csv").read_text().splitlines()) == 102


def test_infer_writes_maps(pipeline, tmp_path):
    data, run, common = pipeline
    assert main(["infer", "--data", str(data), "--checkpoint", str(run / "final.ckpt"),
                 "--out", str(tmp_path), *common]) == 0
    probs = sorted(tmp_path.glob("*_prob.pgm"))
    masks = sorted(tmp_path.glob("*_mask.png"))
    assert len(probs) == len(masks) == 12
    assert set(np.unique(read_mask(masks[0]))) <= {0.0, 1.0}


def test_checkpoint_shape_mismatch(pipeline):
    data, run, _ = pipeline
    assert main(["eval", "--data", str(data), "--checkpoint", str(run / "best.ckpt"),
                 "--input", "32", "--base-filters", "8", "--stages", "2"]) == 1
