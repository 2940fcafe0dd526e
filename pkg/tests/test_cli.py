"""Command-line surface: exit codes, config overlay, seeds and end-to-end runs."""

import json

import numpy as np
import pytest

from lesionforge.bridge import read_triptych
from lesionforge.checkpoint import load_checkpoint, load_model
from lesionforge.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from lesionforge.dataprep import load_dataset, synth_generate
from lesionforge.metrics import iou


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Synthetic dataset with a trained segmenter and a classifier built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data, seg, cls = root / "data", root / "seg.lfck", root / "cls.lfck"
    assert main(["synth", "--n", "40", "--out", str(data)]) == 0
    assert main(["train-seg", "--data", str(data), "--out", str(seg), "--epochs", "25", "--base-channels", "8",
                 "--split", "90-10"]) == 0
    assert main(["train-cls", "--data", str(data), "--out", str(cls), "--epochs", "2", "--batch-size", "8"]) == 0
    return {"root": root, "data": data, "seg": seg, "cls": cls}


class TestSynth:
    def test_counts_and_files(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--n", 20, "--out", tmp_path / "d")
        assert code == EXIT_OK
        assert "class 0: 10" in out and "class 1: 10" in out
        assert len(list((tmp_path / "d" / "images").glob("*.png"))) == 20
        assert len(list((tmp_path / "d" / "masks").glob("*.png"))) == 20
        assert len((tmp_path / "d" / "labels.csv").read_text().splitlines()) == 21

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--n", "6", "--seed", "4", "--out", str(tmp_path / name)]) == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    @pytest.mark.parametrize("n", ["0", "-3", "x"])
    def test_bad_n(self, tmp_path, n, capsys):
        assert run(capsys, "synth", "--n", n, "--out", tmp_path)[0] == EXIT_USAGE


class TestUsage:
    def test_unknown_flag(self, tmp_path, capsys):
        assert run(capsys, "synth", "--n", 2, "--out", tmp_path, "--bogus")[0] == EXIT_USAGE

    def test_no_abbreviations(self, tmp_path, capsys):
        assert run(capsys, "synth", "--n", 2, "--ou", tmp_path)[0] == EXIT_USAGE

    def test_epochs_zero_rejected(self, pipeline, tmp_path, capsys):
        code, _, err = run(capsys, "train-seg", "--data", pipeline["data"], "--out", tmp_path / "s", "--epochs", 0)
        assert code == EXIT_USAGE and "epochs" in err

    def test_alpha_out_of_range(self, pipeline, tmp_path, capsys):
        code, _, _ = run(capsys, "train-cls", "--data", pipeline["data"], "--out", tmp_path / "c",
                         "--seg-ckpt", pipeline["seg"], "--bridge-alpha", 1.5)
        assert code == EXIT_USAGE

    def test_missing_checkpoint(self, pipeline, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--data", pipeline["data"], "--cls-ckpt", tmp_path / "none.lfck",
                           "--report-out", tmp_path / "r.json")
        assert code == EXIT_USAGE and "none.lfck" in err

    def test_finetune_n_zero(self, pipeline, tmp_path, capsys):
        code, _, _ = run(capsys, "finetune", "--data", pipeline["data"], "--cls-ckpt", pipeline["cls"], "--n", 0,
                         "--out", tmp_path / "f")
        assert code == EXIT_USAGE


class TestConfigAndSeed:
    def test_echoes_resolved_config_and_seed(self, tmp_path, capsys):
        _, out, _ = run(capsys, "synth", "--n", 2, "--out", tmp_path, "--seed", 9)
        lines = out.splitlines()
        cfg = json.loads(lines[0].removeprefix("config: "))
        assert cfg["n"] == 2 and cfg["seed"] == 9 and lines[1] == "seed: 9"

    def test_config_file_and_flag_precedence(self, tmp_path, capsys):
        conf = tmp_path / "c.cfg"
        conf.write_text(f"# synthetic run\nn = 4\nseed = 3\nout = {tmp_path / 'x'}\n")
        _, out, _ = run(capsys, "synth", "--config", conf)
        assert "seed: 3" in out and len(list((tmp_path / "x" / "images").iterdir())) == 4
        _, out, _ = run(capsys, "synth", "--config", conf, "--seed", 8)
        assert "seed: 8" in out

    def test_unknown_config_key(self, tmp_path, capsys):
        conf = tmp_path / "c.cfg"
        conf.write_text("n = 4\ncolour = red\n")
        assert run(capsys, "synth", "--config", conf, "--out", tmp_path)[0] == EXIT_USAGE

    def test_env_seed_is_lowest_precedence(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("LESIONFORGE_SEED", "77")
        assert "seed: 77" in run(capsys, "synth", "--n", 2, "--out", tmp_path)[1]
        assert "seed: 5" in run(capsys, "synth", "--n", 2, "--out", tmp_path, "--seed", 5)[1]
        monkeypatch.setenv("LESIONFORGE_SEED", "abc")
        assert run(capsys, "synth", "--n", 2, "--out", tmp_path)[0] == EXIT_USAGE


class TestTraining:
    def test_seg_checkpoint_loads_and_history(self, pipeline):
        model, ckpt = load_model(pipeline["seg"])
        assert ckpt.descriptor["kind"] == "unet-v1"
        assert 0 <= ckpt.meta["val_dice"] <= 1
        rows = pipeline["seg"].with_suffix(".history.csv").read_text().splitlines()
        assert len(rows) == 26

    def test_seg_rerun_identical_history(self, pipeline, tmp_path):
        outs = []
        for name in ("a", "b"):
            path = tmp_path / f"{name}.lfck"
            assert main(["train-seg", "--data", str(pipeline["data"]), "--out", str(path), "--epochs", "1",
                         "--base-channels", "2", "--seed", "3"]) == 0
            outs.append(path.with_suffix(".history.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_seg_requires_masks(self, tmp_path, capsys):
        data = tmp_path / "d"
        assert main(["synth", "--n", "4", "--out", str(data)]) == 0
        for m in (data / "masks").iterdir():
            m.unlink()
        code, _, err = run(capsys, "train-seg", "--data", data, "--out", tmp_path / "s")
        assert code == EXIT_FAIL and "mask" in err

    def test_bridge_off_and_on_in_metadata(self, pipeline, tmp_path, capsys):
        assert load_checkpoint(pipeline["cls"]).meta["bridge"] == "off"
        code, out, _ = run(capsys, "train-cls", "--data", pipeline["data"], "--seg-ckpt", pipeline["seg"],
                           "--out", tmp_path / "on.lfck", "--epochs", 1)
        assert code == EXIT_OK and "bridge: on, alpha=0.5" in out
        assert load_checkpoint(tmp_path / "on.lfck").meta["bridge"] == "on, alpha=0.5"

    def test_wrong_checkpoint_kind(self, pipeline, tmp_path, capsys):
        code, _, err = run(capsys, "train-cls", "--data", pipeline["data"], "--seg-ckpt", pipeline["cls"],
                           "--out", tmp_path / "x.lfck", "--epochs", 1)
        assert code == EXIT_FAIL and "segmentation" in err

    def test_corrupt_segmenter(self, pipeline, tmp_path, capsys):
        bad = tmp_path / "bad.lfck"
        bad.write_bytes(pipeline["seg"].read_bytes()[:100])
        code, _, err = run(capsys, "train-cls", "--data", pipeline["data"], "--seg-ckpt", bad,
                           "--out", tmp_path / "x.lfck", "--epochs", 1)
        assert code == EXIT_FAIL and "corrupt" in err


class TestEval:
    def test_report_self_consistent(self, pipeline, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--data", pipeline["data"], "--cls-ckpt", pipeline["cls"],
                           "--report-out", tmp_path / "r.json")
        assert code == EXIT_OK
        rep = json.loads((tmp_path / "r.json").read_text())
        assert rep["accuracy"] == (rep["tp"] + rep["tn"]) / (rep["tp"] + rep["fp"] + rep["tn"] + rep["fn"])
        assert rep["threshold"] == 0.5 and rep["split"] == "70-15-15:test"
        assert (tmp_path / "roc.csv").exists()
        for key in ("accuracy", "precision", "recall", "f1"):
            assert f"{key}: " in out

    def test_single_class_subset_still_reports(self, tmp_path, capsys, pipeline):
        data = tmp_path / "one"
        from lesionforge.dataprep import write_dataset

        write_dataset([s for s in synth_generate(8, seed=2) if s.label == 1], data)
        code, _, err = run(capsys, "eval", "--data", data, "--cls-ckpt", pipeline["cls"], "--subset", "all",
                           "--report-out", tmp_path / "r.json")
        assert code == EXIT_OK and "AUC omitted" in err
        assert json.loads((tmp_path / "r.json").read_text())["auc"] is None

    def test_bridge_mismatch_warns(self, pipeline, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--data", pipeline["data"], "--cls-ckpt", pipeline["cls"],
                           "--seg-ckpt", pipeline["seg"], "--report-out", tmp_path / "r.json")
        assert code == EXIT_OK and "warning" in err
        assert json.loads((tmp_path / "r.json").read_text())["config"]["alpha"] == 0.5


class TestBridgePreview:
    def test_alpha_zero_panels_equal(self, pipeline, tmp_path):
        image = pipeline["data"] / "images" / "synth_00000.png"
        out = tmp_path / "p.png"
        assert main(["bridge-preview", "--image", str(image), "--seg-ckpt", str(pipeline["seg"]), "--alpha", "0",
                     "--out", str(out)]) == 0
        original, _, blended = read_triptych(out)
        np.testing.assert_array_equal(original, blended)

    def test_deterministic_and_overlaps_truth(self, pipeline, tmp_path):
        sample = load_dataset(pipeline["data"], "hybrid")[1]
        image = pipeline["data"] / "images" / f"{sample.id}.png"
        blobs = []
        for name in ("a.png", "b.png"):
            assert main(["bridge-preview", "--image", str(image), "--seg-ckpt", str(pipeline["seg"]),
                         "--out", str(tmp_path / name)]) == 0
            blobs.append((tmp_path / name).read_bytes())
        assert blobs[0] == blobs[1]
        original, mask, blended = read_triptych(tmp_path / "a.png")
        highlighted = np.any(blended != original, axis=2) | (mask >= 0.5)
        assert iou(highlighted.astype(float), sample.mask) >= 0.5


class TestFinetune:
    def test_default_n_and_too_small_dataset(self, pipeline, tmp_path, capsys):
        code, out, err = run(capsys, "finetune", "--data", pipeline["data"], "--cls-ckpt", pipeline["cls"],
                             "--out", tmp_path / "f.lfck")
        assert '"n": 140' in out and code == EXIT_FAIL and "140" in err

    def test_copy_on_train(self, pipeline, tmp_path):
        before = pipeline["cls"].read_bytes()
        out = tmp_path / "f.lfck"
        assert main(["finetune", "--data", str(pipeline["data"]), "--cls-ckpt", str(pipeline["cls"]), "--n", "10",
                     "--epochs", "1", "--out", str(out)]) == 0
        assert pipeline["cls"].read_bytes() == before
        assert out.read_bytes() != before
        meta = load_checkpoint(out).meta
        assert meta["fine_tune_size"] == 10 and meta["fine_tune_preset_size"] == 140
