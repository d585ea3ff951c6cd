import json

import pytest

from oct_engine.cli import main

TINY_CONFIG = """\
[model]
input_size = 16
stages = 1x8
attention =
latent_dim = 4
dropout = 0.1

[augment]
resize = 16
crop = 16
flip_ud = 0.0
mask_min = 1
mask_max = 2

[train]
steps = 8
batch_size = 4
eval_every = 4
base_lr = 0.01
seed = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic dataset plus a tiny config shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("cliws")
    assert main(["synth", "--out", str(root / "data"), "--n-per-class", "3",
                 "--size", "16", "--seed", "1"]) == 0
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG, encoding="utf-8")
    return root


class TestSynth:
    def test_counts(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "d"), "--n-per-class", "16",
                     "--size", "64", "--seed", "7"]) == 0
        files = list((tmp_path / "d").glob("*.pgm"))
        assert len(files) == 64
        assert (tmp_path / "d" / "manifest.csv").is_file()

    def test_seed_fixes_bytes(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / sub), "--n-per-class", "2",
                         "--size", "32", "--seed", "9"]) == 0
        for fa in sorted((tmp_path / "a").iterdir()):
            assert fa.read_bytes() == (tmp_path / "b" / fa.name).read_bytes()

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("OCT_ENGINE_SEED", "9")
        assert main(["synth", "--out", str(tmp_path / "a"), "--n-per-class", "1",
                     "--size", "16"]) == 0
        monkeypatch.delenv("OCT_ENGINE_SEED")
        assert main(["synth", "--out", str(tmp_path / "b"), "--n-per-class", "1",
                     "--size", "16", "--seed", "9"]) == 0
        for fa in sorted((tmp_path / "a").iterdir()):
            assert fa.read_bytes() == (tmp_path / "b" / fa.name).read_bytes()


class TestErrors:
    def test_missing_config_names_path(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "missing.cfg"),
                     "--out", str(tmp_path / "out")])
        assert code == 1
        assert "missing.cfg" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[train]\nwarp_speed = 9\n", encoding="utf-8")
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == 1
        assert "warp_speed" in capsys.readouterr().err

    def test_no_manifest_is_config_error(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path / "out"), "--steps", "1"])
        assert code == 1
        assert "manifest" in capsys.readouterr().err

    def test_bad_usage_exit_1(self, capsys):
        assert main(["synth"]) == 1  # --out is required

    def test_bad_checkpoint_exit_2(self, tmp_path, workspace, capsys):
        fake = tmp_path / "fake.ckpt"
        fake.write_bytes(b"not a checkpoint")
        code = main(["eval", "--checkpoint", str(fake),
                     "--manifest", str(workspace / "data" / "manifest.csv"),
                     "--out", str(tmp_path)])
        assert code == 2
        assert "magic" in capsys.readouterr().err

    def test_missing_image_exit_2(self, tmp_path, workspace):
        code = main(["features", "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--manifest", str(workspace / "data" / "manifest.csv"),
                     "--out", str(tmp_path)])
        assert code == 2


class TestPipeline:
    def test_full_pipeline(self, workspace, capsys):
        data = workspace / "data"
        manifest = data / "manifest.csv"
        cfg = workspace / "tiny.cfg"

        code = main(["pretrain-vae", "--config", str(cfg),
                     "--manifest", str(manifest),
                     "--out", str(workspace / "vae"), "--steps", "6"])
        assert code == 0, capsys.readouterr()
        vae_ckpt = workspace / "vae" / "checkpoints" / "last.ckpt"
        assert vae_ckpt.is_file()
        assert (workspace / "vae" / "metrics.jsonl").is_file()

        code = main(["train", "--config", str(cfg), "--manifest", str(manifest),
                     "--val-manifest", str(manifest),
                     "--out", str(workspace / "clf"),
                     "--init-from", str(vae_ckpt)])
        assert code == 0, capsys.readouterr()
        clf_ckpt = workspace / "clf" / "checkpoints" / "last.ckpt"
        assert clf_ckpt.is_file()
        lines = (workspace / "clf" / "metrics.jsonl").read_text().strip().split("\n")
        for line in lines:
            record = json.loads(line)
            assert {"step", "lr", "loss", "loss_parts", "metrics"} <= set(record)

        code = main(["eval", "--checkpoint", str(clf_ckpt),
                     "--manifest", str(manifest), "--out", str(workspace / "eval")])
        assert code == 0, capsys.readouterr()
        report = json.loads((workspace / "eval" / "report.json").read_text())
        for key in ("confusion", "sensitivity", "specificity", "per_class",
                    "binary_auc", "roc_points", "accuracy"):
            assert key in report
        assert len(report["per_class"]) == 4

        code = main(["features", "--checkpoint", str(clf_ckpt),
                     "--manifest", str(manifest), "--out", str(workspace / "feat")])
        assert code == 0
        feats = (workspace / "feat" / "features.csv").read_text().strip().split("\n")
        assert len(feats) == 13  # header + 12 samples

        image = sorted(data.glob("cnv_*.pgm"))[0]
        code = main(["heatmap", "--checkpoint", str(clf_ckpt),
                     "--out", str(workspace / "hm"), "--patch", "4", "--stride", "2",
                     str(image)])
        assert code == 0
        heat_dir = workspace / "hm" / "heatmaps"
        stems = [p.name for p in heat_dir.iterdir()]
        assert any(s.endswith("_grid.pgm") for s in stems)
        assert any(s.endswith("_full.pgm") for s in stems)
        assert any(s.endswith("_grid.csv") for s in stems)

    def test_ensemble_eval_two_checkpoints(self, workspace, tmp_path, capsys):
        manifest = workspace / "data" / "manifest.csv"
        cfg = workspace / "tiny.cfg"
        ckpts = []
        for seed in ("11", "12"):
            out = tmp_path / f"m{seed}"
            assert main(["train", "--config", str(cfg), "--manifest", str(manifest),
                         "--out", str(out), "--steps", "4", "--seed", seed]) == 0
            ckpts.append(str(out / "checkpoints" / "last.ckpt"))
        code = main(["eval", "--checkpoint", ckpts[0], "--checkpoint", ckpts[1],
                     "--manifest", str(manifest), "--out", str(tmp_path / "ens")])
        assert code == 0
        report = json.loads((tmp_path / "ens" / "report.json").read_text())
        assert len(report["checkpoints"]) == 2


class TestGradCheckCommand:
    def test_single_instance_passes(self, capsys):
        assert main(["grad-check", "--instances", "1"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
        assert "conv2d_same" in out and "partial_attention" in out
