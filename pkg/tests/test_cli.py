"""Tests for the command-line interface."""

import json

import pytest

from carbseg import exporter, importer
from carbseg.cli import MANIFEST_FILE, build_parser, main
from carbseg.experiments import WEIGHT_SWEEP
from carbseg.models import LabelMap
from carbseg.telemetry import read_telemetry


@pytest.fixture
def label_dir(tmp_path):
    directory = tmp_path / "labels"
    exporter.write_label_map(directory / "a.pgm", LabelMap.filled(4, 3, 0))
    exporter.write_label_map(directory / "b.pgm", LabelMap.filled(4, 3, 1))
    return directory


@pytest.fixture
def synth_dir(tmp_path, tiny_config_file):
    out = tmp_path / "synth"
    assert main(["synth", "--config", str(tiny_config_file), "--seed", "9",
                 "--out", str(out), "--local-views", "2"]) == 0
    return out


def manifest(directory):
    return json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))


class TestExitCodes:
    def test_eval_identical_dirs(self, label_dir, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        code = main(["eval", "--pred", str(label_dir), "--gt", str(label_dir),
                     "--catalog", "camvid"])
        assert code == 0
        assert capsys.readouterr().out.strip() == "mIoU 1.000000"
        assert manifest(tmp_path)["command"] == "eval"

    def test_missing_required_flag(self, label_dir, capsys):
        assert main(["eval", "--pred", str(label_dir), "--gt", str(label_dir)]) == 1
        assert "--catalog" in capsys.readouterr().err

    def test_pred_and_checkpoint_are_exclusive(self, label_dir):
        assert main(["eval", "--pred", str(label_dir), "--checkpoint", str(label_dir),
                     "--gt", str(label_dir), "--catalog", "camvid"]) == 1

    def test_checkpoint_needs_config(self, label_dir, capsys):
        assert main(["eval", "--checkpoint", str(label_dir), "--gt", str(label_dir),
                     "--catalog", "camvid"]) == 1
        assert "--config" in capsys.readouterr().err

    def test_missing_directory(self, tmp_path, label_dir, capsys):
        code = main(["eval", "--pred", str(tmp_path / "nowhere"), "--gt", str(label_dir),
                     "--catalog", "camvid", "--out", str(tmp_path / "out")])
        assert code == 2
        assert "nowhere" in capsys.readouterr().err

    def test_unknown_catalog(self, tmp_path, label_dir):
        assert main(["stats", "--labels", str(label_dir), "--catalog", "pascal",
                     "--out", str(tmp_path / "s")]) == 2

    def test_label_outside_catalog(self, tmp_path, label_dir, capsys):
        exporter.write_label_map(label_dir / "c.pgm", LabelMap.filled(4, 3, 40))
        assert main(["stats", "--labels", str(label_dir), "--catalog", "camvid",
                     "--out", str(tmp_path / "s")]) == 1
        assert "c.pgm" in capsys.readouterr().err

    def test_bad_config_key(self, tmp_path, write_config):
        path = write_config({"stage_one": 3})
        assert main(["train", "--config", str(path), "--seed", "0",
                     "--out", str(tmp_path / "t")]) == 1

    def test_negative_seed(self, tmp_path, tiny_config_file):
        assert main(["train", "--config", str(tiny_config_file), "--seed", "-3",
                     "--out", str(tmp_path / "t")]) == 1

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--version"])
        assert exc.value.code == 0
        assert "carbseg" in capsys.readouterr().out


class TestTrain:
    def run(self, config, out, *extra):
        return main(["train", "--config", str(config), "--seed", "9", "--out", str(out), *extra])

    def test_reproducible(self, tmp_path, tiny_config_file):
        assert self.run(tiny_config_file, tmp_path / "a") == 0
        assert self.run(tiny_config_file, tmp_path / "b", "--threads", "3") == 0
        for name in ("telemetry.csv", "iou.csv", "checkpoint/weights.dtn1",
                     "checkpoint/bias.dtn1", "checkpoint/meta.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_outputs_and_manifest(self, tmp_path, tiny_config_file, capsys):
        out = tmp_path / "run"
        assert self.run(tiny_config_file, out) == 0
        assert capsys.readouterr().out.startswith("mIoU ")
        records = read_telemetry(out / "telemetry.csv")
        assert len(records) == 12
        assert {r.stage for r in records} == {1, 2}
        data = manifest(out)
        assert data["command"] == "train"
        assert data["seed"] == 9
        assert data["config"]["loss_mode"] == "carb"
        assert data["argv"][0] == "train"
        assert set(data["outputs"]) == {"telemetry", "checkpoint", "iou"}

    def test_export_curves_from_config_window(self, tmp_path, tiny_config_file, write_config):
        assert self.run(tiny_config_file, tmp_path / "run") == 0
        config = write_config({"curve_window": 3}, "curves.cfg")
        out = tmp_path / "curves"
        assert main(["export-curves", "--telemetry", str(tmp_path / "run" / "telemetry.csv"),
                     "--out", str(out), "--config", str(config)]) == 0
        assert manifest(out)["extra"] == {"window": 3}
        assert len((out / "weight_curve.csv").read_text().splitlines()) == 13

    def test_eval_checkpoint(self, tmp_path, tiny_config_file, synth_dir, capsys):
        assert self.run(tiny_config_file, tmp_path / "run") == 0
        trained = capsys.readouterr().out.strip()
        out = tmp_path / "eval"
        code = main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint"),
                     "--config", str(tiny_config_file), "--seed", "9",
                     "--gt", str(synth_dir / "labels" / "gt"),
                     "--catalog", str(synth_dir / "catalog.tsv"), "--out", str(out)])
        assert code == 0
        assert capsys.readouterr().out.strip() == trained
        assert (out / "iou.csv").is_file()
        assert manifest(out)["extra"]["checkpoint_iteration"] == 12

    def eval_checkpoint(self, run_dir, config, synth_dir, *extra):
        return main(["eval", "--checkpoint", str(run_dir / "checkpoint"),
                     "--config", str(config), "--gt", str(synth_dir / "labels" / "gt"),
                     "--catalog", str(synth_dir / "catalog.tsv"), *extra])

    def test_eval_checkpoint_reuses_training_seed(
        self, tmp_path, tiny_config_file, synth_dir, capsys, monkeypatch
    ):
        monkeypatch.chdir(tmp_path)
        assert self.run(tiny_config_file, tmp_path / "run") == 0
        trained = capsys.readouterr().out.strip()
        assert "seed = 9" in (tmp_path / "run" / "checkpoint" / "meta.txt").read_text()
        assert self.eval_checkpoint(tmp_path / "run", tiny_config_file, synth_dir) == 0
        assert capsys.readouterr().out.strip() == trained
        assert manifest(tmp_path)["seed"] == 9

    def test_eval_seed_must_match_checkpoint(self, tmp_path, tiny_config_file, synth_dir, capsys):
        assert self.run(tiny_config_file, tmp_path / "run") == 0
        capsys.readouterr()
        code = self.eval_checkpoint(tmp_path / "run", tiny_config_file, synth_dir, "--seed", "3")
        assert code == 1
        assert "--seed 3" in capsys.readouterr().err

    def test_eval_checkpoint_without_seed_needs_flag(
        self, tmp_path, tiny_config_file, synth_dir, capsys
    ):
        assert self.run(tiny_config_file, tmp_path / "run") == 0
        meta_path = tmp_path / "run" / "checkpoint" / "meta.txt"
        meta = importer.read_key_values(meta_path)
        del meta["seed"]
        exporter.write_key_values(meta_path, meta)
        capsys.readouterr()
        assert self.eval_checkpoint(tmp_path / "run", tiny_config_file, synth_dir) == 1
        assert "--seed is required" in capsys.readouterr().err
        code = self.eval_checkpoint(tmp_path / "run", tiny_config_file, synth_dir, "--seed", "9")
        assert code == 0

    def test_export_curves_records_seed(self, tmp_path, tiny_config_file):
        assert self.run(tiny_config_file, tmp_path / "run") == 0
        out = tmp_path / "curves"
        assert main(["export-curves", "--telemetry", str(tmp_path / "run" / "telemetry.csv"),
                     "--out", str(out), "--window", "2", "--seed", "9"]) == 0
        assert manifest(out)["seed"] == 9


class TestDataCommands:
    def test_synth_layout(self, synth_dir):
        assert (synth_dir / MANIFEST_FILE).is_file()
        outputs = manifest(synth_dir)["outputs"]
        assert set(outputs) == {"catalog", "text", "labels", "noisy_labels", "features_root"}
        assert len(list((synth_dir / "labels" / "gt").iterdir())) == 3

    def test_stats(self, tmp_path, synth_dir):
        out = tmp_path / "stats"
        assert main(["stats", "--labels", str(synth_dir / "labels" / "gt"),
                     "--catalog", str(synth_dir / "catalog.tsv"), "--out", str(out)]) == 0
        assert sorted(p.name for p in out.iterdir()) == [
            "classes_per_image.csv", "cooccurrence.csv", "positives_negatives.csv", MANIFEST_FILE,
        ]

    def test_pseudomask(self, tmp_path, synth_dir):
        out = tmp_path / "masks"
        code = main(["pseudomask", "--features", str(synth_dir / "features"),
                     "--text", str(synth_dir / "text.dtn1"), "--stride", "4",
                     "--allowed-from-labels", str(synth_dir / "labels" / "gt"),
                     "--out", str(out), "--threads", "2"])
        assert code == 0
        masks = sorted(p.name for p in out.glob("*.pgm"))
        assert masks == ["scene_0000.pgm", "scene_0001.pgm", "scene_0002.pgm"]
        assert manifest(out)["extra"] == {"scenes": 3}

    def test_ablate(self, tmp_path, tiny_config_file, capsys):
        out = tmp_path / "ablate"
        assert main(["ablate", "--config", str(tiny_config_file), "--seed", "2",
                     "--arms", "base,local+carb", "--out", str(out)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [line.split("\t")[0] for line in lines] == ["base", "local+carb"]
        assert (out / "summary.csv").is_file()

    def test_ablate_unknown_arm(self, tmp_path, tiny_config_file):
        assert main(["ablate", "--config", str(tiny_config_file), "--seed", "2",
                     "--arms", "wide", "--out", str(tmp_path / "x")]) == 1

    def test_ablate_weight_sweep(self, tmp_path, tiny_config_file, capsys):
        out = tmp_path / "weights"
        assert main(["ablate", "--config", str(tiny_config_file), "--seed", "2",
                     "--sweep", "weight", "--out", str(out)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [line.split("\t")[0] for line in lines] == [f"w={w:g}" for w in WEIGHT_SWEEP]
        assert manifest(out)["extra"] == {"sweep": "weight", "seeds": [2]}

    def test_ablate_resize_sweep(self, tmp_path, tiny_config_file, capsys):
        assert main(["ablate", "--config", str(tiny_config_file), "--seed", "2",
                     "--sweep", "resize", "--out", str(tmp_path / "resize")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [line.split("\t")[0] for line in lines] == [
            "r=0.5", "r=1", "r=1.5", "r=2", "r=1-2",
        ]

    def test_ablate_unknown_sweep(self, tmp_path, tiny_config_file, capsys):
        assert main(["ablate", "--config", str(tiny_config_file), "--seed", "2",
                     "--sweep", "crop", "--out", str(tmp_path / "x")]) == 1
        assert "--sweep" in capsys.readouterr().err

    def test_synth_rejects_zero_local_views(self, tmp_path, tiny_config_file, capsys):
        assert main(["synth", "--config", str(tiny_config_file), "--seed", "9",
                     "--out", str(tmp_path / "s"), "--local-views", "0"]) == 1
        assert "--local-views" in capsys.readouterr().err
