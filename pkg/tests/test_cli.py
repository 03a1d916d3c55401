import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pseudoseg.cli import main
from pseudoseg.config import config_from_dict, load_config
from pseudoseg.dataset import load_dataset, parse_dataset, write_dataset
from pseudoseg.imaging import ImageBuffer, read_png, write_png
from pseudoseg.modelmath import Checkpoint

from synthetic import build_pipeline_fixture, run_pipeline, strip_timestamp

HERE = Path(__file__).parent
GOLDEN = HERE / "fixtures" / "golden"
METRICS = HERE / "fixtures" / "metrics"


@pytest.fixture
def fx(tmp_path, monkeypatch):
    root = tmp_path / "fx"
    build_pipeline_fixture(root)
    monkeypatch.chdir(root)
    return root


def stdout_pairs(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def set_source(root, records):
    with open(root / "predictions_source.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def edit_config(root, **sections):
    path = root / "config.json"
    doc = json.loads(path.read_text())
    for k, v in sections.items():
        doc[k] = v if not isinstance(v, dict) else {**doc.get(k, {}), **v}
    path.write_text(json.dumps(doc))


class TestEnhance:
    def test_chain_none_copies_bytes(self, fx):
        assert main(["enhance", "--config", "config.json", "--chain", "none", "--out-dir", "o"]) == 0
        for p in sorted((fx / "unlabeled").glob("*.png")):
            assert (fx / "o" / p.name).read_bytes() == p.read_bytes()
        prov = json.loads((fx / "o" / "provenance.json").read_text())
        assert prov["chain"] == "none" and len(prov["files"]) == 12
        assert prov["seed"] == 1234 and len(prov["config_digest"]) == 64

    def test_soft_on_constant_png(self, tmp_path):
        (tmp_path / "in").mkdir()
        write_png(ImageBuffer(np.full((32, 32), 100, np.uint8)), tmp_path / "in" / "c.png")
        assert main(["enhance", "--in-dir", str(tmp_path / "in"), "--out-dir", str(tmp_path / "out"),
                     "--chain", "soft"]) == 0
        px = read_png(tmp_path / "out" / "c.png").pixels.astype(int)
        assert px.max() - px.min() <= 1

    def test_rerun_identical_except_timestamp(self, fx):
        for d in ("a", "b"):
            assert main(["enhance", "--config", "config.json", "--out-dir", d]) == 0
        for p in sorted((fx / "a").iterdir()):
            if p.name == "provenance.json":
                assert strip_timestamp(p.read_bytes()) == strip_timestamp((fx / "b" / p.name).read_bytes())
            else:
                assert p.read_bytes() == (fx / "b" / p.name).read_bytes()

    def test_bad_file_continues(self, fx):
        (fx / "unlabeled" / "broken.png").write_bytes(b"not a png")
        assert main(["enhance", "--config", "config.json", "--out-dir", "o"]) == 1
        prov = json.loads((fx / "o" / "provenance.json").read_text())
        assert [e["file"] for e in prov["errors"]] == ["broken.png"]
        assert len(prov["files"]) == 12 and (fx / "o" / "sten_12.png").exists()

    def test_dry_run_touches_nothing(self, fx):
        assert main(["enhance", "--config", "config.json", "--out-dir", "o", "--dry-run"]) == 0
        assert not (fx / "o").exists()


class TestPseudoLabel:
    ARGS = ["pseudo-label", "--config", "config.json", "--out", "p.json"]

    def test_golden(self, fx, capsys):
        assert main(self.ARGS) == 0
        assert (fx / "p.json").read_bytes() == (GOLDEN / "pseudo12.json").read_bytes()
        assert stdout_pairs(capsys.readouterr().out) == {"images": "12", "annotations": "33"}

    def test_adapter_emits_nothing(self, fx):
        set_source(fx, [])
        assert main(self.ARGS) == 0
        d = load_dataset(fx / "p.json")
        assert len(d.images) == 12 and d.annotations == ()

    def test_ten_records_four_below(self, fx):
        scores = [0.1, 0.2, 0.3, 0.49, 0.5, 0.55, 0.6, 0.7, 0.8, 0.99]
        set_source(fx, [{"image_id": 1 + k, "category_id": 1, "segmentation": [[0, 0, 8, 0, 8, 8, 0, 8]], "score": s}
                        for k, s in enumerate(scores)])
        assert main(self.ARGS) == 0
        assert len(load_dataset(fx / "p.json").annotations) == 6

    def test_tau_flag_overrides(self, fx, capsys):
        assert main(self.ARGS + ["--tau", "0.9"]) == 0
        kept = load_dataset(fx / "p.json").annotations
        assert kept and all(a.score >= 0.9 for a in kept)

    def test_adapter_failure_exit_2(self, fx, capsys):
        edit_config(fx, adapter={"command": ["python3", "stub_adapter.py", "--source", "predictions_source.jsonl",
                                             "--fail"]})
        assert main(self.ARGS) == 2
        err = capsys.readouterr().err
        last = json.loads(err.strip().splitlines()[-1])
        assert last["error"] == "AdapterError" and "out of memory" in last["diagnostics"]
        assert not (fx / "p.json").exists()

    def test_unknown_image_exit_1(self, fx):
        set_source(fx, [{"image_id": 99, "category_id": 1, "segmentation": [[0, 0, 8, 0, 8, 8]], "score": 0.9}])
        doc = json.loads((fx / "config.json").read_text())
        doc["adapter"] = {"mode": "file", "path": "predictions_source.jsonl"}
        (fx / "config.json").write_text(json.dumps(doc))
        assert main(self.ARGS) == 1

    def test_dry_run(self, fx):
        set_source(fx, [])
        assert main(self.ARGS + ["--dry-run"]) == 0
        assert not (fx / "p.json").exists()

    def test_enhance_before_inference(self, fx):
        doc = json.loads((fx / "config.json").read_text())
        doc["pseudo_label"] = {"enhance_before_inference": True}
        (fx / "config.json").write_text(json.dumps(doc))
        assert main(self.ARGS) == 0
        d = load_dataset(fx / "p.json")
        assert d.provenance["enhance_before_inference"] is True
        assert len(d.annotations) == 33


class TestMergeEvaluate:
    def test_merge_counts(self, fx, capsys):
        assert main(["pseudo-label", "--config", "config.json", "--out", "p.json"]) == 0
        assert main(["merge", "labeled/labeled.json", "p.json", "--out", "m.json"]) == 0
        out = stdout_pairs(capsys.readouterr().out)
        assert out["images"] == "16" and out["annotations"] == "43"
        m = load_dataset(fx / "m.json")
        assert m.provenance["merged_from"]["pseudo"]["first_image_id"] == 5

    def test_merge_dry_run(self, fx):
        assert main(["merge", "labeled/labeled.json", "labeled/labeled.json", "--out", "m.json", "--dry-run"]) == 0
        assert not (fx / "m.json").exists()

    def test_evaluate_golden(self, tmp_path, capsys):
        out = tmp_path / "r.json"
        assert main(["evaluate", str(METRICS / "mixed_pred.json"), str(METRICS / "mixed_gt.json"),
                     "--out", str(out), "--csv", str(tmp_path / "r.csv")]) == 0
        printed = stdout_pairs(capsys.readouterr().out)
        assert printed == {"micro_f1": "0.666667", "macro_f1": "0.600000", "map50": "0.611661"}
        got = json.loads(out.read_text())
        assert got.pop("provenance")["command"] == "evaluate"
        assert got == json.loads((METRICS / "mixed_report.json").read_text())

    def test_evaluate_perfect(self, capsys):
        gt = str(METRICS / "mixed_gt.json")
        assert main(["evaluate", gt, gt]) == 0
        assert set(stdout_pairs(capsys.readouterr().out).values()) == {"1.000000"}

    def test_evaluate_table_mismatch(self):
        assert main(["evaluate", str(METRICS / "two_pred.json"), str(METRICS / "mixed_gt.json")]) == 1

    def test_iou_threshold_flag(self, capsys):
        args = ["evaluate", str(METRICS / "mixed_pred.json"), str(METRICS / "mixed_gt.json")]
        assert main(args + ["--iou-threshold", "0.9"]) == 0
        # the 0.8 IoU match for class 2 no longer counts
        assert stdout_pairs(capsys.readouterr().out)["micro_f1"] == f"{4 / 9:.6f}"


class TestWeightsAndLoss:
    def test_loss_default_gains(self, capsys):
        assert main(["loss", "--components", "1", "1", "1", "1"]) == 0
        value = float(stdout_pairs(capsys.readouterr().out)["loss"])
        assert abs(value - 10.468) <= 1e-12

    def test_loss_custom_gains(self, capsys):
        assert main(["loss", "--components", "1", "2", "3", "4", "--gains", "1", "0", "0", "0"]) == 0
        assert float(stdout_pairs(capsys.readouterr().out)["loss"]) == 4.0

    def test_loss_negative_exit_1(self):
        assert main(["loss", "--components", "-1", "1", "1", "1"]) == 1

    def test_avg_weights(self, tmp_path):
        paths = []
        for k, v in enumerate([0.0, 2.0]):
            p = tmp_path / f"c{k}.json"
            p.write_text(Checkpoint({"w": [v, v + 1]}).to_json())
            paths.append(str(p))
        assert main(["avg-weights", *paths, "--out", str(tmp_path / "avg.json")]) == 0
        out = Checkpoint.from_json((tmp_path / "avg.json").read_text())
        assert out.tensors["w"].tolist() == [1.0, 2.0]
        assert out.provenance["inputs"] == 2

    def test_avg_weights_mismatch(self, tmp_path):
        (tmp_path / "a.json").write_text(Checkpoint({"w": [1.0]}).to_json())
        (tmp_path / "b.json").write_text(Checkpoint({"v": [1.0]}).to_json())
        assert main(["avg-weights", str(tmp_path / "a.json"), str(tmp_path / "b.json"), "--out", "x.json"]) == 1


class TestAugment:
    def run(self, fx, out, jobs=1, seed=None):
        args = ["augment", "--config", "config.json", "--images-dir", "labeled", "--out-dir", out, "--jobs", str(jobs)]
        if seed is not None:
            args += ["--seed", str(seed)]
        assert main(args) == 0
        return {p.name: p.read_bytes() for p in sorted((fx / out).iterdir())}

    def test_deterministic_across_jobs(self, fx):
        assert self.run(fx, "a", 1) == self.run(fx, "b", 4)

    def test_seed_changes_output(self, fx):
        assert self.run(fx, "a", seed=1) != self.run(fx, "b", seed=2)

    def test_output_valid(self, fx):
        files = self.run(fx, "a")
        d = parse_dataset(files["dataset.json"])
        assert len(d.images) == 4
        assert d.provenance["augment"]["seed"] == 1234
        for a in d.annotations:
            im = d.image_index()[a.image_id]
            x, y, w, h = a.bbox
            assert 0 <= x and x + w <= im.width and 0 <= y and y + h <= im.height and a.area >= 1
        assert write_dataset(d) == files["dataset.json"].decode()


class TestExitCodesAndConfig:
    def test_missing_input(self, tmp_path):
        assert main(["merge", str(tmp_path / "nope.json"), str(tmp_path / "nope.json"), "--out", "x.json"]) == 1

    def test_malformed_dataset(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text('{"images": [,]}')
        assert main(["merge", str(tmp_path / "bad.json"), str(tmp_path / "bad.json"), "--out", "x.json"]) == 1
        assert "byte" in capsys.readouterr().err

    def test_bad_config(self, tmp_path):
        (tmp_path / "c.json").write_text('{"threshold": {"tau": 3}}')
        assert main(["loss", "--config", str(tmp_path / "c.json"), "--components", "1", "1", "1", "1"]) == 1

    def test_logs_are_json_lines(self, fx, capsys):
        main(["enhance", "--config", "config.json", "--out-dir", "o"])
        for line in capsys.readouterr().err.strip().splitlines():
            assert "level" in json.loads(line)

    def test_relative_paths_and_digest(self, fx, tmp_path):
        cfg = load_config(fx / "config.json")
        assert cfg.paths.labeled == str(fx / "labeled" / "labeled.json")
        moved = tmp_path / "moved"
        shutil.copytree(fx, moved)
        assert load_config(moved / "config.json").digest() == cfg.digest()
        assert cfg.with_overrides(seed=5).digest() != cfg.digest()

    def test_unknown_chain_rejected(self):
        with pytest.raises(Exception):
            config_from_dict({"enhance": {"chain": "sharpest"}})

    def test_module_entry_point(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "pseudoseg", "loss", "--components", "1", "1", "1", "1"],
                           capture_output=True, text=True)
        assert r.returncode == 0 and r.stdout.startswith("loss=10.46")


class TestPipeline:
    def test_golden_artifacts(self, tmp_path):
        build_pipeline_fixture(tmp_path / "fx")
        r = run_pipeline(tmp_path / "fx")
        assert r["codes"] == [0, 0, 0, 0]
        for name in ("pseudo12.json", "merged12.json", "report12.json"):
            assert r["artifacts"][name.replace("12", "")] == (GOLDEN / name).read_bytes()

    def test_jobs_and_location_independent(self, tmp_path):
        runs = []
        for k, jobs in enumerate([1, 4]):
            build_pipeline_fixture(tmp_path / f"fx{k}")
            runs.append(run_pipeline(tmp_path / f"fx{k}", jobs=jobs)["artifacts"])
        a, b = runs
        assert a.keys() == b.keys()
        for name in a:
            if name.endswith("provenance.json"):
                assert strip_timestamp(a[name]) == strip_timestamp(b[name])
            else:
                assert a[name] == b[name], name
