import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from olbp import pngio
from olbp.cli import main, run_transform
from olbp.dataset import DatasetManifest
from olbp.fixation import read_fixations

from oracles import parse_grid

FIXTURES = Path(__file__).parent / "fixtures" / "transform"


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "provenance.json"}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """A 16x16 synthetic set, a 3-step tiny-preset training run and its predictions."""
    root = tmp_path_factory.mktemp("run")
    assert main(["--root", str(root), "synth", "--out", "ds", "--images", "5", "--subjects", "2", "--size", "16",
                 "--objects", "2", "2", "--object-size", "4", "7", "--seed", "1"]) == 0
    assert main(["--root", str(root), "train", "--manifest", "ds/manifest.jsonl", "--preset", "tiny",
                 "--iters", "3", "--lr-drop-iter", "2", "--iter-size", "2", "--checkpoint-every", "2",
                 "--out", "run", "--seed", "0"]) == 0
    assert main(["--root", str(root), "infer", "--checkpoint", "run/final.olbp", "--manifest", "ds/manifest.jsonl",
                 "--out", "pred"]) == 0
    return root


class TestSynth:
    def test_counts_and_determinism(self, tmp_path, capsys):
        argv = ["synth", "--out", "ds", "--images", "40", "--subjects", "4", "--size", "64", "--seed", "7"]
        assert main(["--root", str(tmp_path / "a")] + argv) == 0
        out = capsys.readouterr().out
        assert "160 samples from 40 images" in out
        m = DatasetManifest.read(tmp_path / "a" / "ds" / "manifest.jsonl")
        assert len(m.records) == 160
        assert m.stats()["train"] == 4 * 32 and m.stats()["test"] == 4 * 8
        assert main(["--root", str(tmp_path / "b")] + argv) == 0
        assert tree_bytes(tmp_path / "a" / "ds") == tree_bytes(tmp_path / "b" / "ds")
        prov = json.loads((tmp_path / "a" / "ds" / "provenance.json").read_text())
        assert prov["seed"] == 7 and "numpy" in prov["versions"]

    def test_bg_fix_prob(self, tmp_path):
        argv = ["--root", str(tmp_path), "synth", "--out", "ds", "--images", "60", "--subjects", "3",
                "--bg-fix-prob", "0.5", "--seed", "2"]
        assert main(argv) == 0
        s = DatasetManifest.read(tmp_path / "ds" / "manifest.jsonl").stats()
        assert 0 < s["constrained"] < s["total"]


class TestTransform:
    def test_golden(self, tmp_path, capsys):
        code = main(["transform", "--sem-dir", str(FIXTURES / "semantic"), "--fix-dir", str(FIXTURES / "fixations"),
                     "--out", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "rejected a_s02: no gazed object" in out
        assert "constrained: 3 (75.0%)  unconstrained: 1 (25.0%)" in out
        m = DatasetManifest.read(tmp_path / "manifest.jsonl")
        assert [r.sample_id for r in m.records] == ["a_s00", "a_s01", "b_s00", "b_s01"]
        for r in m.records:
            gt = parse_grid((FIXTURES / "expected" / f"{r.sample_id}.gt.txt").read_text())
            bnd = parse_grid((FIXTURES / "expected" / f"{r.sample_id}.boundary.txt").read_text())
            np.testing.assert_array_equal(pngio.load_mask(tmp_path / r.binary_gt_path), gt)
            np.testing.assert_array_equal(pngio.load_mask(tmp_path / r.boundary_gt_path), bnd)
        assert (tmp_path / "rejected.txt").read_text() == "a_s02\n"

    def test_noise(self, tmp_path):
        m = run_transform(FIXTURES / "semantic", FIXTURES / "fixations", tmp_path, noise=0.15, seed=3)
        sem = pngio.load_labels(FIXTURES / "semantic" / "a.png")
        rec = next(r for r in m.records if r.sample_id == "a_s00")
        fm = read_fixations(tmp_path / rec.fixation_path, sem.shape[1], sem.shape[0])
        assert len(fm) == 3 + 1
        assert sem[fm.points[-1][1], fm.points[-1][0]] == 0
        again = run_transform(FIXTURES / "semantic", FIXTURES / "fixations", tmp_path / "2", noise=0.15, seed=3)
        assert [r.constrained for r in again.records] == [r.constrained for r in m.records]
        assert not any(r.constrained for r in m.records)

    def test_workers_same_output(self, tmp_path):
        run_transform(FIXTURES / "semantic", FIXTURES / "fixations", tmp_path / "a", n_workers=1)
        run_transform(FIXTURES / "semantic", FIXTURES / "fixations", tmp_path / "b", n_workers=2)
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_missing_inputs(self, tmp_path):
        assert main(["transform", "--sem-dir", str(tmp_path), "--fix-dir", str(tmp_path), "--out",
                     str(tmp_path / "o")]) == 2


class TestTrain:
    def test_full_preset_dry_run(self, capsys):
        assert main(["train", "--preset", "paper", "--dry-run"]) == 0
        out = capsys.readouterr().out
        assert "lr 8e-08  iters 30,000  lr drop at 14,000" in out
        assert "parameters 113,445,990" in out

    def test_ba_star(self, capsys):
        assert main(["train", "--ablation", "ba_star", "--dry-run"]) == 0
        assert "ablation ba_star" in capsys.readouterr().out

    def test_needs_manifest(self):
        assert main(["train"]) == 1

    def test_bad_config(self, tmp_path):
        (tmp_path / "c.ini").write_text("[train]\nbogus = 1\n")
        assert main(["--root", str(tmp_path), "train", "--config", "c.ini", "--dry-run"]) == 1

    def test_outputs(self, tiny_run):
        run = tiny_run / "run"
        for name in ("config.ini", "train_log.csv", "final.olbp", "provenance.json", "checkpoints/ckpt_000002.olbp"):
            assert (run / name).exists(), name
        assert len((run / "train_log.csv").read_text().splitlines()) == 4

    def test_resume_matches(self, tiny_run, tmp_path):
        shutil.copytree(tiny_run / "ds", tmp_path / "ds")
        assert main(["--root", str(tmp_path), "train", "--manifest", "ds/manifest.jsonl", "--preset", "tiny",
                     "--iters", "3", "--lr-drop-iter", "2", "--iter-size", "2", "--checkpoint-every", "2", "--out", "r2",
                     "--seed", "0",
                     "--resume", str(tiny_run / "run" / "checkpoints" / "ckpt_000002.olbp")]) == 0
        assert (tmp_path / "r2" / "final.olbp").read_bytes() == (tiny_run / "run" / "final.olbp").read_bytes()


class TestInferEval:
    def test_batch_predictions(self, tiny_run):
        m = DatasetManifest.read(tiny_run / "ds" / "manifest.jsonl")
        test_ids = [r.sample_id for r in m.split_records("test")]
        pred_files = sorted(p.stem for p in (tiny_run / "pred").glob("*.png"))
        assert pred_files == sorted(test_ids)
        assert pngio.load_probability(tiny_run / "pred" / f"{test_ids[0]}.png").shape == (16, 16)

    def test_single_image_deterministic(self, tiny_run):
        rec = DatasetManifest.read(tiny_run / "ds" / "manifest.jsonl").records[0]
        outs = []
        for k in range(2):
            assert main(["--root", str(tiny_run), "infer", "--checkpoint", "run/final.olbp",
                         "--image", f"ds/{rec.image_path}", "--fixations", f"ds/{rec.fixation_path}",
                         "--out", f"single{k}/p.png"]) == 0
            outs.append((tiny_run / f"single{k}" / "p.png").read_bytes())
        assert outs[0] == outs[1]

    def test_eval_perfect(self, tiny_run, tmp_path, capsys):
        m = DatasetManifest.read(tiny_run / "ds" / "manifest.jsonl")
        for r in m.split_records("test"):
            shutil.copy(tiny_run / "ds" / r.binary_gt_path, tmp_path / f"{r.sample_id}.png")
        assert main(["eval", "--pred-dir", str(tmp_path), "--manifest", str(tiny_run / "ds" / "manifest.jsonl"),
                     "--out", str(tmp_path / "rep"), "--js"]) == 0
        summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
        assert set(summary["means_percent"].values()) == {100.0}
        assert "mean JS" in capsys.readouterr().out
        assert len(summary["mean_js"]) == len({r.image_id for r in m.split_records("test")})

    def test_eval_missing(self, tiny_run, tmp_path, capsys):
        preds = sorted((tiny_run / "pred").glob("*.png"))
        for p in preds[1:]:
            shutil.copy(p, tmp_path / p.name)
        code = main(["eval", "--pred-dir", str(tmp_path), "--manifest", str(tiny_run / "ds" / "manifest.jsonl"),
                     "--out", str(tmp_path / "rep")])
        assert code == 2
        assert f"missing prediction for sample {preds[0].stem}" in capsys.readouterr().err

    def test_eval_reports_identical(self, tiny_run, tmp_path):
        for k in range(2):
            main(["eval", "--pred-dir", str(tiny_run / "pred"), "--manifest", str(tiny_run / "ds" / "manifest.jsonl"),
                  "--out", str(tmp_path / f"r{k}")])
        for name in ("per_sample.csv", "summary.json"):
            assert (tmp_path / "r0" / name).read_bytes() == (tmp_path / "r1" / name).read_bytes()


class TestGradcheckCommand:
    def test_some_ops(self, capsys):
        assert main(["gradcheck", "--ops", "sigmoid,add", "--seeds", "2"]) == 0
        assert capsys.readouterr().out.count("PASS") == 4

    def test_network_tiny(self, capsys):
        assert main(["gradcheck", "--network", "tiny", "--params", "20"]) == 0
        assert "PASS  network tiny" in capsys.readouterr().out

    @pytest.mark.parametrize("argv", [["gradcheck", "--ops", "nope"], ["gradcheck", "--network", "huge"],
                                      ["gradcheck"], ["frobnicate"], []])
    def test_usage_errors(self, argv):
        assert main(argv) == 1
