import csv
import io
import json

import numpy as np
import pytest

from memroute import ckpt, netpbm
from memroute.cli import main
from memroute.encoder import init_student, named_parameters
from memroute.objectives import load_dataset


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "8", "--size", "64", "--seed", "5"]) == 0
    (root / "cfg.json").write_text(json.dumps({"teacher-steps": 20, "optimizer": "sgd", "lr": 0.05}))
    rc = main(["train", "--data", str(root / "data"), "--config", str(root / "cfg.json"),
               "--out", str(root / "ck"), "--steps", "20", "--seed", "2", "--pretrain-teacher"])
    assert rc == 0
    return root


class TestGenData:
    def test_same_seed_identical_trees(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-data", "--out", str(tmp_path / name), "--count", "3", "--size", "32",
                         "--difficulty", "hard", "--seed", "9"]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_zero_count(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--count", "0", "--size", "32", "--seed", "1"]) == 0
        assert json.loads((tmp_path / "index.json").read_text())["samples"] == []

    def test_files_parse_back(self, workspace):
        images, alphas, index = load_dataset(workspace / "data")
        assert len(index["samples"]) == 8 and images.shape == (8, 3, 64, 64)
        for entry in index["samples"]:
            assert netpbm.read(workspace / "data" / entry["alpha"]).shape == (64, 64)
            assert netpbm.read(workspace / "data" / entry["fg"]).shape == (64, 64, 3)

    def test_unwritable_target(self, tmp_path, capsys):
        (tmp_path / "file").write_text("x")
        rc = main(["gen-data", "--out", str(tmp_path / "file" / "sub"), "--count", "1", "--size", "32"])
        assert rc == 1 and "error" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, workspace):
        ck = workspace / "ck"
        assert json.loads((ck / "manifest.json").read_text())["role"] == "student"
        assert json.loads((ck / "teacher" / "manifest.json").read_text())["role"] == "teacher"
        lines = (ck / "train_log.csv").read_text().splitlines()
        assert lines[0] == "step,matting,distill,compress,total,gamma_hard" and len(lines) == 21

    def test_zero_steps_is_initialisation(self, workspace, tmp_path):
        rc = main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "cfg.json"),
                   "--out", str(tmp_path / "s"), "--steps", "0", "--seed", "4",
                   "--teacher", str(workspace / "ck" / "teacher")])
        assert rc == 0
        teacher, run_cfg, _ = ckpt.load(workspace / "ck" / "teacher")
        fresh = dict(named_parameters(init_student(run_cfg.encoder, teacher, 4)))
        student, _, _ = ckpt.load(tmp_path / "s")
        for name, p in named_parameters(student):
            assert p.data.tobytes() == fresh[name].data.tobytes()

    def test_log_identical_across_runs(self, workspace, tmp_path):
        args = ["train", "--data", str(workspace / "data"), "--config", str(workspace / "cfg.json"),
                "--steps", "50", "--seed", "8", "--teacher", str(workspace / "ck" / "teacher")]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()

    def test_needs_teacher_source(self, workspace, tmp_path, capsys):
        rc = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), "--steps", "1"])
        assert rc == 2 and "--pretrain-teacher" in capsys.readouterr().err

    def test_unknown_config_key(self, workspace, tmp_path, capsys):
        (tmp_path / "bad.json").write_text('{"lerning-rate": 1}')
        rc = main(["train", "--data", str(workspace / "data"), "--config", str(tmp_path / "bad.json"),
                   "--out", str(tmp_path / "o"), "--steps", "1", "--pretrain-teacher"])
        assert rc == 2 and "lerning-rate" in capsys.readouterr().err

    def test_image_size_mismatch(self, workspace, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"img-size": 32}')
        rc = main(["train", "--data", str(workspace / "data"), "--config", str(tmp_path / "c.json"),
                   "--out", str(tmp_path / "o"), "--steps", "1", "--pretrain-teacher"])
        assert rc == 2


class TestInfer:
    def run(self, workspace, out, *extra):
        image = workspace / "data" / "sample_0001_image.ppm"
        return main(["infer", "--ckpt", str(workspace / "ck"), "--image", str(image), "--out-alpha", str(out),
                     *extra])

    def test_report_and_alpha(self, workspace, tmp_path, capsys):
        assert self.run(workspace, tmp_path / "a.pgm", "--export-masks", str(tmp_path / "m")) == 0
        out = capsys.readouterr().out
        gamma_part, cost_part = out.split("block,routed_tokens")
        rows = list(csv.reader(io.StringIO(gamma_part)))
        assert rows[0] == ["block", "gamma"] and [r[0] for r in rows[1:]] == ["0", "1", "all"]
        cost = list(csv.DictReader(io.StringIO("block,routed_tokens" + cost_part)))
        for r, g in zip(cost, rows[1:3]):
            n = int(r["routed_tokens"])
            assert float(g[1]) == n / 16 and int(r["attn_map_bytes"]) == 4 * 2 * n * n
        masks = sorted(p.name for p in (tmp_path / "m").iterdir())
        assert masks == ["mask_s0_b0.pgm", "mask_s0_b1.pgm"]
        assert netpbm.read(tmp_path / "a.pgm").shape == (64, 64)

    def test_deterministic(self, workspace, tmp_path, capsys):
        self.run(workspace, tmp_path / "a.pgm")
        first = capsys.readouterr().out
        self.run(workspace, tmp_path / "b.pgm")
        assert capsys.readouterr().out == first
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_large_cap_is_uncapped(self, workspace, tmp_path):
        self.run(workspace, tmp_path / "a.pgm")
        self.run(workspace, tmp_path / "b.pgm", "--max-tokens", "16")
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_zero_cap_runs_all_ltrm(self, workspace, tmp_path, capsys):
        assert self.run(workspace, tmp_path / "z.pgm", "--max-tokens", "0") == 0
        assert "all,0.0" in capsys.readouterr().out
        assert netpbm.read(tmp_path / "z.pgm").shape == (64, 64)

    def test_size_mismatch(self, workspace, tmp_path):
        netpbm.write(tmp_path / "small.ppm", np.zeros((32, 32, 3), np.uint8))
        rc = main(["infer", "--ckpt", str(workspace / "ck"), "--image", str(tmp_path / "small.ppm"),
                   "--out-alpha", str(tmp_path / "o.pgm")])
        assert rc == 2


class TestBenchCost:
    def rows(self, tmp_path, resolutions, ratios):
        out = tmp_path / "bench.csv"
        assert main(["bench-cost", "--resolutions", resolutions, "--ratios", ratios, "--out", str(out)]) == 0
        text = out.read_text()
        assert text.splitlines()[0] == "H,W,N,ratio,analytic_bytes,measured_bytes,flops"
        return list(csv.DictReader(io.StringIO(text)))

    def test_full_attention_bytes(self, tmp_path):
        for r in self.rows(tmp_path, "64,128", "1"):
            n = int(r["N"])
            assert int(r["analytic_bytes"]) == 4 * 2 * n * n

    def test_quarter_ratio_sixteenth_bytes(self, tmp_path):
        rows = self.rows(tmp_path, "256", "1,0.25")
        assert int(rows[1]["analytic_bytes"]) * 16 == int(rows[0]["analytic_bytes"])

    def test_doubling_resolution(self, tmp_path):
        rows = self.rows(tmp_path, "128,256", "1")
        assert int(rows[1]["analytic_bytes"]) == 16 * int(rows[0]["analytic_bytes"])

    def test_measured_grows_with_tokens(self, tmp_path):
        rows = self.rows(tmp_path, "256,512", "1")
        assert int(rows[1]["measured_bytes"]) > 4 * int(rows[0]["measured_bytes"])

    def test_bad_ratio(self, tmp_path):
        assert main(["bench-cost", "--ratios", "1.5", "--out", str(tmp_path / "x.csv")]) == 2


class TestVerify:
    def test_routing_suite(self, capsys):
        assert main(["verify", "--suite", "routing"]) == 0
        out = capsys.readouterr().out
        assert "gumbel" in out and "threshold" in out

    def test_all(self, capsys):
        assert main(["verify", "--suite", "all"]) == 0
        out = capsys.readouterr().out
        assert "full-loss-grad" in out and "full-routing block" in out and "FAIL" not in out

    def test_bad_suite(self):
        with pytest.raises(SystemExit) as exc:
            main(["verify", "--suite", "nope"])
        assert exc.value.code == 2
