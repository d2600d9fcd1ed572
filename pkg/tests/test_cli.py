import json

import pytest

from neckforge import cli
from neckforge.mesh import read_obj, read_ply


def run(args, capsys=None):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr() if capsys else None
    return code, out


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.txt"
    p.write_text("# minimal theorem-1 build\nm = 2\nN = 8\np = 2\nk_max = 2\n")
    return p


class TestSolveNeck:
    def test_m2(self, capsys):
        code, out = run(["solve-neck", "--m", 2, "--R", 10, "--H", 1], capsys)
        assert code == 0
        line = [ln for ln in out.out.splitlines() if ln.startswith("rho_small")][0]
        assert abs(float(line.split("=")[1]) - 0.22224) < 1e-5
        assert "rho_chain: PASS" in out.out

    def test_no_solution(self, capsys):
        code, out = run(["solve-neck", "--m", 2, "--R", 10, "--H", 1e9], capsys)
        assert code == 2 and "H_max" in out.err

    def test_m3_bracket(self, capsys):
        code, out = run(["solve-neck", "--m", 3, "--R", 10, "--H", 0.1], capsys)
        rho = float([ln for ln in out.out.splitlines() if ln.startswith("rho_small")][0].split("=")[1])
        assert code == 0 and 0.07628 <= rho <= 0.15256
        assert "rho_bracket: PASS" in out.out

    def test_usage_error(self, capsys):
        code, _ = run(["solve-neck", "--m", 2], capsys)
        assert code == 1
        code, _ = run(["solve-neck", "--m", "two", "--R", 1, "--H", 1], capsys)
        assert code == 1


class TestBuild:
    def test_outputs_and_manifest(self, small_cfg, tmp_path, capsys):
        out = tmp_path / "run"
        code, res = run(["build", "--config", small_cfg, "--out", out], capsys)
        assert code == 0
        man = json.loads((out / "manifest.json").read_text())
        assert sorted(p.name for p in out.glob("stage-*.ply")) == ["stage-1.ply", "stage-2.ply"]
        assert set(man["files"]) >= {"config.txt", "ledger.csv", "convergence.csv", "lam-1.csv"}
        header = (out / "convergence.csv").read_text().splitlines()[0]
        assert header == "k,r0k,Hk,rhok,c0_diff,cj_alpha_diff,fitted_slope"
        # N = 8 holes are below double resolution: no global mesh, and the manifest says so
        assert not (out / "complex.ply").exists() and "per-stage" in man["notes"][0]

    def test_deterministic(self, small_cfg, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        run(["build", "--config", small_cfg, "--out", a], capsys)
        run(["build", "--config", small_cfg, "--out", b], capsys)
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        assert ma["files"] == mb["files"]

    def test_theorem2_disks(self, tmp_path, capsys):
        cfg = tmp_path / "t2.txt"
        cfg.write_text("m = 2\nN = 4\np = 2\nk_max = 2\nmodel = floating_disk\ntheorem_mode = T2\n")
        out = tmp_path / "t2"
        assert run(["build", "--config", cfg, "--out", out, "--format", "obj"], capsys)[0] == 0
        mesh = read_obj(out / "complex.obj")
        assert mesh.components("disk") == ["disk-1", "disk-2"]
        assert read_obj(out / "stage-2.obj").components("disk") == ["disk-2"]

    def test_invalid_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.txt"
        cfg.write_text("m = 2\nN = 8\np = 9\n")
        code, out = run(["build", "--config", cfg, "--out", tmp_path / "x"], capsys)
        assert code == 1 and "1<p<N" in out.err
        cfg.write_text("m = 3\nN = 8\nj = 2\nalpha = 0.5\n")
        code, out = run(["build", "--config", cfg, "--out", tmp_path / "x"], capsys)
        assert code == 1 and "m(N-p) > (j+alpha)N" in out.err

    def test_stages_flag(self, small_cfg, tmp_path, capsys):
        out = tmp_path / "one"
        run(["build", "--config", small_cfg, "--stages", 1, "--out", out], capsys)
        assert [p.name for p in out.glob("stage-*.ply")] == ["stage-1.ply"]


class TestVerify:
    def test_base_only_passes(self, tmp_path, capsys):
        cfg = tmp_path / "base.txt"
        cfg.write_text("m = 2\nN = 8\np = 2\nk_max = 0\n")
        out = tmp_path / "v"
        code, res = run(["verify", "--config", cfg, "--out", out, "--jobs", 2], capsys)
        assert code == 0, res.out
        rep = json.loads((out / "report.json").read_text())
        assert rep["all_pass"] and {"base.minimality", "density.ratio"} <= {c["name"] for c in rep["checks"]}
        first = (out / "report.json").read_bytes()
        run(["verify", "--config", cfg, "--out", out], capsys)
        assert (out / "report.json").read_bytes() == first

    def test_negative_control_exit_3(self, tmp_path, capsys):
        cfg = tmp_path / "base.txt"
        cfg.write_text("m = 2\nN = 8\np = 2\nk_max = 0\n")
        code, res = run(["verify", "--config", cfg, "--out", tmp_path / "neg", "--lam-one"], capsys)
        assert code == 3 and "reference.first_variation" in res.err


class TestExport:
    def test_stage_mesh(self, small_cfg, tmp_path, capsys):
        out = tmp_path / "s.ply"
        assert run(["export", "--config", small_cfg, "--stage", 1, "--out", out], capsys)[0] == 0
        mesh = read_ply(out)
        assert mesh.euler_characteristic() == 0 and mesh.comments[0].startswith("frame neck-1")

    def test_global_unresolved(self, small_cfg, tmp_path, capsys):
        code, res = run(["export", "--config", small_cfg, "--out", tmp_path / "g.ply"], capsys)
        assert code == 1 and "per-stage" in res.err

    def test_m3_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "m3.txt"
        cfg.write_text("m = 3\nk_max = 1\n")
        assert run(["export", "--config", cfg, "--stage", 1, "--out", tmp_path / "x.ply"], capsys)[0] == 1


def test_sweep(tmp_path, capsys):
    cfg = tmp_path / "s.txt"
    cfg.write_text("m = 2\nk_max = 2\n")
    out = tmp_path / "sw"
    code, _ = run(["sweep", "--config", cfg, "--N", "4,8", "--p", "2,9", "--H", "1,1e9", "--out", out], capsys)
    assert code == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert len(rows) == 5 and sum("invalid" in r for r in rows) == 2
    neck = (out / "neck_sweep.csv").read_text().splitlines()
    assert "no solution" in neck[2] and neck[1].endswith("ok")


def test_jobs_env(monkeypatch):
    ns = cli.build_parser().parse_args(["build"])
    monkeypatch.setenv("NECKFORGE_JOBS", "3")
    assert cli._jobs(ns) == 3
    ns.jobs = 2
    assert cli._jobs(ns) == 2
