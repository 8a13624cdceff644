import json

import numpy as np
import pytest

from splatstyle import cli, scene, stylefield, trainer
from splatstyle.imageio import load_png

from fixture_styles import style_paths


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A synthesized scene plus a briefly trained field, shared by CLI tests."""
    root = tmp_path_factory.mktemp("cliwork")
    scene_ply = root / "scene.ply"
    rc = cli.main(["synth", "--kind", "spheres", "--n", "700", "--cams", "6",
                   "--seed", "3", "--width", "64", "--height", "48",
                   "--out", str(scene_ply)])
    assert rc == 0
    bundle = scene.load_bundle(scene_ply)
    styles = [(p.name, load_png(p)) for p in style_paths()[:2]]
    cfg = trainer.TrainConfig(iterations=250, seed=0, lr=2e-3)
    result = trainer.train(cfg, scene=bundle, styles=styles)
    field_path = root / "field.bin"
    stylefield.save_field(result.field, field_path)
    return {"root": root, "scene": scene_ply, "field": field_path,
            "styles": style_paths()}


class TestUsage:
    def test_no_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--bogus", "1"])
        assert exc.value.code == 2

    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--kind", "spheres"])
        assert exc.value.code == 2

    @pytest.mark.parametrize("sub", ["synth", "fit-colors", "train", "render",
                                     "interpolate", "eval", "serve"])
    def test_help_lists_flags(self, sub, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main([sub, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--out" in out or "--port" in out

    def test_runtime_error_exits_1(self, tmp_path):
        rc = cli.main(["render", "--scene", str(tmp_path / "missing.ply"),
                       "--out", str(tmp_path / "x.png")])
        assert rc == 1


class TestSynth:
    def test_deterministic_outputs(self, tmp_path):
        args = ["synth", "--kind", "lattice", "--n", "64", "--cams", "2",
                "--seed", "5", "--out"]
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        assert cli.main(args + [str(p1)]) == 0
        assert cli.main(args + [str(p2)]) == 0
        assert p1.read_bytes() == p2.read_bytes()
        cams = json.loads(p1.with_suffix(".cameras.json").read_text())
        assert len(cams["cameras"]) == 2

    def test_unknown_kind_exits_2(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["synth", "--kind", "torus", "--n", "4", "--cams", "1",
                      "--out", str(tmp_path / "t.ply")])


class TestRender:
    def test_render_twice_identical_bytes(self, workdir, tmp_path):
        out1, out2 = tmp_path / "v3a.png", tmp_path / "v3b.png"
        args = ["render", "--scene", str(workdir["scene"]),
                "--field", str(workdir["field"]),
                "--style", str(workdir["styles"][0]), "--cam", "3"]
        assert cli.main(args + ["--out", str(out1)]) == 0
        assert cli.main(args + ["--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_unstyled_sequence(self, workdir, tmp_path):
        outdir = tmp_path / "frames"
        rc = cli.main(["render", "--scene", str(workdir["scene"]),
                       "--out", str(outdir)])
        assert rc == 0
        frames = sorted(outdir.glob("view_*.png"))
        assert len(frames) == 6

    def test_field_without_style_fails(self, workdir, tmp_path):
        rc = cli.main(["render", "--scene", str(workdir["scene"]),
                       "--field", str(workdir["field"]),
                       "--cam", "0", "--out", str(tmp_path / "x.png")])
        assert rc == 1


class TestFitColors:
    def test_improves_and_writes_ply(self, workdir, tmp_path, capsys):
        out = tmp_path / "fitted.ply"
        rc = cli.main(["fit-colors", "--scene", str(workdir["scene"]),
                       "--iters", "60", "--out", str(out)])
        assert rc == 0
        assert out.exists()
        msg = capsys.readouterr().out
        first = float(msg.split("(first ")[1].split(")")[0])
        final = float(msg.split("final loss ")[1].split(" ")[0])
        assert final < first


class TestInterpolate:
    def test_grid_of_blends(self, workdir, tmp_path):
        outdir = tmp_path / "blend"
        rc = cli.main(["interpolate", "--scene", str(workdir["scene"]),
                       "--field", str(workdir["field"]),
                       *sum((["--style", str(p)] for p in workdir["styles"][:4]), []),
                       "--grid", "3", "--cam", "1", "--out", str(outdir)])
        assert rc == 0
        assert len(list(outdir.glob("blend_*.png"))) == 9

    def test_wrong_style_count(self, workdir, tmp_path):
        rc = cli.main(["interpolate", "--scene", str(workdir["scene"]),
                       "--field", str(workdir["field"]),
                       "--style", str(workdir["styles"][0]),
                       "--out", str(tmp_path / "b")])
        assert rc == 1


class TestEval:
    def test_reports_gss_beats_gs_adain(self, workdir, tmp_path, capsys):
        out = tmp_path / "report.csv"
        rc = cli.main(["eval", "--scene", str(workdir["scene"]),
                       "--field", str(workdir["field"]),
                       "--style", str(workdir["styles"][0]),
                       "--mode", "gss,gs-adain", "--pairing", "short",
                       "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "pair_id,view_a,view_b,wrmse,wperc,mode"
        rows = [ln.split(",") for ln in lines[1:]]
        gss = [float(r[3]) for r in rows if r[5] == "gss"]
        gsa = [float(r[3]) for r in rows if r[5] == "gs-adain"]
        assert len(gss) == 5 and len(gsa) == 5
        assert np.mean(gss) < np.mean(gsa)

    def test_neural_backend_without_weights_fails(self, workdir, tmp_path):
        rc = cli.main(["eval", "--scene", str(workdir["scene"]),
                       "--field", str(workdir["field"]),
                       "--style", str(workdir["styles"][0]),
                       "--mode", "gs-adain", "--backend", "neural",
                       "--out", str(tmp_path / "r.csv")])
        assert rc == 1
        # reset the module default for the rest of the suite
        from splatstyle.styletransfer2d import set_default_backend

        set_default_backend("stat")

    def test_all_three_modes_present(self, workdir, tmp_path):
        out = tmp_path / "full.csv"
        rc = cli.main(["eval", "--scene", str(workdir["scene"]),
                       "--field", str(workdir["field"]),
                       "--style", str(workdir["styles"][0]),
                       "--mode", "gss,gs-adain,adain-gs", "--fit-iters", "40",
                       "--out", str(out)])
        assert rc == 0
        modes = {ln.rsplit(",", 1)[1] for ln in out.read_text().splitlines()[1:]}
        assert modes == {"gss", "gs-adain", "adain-gs"}
