import numpy as np
import pytest

from cli_pipeline import SUBCOMMANDS, run_all
from srft import io
from srft.cli import DEFAULT_SEED, build_parser, main


def parse(*argv):
    return build_parser().parse_args(list(argv))


class TestDefaults:
    def test_finetune_defaults(self):
        a = parse("finetune", "--model", "m", "--input", "i", "--out-model", "o", "--trace", "t", "--out-image", "s")
        assert (a.lr, a.momentum, a.max_iters, a.delta_db, a.patience) == (0.01, 0.9, 4000, 0.04, 50)

    def test_uncertainty_defaults(self):
        a = parse("uncertainty", "--model", "m", "--input", "i", "--out", "o")
        assert (a.p, a.passes) == (0.0005, 50)

    def test_every_subcommand_registered(self):
        for cmd in SUBCOMMANDS:
            with pytest.raises(SystemExit) as exc:
                parse(cmd, "--help")
            assert exc.value.code == 0


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["degrade", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 1

    def test_missing_input_is_data_error(self, tmp_path, capsys):
        code = main(["degrade", "--input", str(tmp_path / "nope.ppm"), "--out", str(tmp_path / "o.ppm"), "--scale", "2"])
        assert code == 2
        assert "nope.ppm" in capsys.readouterr().err

    def test_malformed_image_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P6\n4 4\n255\n\x00")
        assert main(["degrade", "--input", str(bad), "--out", str(tmp_path / "o.ppm"), "--scale", "2"]) == 2

    def test_conflicting_kernel_flags(self, tmp_path):
        main(["gen-corpus", "--out", str(tmp_path), "--count", "1", "--size", "8"])
        img = str(tmp_path / "hr_000.ppm")
        out = tmp_path / "o.ppm"
        assert main(["degrade", "--input", img, "--out", str(out), "--scale", "2",
                     "--kernel", "disk 1", "--random-gaussian"]) == 1
        assert main(["degrade", "--input", img, "--out", str(out), "--scale", "2", "--kernel-out", "k"]) == 1
        assert not out.exists()

    def test_bad_threads(self, tmp_path):
        assert main(["gen-corpus", "--out", str(tmp_path), "--threads", "0"]) == 1

    def test_bad_seed_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SRFT_SEED", "abc")
        assert main(["gen-corpus", "--out", str(tmp_path)]) == 1


class TestSeeding:
    def test_default_seed_and_env_override(self, tmp_path, monkeypatch):
        monkeypatch.delenv("SRFT_SEED", raising=False)
        main(["gen-corpus", "--out", str(tmp_path / "a"), "--count", "1", "--size", "8"])
        main(["gen-corpus", "--out", str(tmp_path / "b"), "--count", "1", "--size", "8", "--seed", str(DEFAULT_SEED)])
        monkeypatch.setenv("SRFT_SEED", "5")
        main(["gen-corpus", "--out", str(tmp_path / "c"), "--count", "1", "--size", "8"])
        a, b, c = ((tmp_path / d / "hr_000.ppm").read_bytes() for d in "abc")
        assert a == b
        assert a != c


class TestDegrade:
    def test_repeat_identical_and_shape(self, tmp_path):
        main(["gen-corpus", "--out", str(tmp_path), "--count", "1", "--size", "16"])
        img = str(tmp_path / "hr_000.ppm")
        for name in ("o1.ppm", "o2.ppm"):
            assert main(["degrade", "--input", img, "--out", str(tmp_path / name), "--scale", "2"]) == 0
        assert (tmp_path / "o1.ppm").read_bytes() == (tmp_path / "o2.ppm").read_bytes()
        assert io.load_image(tmp_path / "o1.ppm").shape == (1, 3, 8, 8)


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    return [run_all(base / "a", 1), run_all(base / "b", 1), run_all(base / "c", 4)]


class TestPipeline:
    def test_outputs_present(self, pipeline_runs):
        files = pipeline_runs[0]
        for name in ("m4.srft", "m2.srft", "m3.srft", "ft.srft", "trace.csv", "sr.ppm", "var.pgm",
                     "eval.csv", "eval.txt", "art.srft", "k.txt", "curve.csv"):
            assert name in files

    def test_repeat_runs_bit_identical(self, pipeline_runs):
        assert pipeline_runs[0] == pipeline_runs[1]

    def test_threads_bit_identical(self, pipeline_runs):
        assert pipeline_runs[0] == pipeline_runs[2]

    def test_trace_and_eval_formats(self, pipeline_runs):
        trace = pipeline_runs[0]["trace.csv"].decode().splitlines()
        assert trace[0] == "iter,loss,lr_psnr_db" and trace[-1] == "# stop_reason=max_iters"
        assert len(trace) == 7 + 2
        rows = [ln for ln in pipeline_runs[0]["eval.csv"].decode().splitlines() if not ln.startswith("#")]
        assert rows[0].startswith("model,image")
        assert sum(",average," in r for r in rows) == 2

    def test_inputs_not_mutated(self, tmp_path):
        run_all(tmp_path)
        before = {p: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
        main(["finetune", "--model", str(tmp_path / "m2.srft"), "--input", str(tmp_path / "lr_plain.ppm"),
              "--out-model", str(tmp_path / "x.srft"), "--trace", str(tmp_path / "x.csv"),
              "--out-image", str(tmp_path / "x.ppm"), "--max-iters", "2"])
        main(["surgery", "--model", str(tmp_path / "m4.srft"), "--out", str(tmp_path / "y.srft"), "--to-scale", "2"])
        assert all(p.read_bytes() == b for p, b in before.items())

    def test_surgery_warns_on_degraded_start(self, tmp_path, capsys):
        run_all(tmp_path)
        capsys.readouterr()
        main(["surgery", "--model", str(tmp_path / "m4.srft"), "--out", str(tmp_path / "z.srft"), "--to-scale", "3"])
        assert "degraded_start=true" in capsys.readouterr().err

    def test_variance_image_is_rendered(self, pipeline_runs, tmp_path):
        p = tmp_path / "v.pgm"
        p.write_bytes(pipeline_runs[0]["var.pgm"])
        v = io.load_image(p)
        assert v.shape == (1, 1, 16, 16)
        assert v.min() == 0.0 and v.max() == 1.0
        assert np.isfinite(v).all()
