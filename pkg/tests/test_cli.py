"""Tests for the command-line interface."""

import json

import numpy as np
import pytest

from panco.cli import build_parser, main, read_trace
from panco.scenarios import write_run_dir

FILES = ("config.json", "traces.csv", "channels.csv", "signatures.csv", "report.json")


def report(path):
    return json.loads((path / "report.json").read_text())


class TestRun:
    def test_invalid_key(self, tmp_path):
        out = tmp_path / "bad"
        rc = main(["run", "fig2", "--set", "drive.Bx_typo=1", "--out", str(out)])
        assert rc != 0
        r = report(out)
        assert r["status"] == "error"
        assert "drive.Bx_typo" in r["error"]["message"]

    def test_unknown_target(self, tmp_path):
        out = tmp_path / "bad"
        assert main(["run", "nonsense", "--out", str(out)]) == 2
        assert report(out)["error"]["kind"] == "usage"

    def test_bad_json_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{not json")
        assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_zero_drive_fig2_is_flat(self, tmp_path):
        out = tmp_path / "fig2"
        args = ["run", "fig2", "--out", str(out)]
        for k in ("B_x", "B_y", "Om_x", "Om_y"):
            args += ["--set", f"drive.{k}=0"]
        assert main(args) == 0
        tr = np.genfromtxt(out / "traces.csv", delimiter=",", names=True)
        for case in ("Bx", "By", "Omx", "Omy"):
            assert np.all(tr[f"{case}_Pe_x"] == 0), case
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["drive"]["B_x"] == 0

    def test_rerun_from_config_is_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["run", "step_decomposition", "--set", "drive.n_steps=3", "--out", str(a)]) == 0
        assert main(["run", str(a / "config.json"), "--out", str(b)]) == 0
        for f in FILES:
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_seed_and_tol_flags(self, tmp_path):
        out = tmp_path / "s"
        assert main(["run", "square_wave", "--set", "analysis.duration_s=2", "--set", "drive.amp_x=0",
                     "--set", "drive.amp_y=0", "--set", "noise_sigma=1e-4", "--seed", "9",
                     "--tol", "1e-8", "--out", str(out)]) == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["seed"] == 9 and cfg["rtol"] == 1e-8 and cfg["atol"] == pytest.approx(1e-11)

    def test_scenario_failure_is_reported(self, tmp_path):
        out = tmp_path / "f"
        rc = main(["run", "square_wave", "--set", "analysis.duration_s=3", "--out", str(out)])
        assert rc == 1
        assert report(out)["error"]["kind"] == "scenario"


@pytest.fixture(scope="module")
def square_dir(tmp_path_factory, square_run):
    spec, res = square_run
    return write_run_dir(tmp_path_factory.mktemp("sq"), spec, res)


class TestFit:
    def test_round_trip_is_bit_identical(self, tmp_path, square_dir):
        out = tmp_path / "fit"
        rc = main(["fit", str(square_dir / "signatures.csv"), str(square_dir / "traces.csv"),
                   "--out", str(out)])
        assert rc == 0
        assert (out / "channels.csv").read_bytes() == (square_dir / "channels.csv").read_bytes()
        s = json.loads((out / "summary.json").read_text())
        assert s["n_cycles"] == sum(1 for _ in open(square_dir / "channels.csv")) - 1

    def test_empty_trace(self, tmp_path, square_dir):
        p = tmp_path / "empty.csv"
        p.write_text("")
        assert main(["fit", str(square_dir / "signatures.csv"), str(p), "--out", str(tmp_path / "o")]) == 2

    def test_corrupt_sample_names_line(self, tmp_path, square_dir):
        p = tmp_path / "bad.csv"
        p.write_text("t,signal\n0.0,1e-6\n0.1,oops\n0.2,3e-6\n")
        out = tmp_path / "o"
        assert main(["fit", str(square_dir / "signatures.csv"), str(p), "--out", str(out)]) == 2
        assert "line 3" in report(out)["error"]["message"]

    def test_grid_mismatch(self, tmp_path, square_dir):
        p = tmp_path / "short.csv"
        p.write_text("signal\n" + "\n".join(["0.0"] * 5) + "\n")
        assert main(["fit", str(square_dir / "signatures.csv"), str(p), "--out", str(tmp_path / "o")]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["fit", str(tmp_path / "no.csv"), str(tmp_path / "no2.csv"),
                     "--out", str(tmp_path / "o")]) == 1

    def test_read_trace_formats(self, tmp_path):
        p = tmp_path / "bare.csv"
        p.write_text("1\n2\n3\n")
        sig, t = read_trace(p)
        assert sig.tolist() == [1.0, 2.0, 3.0] and t is None
        p.write_text("t,signal\n0,1\n1,2\n")
        sig, t = read_trace(p)
        assert sig.tolist() == [1.0, 2.0] and t.tolist() == [0.0, 1.0]


class TestOtherCommands:
    def test_signatures(self, tmp_path):
        out = tmp_path / "sig"
        assert main(["signatures", "fig7", "--out", str(out)]) == 0
        from panco.protocol import SignatureSet
        sig = SignatureSet.from_csv(out / "signatures.csv")
        assert sig.n == 4750
        assert report(out)["gram_condition"] == pytest.approx(4.0763, rel=1e-3)

    def test_scan_bias_workers_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        common = ["--min", "105", "--max", "107", "-n", "2"]
        assert main(["scan-bias", *common, "--workers", "1", "--out", str(a)]) == 0
        assert main(["scan-bias", *common, "--workers", "2", "--out", str(b)]) == 0
        for f in ("scan.csv", "report.json", "config.json"):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_scan_bias_bad_grid(self, tmp_path):
        assert main(["scan-bias", "--min", "110", "--max", "100", "--out", str(tmp_path / "o")]) == 2

    def test_crosstalk_zero_offset(self, tmp_path):
        out = tmp_path / "x"
        assert main(["crosstalk", "--offset", "0", "--out", str(out)]) == 0
        r = report(out)
        assert r["nominal_nT"] == pytest.approx(106.3)
        assert r["results"][0]["uhz_per_pT"] < 1e-3

    def test_workers_must_be_positive(self):
        with pytest.raises(SystemExit):
            main(["run", "fig2", "--workers", "0"])

    def test_parser_lists_subcommands(self):
        text = build_parser().format_help()
        for cmd in ("run", "fit", "signatures", "scan-bias", "crosstalk"):
            assert cmd in text
