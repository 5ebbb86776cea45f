import json

import numpy as np
import pytest

from susbp.cli import SWEEP_HEADER, main
from susbp.spread_analysis import write_weight_dump

TINY_MODEL = [
    "--vocab", "16", "--d-model", "8", "--heads", "2", "--d-head", "4", "--layers", "1",
]


class TestGradcheck:
    def test_reports_and_exits_zero(self, capsys):
        assert main(["gradcheck", "--n", "8", "--d", "4", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert "max_rel_err=" in out
        assert "all_retained_dev=" in out
        err = float(out.split("max_rel_err=")[1].splitlines()[0])
        assert err < 1e-6

    def test_enumerate_mode(self, capsys):
        rc = main(["gradcheck", "--n", "3", "--d", "2", "--enumerate", "--c", "1.2"])
        assert rc == 0
        out = capsys.readouterr().out
        dev = float(out.split("enum_dev=")[1].splitlines()[0])
        assert dev < 1e-10

    def test_enumerate_too_large_fails(self, capsys):
        rc = main(["gradcheck", "--n", "8", "--d", "4", "--enumerate", "--c", "1.2"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_flag_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "--bogus"])
        assert exc.value.code == 2

    def test_unknown_command_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


class TestSweep:
    def run_sweep(self, tmp_path, name, extra=()):
        out = tmp_path / name
        rc = main(
            [
                "sweep", "--mode", "c", "--c", "2,4", "--n", "12",
                "--seqs", "4", "--samples", "1", "--seed", "7",
                *TINY_MODEL, "-o", str(out), *extra,
            ]
        )
        return rc, out

    def test_csv_header_and_rows(self, tmp_path, capsys):
        rc, out = self.run_sweep(tmp_path, "sweep.csv")
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == SWEEP_HEADER
        assert len([l for l in lines[1:] if l and not l.startswith("#")]) == 2
        assert str(out) in capsys.readouterr().out

    def test_byte_identical_reruns(self, tmp_path):
        _, a = self.run_sweep(tmp_path, "a.csv")
        _, b = self.run_sweep(tmp_path, "b.csv")
        assert a.read_bytes() == b.read_bytes()

    def test_fit_with_too_few_cells_fails(self, tmp_path, capsys):
        rc, _ = self.run_sweep(tmp_path, "c.csv", extra=("--fit", "on"))
        assert rc == 1
        assert "4 distinct c cells" in capsys.readouterr().err

    def test_json_format(self, tmp_path):
        out = tmp_path / "sweep.json"
        rc = main(
            [
                "sweep", "--mode", "n", "--c", "2", "--n", "8,12",
                "--seqs", "4", "--samples", "1", "--seed", "7",
                *TINY_MODEL, "-o", str(out), "--format", "json",
            ]
        )
        assert rc == 0
        doc = json.loads(out.read_text())
        assert len(doc["reports"]) == 2
        assert doc["fit"] is None
        assert doc["reports"][0]["n"] == 8

    def test_mode_c_needs_single_n(self, tmp_path, capsys):
        out = tmp_path / "bad.csv"
        rc = main(
            ["sweep", "--mode", "c", "--c", "2,4", "--n", "8,12",
             "--seqs", "4", "--samples", "1", *TINY_MODEL, "-o", str(out)]
        )
        assert rc == 1
        assert "exactly one n" in capsys.readouterr().err


class TestSpread:
    def test_diagonal_dump_gives_unit_spread(self, tmp_path, capsys):
        dump_dir = tmp_path / "dump"
        write_weight_dump({(0, 0): np.eye(32)}, "diag", dump_dir, sequences_averaged=1)
        out_dir = tmp_path / "out"
        rc = main(
            ["spread", "--manifest", str(dump_dir / "manifest.json"), "-o", str(out_dir)]
        )
        assert rc == 0
        rows = (out_dir / "spread.csv").read_text().splitlines()[1:]
        for row in rows:
            assert float(row.split(",")[3]) == 1.0  # s_mean
        stats = json.loads((out_dir / "head_stats.json").read_text())
        assert stats["arithmetic_mean"] > 0

    def test_toy_pipeline_round_trip(self, tmp_path):
        out_dir = tmp_path / "toyout"
        rc = main(
            ["spread", "--toy", "--n", "48", "--seqs", "3", "--seed", "5",
             *TINY_MODEL, "-o", str(out_dir)]
        )
        assert rc == 0
        rows = (out_dir / "spread.csv").read_text().splitlines()[1:]
        phis = [float(r.split(",")[4]) for r in rows]
        assert all(0.0 < p <= 1.5 for p in phis)

    def test_malformed_manifest_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "manifest.json"
        bad.write_text("{not json")
        rc = main(["spread", "--manifest", str(bad), "-o", str(tmp_path / "o")])
        assert rc == 1
        assert "manifest" in capsys.readouterr().err

    def test_needs_source(self, tmp_path, capsys):
        rc = main(["spread", "-o", str(tmp_path / "o")])
        assert rc == 1
        assert "--manifest" in capsys.readouterr().err


class TestKweight:
    def test_generate_then_fit_recovers_theta(self, tmp_path):
        gen_csv = tmp_path / "gen.csv"
        rc = main(
            ["kweight", "--generate", "--theta-minus", "0.086", "--theta-plus", "2.08",
             "--points", "16", "-o", str(gen_csv)]
        )
        assert rc == 0
        fit_json = tmp_path / "fit.json"
        rc = main(["kweight", "--input", str(gen_csv), "-o", str(fit_json)])
        assert rc == 0
        doc = json.loads(fit_json.read_text())
        assert abs(doc["theta_minus"] - 0.086) < 1e-3
        assert abs(doc["theta_plus"] - 2.08) < 1e-3
        assert doc["implied_middle_exponents"] == {"alpha": 1.0, "beta": -1.0}

    def test_missing_input_fails(self, tmp_path, capsys):
        rc = main(["kweight", "-o", str(tmp_path / "x.json")])
        assert rc == 1
        assert "--input" in capsys.readouterr().err

    def test_degenerate_input_fails_cleanly(self, tmp_path, capsys):
        bad = tmp_path / "flat.csv"
        bad.write_text(
            "xi,kappa,rho\n" + "\n".join(f"{x},1.0,0.5" for x in (0.01, 0.02, 0.04, 0.08)) + "\n"
        )
        rc = main(["kweight", "--input", str(bad), "-o", str(tmp_path / "x.json")])
        assert rc == 1
        assert "degenerate" in capsys.readouterr().err


class TestGraphDemo:
    def test_all_oracles_pass(self, capsys):
        assert main(["graph-demo", "--seed", "3"]) == 0
        out = capsys.readouterr().out
        assert "coupling_dev=" in out
        assert "FAIL" not in out
