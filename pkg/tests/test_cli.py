"""Command-line interface, every subcommand exercised end to end."""

from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from qpe.cli import main
from qpe.models import TrialDistribution, chsh_value
from qpe.protocols import sample_records, write_records
from qpe.qef_engine import CertificationResult, TrialFunction

ROOT2 = math.sqrt(2.0)


@pytest.fixture()
def dist_file(tmp_path, nu_e):
    path = tmp_path / "dist.json"
    path.write_text(nu_e.to_json())
    return str(path)


@pytest.fixture()
def qef_file(tmp_path, qef02):
    path = tmp_path / "qef.json"
    path.write_text(qef02.to_json())
    return str(path)


@pytest.fixture()
def records_file(tmp_path, nu_e):
    path = tmp_path / "records.jsonl"
    records = sample_records(nu_e, 4000, np.random.default_rng(12))
    write_records(str(path), records)
    return str(path)


class TestFamily:
    def test_werner_point_reaches_tsirelson(self, tmp_path):
        out = tmp_path / "w.json"
        assert main(["family", "--family", "W", "--param", "1.0", "-o", str(out)]) == 0
        nu = TrialDistribution.from_json(out.read_text())
        assert abs(chsh_value(nu) - 2.0 * ROOT2) <= 1e-6

    def test_nonviolating_point_to_stdout(self, capsys):
        assert main(["family", "--family", "E", "--param", "0.0"]) == 0
        nu = TrialDistribution.from_json(capsys.readouterr().out)
        assert abs(chsh_value(nu) - 2.0) <= 1e-6

    def test_malformed_param_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["family", "--family", "E", "--param", "abc"])
        assert err.value.code == 2

    def test_unknown_family_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["family", "--family", "Q", "--param", "0.5"])
        assert err.value.code == 2


class TestOptimizeCertify:
    def test_optimize_emits_factor_and_rate(self, tmp_path, dist_file, capsys):
        out = tmp_path / "pef.json"
        code = main(
            ["optimize", "--dist", dist_file, "--beta", "0.45", "-o", str(out)]
        )
        assert code == 0
        line = capsys.readouterr().err.strip()
        assert line.startswith("rate_nats_per_trial")
        assert abs(float(line.split()[1]) - 0.07127685884467068) <= 1e-9
        F = TrialFunction.from_json(out.read_text())
        assert F.beta == 0.45
        assert F.role == "pef"

    def test_certify_qef_bracket(self, tmp_path, dist_file):
        pef = tmp_path / "pef.json"
        main(["optimize", "--dist", dist_file, "--beta", "0.45", "-o", str(pef)])
        cert = tmp_path / "cert.json"
        code = main(
            ["certify", "--function", str(pef), "--gap", "1e-3", "-o", str(cert)]
        )
        assert code == 0
        res = CertificationResult.from_json(cert.read_text())
        assert res.f_upper - res.f_lower <= 1e-3 + 1e-8
        assert abs(res.f_upper - 1.000773193) <= 1e-6

    def test_certify_pef_kind(self, tmp_path, dist_file):
        pef = tmp_path / "pef.json"
        main(["optimize", "--dist", dist_file, "--beta", "0.45", "-o", str(pef)])
        cert = tmp_path / "cert.json"
        code = main(
            [
                "certify", "--function", str(pef), "--kind", "pef",
                "--gap", "2.0", "--budget", "3000", "-o", str(cert),
            ]
        )
        assert code == 0
        res = CertificationResult.from_json(cert.read_text())
        assert res.f_lower <= res.f_upper
        assert res.f_lower >= 1.0 - 1e-9

    def test_missing_input_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["certify", "--function", str(tmp_path / "nope.json"), "--gap", "0.1"])
        assert err.value.code == 2

    def test_invalid_power_is_internal_error(self, dist_file, capsys):
        assert main(["optimize", "--dist", dist_file, "--beta", "0.0"]) == 1
        assert "error" in capsys.readouterr().err


class TestMintrials:
    def test_single_point_table(self, tmp_path):
        out = tmp_path / "table.csv"
        theta = repr(math.pi / 4.0)
        code = main(
            [
                "mintrials", "--family", "E",
                "--params", f"{theta}:{theta}:1",
                "--beta-grid", "0.2", "--epsilon", "1e-6", "-o", str(out),
            ]
        )
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["family_param", "I_hat", "n_qef", "n_eat_F", "ratio"]
        assert len(rows) == 2
        assert abs(float(rows[1][1]) - 2.0 * ROOT2) <= 1e-5
        assert abs(float(rows[1][2]) - 883.072) <= 1e-2
        assert float(rows[1][4]) > 100.0

    def test_rate_curves(self, tmp_path):
        out = tmp_path / "curves.csv"
        code = main(
            ["mintrials", "--curves", "--n-outcomes", "2", "--k-inf", "1.0",
             "-o", str(out)]
        )
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["h_nats", "r_eat", "r_qef"]
        assert len(rows) > 10
        for row in rows[1:]:
            assert float(row[2]) > float(row[1])

    def test_table_needs_family_and_params(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["mintrials", "-o", str(tmp_path / "x.csv")])
        assert err.value.code == 2


class TestRun:
    def run_argv(self, qef_file, records_file, out, protocol=1, extra=()):
        return [
            "run", "--function", qef_file, "--records", records_file,
            "--n", "4000", "--k-o", "8", "--epsilon", "1e-3",
            "--protocol", str(protocol), "-o", out, *extra,
        ]

    def test_protocol1_success(self, tmp_path, qef_file, records_file):
        out = tmp_path / "out.json"
        assert main(self.run_argv(qef_file, records_file, str(out))) == 0
        got = json.loads(out.read_text())
        assert got["success"] is True
        assert len(got["bits"]) == 8
        assert set(got["bits"]) <= {"0", "1"}
        assert got["log2_f"] >= got["log2_f_min"]
        assert got["trials_used"] <= 4000

    def test_protocol1_short_stream_reports_failure(
        self, tmp_path, qef_file, nu_e, capsys
    ):
        short = tmp_path / "short.jsonl"
        write_records(str(short), sample_records(nu_e, 5, np.random.default_rng(0)))
        out = tmp_path / "out.json"
        assert main(self.run_argv(qef_file, str(short), str(out))) == 0
        got = json.loads(out.read_text())
        assert got["success"] is False
        assert got["bits"] is None
        assert got["trials_used"] == 0
        assert "need" in capsys.readouterr().err

    def test_protocol2_short_stream_returns_bank(self, tmp_path, qef_file, nu_e):
        short = tmp_path / "short.jsonl"
        write_records(str(short), sample_records(nu_e, 5, np.random.default_rng(0)))
        bank = tmp_path / "bank.txt"
        bank.write_text("10110010\n")
        out = tmp_path / "out.json"
        argv = self.run_argv(
            qef_file, str(short), str(out), protocol=2,
            extra=("--bank", str(bank)),
        )
        assert main(argv) == 0
        got = json.loads(out.read_text())
        assert got["success"] is True
        assert got["bits"] == "10110010"
        assert got["bank_used"] == 8

    def test_protocol2_full_stream_succeeds_unbanked(
        self, tmp_path, qef_file, records_file
    ):
        out = tmp_path / "out.json"
        assert main(self.run_argv(qef_file, records_file, str(out), protocol=2)) == 0
        got = json.loads(out.read_text())
        assert got["success"] is True
        assert got["bank_used"] == 0

    def test_protocol3_zero_credit_matches_plain(
        self, tmp_path, qef_file, records_file
    ):
        out1 = tmp_path / "p1.json"
        out3 = tmp_path / "p3.json"
        assert main(self.run_argv(qef_file, records_file, str(out1))) == 0
        assert main(self.run_argv(qef_file, records_file, str(out3), protocol=3)) == 0
        assert out1.read_text() == out3.read_text()

    def test_sampled_runs_are_deterministic(self, tmp_path, qef_file, dist_file):
        outs = []
        for name in ("a.json", "b.json"):
            out = tmp_path / name
            argv = [
                "--seed", "7",
                "run", "--function", qef_file, "--dist", dist_file,
                "--n", "4000", "--k-o", "8", "--epsilon", "1e-3",
                "-o", str(out),
            ]
            assert main(argv) == 0
            outs.append(out.read_text())
        assert outs[0] == outs[1]

    def test_needs_a_record_source(self, qef_file, capsys):
        argv = [
            "run", "--function", qef_file,
            "--n", "100", "--k-o", "8", "--epsilon", "1e-3",
        ]
        assert main(argv) == 1
        assert "records" in capsys.readouterr().err


class TestExpand:
    def write_table(self, tmp_path):
        values = {
            (c, z): v
            for z, row in enumerate([(0.9, 0.3), (0.7, 0.5), (0.8, 0.4), (0.6, 0.2)])
            for c, v in enumerate(row)
        }
        B = TrialFunction(values, None, role="maxprob")
        path = tmp_path / "guess.json"
        path.write_text(B.to_json())
        return str(path)

    def test_rate_table(self, tmp_path):
        table = self.write_table(tmp_path)
        out = tmp_path / "rates.csv"
        code = main(
            [
                "expand", "--function", table, "--b-bar", "0.57", "--z0", "2",
                "--r-grid", "0.01:0.1:3", "-o", str(out),
            ]
        )
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [
            "r", "beta", "d", "d_prime", "g_lower_nats",
            "input_entropy_nats", "rate_ratio",
        ]
        assert len(rows) == 4
        rs = [float(row[0]) for row in rows[1:]]
        assert rs == sorted(rs)
        for row in rows[1:]:
            assert math.isfinite(float(row[4]))
            ratio = float(row[4]) / float(row[5])
            assert abs(ratio - float(row[6])) <= 1e-4 * abs(ratio)

    def test_zero_rate_is_internal_error(self, tmp_path, capsys):
        table = self.write_table(tmp_path)
        argv = [
            "expand", "--function", table, "--b-bar", "0.57",
            "--r-grid", "0:0.1:3", "-o", str(tmp_path / "x.csv"),
        ]
        assert main(argv) == 1
        assert "error" in capsys.readouterr().err

    def test_malformed_grid_is_usage_error(self, tmp_path):
        table = self.write_table(tmp_path)
        with pytest.raises(SystemExit) as err:
            main(
                ["expand", "--function", table, "--b-bar", "0.57",
                 "--r-grid", "0.1:3", "-o", str(tmp_path / "x.csv")]
            )
        assert err.value.code == 2
