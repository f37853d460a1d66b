import csv
import io
import json
import subprocess
import sys

import pytest

from cmsnigp.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, calibration_path, main
from cmsnigp.sketch import load


def run(capsys, monkeypatch, argv, stdin=""):
    monkeypatch.setattr(sys, "stdin", io.StringIO(stdin))
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpus(tmp_path):
    words = " ".join(["alpha"] * 40 + ["beta"] * 12 + ["gamma"] * 3 + [f"w{i}" for i in range(60)])
    path = tmp_path / "corpus.txt"
    path.write_text(words, encoding="utf-8")
    return path


@pytest.fixture
def built(tmp_path, corpus, capsys, monkeypatch):
    out = tmp_path / "c.cms"
    code, _, _ = run(capsys, monkeypatch, ["sketch", "build", "--seed", "3", "--depth", "3", "--width", "16",
                                           "--input", str(corpus), "--output", str(out)])
    assert code == EXIT_OK
    return out


def parse_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestSketchCommands:
    def test_build_writes_sketch(self, built):
        s = load(built)
        assert (s.depth, s.width, s.total) == (3, 16, 115)

    def test_query_without_alpha(self, built, capsys, monkeypatch):
        code, out, err = run(capsys, monkeypatch, ["sketch", "query", "--sketch", str(built)], "alpha\n")
        assert code == EXIT_OK
        rows = parse_csv(out)
        assert list(rows[0]) == ["token", "cms", "cmm"]
        assert int(rows[0]["cms"]) >= 40
        assert "cms and cmm only" in err

    def test_query_with_alpha(self, built, capsys, monkeypatch):
        argv = ["sketch", "query", "--sketch", str(built), "--alpha", "30"]
        code, out, _ = run(capsys, monkeypatch, argv, "alpha\nbeta\ngamma\nw7\n")
        assert code == EXIT_OK
        rows = parse_csv(out)
        assert [r["token"] for r in rows] == ["alpha", "beta", "gamma", "w7"]
        for r in rows:
            assert float(r["nigp_mean"]) <= int(r["cms"])
            assert int(r["ci_low"]) <= int(r["nigp_median"]) <= int(r["ci_high"]) <= int(r["cms"])
        _, again, _ = run(capsys, monkeypatch, argv, "alpha\nbeta\ngamma\nw7\n")
        assert again == out

    def test_unseen_token_with_empty_bucket(self, tmp_path, capsys, monkeypatch):
        src = tmp_path / "one.txt"
        src.write_text("solo solo solo", encoding="utf-8")
        out = tmp_path / "one.cms"
        run(capsys, monkeypatch, ["sketch", "build", "--seed", "1", "--depth", "2", "--width", "50",
                                  "--input", str(src), "--output", str(out)])
        sketch = load(out)
        probe = next(t for t in (f"x{i}" for i in range(1000)) if min(sketch.bucket_vector(t)) == 0)
        code, text, _ = run(capsys, monkeypatch, ["sketch", "query", "--sketch", str(out), "--alpha", "2"], probe + "\n")
        assert code == EXIT_OK
        row = parse_csv(text)[0]
        assert row["cms"] == "0" and float(row["cmm"]) == 0.0
        assert float(row["nigp_mean"]) == 0.0
        assert row["nigp_median"] == row["nigp_mode"] == row["ci_low"] == row["ci_high"] == "0"

    def test_calibrate_then_query_uses_stored_alpha(self, built, capsys, monkeypatch):
        code, out, _ = run(capsys, monkeypatch, ["sketch", "calibrate", "--sketch", str(built)])
        assert code == EXIT_OK
        alpha = float(out)
        with open(calibration_path(built), encoding="utf-8") as fh:
            stored_alpha = json.load(fh)["alpha"]
        assert stored_alpha == pytest.approx(alpha)
        _, stored, err = run(capsys, monkeypatch, ["sketch", "query", "--sketch", str(built)], "beta\n")
        _, explicit, _ = run(capsys, monkeypatch, ["sketch", "query", "--sketch", str(built),
                                                   "--alpha", repr(stored_alpha)], "beta\n")
        assert "nigp_mean" in stored and stored == explicit and err == ""

    def test_markdown_output(self, built, capsys, monkeypatch):
        _, out, _ = run(capsys, monkeypatch, ["sketch", "query", "--sketch", str(built), "--format", "markdown"], "a\n")
        assert out.startswith("| token")

    def test_corrupt_sketch(self, tmp_path, capsys, monkeypatch):
        bad = tmp_path / "bad.cms"
        bad.write_bytes(b"nonsense")
        code, _, err = run(capsys, monkeypatch, ["sketch", "query", "--sketch", str(bad)], "a\n")
        assert code == EXIT_CONFIG and "error" in err

    def test_missing_sketch(self, tmp_path, capsys, monkeypatch):
        code, _, _ = run(capsys, monkeypatch, ["sketch", "query", "--sketch", str(tmp_path / "none")], "")
        assert code == EXIT_CONFIG

    def test_bad_alpha(self, built, capsys, monkeypatch):
        code, _, _ = run(capsys, monkeypatch, ["sketch", "query", "--sketch", str(built), "--alpha", "-1"], "a\n")
        assert code == EXIT_CONFIG

    def test_malformed_uci_input(self, tmp_path, capsys, monkeypatch):
        src = tmp_path / "d.txt"
        src.write_text("1\n5\n1\n1 9 1\n", encoding="utf-8")
        code, _, err = run(capsys, monkeypatch, ["sketch", "build", "--seed", "1", "--depth", "1", "--width", "4",
                                                 "--input", str(src), "--format", "uci_bagofwords",
                                                 "--output", str(tmp_path / "o.cms")])
        assert code == EXIT_CONFIG and "line 4" in err

    def test_flag_errors_exit_2(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["sketch", "build", "--seed", "1"])
        assert info.value.code == 2


class TestExperimentCommand:
    def test_config_plus_overrides(self, tmp_path, capsys, monkeypatch):
        cfg = tmp_path / "e.cfg"
        cfg.write_text("stream.kind = zipf\nstream.s = 1.6\nstream.m = 5000\nsketch.width = 32\n"
                       "sketch.depth = 2\nestimators = cms, cmm\n", encoding="utf-8")
        out = tmp_path / "r.csv"
        code, _, err = run(capsys, monkeypatch, ["experiment", "run", "--config", str(cfg),
                                                 "--width", "64", "--output", str(out)])
        assert code == EXIT_OK and "wall time" in err
        text = out.read_text()
        assert text.splitlines()[0] == "bin,tokens,mae_cms,mae_cmm"
        code, _, _ = run(capsys, monkeypatch, ["experiment", "run", "--config", str(cfg),
                                               "--width", "64", "--output", str(out)])
        assert out.read_text() == text

    def test_unknown_config_key(self, tmp_path, capsys, monkeypatch):
        cfg = tmp_path / "e.cfg"
        cfg.write_text("stream.kind = zipf\ncolour = red\n", encoding="utf-8")
        code, _, err = run(capsys, monkeypatch, ["experiment", "run", "--config", str(cfg)])
        assert code == EXIT_CONFIG and "colour" in err

    def test_numeric_failure_exit_3(self, capsys, monkeypatch):
        # With s = 60 every draw is rank 1, so one bucket per row holds the whole
        # stream and the likelihood peaks at the smallest grid point.
        code, _, err = run(capsys, monkeypatch, ["experiment", "run", "--stream-kind", "zipf", "--s", "60",
                                                 "--m", "300", "--width", "8", "--depth", "2",
                                                 "--estimators", "nigp"])
        assert code == EXIT_NUMERIC and "numerical failure" in err


class TestDiagnoseCommand:
    def test_nggp_csv(self, capsys, monkeypatch):
        code, out, err = run(capsys, monkeypatch, ["diagnose", "powerlaw", "--sigma", "0.5", "--alpha", "1",
                                                   "--m", "300", "--repeats", "2"])
        assert code == EXIT_OK and out.startswith("m,mean_k,sd_k")
        assert "r,mean_mr_over_k" in out and "slope" in err

    def test_sigma_zero_uses_dirichlet(self, capsys, monkeypatch):
        code, out, _ = run(capsys, monkeypatch, ["diagnose", "powerlaw", "--sigma", "0", "--alpha", "4",
                                                 "--m", "2000", "--repeats", "3", "--format", "markdown"])
        assert code == EXIT_OK and "| m" in out

    def test_bad_sigma(self, capsys, monkeypatch):
        code, _, _ = run(capsys, monkeypatch, ["diagnose", "powerlaw", "--sigma", "1.5", "--alpha", "1", "--m", "10"])
        assert code == EXIT_CONFIG


def test_module_entry_point(built):
    proc = subprocess.run([sys.executable, "-m", "cmsnigp", "sketch", "query", "--sketch", str(built)],
                          input="alpha\n", capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.startswith("token,cms,cmm")
