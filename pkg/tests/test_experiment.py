import math

import numpy as np
import pytest

from cmsnigp import experiment
from cmsnigp.errors import ConfigError
from cmsnigp.experiment import (
    ExperimentConfig,
    bin_label,
    bins_from_edges,
    config_from_mapping,
    default_bins,
    diagnostics_powerlaw,
    growth_grid,
    load_config_file,
    markdown_table,
    parse_config_text,
    run_experiment,
)
from cmsnigp.sketch import Sketch
from cmsnigp.streams import StreamSpec

SMALL = StreamSpec("zipf", m=20_000, seed=3, s=1.6)


def small_config(**kw):
    base = dict(stream=SMALL, sketch_seed=5, depth=3, width=64)
    base.update(kw)
    return ExperimentConfig(**base)


class TestBins:
    def test_default_bins(self):
        bins = default_bins()
        assert bins[0] == (0, 1) and bins[8] == (128, 256)
        assert bins[-1] == (256, math.inf)
        assert bin_label(*bins[-1]) == "(256,inf)" and bin_label(2, 4) == "(2,4]"

    def test_from_edges(self):
        assert bins_from_edges("0,1,4,inf") == ((0, 1), (1, 4), (4, math.inf))

    @pytest.mark.parametrize("text", ["0", "0,2,1", "0,a", "1,1"])
    def test_bad_edges(self, text):
        with pytest.raises(ConfigError):
            bins_from_edges(text)

    def test_overlapping_bins_rejected(self):
        with pytest.raises(ConfigError):
            small_config(bins=((0, 4), (2, 8)))


class TestConfig:
    def test_parse_and_build(self):
        text = """
        # comment line
        stream.kind = zipf
        stream.s = 1.9
        stream.m = 1000   # inline comment
        sketch.width = 32
        estimators = cms, nigp
        bins = 0,1,2,inf
        """
        values = parse_config_text("\n".join(line.strip() for line in text.splitlines()))
        assert values["stream.m"] == 1000 and values["stream.s"] == 1.9
        cfg = config_from_mapping(values)
        assert cfg.width == 32 and cfg.estimators == ("cms", "nigp")
        assert cfg.bins == ((0, 1), (1, 2), (2, math.inf))

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_text("stream.kind = zipf\nwidht = 3\n")

    def test_bad_number(self):
        with pytest.raises(ConfigError):
            parse_config_text("stream.m = many\n")

    def test_kind_required(self):
        with pytest.raises(ConfigError):
            config_from_mapping({"stream.m": 3})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(tmp_path / "nope.cfg")

    @pytest.mark.parametrize("kw", [dict(depth=0), dict(estimators=("cms", "bloom")),
                                    dict(estimators=()), dict(repeats=0), dict(format="json"),
                                    dict(eval_sample_per_bin=0), dict(estimators=("cms", "cms"))])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            small_config(**kw)


@pytest.fixture(scope="module")
def report():
    return run_experiment(small_config(), keep_runs=True)


class TestRunExperiment:
    def test_token_counts_cover_distinct_tokens(self, report):
        assert sum(report.counts) == report.metadata["distinct_tokens"]

    def test_mae_non_negative(self, report):
        for e in report.estimators:
            for b, n in enumerate(report.counts):
                if n:
                    assert report.mean(e, b) >= 0
                else:
                    assert math.isnan(report.mean(e, b))

    def test_shrinkage_on_every_query(self, report):
        run = report.metadata["runs"][0]
        assert report.nigp_exceeds_cms == 0
        assert np.all(run.estimates["nigp"] <= run.estimates["cms"] + 1e-9)
        assert np.all(run.estimates["cms"] >= run.truth)

    def test_alpha_recorded(self, report):
        assert set(report.alpha_hat) == {"dp", "nigp"}
        assert all(a > 0 for vals in report.alpha_hat.values() for a in vals)

    def test_csv_is_byte_identical(self, report):
        again = run_experiment(small_config(estimators=("cms", "cmm", "dp", "nigp")))
        assert again.to_csv() == report.to_csv()

    def test_csv_shape(self, report):
        lines = report.to_csv().splitlines()
        assert lines[0] == "bin,tokens,mae_cms,mae_cmm,mae_dp,mae_nigp"
        assert len(lines) == 1 + len(report.bins)

    def test_markdown(self, report):
        md = report.to_markdown()
        assert md.splitlines()[0].startswith("| bin")
        assert "NIGP" in md

    def test_calibration_sees_only_the_sketch(self, monkeypatch):
        seen = []
        real = experiment.estimate_alpha

        def spy(arg):
            seen.append(arg)
            return real(arg)

        monkeypatch.setattr(experiment, "estimate_alpha", spy)
        run_experiment(small_config(estimators=("nigp",)))
        assert len(seen) == 1 and isinstance(seen[0], Sketch)

    def test_non_bayesian_run_skips_calibration(self, monkeypatch):
        def boom(*_):
            raise AssertionError("calibration should not run")

        monkeypatch.setattr(experiment, "estimate_alpha", boom)
        monkeypatch.setattr(experiment, "estimate_alpha_dp", boom)
        report = run_experiment(small_config(estimators=("cms", "cmm")))
        assert report.alpha_hat == {}

    def test_repeats_report_sd(self):
        report = run_experiment(small_config(estimators=("cms",), repeats=3))
        assert report.repeats == 3
        assert "sd_cms" in report.to_csv().splitlines()[0]
        assert "±" in report.to_markdown()

    def test_eval_sample_per_bin(self):
        report = run_experiment(small_config(estimators=("cms",), eval_sample_per_bin=5, eval_seed=2))
        assert max(report.counts) <= 5
        again = run_experiment(small_config(estimators=("cms",), eval_sample_per_bin=5, eval_seed=2))
        assert again.to_csv() == report.to_csv()


class TestDiagnostics:
    def test_grid(self):
        grid = growth_grid(10_000, 10)
        assert grid[-1] == 10_000 and grid == sorted(set(grid)) and len(grid) == 10

    def test_rows_match_grid(self):
        grid = [10, 50, 100, 400]
        diag = diagnostics_powerlaw(StreamSpec("nggp", m=400, seed=1, sigma=0.5, alpha=1.0), 2, grid=grid)
        assert [g for g, _, _ in diag.growth] == grid
        assert len(diag.growth_csv().splitlines()) == 1 + len(grid)
        assert len(diag.profile) == 10

    def test_dp_growth_is_logarithmic(self):
        beta, seeds = 5.0, 30
        diag = diagnostics_powerlaw(StreamSpec("dp", m=10_000, seed=0, beta=beta), seeds, grid=[1000, 10_000])
        expected = [sum(beta / (beta + i) for i in range(m)) for m in (1000, 10_000)]
        (_, k1, s1), (_, k2, s2) = diag.growth
        assert abs(k1 - expected[0]) <= 3 * s1 / math.sqrt(seeds)
        assert abs(k2 - expected[1]) <= 3 * s2 / math.sqrt(seeds)
        assert k2 / k1 == pytest.approx(expected[1] / expected[0], rel=0.1)

    def test_dp_trace_is_prefix_consistent(self):
        diag = diagnostics_powerlaw(StreamSpec("dp", m=3000, seed=4, beta=2.0), 1, grid=[3000])
        assert diag.growth[-1][1] == diag.k_final[0]

    def test_rejects_other_streams(self):
        with pytest.raises(ConfigError):
            diagnostics_powerlaw(SMALL, 1)


def test_markdown_table_alignment():
    out = markdown_table(["a", "bbb"], [["xx", "1"]]).splitlines()
    assert out == ["| a  | bbb |", "|----|-----|", "| xx | 1   |"]
