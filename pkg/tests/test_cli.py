"""End-to-end runs of the console entry point on a tiny synthetic world."""

import numpy as np
import pytest

from griduq import cli, data
from griduq.export import read_grid_csv


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Generate a dataset and train one quantile-head seed through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data_dir, runs_dir = root / "data", root / "runs"
    rc = cli.main(["gen", "--region", "synth", "--height", "16", "--width", "16",
                   "--days", "24", "--channels", "28", "--noise", "homo:2.0",
                   "--density", "0.3", "--seed", "5", "--out", str(data_dir)])
    assert rc == 0
    rc = cli.main(["train", "--data", str(data_dir), "--uq", "cqr",
                   "--epochs", "2", "--lr", "3e-3", "--dropout", "0.1",
                   "--batch", "8", "--seeds", "0", "--alpha", "0.1",
                   "--base-width", "4", "--depth", "1", "--t-passes", "4",
                   "--deterministic", "--out", str(runs_dir)])
    assert rc == 0
    return data_dir, runs_dir


class TestGen:
    def test_dataset_loads_back(self, pipeline):
        data_dir, _ = pipeline
        samples, spec = data.read_dataset(data_dir)
        assert len(samples) == 24
        assert (spec.h, spec.w) == (16, 16)
        assert samples[0].x.shape == (28, 16, 16)

    def test_prints_summary(self, tmp_path, capsys):
        rc = cli.main(["gen", "--region", "synth", "--height", "8", "--width", "8",
                       "--days", "5", "--density", "0.4", "--out", str(tmp_path / "d")])
        assert rc == 0
        assert "wrote 5 days of 8x8x28" in capsys.readouterr().out

    def test_dims_rejected_for_builtin_region(self, tmp_path, capsys):
        rc = cli.main(["gen", "--region", "na", "--days", "5", "--height", "8",
                       "--out", str(tmp_path / "d")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_noise_spec(self, tmp_path, capsys):
        rc = cli.main(["gen", "--region", "synth", "--days", "5", "--noise", "nope",
                       "--out", str(tmp_path / "d")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestTrain:
    def test_artifacts_exist(self, pipeline):
        _, runs_dir = pipeline
        for name in ("config.txt", "runs.log", "seed0_best.guqw",
                     "seed0_final.guqw", "seed0_stats.guqw"):
            assert (runs_dir / name).exists()

    def test_seed_failures_exit_nonzero(self, tmp_path, capsys):
        data_dir = tmp_path / "d"
        rc = cli.main(["gen", "--region", "synth", "--height", "8", "--width", "8",
                       "--days", "9", "--density", "0.4", "--out", str(data_dir)])
        assert rc == 0
        rc = cli.main(["train", "--data", str(data_dir), "--uq", "mcd",
                       "--epochs", "1", "--seeds", "0", "--base-width", "4",
                       "--depth", "1", "--out", str(tmp_path / "r")])
        assert rc == 1  # 9 days cannot satisfy the minimum split size
        assert "FAILED" in capsys.readouterr().err

    def test_bad_seed_list_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["train", "--data", "x", "--uq", "cqr", "--seeds", "1,a",
                      "--out", str(tmp_path / "r")])


class TestEval:
    def test_writes_report(self, pipeline, tmp_path):
        data_dir, runs_dir = pipeline
        out = tmp_path / "report.txt"
        rc = cli.main(["eval", "--data", str(data_dir), "--runs", str(runs_dir),
                       "--out", str(out)])
        assert rc == 0
        text = out.read_text()
        assert "uq_method=cqr" in text
        assert "coverage=" in text
        assert "interval_max=" in text

    def test_missing_dataset(self, pipeline, tmp_path, capsys):
        _, runs_dir = pipeline
        rc = cli.main(["eval", "--data", str(tmp_path / "nowhere"),
                       "--runs", str(runs_dir), "--out", str(tmp_path / "r.txt")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestRank:
    def test_top_k(self, pipeline, tmp_path):
        data_dir, runs_dir = pipeline
        out = tmp_path / "ranks.csv"
        rc = cli.main(["rank", "--data", str(data_dir), "--runs", str(runs_dir),
                       "--top", "3", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "rank,row,col,lat,lon,uq_score,rmse"
        assert 2 <= len(lines) <= 4
        assert lines[1].startswith("1,")

    def test_rejects_nonpositive_top(self, pipeline, tmp_path, capsys):
        data_dir, runs_dir = pipeline
        rc = cli.main(["rank", "--data", str(data_dir), "--runs", str(runs_dir),
                       "--top", "0", "--out", str(tmp_path / "r.csv")])
        assert rc == 1
        assert "--top" in capsys.readouterr().err


class TestSeries:
    def test_station_cell(self, pipeline, tmp_path):
        data_dir, runs_dir = pipeline
        samples, spec = data.read_dataset(data_dir)
        rows, cols = np.nonzero(samples[0].mask)
        lat, lon = spec.cell_center(int(rows[0]), int(cols[0]))
        out = tmp_path / "series.csv"
        rc = cli.main(["series", "--data", str(data_dir), "--runs", str(runs_dir),
                       "--lat", str(lat), "--lon", str(lon), "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "date,y,mid,lo,hi"
        assert len(lines) == 3  # header + the two held-out days
        assert lines[1].split(",")[0] < lines[2].split(",")[0]

    def test_coordinate_outside_region(self, pipeline, tmp_path, capsys):
        data_dir, runs_dir = pipeline
        rc = cli.main(["series", "--data", str(data_dir), "--runs", str(runs_dir),
                       "--lat", "-89.0", "--lon", "0.0", "--out", str(tmp_path / "s.csv")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestExtrapolate:
    def test_writes_maps(self, pipeline, tmp_path):
        data_dir, runs_dir = pipeline
        out = tmp_path / "maps"
        rc = cli.main(["extrapolate", "--data", str(data_dir), "--runs", str(runs_dir),
                       "--days", "1,2", "--out", str(out)])
        assert rc == 0
        for day in (1, 2):
            assert (out / f"uq_day{day:02d}.ppm").exists()
            grid = read_grid_csv(out / f"uq_day{day:02d}.csv")
            assert grid.shape == (16, 16)
            assert np.all(np.isfinite(grid))

    def test_day_out_of_range(self, pipeline, tmp_path, capsys):
        data_dir, runs_dir = pipeline
        rc = cli.main(["extrapolate", "--data", str(data_dir), "--runs", str(runs_dir),
                       "--days", "99", "--out", str(tmp_path / "maps")])
        assert rc == 1
        assert "out of range" in capsys.readouterr().err


def test_no_command_is_usage_error():
    with pytest.raises(SystemExit):
        cli.main([])
