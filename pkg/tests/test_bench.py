import numpy as np
import pytest

from stmamba.bench import BenchConfig, BenchReport, BenchRow, bench_size, fit_exponent, run_bench
from stmamba.cli import main

SMALL = BenchConfig(d=16, heads=2, d_state=4, frames=2, window=4, chunk_size=4, sizes=[(4, 4), (4, 8), (8, 8)])


@pytest.fixture(scope="module")
def report():
    return run_bench(SMALL)


def test_fit_exponent_recovers_power_law():
    ls = [16, 32, 64, 128]
    assert fit_exponent(ls, [3.0 * l ** 2 for l in ls]) == pytest.approx(2.0)
    assert fit_exponent(ls, [7.0 * l for l in ls]) == pytest.approx(1.0)


def test_counts_scale_linearly_for_ours_and_quadratically_for_scores(report):
    assert report.ours_exponent == pytest.approx(1.0, abs=0.05)
    assert report.st_exponent > 1.8
    for r in report.rows:
        # the baseline block does nothing beyond what the closed form counts
        assert r.st_counted == r.st_model
        assert r.ours_attention > 0


def test_model_to_count_ratio_is_constant_in_l(report):
    ratios = [r.ours_ratio for r in report.rows]
    assert max(ratios) - min(ratios) < 1e-9


def test_table_is_deterministic(report):
    again = run_bench(SMALL)
    assert again.table() == report.table()
    assert again.text() == report.text()


def test_write_splits_timing(tmp_path, report):
    paths = report.write(tmp_path)
    assert [p.name for p in paths] == ["bench.csv", "bench.txt", "bench_timing.csv"]
    assert "wall" not in (tmp_path / "bench.csv").read_text()
    assert (tmp_path / "bench_timing.csv").read_text().startswith("l,wall_ours_s")
    assert len((tmp_path / "bench.csv").read_text().splitlines()) == 1 + len(SMALL.sizes)


def test_backward_changes_timing_not_counts():
    # the counter instruments forward kernels only; a backward pass shows up in memory
    fwd = bench_size(SMALL, (4, 4))
    bwd = bench_size(BenchConfig(**{**SMALL.__dict__, "include_backward": True}), (4, 4))
    assert (bwd.ours_counted, bwd.st_counted) == (fwd.ours_counted, fwd.st_counted)
    assert bwd.peak_bytes_ours > fwd.peak_bytes_ours


def test_ratio_properties():
    r = BenchRow(l=4, grid=(2, 2), ours_counted=200, ours_attention=0, ours_model=100, st_counted=50,
                 st_attention=10, st_model=50)
    assert (r.ours_ratio, r.st_ratio) == (0.5, 1.0)
    assert "0.5000" in BenchReport([r], 1.0, 2.0).text()


def test_cli_bench(tmp_path, monkeypatch, capsys):
    import stmamba.bench as bench_mod
    monkeypatch.setattr(bench_mod, "BenchConfig", lambda seed=0: SMALL)
    assert main(["bench", "--out-dir", str(tmp_path)]) == 0
    assert "fitted exponent" in capsys.readouterr().out
    assert (tmp_path / "config.json").exists() and (tmp_path / "bench.csv").exists()
    np.testing.assert_equal(len((tmp_path / "bench_timing.csv").read_text().splitlines()), 4)
