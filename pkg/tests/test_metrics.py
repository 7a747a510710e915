"""MAE/RMSE, per-time series, histograms, and CSV round-tripping."""

import numpy as np
import numpy.testing as npt
import pytest

from smokediff.metrics import (
    REFERENCE_MAE,
    REFERENCE_RMSE,
    build_report,
    histogram,
    mae,
    read_metrics_csv,
    rmse,
    rmse_per_tau,
    write_histogram_csv,
    write_metrics_csv,
)


def test_identical_inputs_zero_error(np_rng):
    g = [np_rng.standard_normal((4, 4)) for _ in range(3)]
    assert mae(g, g) == 0.0
    assert rmse(g, g) == 0.0


def test_constant_offset(np_rng):
    g = np_rng.standard_normal((5, 5))
    assert mae([g + 0.7], [g]) == pytest.approx(0.7)
    assert rmse([g - 0.7], [g]) == pytest.approx(0.7)


def test_matches_loop_oracle(np_rng):
    p = np_rng.standard_normal((3, 4))
    t = np_rng.standard_normal((3, 4))
    abs_acc, sq_acc = 0.0, 0.0
    for i in np.ndindex(p.shape):
        abs_acc += abs(p[i] - t[i])
        sq_acc += (p[i] - t[i]) ** 2
    assert mae([p], [t]) == pytest.approx(abs_acc / p.size, rel=1e-12)
    assert rmse([p], [t]) == pytest.approx(np.sqrt(sq_acc / p.size), rel=1e-12)


def test_rmse_at_least_mae(np_rng):
    for _ in range(20):
        p = np_rng.standard_normal((6, 6))
        t = np_rng.standard_normal((6, 6))
        assert rmse([p], [t]) >= mae([p], [t])


def test_permutation_invariance(np_rng):
    ps = [np_rng.standard_normal((3, 3)) for _ in range(4)]
    ts = [np_rng.standard_normal((3, 3)) for _ in range(4)]
    perm = [2, 0, 3, 1]
    assert mae(ps, ts) == pytest.approx(mae([ps[i] for i in perm], [ts[i] for i in perm]))
    assert rmse(ps, ts) == pytest.approx(rmse([ps[i] for i in perm], [ts[i] for i in perm]))


def test_shape_mismatch_rejected(np_rng):
    with pytest.raises(ValueError):
        mae([np_rng.standard_normal((2, 2))], [np_rng.standard_normal((3, 2))])


# ---------------------------------------------------------------------------
# per-tau series

def test_single_tau_equals_global(np_rng):
    p = {1.0: [np_rng.standard_normal((4, 4))]}
    t = {1.0: [np_rng.standard_normal((4, 4))]}
    series = rmse_per_tau(p, t)
    assert len(series) == 1
    assert series[0][1] == pytest.approx(rmse(p[1.0], t[1.0]))


def test_two_taus_constant_errors(np_rng):
    base = np_rng.standard_normal((4, 4))
    p = {1.0: [base + 0.2], 2.0: [base + 0.5]}
    t = {1.0: [base], 2.0: [base]}
    series = rmse_per_tau(p, t)
    assert [round(s[1], 10) for s in series] == [0.2, 0.5]


def test_tau_key_mismatch_lists_missing(np_rng):
    with pytest.raises(ValueError, match="3.0"):
        rmse_per_tau({1.0: [np.zeros(2)]}, {1.0: [np.zeros(2)], 3.0: [np.zeros(2)]})


def test_global_mse_is_weighted_mean_of_per_tau(np_rng):
    p = {1.0: [np_rng.standard_normal((2, 4, 4)) for _ in range(2)],
         2.0: [np_rng.standard_normal((2, 4, 4)) for _ in range(3)]}
    t = {k: [np_rng.standard_normal((2, 4, 4)) for _ in v] for k, v in p.items()}
    report = build_report(p, t)
    sizes = {tau: np.stack(v).size for tau, v in p.items()}
    per_tau_mse = {tau: r**2 for tau, comp, m, r in report.per_tau if comp == "all"}
    weighted = sum(per_tau_mse[tau] * sizes[tau] for tau in sizes) / sum(sizes.values())
    assert report.global_rmse**2 == pytest.approx(weighted, rel=1e-6)


# ---------------------------------------------------------------------------
# histogram

def test_histogram_point_mass():
    edges, dens = histogram(np.full(100, 0.5), 10, (0.0, 1.0))
    assert dens.sum() * 0.1 == pytest.approx(1.0)
    assert np.count_nonzero(dens) == 1


def test_histogram_uniform_density():
    vals = np.random.default_rng(0).uniform(-2.0, 2.0, 100_000)
    _, dens = histogram(vals, 20, (-2.0, 2.0))
    npt.assert_allclose(dens, 0.25, rtol=0.05)


def test_histogram_integrates_to_one(np_rng):
    vals = np_rng.standard_normal(5000)
    edges, dens = histogram(vals, 37, (-10.0, 3.0))
    width = edges[1] - edges[0]
    assert abs(dens.sum() * width - 1.0) < 1e-6


def test_histogram_clamps_out_of_range():
    vals = np.array([-100.0, 0.25, 100.0])
    edges, dens = histogram(vals, 2, (0.0, 1.0))
    width = 0.5
    counts = dens * vals.size * width
    npt.assert_allclose(counts, [2.0, 1.0])  # clamped extremes land in the end bins


def test_histogram_rejects_bad_args():
    with pytest.raises(ValueError):
        histogram(np.zeros(3), 0, (0.0, 1.0))
    with pytest.raises(ValueError):
        histogram(np.zeros(3), 4, (1.0, 1.0))


# ---------------------------------------------------------------------------
# report and CSV

def _toy_report(np_rng):
    p = {1.0: [np_rng.standard_normal((2, 4, 4))], 2.0: [np_rng.standard_normal((2, 4, 4))]}
    t = {1.0: [np_rng.standard_normal((2, 4, 4))], 2.0: [np_rng.standard_normal((2, 4, 4))]}
    return build_report(p, t)


def test_report_invariants(np_rng):
    report = _toy_report(np_rng)
    assert report.global_rmse >= report.global_mae >= 0.0
    for tau, comp, m, r in report.per_tau:
        assert r >= m >= 0.0
    assert report.reference_mae == REFERENCE_MAE
    assert report.reference_rmse == REFERENCE_RMSE
    for comp, (edges, dp, dt_) in report.hist.items():
        width = edges[1] - edges[0]
        assert abs(dp.sum() * width - 1.0) < 1e-6
        assert abs(dt_.sum() * width - 1.0) < 1e-6


def test_metrics_csv_roundtrip_exact(tmp_path, np_rng):
    report = _toy_report(np_rng)
    path = tmp_path / "metrics.csv"
    write_metrics_csv(report, path)
    text = path.read_text()
    assert str(REFERENCE_MAE) in text and str(REFERENCE_RMSE) in text  # annotation comments
    g_mae, g_rmse, per_tau = read_metrics_csv(path)
    assert g_mae == report.global_mae and g_rmse == report.global_rmse  # bit-exact via repr
    assert per_tau == [(float(tau), comp, m, r) for tau, comp, m, r in report.per_tau]


def test_histogram_csv_files(tmp_path, np_rng):
    report = _toy_report(np_rng)
    write_histogram_csv(report, tmp_path)
    for comp in ("ux", "uy"):
        lines = (tmp_path / f"hist_{comp}.csv").read_text().strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,density_pred,density_truth"
        assert len(lines) == 51  # 50 bins + header
