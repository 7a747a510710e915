"""Prediction-quality metrics: MAE, RMSE, per-time RMSE curves, and velocity
probability histograms, with CSV emission at full round-trip precision.

The published single-model reference errors (MAE 0.1975, RMSE 0.3137 on the
full-scale benchmark) ride along as annotations in reports and CSV comments;
they are context, never assertions, since desk-scale runs cannot reproduce
the full-scale training budget.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REFERENCE_MAE = 0.1975
REFERENCE_RMSE = 0.3137


def _flatten(grids) -> np.ndarray:
    if isinstance(grids, np.ndarray):
        return grids.reshape(-1).astype(np.float64)
    return np.concatenate([np.asarray(g, dtype=np.float64).reshape(-1) for g in grids])


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = _flatten(pred)
    t = _flatten(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction/truth size mismatch: {p.shape} vs {t.shape}")
    return p, t


def mae(pred, truth) -> float:
    p, t = _check_pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    p, t = _check_pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def rmse_per_tau(pred_by_tau: dict, truth_by_tau: dict) -> list:
    """One (tau, rmse, mae) triple per time key, ordered by tau."""
    missing = sorted(set(pred_by_tau) ^ set(truth_by_tau))
    if missing:
        raise ValueError(f"tau keys differ between prediction and truth: {missing}")
    out = []
    for tau in sorted(pred_by_tau):
        out.append((tau, rmse(pred_by_tau[tau], truth_by_tau[tau]), mae(pred_by_tau[tau], truth_by_tau[tau])))
    return out


def histogram(values, n_bins: int, value_range: tuple[float, float]):
    """Equal-width density histogram; out-of-range values are clamped into the
    end bins so every value is counted. Densities integrate to 1."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    lo, hi = value_range
    if not lo < hi:
        raise ValueError(f"need lo < hi, got ({lo}, {hi})")
    vals = np.clip(_flatten(values), lo, hi)
    counts, edges = np.histogram(vals, bins=n_bins, range=(lo, hi))
    width = (hi - lo) / n_bins
    densities = counts / (vals.size * width)
    return edges, densities


@dataclass
class MetricsReport:
    global_mae: float
    global_rmse: float
    per_tau: list = field(default_factory=list)  # (tau, component, mae, rmse)
    hist: dict = field(default_factory=dict)  # component -> (edges, dens_pred, dens_truth)
    reference_mae: float = REFERENCE_MAE
    reference_rmse: float = REFERENCE_RMSE

    def per_tau_series(self, component: str = "all") -> list:
        return [(tau, r) for tau, comp, _, r in self.per_tau if comp == component]


_COMPONENTS = ("ux", "uy", "all")


def build_report(preds_by_tau: dict, truth_by_tau: dict, n_bins: int = 50) -> MetricsReport:
    """Aggregate metrics from {tau: [(2,H,W) prediction, ...]} and matching truth.

    Per-tau rows cover each velocity component and their union; histograms
    span the truth set's min/max, following the evaluation defaults.
    """
    missing = sorted(set(preds_by_tau) ^ set(truth_by_tau))
    if missing:
        raise ValueError(f"tau keys differ between prediction and truth: {missing}")
    taus = sorted(preds_by_tau)
    rows = []
    for tau in taus:
        p = np.stack(preds_by_tau[tau])  # (n, 2, H, W)
        t = np.stack(truth_by_tau[tau])
        for comp in _COMPONENTS:
            sel = {"ux": np.s_[:, 0], "uy": np.s_[:, 1], "all": np.s_[:]}[comp]
            rows.append((tau, comp, mae(p[sel], t[sel]), rmse(p[sel], t[sel])))
    all_p = np.concatenate([np.stack(preds_by_tau[tau]) for tau in taus])
    all_t = np.concatenate([np.stack(truth_by_tau[tau]) for tau in taus])
    hist = {}
    for ci, comp in enumerate(("ux", "uy")):
        t_vals = all_t[:, ci]
        lo, hi = float(t_vals.min()), float(t_vals.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges, dens_t = histogram(t_vals, n_bins, (lo, hi))
        _, dens_p = histogram(all_p[:, ci], n_bins, (lo, hi))
        hist[comp] = (edges, dens_p, dens_t)
    return MetricsReport(
        global_mae=mae(all_p, all_t),
        global_rmse=rmse(all_p, all_t),
        per_tau=rows,
        hist=hist,
    )


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# reference_mae={REFERENCE_MAE} (published full-scale reference, annotation only)\n")
        f.write(f"# reference_rmse={REFERENCE_RMSE} (published full-scale reference, annotation only)\n")
        writer = csv.writer(f)
        writer.writerow(["tau", "component", "mae", "rmse"])
        writer.writerow(["all", "all", repr(report.global_mae), repr(report.global_rmse)])
        for tau, comp, m, r in report.per_tau:
            writer.writerow([repr(float(tau)), comp, repr(m), repr(r)])


def read_metrics_csv(path):
    """Re-parse a metrics CSV; returns (global_mae, global_rmse, per_tau rows)."""
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    header, first, rest = rows[0], rows[1], rows[2:]
    if header != ["tau", "component", "mae", "rmse"]:
        raise ValueError(f"unexpected metrics header {header}")
    per_tau = [(float(r[0]), r[1], float(r[2]), float(r[3])) for r in rest]
    return float(first[2]), float(first[3]), per_tau


def write_histogram_csv(report: MetricsReport, out_dir) -> None:
    for comp, (edges, dens_p, dens_t) in report.hist.items():
        with open(Path(out_dir) / f"hist_{comp}.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["bin_lo", "bin_hi", "density_pred", "density_truth"])
            for i in range(len(dens_p)):
                writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), repr(float(dens_p[i])), repr(float(dens_t[i]))])
