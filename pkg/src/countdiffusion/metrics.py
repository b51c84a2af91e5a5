"""Two-sample distribution distances and per-row imputation metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

_BLOCK = 1024


def _as_2d(x, name):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D sample matrix")
    return a


def _kernel_sum(a, b, gamma, exclude_diag=False):
    total = 0.0
    for i in range(0, len(a), _BLOCK):
        k = np.exp(-gamma * cdist(a[i:i + _BLOCK], b, "sqeuclidean"))
        if exclude_diag:
            rows = np.arange(k.shape[0])
            k[rows, rows + i] = 0.0
        total += k.sum()
    return total


def rbf_mmd2_unbiased(X, Y, gamma_kernel: float = 1.0) -> float:
    """Unbiased U-statistic estimate of squared MMD with ``exp(-gamma |a-b|^2)``.

    May be negative; see :func:`rbf_mmd` for the clamped value.
    """
    x, y = _as_2d(X, "X"), _as_2d(Y, "Y")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("MMD needs at least two rows per sample")
    kxx = _kernel_sum(x, x, gamma_kernel, exclude_diag=True) / (m * (m - 1))
    kyy = _kernel_sum(y, y, gamma_kernel, exclude_diag=True) / (n * (n - 1))
    kxy = _kernel_sum(x, y, gamma_kernel) / (m * n)
    return float(kxx + kyy - 2.0 * kxy)


def rbf_mmd(X, Y, gamma_kernel: float = 1.0) -> float:
    return max(0.0, rbf_mmd2_unbiased(X, Y, gamma_kernel))


def wasserstein1_1d(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein1_1d needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(stats.wasserstein_distance(a, b))


def random_projections(n_projections: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Directions drawn uniformly on the unit sphere, one per row."""
    v = rng.standard_normal((n_projections, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_wasserstein(X, Y, n_projections: int = 100, rng=None, projections=None) -> float:
    """Mean 1-D Wasserstein-1 distance over random projections."""
    x, y = _as_2d(X, "X"), _as_2d(Y, "Y")
    if len(x) == 0 or len(y) == 0:
        raise ValueError("sliced_wasserstein needs non-empty samples")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if projections is None:
        projections = random_projections(n_projections, x.shape[1], np.random.default_rng(rng))
    xp, yp = x @ projections.T, y @ projections.T
    return float(np.mean([wasserstein1_1d(xp[:, k], yp[:, k]) for k in range(len(projections))]))


def variance_report(X) -> np.ndarray:
    x = _as_2d(X, "X")
    if len(x) < 2:
        raise ValueError("variance needs at least two rows")
    return x.var(axis=0, ddof=1)


# -- imputation metrics -------------------------------------------------------

@dataclass
class SampleMetrics:
    rmse: float
    bias: float
    spearman: float
    rmse_se: float
    bias_se: float
    spearman_se: float
    rows_evaluated: int
    rows_skipped: int
    spearman_skipped: int


def _row_stats(imputed, truth, missing):
    rmse, bias, rho = [], [], []
    skipped = 0
    for i in range(truth.shape[0]):
        m = missing[i]
        if not m.any():
            skipped += 1
            rmse.append(np.nan), bias.append(np.nan), rho.append(np.nan)
            continue
        diff = imputed[i, m] - truth[i, m]
        rmse.append(np.sqrt(np.mean(diff ** 2)))
        bias.append(np.mean(diff))
        a, b = imputed[i, m], truth[i, m]
        # rank correlation is undefined for fewer than two points or a constant side
        if m.sum() < 2 or np.all(a == a[0]) or np.all(b == b[0]):
            rho.append(np.nan)
        else:
            rho.append(stats.spearmanr(a, b).statistic)
    return np.array(rmse), np.array(bias), np.array(rho), skipped


def sample_metrics(imputed, truth, mask, n_boot: int = 10, rng=None) -> SampleMetrics:
    """Row-averaged RMSE, bias and Spearman over masked entries.

    Standard errors are the spread of the row averages over ``n_boot``
    bootstrap resamples of rows.
    """
    imp = np.asarray(imputed, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    observed = np.asarray(getattr(mask, "observed", mask), dtype=bool)
    if imp.shape != tru.shape or observed.shape != tru.shape:
        raise ValueError(f"shape mismatch: imputed {imp.shape}, truth {tru.shape}, mask {observed.shape}")
    rmse, bias, rho, skipped = _row_stats(imp, tru, ~observed)
    valid = ~np.isnan(rmse)
    rho_valid = ~np.isnan(rho)
    rng = np.random.default_rng(rng)
    idx = np.flatnonzero(valid)
    boots = []
    for _ in range(n_boot):
        pick = rng.choice(idx, size=idx.size, replace=True) if idx.size else idx
        r = rho[pick]
        boots.append((rmse[pick].mean() if pick.size else np.nan,
                      bias[pick].mean() if pick.size else np.nan,
                      np.nanmean(r) if np.any(~np.isnan(r)) else np.nan))
    boots = np.array(boots)
    se = np.nanstd(boots, axis=0, ddof=1) if n_boot > 1 else np.zeros(3)

    def _mean(v, ok):
        return float(v[ok].mean()) if ok.any() else float("nan")

    return SampleMetrics(
        rmse=_mean(rmse, valid), bias=_mean(bias, valid), spearman=_mean(rho, rho_valid),
        rmse_se=float(se[0]), bias_se=float(se[1]), spearman_se=float(se[2]),
        rows_evaluated=int(valid.sum()), rows_skipped=int(skipped),
        spearman_skipped=int(valid.sum() - rho_valid.sum()),
    )


# -- reports ------------------------------------------------------------------

@dataclass
class DimMetrics:
    wasserstein1: float
    mmd: float
    variance_true: float
    variance_gen: float


@dataclass
class MetricReport:
    joint_mmd: float
    joint_swd: float
    per_dim: list[DimMetrics]
    swd_seed: int
    kernel_gamma: float
    n_projections: int
    n_generated: int
    n_reference: int
    joint_mmd_raw: float = 0.0
    sample_level: Optional[SampleMetrics] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def rows(self) -> list[tuple[str, float]]:
        out = [("joint_mmd", self.joint_mmd), ("joint_mmd_raw", self.joint_mmd_raw),
               ("joint_swd", self.joint_swd)]
        for j, d in enumerate(self.per_dim):
            out += [(f"d{j}.wasserstein1", d.wasserstein1), (f"d{j}.mmd", d.mmd),
                    (f"d{j}.variance_true", d.variance_true), (f"d{j}.variance_gen", d.variance_gen)]
        if self.sample_level is not None:
            for k, v in asdict(self.sample_level).items():
                out.append((f"sample.{k}", v))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.rows():
            w.writerow([k, repr(float(v))])
        return buf.getvalue()


def evaluate(generated, reference, kernel_gamma: float = 1.0, n_projections: int = 100,
             seed: int = 0, mask=None, imputed_truth=None) -> MetricReport:
    """Full metric panel of ``generated`` against ``reference``.

    With ``mask`` and ``imputed_truth`` the row-level imputation metrics are
    added, treating ``generated`` as the imputed matrix.
    """
    g, r = _as_2d(generated, "generated"), _as_2d(reference, "reference")
    if g.shape[1] != r.shape[1]:
        raise ValueError(f"shape mismatch: generated {g.shape} vs reference {r.shape}")
    raw = rbf_mmd2_unbiased(g, r, kernel_gamma)
    swd = sliced_wasserstein(g, r, n_projections, rng=seed)
    vg, vr = variance_report(g), variance_report(r)
    per_dim = [DimMetrics(wasserstein1_1d(g[:, j], r[:, j]),
                          rbf_mmd(g[:, j:j + 1], r[:, j:j + 1], kernel_gamma),
                          float(vr[j]), float(vg[j])) for j in range(g.shape[1])]
    rep = MetricReport(joint_mmd=max(0.0, raw), joint_swd=swd, per_dim=per_dim, swd_seed=seed,
                       kernel_gamma=kernel_gamma, n_projections=n_projections,
                       n_generated=len(g), n_reference=len(r), joint_mmd_raw=raw)
    if mask is not None:
        truth = r if imputed_truth is None else imputed_truth
        rep.sample_level = sample_metrics(g, truth, mask, rng=seed)
    return rep
