"""Synthetic negative-binomial count data and the counts CSV format.

Counts are drawn as a gamma-Poisson mixture with mean ``s * mu_d`` and
dispersion ``theta_d``, so ``Var = m + m**2 / theta``. A log-normal size
factor ``s`` shared by all dimensions of a row couples the coordinates.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .kernel import as_counts, make_rng

LABEL_COLUMN = "label"


class CountFileError(ValueError):
    """Malformed counts file."""


class EmptyDatasetError(CountFileError):
    pass


@dataclass(frozen=True)
class NegBinSpec:
    dim: int = 10
    mu_range: tuple[float, float] = (0.05, 0.5)
    theta_range: tuple[float, float] = (0.2, 5.0)
    size_factor_lognormal: tuple[float, float] = (0.0, 0.6)
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        for name in ("mu_range", "theta_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo < hi:
                raise ValueError(f"{name} must satisfy 0 < lower < upper, got {(lo, hi)}")
        if self.size_factor_lognormal[1] < 0.0:
            raise ValueError("size factor scale must be non-negative")
        object.__setattr__(self, "mu_range", tuple(map(float, self.mu_range)))
        object.__setattr__(self, "theta_range", tuple(map(float, self.theta_range)))
        object.__setattr__(self, "size_factor_lognormal", tuple(map(float, self.size_factor_lognormal)))


def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


def draw_parameters(spec: NegBinSpec) -> dict[str, np.ndarray]:
    """Per-dimension means and dispersions; fixed by ``spec.seed``."""
    rng = make_rng(np.random.SeedSequence([spec.seed, 0]))
    return {
        "mu": _log_uniform(rng, *spec.mu_range, spec.dim),
        "theta": _log_uniform(rng, *spec.theta_range, spec.dim),
    }


def sample_negbin(mu, theta, size_factor, rng: np.random.Generator) -> np.ndarray:
    """Gamma-Poisson draws with row means ``size_factor * mu``."""
    mean = np.asarray(size_factor, dtype=np.float64).reshape(-1, 1) * np.asarray(mu)[None, :]
    lam = rng.gamma(np.broadcast_to(theta, mean.shape), mean / theta)
    return rng.poisson(lam).astype(np.int64)


def sample_dataset(spec: NegBinSpec, n: int, rng: Optional[np.random.Generator] = None):
    """Draw ``n`` rows from the toy distribution.

    The per-dimension parameters depend only on ``spec.seed``. Passing a
    separate ``rng`` draws fresh rows from the same distribution.

    Returns:
        ``(counts, record)`` where ``record`` holds ``mu``, ``theta`` and the
        realised size factors.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    params = draw_parameters(spec)
    rng = rng if rng is not None else make_rng(np.random.SeedSequence([spec.seed, 1]))
    loc, scale = spec.size_factor_lognormal
    s = rng.lognormal(loc, scale, n)
    counts = sample_negbin(params["mu"], params["theta"], s, rng)
    record = {"spec": _spec_dict(spec), "mu": params["mu"].tolist(),
              "theta": params["theta"].tolist(), "size_factor": s.tolist()}
    return counts, record


def _spec_dict(spec: NegBinSpec) -> dict:
    d = asdict(spec)
    for k in ("mu_range", "theta_range", "size_factor_lognormal"):
        d[k] = list(d[k])
    return d


# -- file IO ------------------------------------------------------------------

def column_names(d: int) -> list[str]:
    return [f"d{j}" for j in range(d)]


def counts_to_csv(matrix, labels=None, header=None) -> str:
    x = as_counts(matrix)
    if x.ndim != 2:
        raise ValueError("counts must be a 2-D matrix")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(header) if header is not None else column_names(x.shape[1])
    if labels is not None:
        labels = as_counts(labels, "labels").reshape(-1)
        if labels.shape[0] != x.shape[0]:
            raise ValueError("labels must have one entry per row")
        cols.append(LABEL_COLUMN)
    w.writerow(cols)
    for i, row in enumerate(x):
        vals = [int(v) for v in row]
        if labels is not None:
            vals.append(int(labels[i]))
        w.writerow(vals)
    return buf.getvalue()


def save_counts(matrix, path, labels=None, header=None) -> Path:
    path = Path(path)
    path.write_text(counts_to_csv(matrix, labels, header), encoding="utf-8")
    return path


def _parse_cell(text: str, row: int, col: str, path) -> int:
    try:
        v = int(text.strip())
    except ValueError:
        raise CountFileError(f"{path}: row {row}, column {col!r}: {text!r} is not an integer") from None
    if v < 0:
        raise CountFileError(f"{path}: row {row}, column {col!r}: negative count {v}")
    return v


def load_counts(path, comments: str = "#"):
    """Read a counts CSV.

    Returns:
        ``(counts, labels)``; ``labels`` is ``None`` without a label column.

    Raises:
        EmptyDatasetError: The file has no header.
        CountFileError: A cell is not a non-negative integer; the message
            names the data row (1-based) and column.
    """
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines()
             if ln.strip() and not ln.lstrip().startswith(comments)]
    if not lines:
        raise EmptyDatasetError(f"{path}: empty dataset")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    has_label = header[-1] == LABEL_COLUMN
    rows, labels = [], []
    for i, rec in enumerate(reader, start=1):
        if len(rec) != len(header):
            raise CountFileError(f"{path}: row {i} has {len(rec)} fields, expected {len(header)}")
        vals = [_parse_cell(c, i, header[j], path) for j, c in enumerate(rec)]
        if has_label:
            labels.append(vals.pop())
        rows.append(vals)
    d = len(header) - int(has_label)
    x = np.array(rows, dtype=np.int64).reshape(len(rows), d)
    return x, (np.array(labels, dtype=np.int64) if has_label else None)


def read_header(path, comments: str = "#") -> list[str]:
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if ln.strip() and not ln.lstrip().startswith(comments):
            return [h.strip() for h in next(csv.reader([ln]))]
    raise EmptyDatasetError(f"{path}: empty dataset")
