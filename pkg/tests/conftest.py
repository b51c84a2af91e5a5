import numpy as np
import pytest

from countdiffusion.kernel import binomial_pmf
from countdiffusion.schedule import PSchedule, ScheduleKind


class PointOracle:
    """Predicts exactly ``x0 - x_t`` for one known target row."""

    conditional = False

    def __init__(self, x0, schedule=None):
        self.x0 = np.asarray(x0, dtype=np.int64).reshape(1, -1)
        self.n_dims = self.x0.shape[1]
        self.schedule = schedule or PSchedule(ScheduleKind.COSINE)

    def predict_p(self, x_t, p, class_ids=None):
        return np.maximum(self.x0 - np.asarray(x_t), 0).astype(np.float64)


class MixtureOracle:
    """Exact posterior mean of ``x0 - x_t`` for a finite set of equally likely points.

    States that no point can produce get no further births.
    """

    conditional = False

    def __init__(self, points, schedule=None):
        self.points = np.asarray(points, dtype=np.int64)
        self.n_dims = self.points.shape[1]
        self.schedule = schedule or PSchedule(ScheduleKind.COSINE)

    def predict_p(self, x_t, p, class_ids=None):
        x = np.asarray(x_t)
        out = np.zeros(x.shape)
        for i, row in enumerate(x):
            w = np.array([
                np.prod([binomial_pmf(int(a), int(b), float(p)) if b <= a else 0.0
                         for a, b in zip(pt, row)])
                for pt in self.points
            ])
            if w.sum() > 0:
                mean = (w[:, None] * self.points).sum(axis=0) / w.sum()
                out[i] = np.maximum(mean - row, 0.0)
        return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_check(model, x, p, ids, y, w, coords, h=1e-5, rel=1e-4, abs_tol=1e-7):
    """Compare analytic gradients with central differences at ``coords``.

    ``coords`` is a list of ``(param_name, flat_index)``. Returns the list of
    failing coordinates with their analytic and numerical values.
    """
    from countdiffusion.predictor import grad_p, loss

    _, g = grad_p(model, x, p, ids, y, w)
    bad = []
    for name, i in coords:
        arr = model.params[name].reshape(-1)
        old = arr[i]
        arr[i] = old + h
        up = loss(model.predict_p(x, p, ids), y, w)
        arr[i] = old - h
        down = loss(model.predict_p(x, p, ids), y, w)
        arr[i] = old
        fd = (up - down) / (2 * h)
        an = g[name].reshape(-1)[i]
        if abs(an - fd) > max(abs_tol, rel * abs(fd)):
            bad.append((name, i, an, fd))
    return bad


def randomized_model(seed=0, n_dims=4, hidden=(8, 8), n_classes=3):
    """A predictor whose every parameter (output layer and embeddings too) is random."""
    from countdiffusion.predictor import Predictor

    r = np.random.default_rng(seed)
    m = Predictor(n_dims, hidden, n_classes=n_classes, class_dim=3,
                  scale=r.uniform(1, 5, n_dims)).init(r)
    for k, v in m.params.items():
        m.params[k] = r.normal(0, 0.5, v.shape)
    if n_classes:
        m.params["class_embed"][0] = 0.0
    return m


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
