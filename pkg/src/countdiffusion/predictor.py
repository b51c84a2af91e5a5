"""Feedforward predictor of the missing count, its loss, gradients and training.

The network sees ``x_t`` (divided by a fixed per-dimension scale), the
survival-probability features of :func:`time_features` and, for conditional
models, a class embedding. Its softplus head estimates ``y = x0 - x_t``.
Backpropagation is written out by hand in NumPy.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .kernel import as_counts, forward_sample, make_rng
from .schedule import PSchedule, ScheduleKind, WeightKind, WeightSpec, p_of, weight

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "countdiffusion-checkpoint"
CHECKPOINT_VERSION = 1
_YHAT_FLOOR = 1e-12


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at training step {step}")
        self.step = step


# -- activations --------------------------------------------------------------

def softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _silu(z):
    return z * _sigmoid(z)


def _silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


N_TIME_FEATURES = 2


def time_features(p):
    p = np.asarray(p, dtype=np.float64)
    return [p, 1.0 - p]


# -- model --------------------------------------------------------------------

class Predictor:
    """MLP ``(x_t, p(t), class) -> y_hat > 0``.

    Args:
        n_dims: Data dimension ``D``.
        hidden: Hidden layer widths.
        n_classes: Number of labelled classes ``C``; 0 for an unconditional
            model. Embedding row 0 is the fixed all-zero null class, rows
            ``1..C`` belong to labels ``0..C-1``.
        class_dim: Width of the class embedding.
        scale: Per-dimension input divisor, usually the training maximum.
        schedule: Survival schedule used to turn times into features.
    """

    def __init__(self, n_dims: int, hidden: Sequence[int] = (48,), n_classes: int = 0,
                 class_dim: int = 8, scale=None, schedule: Optional[PSchedule] = None):
        if n_dims < 1 or any(h < 1 for h in hidden):
            raise ValueError("layer widths must be positive")
        self.n_dims = int(n_dims)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_classes = int(n_classes)
        self.class_dim = int(class_dim) if n_classes > 0 else 0
        self.scale = np.ones(n_dims) if scale is None else np.asarray(scale, dtype=np.float64).copy()
        if self.scale.shape != (n_dims,) or np.any(self.scale <= 0):
            raise ValueError("scale must be a positive vector of length n_dims")
        self.schedule = schedule or PSchedule()
        self.params: dict[str, np.ndarray] = {}
        for name, shape in self.param_shapes().items():
            self.params[name] = np.zeros(shape)

    @property
    def layer_dims(self) -> list[int]:
        return [self.n_dims + N_TIME_FEATURES + self.class_dim, *self.hidden, self.n_dims]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def conditional(self) -> bool:
        return self.n_classes > 0

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        if self.conditional:
            shapes["class_embed"] = (self.n_classes + 1, self.class_dim)
        dims = self.layer_dims
        for i in range(self.n_layers):
            shapes[f"W{i}"] = (dims[i], dims[i + 1])
            shapes[f"b{i}"] = (dims[i + 1],)
        return shapes

    def num_parameters(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def init(self, rng: np.random.Generator) -> "Predictor":
        """Glorot-uniform hidden layers, zero output layer, zero embeddings.

        Zero class embeddings make every class start out identical to the
        null class; rows only move once their labels are seen in training.
        """
        dims = self.layer_dims
        for i in range(self.n_layers - 1):
            bound = math.sqrt(6.0 / (dims[i] + dims[i + 1]))
            self.params[f"W{i}"] = rng.uniform(-bound, bound, (dims[i], dims[i + 1]))
            self.params[f"b{i}"] = np.zeros(dims[i + 1])
        last = self.n_layers - 1
        self.params[f"W{last}"] = np.zeros((dims[last], dims[last + 1]))
        self.params[f"b{last}"] = np.zeros(dims[last + 1])
        if self.conditional:
            self.params["class_embed"] = np.zeros((self.n_classes + 1, self.class_dim))
        return self

    def copy(self) -> "Predictor":
        other = Predictor(self.n_dims, self.hidden, self.n_classes, self.class_dim or 8,
                          self.scale, self.schedule)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    # forward / backward

    def _inputs(self, x_t, p, class_ids):
        x = np.asarray(x_t, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_dims:
            raise ValueError(f"expected input of shape (N, {self.n_dims}), got {x.shape}")
        n = x.shape[0]
        p = np.broadcast_to(np.asarray(p, dtype=np.float64).reshape(-1, 1), (n, 1))
        parts = [x / self.scale, *time_features(p)]
        ids = None
        if self.conditional:
            if class_ids is None:
                ids = np.zeros(n, dtype=np.int64)
            else:
                ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64).reshape(-1), (n,))
                if np.any(ids < 0) or np.any(ids > self.n_classes):
                    raise ValueError(f"class ids must lie in 0..{self.n_classes}")
            parts.append(self.params["class_embed"][ids])
        elif class_ids is not None and np.any(np.asarray(class_ids) != 0):
            raise ValueError("model has no class embedding")
        return np.concatenate(parts, axis=1), ids

    def _forward(self, x_t, p, class_ids):
        h, ids = self._inputs(x_t, p, class_ids)
        acts, pre = [h], []
        for i in range(self.n_layers):
            z = acts[-1] @ self.params[f"W{i}"] + self.params[f"b{i}"]
            pre.append(z)
            if i < self.n_layers - 1:
                acts.append(_silu(z))
        y_hat = np.maximum(softplus(pre[-1]), _YHAT_FLOOR)
        return y_hat, (acts, pre, ids)

    def predict_p(self, x_t, p, class_ids=None) -> np.ndarray:
        """Predictions given survival probability ``p`` instead of time."""
        return self._forward(x_t, p, class_ids)[0]

    def backward(self, cache, d_yhat) -> dict[str, np.ndarray]:
        acts, pre, ids = cache
        grads: dict[str, np.ndarray] = {}
        dz = d_yhat * _sigmoid(pre[-1])
        for i in reversed(range(self.n_layers)):
            grads[f"W{i}"] = acts[i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            da = dz @ self.params[f"W{i}"].T
            if i > 0:
                dz = da * _silu_grad(pre[i - 1])
        if self.conditional:
            d_emb = da[:, self.n_dims + N_TIME_FEATURES:]
            g = np.zeros_like(self.params["class_embed"])
            np.add.at(g, ids, d_emb)
            g[0] = 0.0  # null class is fixed at zero
            grads["class_embed"] = g
        return {k: grads[k] for k in self.params}


def predict(model: Predictor, x_t, t, class_ids=None) -> np.ndarray:
    """Strictly positive estimate of ``x0 - x_t`` at time ``t``."""
    return model.predict_p(x_t, p_of(model.schedule, t), class_ids)


def loss(y_hat, y, w=1.0) -> float:
    """Weighted Poisson-type objective ``mean(w * (y_hat - y log y_hat))``.

    ``w`` is a scalar or one weight per row. Entries with ``y = 0`` contribute
    ``y_hat`` only.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(y_hat <= 0.0):
        raise ValueError("loss needs strictly positive predictions")
    w = _row_weights(w, y_hat)
    ylog = np.where(y > 0, y * np.log(y_hat), 0.0)
    return float(np.mean(w * (y_hat - ylog)))


def _row_weights(w, y_hat):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w.reshape(-1, 1)
    return w


def grad(model: Predictor, x_t, t, class_ids, y, w=1.0):
    """Loss and exact gradients with respect to every parameter.

    Returns:
        ``(loss_value, grads)`` where ``grads`` mirrors ``model.params``.
    """
    return grad_p(model, x_t, p_of(model.schedule, t), class_ids, y, w)


def grad_p(model: Predictor, x_t, p, class_ids, y, w=1.0):
    y_hat, cache = model._forward(x_t, p, class_ids)
    y = np.asarray(y, dtype=np.float64)
    wr = _row_weights(w, y_hat)
    value = loss(y_hat, y, wr)
    d_yhat = wr * (1.0 - y / y_hat) / y_hat.size
    return value, model.backward(cache, d_yhat)


# -- optimisation -------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 2e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_steps: int = 4000
    p_uncond: float = 0.1
    weight_spec: WeightSpec = field(default_factory=lambda: WeightSpec(WeightKind.NLL))
    schedule: PSchedule = field(default_factory=lambda: PSchedule(ScheduleKind.BLACKOUT_CONTINUOUS))
    hidden: tuple[int, ...] = (48,)
    class_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")
        self.adam_betas = tuple(self.adam_betas)
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_spec"] = self.weight_spec.kind.value
        d["schedule"] = _schedule_dict(self.schedule)
        d["adam_betas"] = list(self.adam_betas)
        d["hidden"] = list(self.hidden)
        return d


def adam_step(model: Predictor, grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig):
    """Bias-corrected Adam update applied in place; returns ``(model, state)``."""
    if set(grads) != set(model.params):
        raise ValueError("gradient keys do not match model parameters")
    b1, b2 = config.adam_betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        if g.shape != model.params[k].shape or state.m[k].shape != g.shape:
            raise ValueError(f"shape mismatch for parameter {k}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        model.params[k] = model.params[k] - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return model, state


def drop_labels(class_ids, p_uncond: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each class id by the null id 0 with probability ``p_uncond``."""
    ids = np.asarray(class_ids, dtype=np.int64)
    keep = rng.random(ids.shape) >= p_uncond
    return np.where(keep, ids, 0)


def train(dataset, labels=None, config: Optional[TrainConfig] = None, progress: bool = False):
    """Fit a predictor by stochastic gradient descent on the weighted objective.

    Each step draws a minibatch ``x0`` with replacement, one time ``t`` per
    row, thins ``x_t ~ Bin(x0, p(t))`` and regresses ``y = x0 - x_t``.

    Returns:
        ``(model, losses)`` with one loss value per optimisation step.

    Raises:
        ValueError: Empty dataset.
        NumericalError: The loss became non-finite.
    """
    config = config or TrainConfig()
    x = as_counts(dataset, "dataset")
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training needs a non-empty (N, D) dataset")
    n, d = x.shape
    ids_all = None
    n_classes = 0
    if labels is not None:
        lab = as_counts(labels, "labels").reshape(-1)
        if lab.shape[0] != n:
            raise ValueError("labels must have one entry per row")
        n_classes = int(lab.max()) + 1
        ids_all = lab + 1
    rng = make_rng(config.seed)
    scale = np.maximum(x.max(axis=0), 1).astype(np.float64)
    model = Predictor(d, config.hidden, n_classes, config.class_dim, scale, config.schedule).init(rng)
    state = AdamState.zeros_like(model.params)
    losses = np.zeros(config.max_steps)
    for step in range(config.max_steps):
        idx = rng.integers(0, n, config.batch_size)
        x0 = x[idx]
        t = rng.random(config.batch_size)
        p = np.asarray(p_of(config.schedule, t))
        x_t = forward_sample(x0, p[:, None], rng)
        ids = None
        if ids_all is not None:
            ids = drop_labels(ids_all[idx], config.p_uncond, rng)
        w = np.asarray(weight(config.weight_spec, config.schedule, t))
        value, grads = grad_p(model, x_t, p, ids, x0 - x_t, w)
        if not np.isfinite(value):
            raise NumericalError(step, value)
        losses[step] = value
        adam_step(model, grads, state, config)
        if progress and (step + 1) % 500 == 0:
            log.info("step %d loss %.5f", step + 1, value)
    return model, losses


def smoothed(losses, alpha: float = 0.01) -> np.ndarray:
    """Exponential moving average of a loss trace."""
    out = np.empty(len(losses))
    acc = float(losses[0]) if len(losses) else 0.0
    for i, v in enumerate(losses):
        acc = (1 - alpha) * acc + alpha * v
        out[i] = acc
    return out


# -- checkpoints --------------------------------------------------------------

def _schedule_dict(s: PSchedule) -> dict:
    return {"kind": s.kind.value, "p_min": s.p_min, "num_steps": s.num_steps}


def _tensor(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel(order="C")]}


def checkpoint_bytes(model: Predictor, train_config: Optional[dict] = None) -> bytes:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_dims": model.layer_dims,
        "n_dims": model.n_dims,
        "hidden": list(model.hidden),
        "n_classes": model.n_classes,
        "class_dim": model.class_dim,
        "schedule": _schedule_dict(model.schedule),
        "scale": _tensor(model.scale),
        "params": {k: _tensor(v) for k, v in model.params.items()},
        "train_config": train_config or {},
    }
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8")


def save_checkpoint(model: Predictor, path, train_config: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, train_config))
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, train_config_echo)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    sched = doc["schedule"]
    schedule = PSchedule(kind=ScheduleKind(sched["kind"]), p_min=sched["p_min"],
                         num_steps=sched["num_steps"])
    scale = np.array(doc["scale"]["data"], dtype=np.float64)
    model = Predictor(doc["n_dims"], doc["hidden"], doc["n_classes"], doc["class_dim"] or 8,
                      scale, schedule)
    if model.layer_dims != doc["layer_dims"]:
        raise ValueError(f"{path}: layer_dims {doc['layer_dims']} inconsistent with header")
    for k, shape in model.param_shapes().items():
        entry = doc["params"][k]
        if tuple(entry["shape"]) != shape:
            raise ValueError(f"{path}: parameter {k} has shape {entry['shape']}, expected {list(shape)}")
        model.params[k] = np.array(entry["data"], dtype=np.float64).reshape(shape)
    return model, doc.get("train_config", {})


def weight_kind(name: str) -> WeightSpec:
    return WeightSpec(WeightKind(name))
