"""Reverse-time generation, attrition schedules, missingness masks and imputation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from scipy.optimize import brentq

from .kernel import as_counts, attrition_step, guide, make_rng, random_round, spawn_rngs
from .schedule import PSchedule, p_of, reverse_time_grid, sigma_max
from .synth import CountFileError, column_names


class GuidanceConfigError(ValueError):
    """Guidance or a class was requested from an unconditional model."""


@dataclass(frozen=True)
class Attrition:
    """Attrition schedule: ``eta=None`` is pure birth, otherwise ``eta * sigma_max``."""

    eta: Optional[float] = None

    def __post_init__(self):
        if self.eta is not None and not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")

    def __call__(self, p_t: float, p_s: float) -> float:
        if self.eta is None:
            return 0.0
        return self.eta * sigma_max(p_t, p_s)

    @classmethod
    def parse(cls, text: Union[str, float, None]) -> "Attrition":
        if text is None or text == "none" or text == "":
            return cls()
        if isinstance(text, (int, float)):
            return cls(float(text))
        name, _, val = str(text).partition(":")
        if name != "rescale" or not val:
            raise ValueError(f"attrition must be 'none' or 'rescale:<eta>', got {text!r}")
        return cls(float(val))

    def __str__(self) -> str:
        return "none" if self.eta is None else f"rescale:{self.eta}"


@dataclass(frozen=True)
class SamplerConfig:
    """Settings of one reverse-time sampling run.

    ``class_id`` is a data label (``0..C-1``). ``gamma`` defaults to plain
    conditional sampling when a class is given and is ignored otherwise.
    ``resample`` is the number of passes per reverse step during imputation
    (1 = single pass; larger values re-noise and redo each step so the
    masked entries can adjust to the observed ones).
    """

    num_steps: int = 200
    gamma: Optional[float] = None
    attrition: Attrition = field(default_factory=Attrition)
    seed: int = 0
    class_id: Optional[int] = None
    resample: int = 1

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.resample < 1:
            raise ValueError("resample must be >= 1")
        if self.gamma is not None and self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if isinstance(self.attrition, (str, float, int)) or self.attrition is None:
            object.__setattr__(self, "attrition", Attrition.parse(self.attrition))


def attrition_at(config: SamplerConfig, p_t: float, p_s: float) -> float:
    return config.attrition(p_t, p_s)


def _check_guidance(model, config: SamplerConfig):
    conditional = getattr(model, "conditional", False)
    if not conditional and (config.gamma is not None or config.class_id is not None):
        raise GuidanceConfigError("guidance/class conditioning requested on a model trained without class labels")
    if conditional and config.class_id is not None:
        if not 0 <= config.class_id < model.n_classes:
            raise GuidanceConfigError(f"class_id {config.class_id} outside 0..{model.n_classes - 1}")


def _predict(model, x, p, config: SamplerConfig) -> np.ndarray:
    if config.class_id is None:
        return model.predict_p(x, p, None)
    cond = model.predict_p(x, p, config.class_id + 1)
    gamma = 1.0 if config.gamma is None else config.gamma
    if gamma == 1.0:
        return cond
    return guide(cond, model.predict_p(x, p, None), gamma)


StepHook = Callable[[np.ndarray, float, np.random.Generator], np.ndarray]


def reverse_process(model, x_init, config: SamplerConfig, schedule: PSchedule,
                    rng: np.random.Generator, after_step: Optional[StepHook] = None,
                    trajectory: Optional[list] = None, resample: int = 1) -> np.ndarray:
    """Run the reverse chain from ``t = 1`` to ``t = 0``.

    ``after_step(x_s, p_s, rng)`` may rewrite the state after every step.
    When ``p(0) < 1`` a final completion adds ``random_round(y_hat)`` so the
    output is a full draw rather than a ``p(0)``-thinned one. With
    ``resample > 1`` each step is repeated after thinning its result back to
    level ``p(t)``; only the last pass is kept.
    """
    x = as_counts(x_init).copy()
    grid = reverse_time_grid(config.num_steps)
    for t, s in zip(grid[:-1], grid[1:]):
        p_t, p_s = p_of(schedule, t), p_of(schedule, s)
        sig = attrition_at(config, p_t, p_s)
        for r in range(resample):
            if r:
                x = rng.binomial(x, p_t / p_s)
            y_hat = random_round(_predict(model, x, p_t, config), rng)
            x = attrition_step(x, y_hat, p_t, p_s, sig, rng)
            if after_step is not None:
                x = after_step(x, p_s, rng)
        if trajectory is not None:
            trajectory.append(x.copy())
    p0 = p_of(schedule, 0.0)
    if p0 < 1.0:
        x = x + random_round(_predict(model, x, p0, config), rng)
        if after_step is not None:
            x = after_step(x, 1.0, rng)
        if trajectory is not None:
            trajectory.append(x.copy())
    return x


def generate(model, config: SamplerConfig, n_samples: int,
             schedule: Optional[PSchedule] = None, trajectory: Optional[list] = None) -> np.ndarray:
    """Draw ``n_samples`` rows starting from the all-zero state at ``t = 1``."""
    _check_guidance(model, config)
    schedule = schedule or model.schedule
    if n_samples == 0:
        return np.zeros((0, model.n_dims), dtype=np.int64)
    rng = spawn_rngs(config.seed, 1)[0]
    x = np.zeros((n_samples, model.n_dims), dtype=np.int64)
    return reverse_process(model, x, config, schedule, rng, trajectory=trajectory)


# -- missingness --------------------------------------------------------------

@dataclass(frozen=True)
class MCAR:
    rate: float

    def __str__(self):
        return f"mcar:{self.rate}"


@dataclass(frozen=True)
class MnarLowBiased:
    """Dropout probability ``min(1, c * exp(-x / bias_strength))``.

    The multiplier ``c`` is solved so the expected missing fraction equals
    ``rate``.
    """

    rate: float
    bias_strength: float = 2.0

    def __str__(self):
        return f"mnar:{self.rate}:{self.bias_strength}"


Mechanism = Union[MCAR, MnarLowBiased]


def parse_mechanism(text: str) -> Mechanism:
    """Parse ``mcar:<rate>`` or ``mnar:<rate>[:<bias_strength>]``."""
    parts = str(text).split(":")
    mech = None
    try:
        if parts[0] == "mcar" and len(parts) == 2:
            mech = MCAR(float(parts[1]))
        elif parts[0] == "mnar" and len(parts) in (2, 3):
            mech = MnarLowBiased(float(parts[1]), *(float(v) for v in parts[2:]))
    except ValueError:
        pass
    if mech is None:
        raise ValueError(f"cannot parse missingness mechanism {text!r}")
    if not 0.0 <= mech.rate < 1.0:
        raise ValueError(f"missing rate must lie in [0, 1), got {mech.rate}")
    if isinstance(mech, MnarLowBiased) and not mech.bias_strength > 0:
        raise ValueError(f"bias strength must be positive, got {mech.bias_strength}")
    return mech


@dataclass
class MissingnessMask:
    observed: np.ndarray
    mechanism: Optional[Mechanism] = None

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=bool)

    @property
    def missing_fraction(self) -> float:
        return float(1.0 - self.observed.mean()) if self.observed.size else 0.0

    @property
    def shape(self):
        return self.observed.shape

    def metadata(self) -> dict:
        return {"mechanism": str(self.mechanism) if self.mechanism else "explicit",
                "shape": list(self.observed.shape),
                "missing_fraction": self.missing_fraction}


def _mnar_dropout(x: np.ndarray, mech: MnarLowBiased) -> np.ndarray:
    base = np.exp(-x / mech.bias_strength)

    def excess(c):
        return np.minimum(1.0, c * base).mean() - mech.rate

    hi = 1.0
    while excess(hi) < 0.0:
        hi *= 2.0
    return np.minimum(1.0, brentq(excess, 0.0, hi, xtol=1e-14) * base)


def make_mask(x_true, mechanism: Mechanism, rng: np.random.Generator) -> MissingnessMask:
    x = as_counts(x_true).astype(np.float64)
    if not 0.0 <= mechanism.rate < 1.0:
        raise ValueError(f"missing rate must lie in [0, 1), got {mechanism.rate}")
    if isinstance(mechanism, MCAR):
        d = np.full(x.shape, mechanism.rate)
    elif isinstance(mechanism, MnarLowBiased):
        if mechanism.bias_strength <= 0.0:
            raise ValueError("bias_strength must be positive")
        d = _mnar_dropout(x, mechanism) if mechanism.rate > 0 else np.zeros(x.shape)
    else:
        raise TypeError(f"unknown mechanism {mechanism!r}")
    return MissingnessMask(rng.random(x.shape) >= d, mechanism)


def save_mask(mask: MissingnessMask, path) -> Path:
    path = Path(path)
    lines = ["# " + json.dumps(mask.metadata(), sort_keys=True),
             ",".join(column_names(mask.shape[1]))]
    lines += [",".join("1" if v else "0" for v in row) for row in mask.observed]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_mask(path) -> MissingnessMask:
    """Read a 0/1 mask CSV (1 = observed) with an optional ``# {json}`` header."""
    path = Path(path)
    meta, rows = {}, []
    header_seen = False
    for i, ln in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not ln.strip():
            continue
        if ln.startswith("#"):
            try:
                meta = json.loads(ln[1:])
            except json.JSONDecodeError:
                pass
            continue
        if not header_seen:
            header_seen = True
            continue
        cells = [c.strip() for c in ln.split(",")]
        if any(c not in ("0", "1") for c in cells):
            raise CountFileError(f"{path}: line {i}: mask cells must be 0 or 1")
        rows.append([c == "1" for c in cells])
    if not header_seen:
        raise CountFileError(f"{path}: empty mask file")
    mech = None
    if meta.get("mechanism") not in (None, "explicit"):
        mech = parse_mechanism(meta["mechanism"])
    width = len(rows[0]) if rows else 0
    return MissingnessMask(np.array(rows, dtype=bool).reshape(len(rows), width), mech)


# -- imputation ---------------------------------------------------------------

def repaint_impute(model, x_obs, mask: MissingnessMask, config: SamplerConfig,
                   n_imputations: int = 1, schedule: Optional[PSchedule] = None) -> list[np.ndarray]:
    """Impute masked entries by reverse sampling with observed entries re-noised.

    After every reverse step the observed entries are replaced by a fresh
    ``Bin(x_obs, p(s))`` draw; at ``t = 0`` they equal ``x_obs`` exactly.
    Imputation ``i`` uses the ``i``-th substream of ``config.seed``.

    A single pass per step (``config.resample == 1``) lets masked entries
    grow while the noised observed entries are still uninformative. A few
    resampling passes per step fix most of that at proportional cost.
    """
    _check_guidance(model, config)
    x_obs = as_counts(x_obs, "x_obs")
    obs = np.asarray(mask.observed, dtype=bool)
    if obs.shape != x_obs.shape:
        raise ValueError(f"mask shape {obs.shape} does not match data shape {x_obs.shape}")
    if x_obs.ndim != 2 or x_obs.shape[1] != model.n_dims:
        raise ValueError(f"data must have shape (N, {model.n_dims})")
    schedule = schedule or model.schedule
    truth = x_obs[obs]

    def reset_observed(x, p_s, rng):
        if truth.size:
            x = x.copy()
            x[obs] = truth if p_s >= 1.0 else rng.binomial(truth, p_s)
        return x

    out = []
    for rng in spawn_rngs(config.seed, n_imputations):
        x = np.zeros_like(x_obs)
        x = reverse_process(model, x, config, schedule, rng, after_step=reset_observed,
                            resample=config.resample)
        x[obs] = truth
        out.append(x)
    return out


def ensemble_imputations(samples: list[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Entrywise mean of several imputations, stochastically rounded."""
    if not samples:
        raise ValueError("no imputations to ensemble")
    return random_round(np.mean(np.stack(samples), axis=0), make_rng(rng))
