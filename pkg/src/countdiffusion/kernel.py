"""Stochastic primitives of the forward thinning and reverse birth-death steps.

Everything here is a pure function of its inputs and an explicit
:class:`numpy.random.Generator`; no module-level random state is used.
Count matrices are plain ``int64`` arrays.

The ``*_pmf`` helpers and :func:`enumerate_reverse_chain` compute exact
distributions by convolution. They never call the samplers, so they can be
used as independent oracles for them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .schedule import PSchedule, beta, p_of, reverse_time_grid, sigma_max

SigmaRule = Callable[[float, float], float]

_SIGMA_TOL = 1e-12
BRANCH_CUTOFF = 1e-14
MAX_DISCARDED_MASS = 1e-10
MAX_JOINT_STATES = 10_000


class StateSpaceError(ValueError):
    """Raised when an exact enumeration would exceed its state budget."""


# -- RNG plumbing -----------------------------------------------------------

def make_rng(seed) -> np.random.Generator:
    """Return a PCG64 generator; passes existing generators through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent, reproducible substreams from one seed."""
    if isinstance(seed, np.random.Generator):
        return list(seed.spawn(n))
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def as_counts(x, name: str = "counts") -> np.ndarray:
    """Validate and convert ``x`` to a non-negative ``int64`` array."""
    arr = np.asarray(x)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.floor(arr)):
            raise ValueError(f"{name} must contain finite integers")
    elif arr.dtype.kind not in "iub":
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.int64, copy=False)
    if np.any(arr < 0):
        raise ValueError(f"{name} must be non-negative")
    return arr


def _check_prob(p, name: str):
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"{name} must be a probability, got {p!r}")
    return arr


# -- forward process ----------------------------------------------------------

def forward_sample(x0, p_t, rng: np.random.Generator) -> np.ndarray:
    """Thin every entry of ``x0`` independently: ``x_t ~ Bin(x0, p_t)``.

    ``p_t`` may be a scalar or broadcast against ``x0`` (for example one
    survival probability per row, shaped ``(N, 1)``).
    """
    x0 = as_counts(x0, "x0")
    p = _check_prob(p_t, "p_t")
    return rng.binomial(x0, p).astype(np.int64)


def forward_conditional_sample(x_s, p_t: float, p_s: float, rng: np.random.Generator) -> np.ndarray:
    """Sample ``x_t | x_s ~ Bin(x_s, p_t / p_s)`` for ``t > s``."""
    x_s = as_counts(x_s, "x_s")
    _check_prob(p_t, "p_t")
    _check_prob(p_s, "p_s")
    if p_s <= 0.0:
        raise ValueError("p_s must be positive")
    if p_t > p_s:
        raise ValueError(f"forward time must increase: p_t={p_t} > p_s={p_s}")
    return rng.binomial(x_s, p_t / p_s).astype(np.int64)


def binomial_pmf(n: int, k: int, p: float) -> float:
    """``C(n, k) p^k (1-p)^(n-k)`` evaluated through log-gamma."""
    if n < 0 or k < 0 or k > n:
        raise ValueError(f"need 0 <= k <= n, got n={n}, k={k}")
    _check_prob(p, "p")
    if p == 0.0:
        return 1.0 if k == 0 else 0.0
    if p == 1.0:
        return 1.0 if k == n else 0.0
    log_c = math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
    return math.exp(log_c + k * math.log(p) + (n - k) * math.log1p(-p))


def binomial_pmf_vector(n: int, p: float) -> np.ndarray:
    """Full PMF of ``Bin(n, p)`` over ``k = 0..n``."""
    return np.array([binomial_pmf(n, k, p) for k in range(n + 1)])


# -- reverse process ----------------------------------------------------------

def attrition_step(x_t, y_hat_clipped, p_t: float, p_s: float, sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    """One reverse step from ``t`` to ``s < t`` with attrition rate ``sigma``.

    Survivors ``n ~ Bin(x_t, 1 - sigma)`` plus births
    ``b ~ Bin(y_hat_clipped, beta)``, where ``y_hat_clipped`` is an integer
    estimate of the missing count ``x0 - x_t``.

    Raises:
        ValueError: If ``sigma`` is outside ``[0, sigma_max(p_t, p_s)]``;
            above that bound the birth probability exceeds one.
    """
    x_t = as_counts(x_t, "x_t")
    y = as_counts(y_hat_clipped, "y_hat_clipped")
    smax = sigma_max(p_t, p_s)
    if not (0.0 <= sigma <= smax + _SIGMA_TOL):
        raise ValueError(
            f"attrition rate sigma={sigma} outside [0, sigma_max={smax}]; "
            "sigma_max = min(1, (1 - p_s) / p_t) keeps the birth probability valid"
        )
    sigma = min(sigma, smax)
    b_prob = beta(p_t, p_s, sigma)
    if not 0.0 <= b_prob <= 1.0:
        raise ValueError(f"birth probability {b_prob} invalid for p_t={p_t}, p_s={p_s}, sigma={sigma}")
    births = rng.binomial(y, b_prob)
    survivors = rng.binomial(x_t, 1.0 - sigma)
    return (survivors + births).astype(np.int64)


def random_round(y_hat, rng: np.random.Generator) -> np.ndarray:
    """Unbiased stochastic rounding: ``floor(y) + Bernoulli(frac(y))``."""
    y = np.asarray(y_hat, dtype=np.float64)
    if np.any(~np.isfinite(y)) or np.any(y < 0.0):
        raise ValueError("random_round needs finite, non-negative input")
    lo = np.floor(y)
    up = rng.random(y.shape) < (y - lo)
    return (lo + up).astype(np.int64)


def guide(y_hat_cond, y_hat_uncond, gamma: float) -> np.ndarray:
    """Geometric interpolation ``cond**gamma * uncond**(1 - gamma)``."""
    a = np.asarray(y_hat_cond, dtype=np.float64)
    b = np.asarray(y_hat_uncond, dtype=np.float64)
    if np.any(a <= 0.0) or np.any(b <= 0.0):
        raise ValueError("guidance needs strictly positive predictions")
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if gamma == 1.0:
        return a.copy()
    if gamma == 0.0:
        return b.copy()
    return np.exp(gamma * np.log(a) + (1.0 - gamma) * np.log(b))


# -- continuous data ----------------------------------------------------------

def poisson_randomize(x_real, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Map non-negative reals to latent counts ``z ~ Poisson(lam * x)``."""
    if lam < 1.0:
        raise ValueError(f"lambda must be >= 1, got {lam}")
    x = np.asarray(x_real, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x < 0.0):
        raise ValueError("poisson_randomize needs finite, non-negative input")
    return rng.poisson(lam * x).astype(np.int64)


def de_randomize(z, lam: float) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) / lam


# -- exact oracles ------------------------------------------------------------

def thinning_pmf(pmf_in: np.ndarray, ratio: float) -> np.ndarray:
    """Exact PMF of ``Bin(X, ratio)`` when ``X`` has PMF ``pmf_in``."""
    out = np.zeros(len(pmf_in))
    for n, w in enumerate(pmf_in):
        if w:
            out[:n + 1] += w * binomial_pmf_vector(n, ratio)
    return out


@dataclass
class _MassLedger:
    discarded: float = 0.0


def attrition_step_pmf(pmf_xt: np.ndarray, x0: int, p_t: float, p_s: float, sigma: float,
                       ledger: Optional[_MassLedger] = None) -> np.ndarray:
    """Exact PMF of the attrition step output given the PMF of ``x_t``.

    Uses the oracle prediction ``y_hat = x0 - x_t``. Branches with mass
    below ``1e-14`` are dropped and their mass added to ``ledger``.
    """
    out = np.zeros(x0 + 1)
    b_prob = beta(p_t, p_s, sigma)
    for xt, w in enumerate(pmf_xt):
        if w == 0.0:
            continue
        surv = binomial_pmf_vector(xt, 1.0 - sigma)
        born = binomial_pmf_vector(x0 - xt, b_prob)
        joint = w * np.outer(surv, born)
        keep = joint >= BRANCH_CUTOFF
        if ledger is not None:
            ledger.discarded += float(joint[~keep].sum())
        joint = np.where(keep, joint, 0.0)
        for n in range(xt + 1):
            out[n:n + x0 - xt + 1] += joint[n]
    return out


@dataclass
class ReverseChainResult:
    pmf: np.ndarray
    marginals: list[np.ndarray] = field(default_factory=list)
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    discarded_mass: float = 0.0


def enumerate_reverse_chain(x0: int, schedule: PSchedule, num_steps: int,
                            sigma_rule: Optional[SigmaRule] = None) -> ReverseChainResult:
    """Propagate the exact PMF of one coordinate through the reverse sampler.

    The chain starts from ``x = 0`` at ``t = 1`` and follows the same time grid
    and attrition rule as the generator, with oracle predictions
    ``y_hat = x0 - x_t``. When ``p(0) < 1`` the final completion step adds
    ``x0 - x_t`` deterministically.

    Returns:
        The terminal PMF over ``0..x0``, the marginal after every step, and
        the total probability mass dropped by branch truncation.
    """
    if x0 < 0:
        raise ValueError("x0 must be non-negative")
    joint = sum((k + 1) * (x0 - k + 1) for k in range(x0 + 1))
    if joint > MAX_JOINT_STATES:
        raise StateSpaceError(f"x0={x0} needs {joint} joint states per step (> {MAX_JOINT_STATES})")
    ledger = _MassLedger()
    grid = reverse_time_grid(num_steps)
    pmf = np.zeros(x0 + 1)
    pmf[0] = 1.0
    marginals = []
    for t, s in zip(grid[:-1], grid[1:]):
        p_t, p_s = p_of(schedule, t), p_of(schedule, s)
        sig = 0.0 if sigma_rule is None else float(sigma_rule(p_t, p_s))
        pmf = attrition_step_pmf(pmf, x0, p_t, p_s, sig, ledger)
        marginals.append(pmf.copy())
    if p_of(schedule, 0.0) < 1.0:
        kept = pmf.sum()
        pmf = np.zeros(x0 + 1)
        pmf[x0] = kept
    if ledger.discarded >= MAX_DISCARDED_MASS:
        raise StateSpaceError(f"truncation discarded {ledger.discarded:.3e} probability mass")
    return ReverseChainResult(pmf=pmf, marginals=marginals, times=grid,
                              discarded_mass=ledger.discarded)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    n = max(len(p), len(q))
    a = np.pad(np.asarray(p, float), (0, n - len(p)))
    b = np.pad(np.asarray(q, float), (0, n - len(q)))
    return 0.5 * float(np.abs(a - b).sum())
