"""Object consistency model.

Each mapped object carries a Beta distribution over its consistency ``v``.
For one landmark residual ``e`` the latent ``pi`` selects between a Gaussian
(unchanged) and a uniform (changed) measurement density.  Under a factorized
posterior ``q(pi) q(v)`` the optimal ``q(pi = 1)`` has the closed form
implemented by :func:`e_step_weights`.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

DEFAULT_COUNT_CAP = 50.0

# Bernoulli numbers B_2k / 2k for the asymptotic digamma series.
_ASYMPTOTIC = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_SHIFT_TO = 10.0


def digamma(x: float) -> float:
    """Logarithmic derivative of the gamma function for ``x > 0``.

    Shifts the argument above 10 with ``psi(x) = psi(x + 1) - 1/x`` and then
    sums the asymptotic expansion through the ``x**-14`` term.
    """
    x = float(x)
    if not x > 0.0 or math.isnan(x):
        raise ValueError(f"digamma is only defined here for x > 0, got {x!r}")
    if math.isinf(x):
        return math.inf
    acc = 0.0
    while x < _SHIFT_TO:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    power = inv2
    for coef in _ASYMPTOTIC:
        series += coef * power
        power *= inv2
    return acc + math.log(x) - 0.5 / x - series


@dataclass(frozen=True, slots=True)
class BetaState:
    alpha: float = 1.0
    beta_: float = 1.0

    def __post_init__(self) -> None:
        if not (self.alpha > 0.0 and self.beta_ > 0.0):
            raise ValueError(f"Beta pseudo-counts must be positive, got ({self.alpha}, {self.beta_})")
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta_)):
            raise ValueError("Beta pseudo-counts must be finite")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta_)


def expectation(s: BetaState) -> float:
    return s.mean


@dataclass(frozen=True, slots=True)
class MixtureParams:
    sigma: float
    e_max: float
    dim: int = 2

    def __post_init__(self) -> None:
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")
        if not self.e_max > 0.0:
            raise ValueError("e_max must be positive")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    @property
    def log_normalizer(self) -> float:
        """``-(dim/2) log(2 pi sigma^2)``, the Gaussian log-density at zero."""
        return -0.5 * self.dim * math.log(2.0 * math.pi * self.sigma**2)


@dataclass(frozen=True, slots=True)
class EStepWeights:
    w_static: float
    w_changed: float


def expected_log_v(s: BetaState) -> float:
    return digamma(s.alpha) - digamma(s.alpha + s.beta_)


def expected_log_1mv(s: BetaState) -> float:
    return digamma(s.beta_) - digamma(s.alpha + s.beta_)


def _sq_norm(residual: Sequence[float]) -> float:
    return sum(float(r) * float(r) for r in residual)


def gaussian_log_density(residual: Sequence[float], p: MixtureParams) -> float:
    return -_sq_norm(residual) / (2.0 * p.sigma**2) + p.log_normalizer


def uniform_log_density(p: MixtureParams) -> float:
    # Density on the residual norm; constant for every residual.
    return -math.log(p.e_max)


def weights_from_log_modes(log_static: float, log_changed: float) -> EStepWeights:
    """Normalize two unnormalized log-probabilities into a weight pair."""
    d = log_static - log_changed
    if d >= 0.0:
        t = math.exp(-d)
        return EStepWeights(1.0 / (1.0 + t), t / (1.0 + t))
    t = math.exp(d)
    return EStepWeights(t / (1.0 + t), 1.0 / (1.0 + t))


def e_step_weights(residual: Sequence[float], p: MixtureParams, s: BetaState) -> EStepWeights:
    log_static = expected_log_v(s) + gaussian_log_density(residual, p)
    log_changed = expected_log_1mv(s) + uniform_log_density(p)
    return weights_from_log_modes(log_static, log_changed)


def elbo_landmark(residual: Sequence[float], p: MixtureParams, w: EStepWeights) -> float:
    return w.w_static * gaussian_log_density(residual, p) + w.w_changed * uniform_log_density(p)


def static_probability(sq_norm: np.ndarray, p: MixtureParams, log_prior_static: np.ndarray,
                       log_prior_changed: np.ndarray) -> np.ndarray:
    """Vectorized static-mode responsibility for many residuals at once.

    ``log_prior_*`` are the per-residual mode log-weights (``E[log v]`` and
    ``E[log(1 - v)]`` for the variational weights, ``log E[v]`` and
    ``log(1 - E[v])`` for the point-estimate mixture).
    """
    d = (log_prior_static - sq_norm / (2.0 * p.sigma**2) + p.log_normalizer) - (
        log_prior_changed + uniform_log_density(p))
    # Logistic without overflow for either sign of d.
    out = np.empty_like(d)
    pos = d >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    out[~pos] = ed / (1.0 + ed)
    return out


def _capped(alpha: float, beta_: float, count_cap: float | None) -> BetaState:
    total = alpha + beta_
    if count_cap is not None and total > count_cap:
        scale = count_cap / total
        alpha, beta_ = alpha * scale, beta_ * scale
    return BetaState(alpha, beta_)


def beta_accumulate(s: BetaState, static_evidence: float, changed_evidence: float,
                    count_cap: float | None = DEFAULT_COUNT_CAP) -> BetaState:
    """Add fractional Bernoulli outcomes to the pseudo-counts."""
    if static_evidence < 0.0 or changed_evidence < 0.0:
        raise ValueError("evidence counts must be non-negative")
    return _capped(s.alpha + static_evidence, s.beta_ + changed_evidence, count_cap)


def beta_update(s: BetaState, responsibility: float,
                count_cap: float | None = DEFAULT_COUNT_CAP) -> BetaState:
    if not 0.0 <= responsibility <= 1.0:
        raise ValueError(f"responsibility must lie in [0, 1], got {responsibility!r}")
    return beta_accumulate(s, responsibility, 1.0 - responsibility, count_cap)


def apply_pseudo_change(s: BetaState, delta: float,
                        count_cap: float | None = DEFAULT_COUNT_CAP) -> BetaState:
    """Penalize an object that should have been seen but was not."""
    if not delta > 0.0:
        raise ValueError("pseudo-change delta must be positive")
    return _capped(s.alpha, s.beta_ + delta, count_cap)


def update_change_magnitude(l_est: float, residual_norm: float, rate: float) -> float:
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    return (1.0 - rate) * l_est + rate * residual_norm


# Terms of the full variational bound.  The pipeline only needs these to
# report a bound whose value is comparable across E- and M-steps.

def log_beta_function(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def beta_entropy(s: BetaState) -> float:
    a, b = s.alpha, s.beta_
    return (log_beta_function(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
            + (a + b - 2.0) * digamma(a + b))


def expected_log_beta_prior(q: BetaState, prior: BetaState) -> float:
    """``E_q[log Beta(v | prior)]``."""
    return ((prior.alpha - 1.0) * expected_log_v(q) + (prior.beta_ - 1.0) * expected_log_1mv(q)
            - log_beta_function(prior.alpha, prior.beta_))


def bernoulli_entropy(w: float) -> float:
    h = 0.0
    for p in (w, 1.0 - w):
        if p > 0.0:
            h -= p * math.log(p)
    return h
