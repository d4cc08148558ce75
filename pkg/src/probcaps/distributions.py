"""Log-densities and reparameterised samplers used by the capsule model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
PRESENCE_EPS = 1e-7


@dataclass(frozen=True)
class GaussianParams:
    mean: object
    scale: object


@dataclass(frozen=True)
class ConcreteParams:
    logit: object
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


def normal_log_prob(x, params: GaussianParams) -> Tensor:
    """Elementwise Gaussian log-density; differentiable in x, mean and scale."""
    scale = ad.as_tensor(params.scale)
    if np.any(scale.data <= 0):
        raise ValueError(f"normal_log_prob: scale must be positive (min {scale.data.min():.6g})")
    z = (ad.as_tensor(x) - params.mean) / scale
    return -0.5 * ad.square(z) - ad.log(scale) - HALF_LOG_2PI


def bernoulli_log_prob(x, p) -> Tensor:
    """x log p + (1 - x) log(1 - p) with p clamped to [eps, 1 - eps].

    Exact for hard x in {0, 1}; for relaxed x it is the cross-entropy
    surrogate used wherever the hard presence would appear.
    """
    p = ad.clamp(ad.as_tensor(p), PRESENCE_EPS, 1.0 - PRESENCE_EPS)
    x = ad.as_tensor(x)
    return x * ad.log(p) + (1.0 - x) * ad.log(1.0 - p)


def categorical_from_presence(rho, t, axis: int = -1) -> Tensor:
    """Selection probabilities rho_i t_i / sum_j rho_j t_j along ``axis``."""
    rho, t = ad.as_tensor(rho), ad.as_tensor(t)
    if rho.shape[axis] != t.shape[axis]:
        raise ad.ShapeError("categorical_from_presence", rho.shape, t.shape)
    w = rho * t
    total = ad.sum_(w, axis=axis, keepdims=True)
    if np.any(total.data <= 0):
        raise ValueError("categorical_from_presence: all effective weights are zero (is the dummy parent present?)")
    return w / total


def logistic_noise(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("uniform noise must lie strictly inside (0, 1)")
    return np.log(u) - np.log1p(-u)


def relaxed_bernoulli_presample(params: ConcreteParams, u) -> Tensor:
    """The pre-sigmoid value (logit + logistic(u)) / temperature."""
    return (ad.as_tensor(params.logit) + logistic_noise(u)) / params.temperature


def relaxed_bernoulli_sample(params: ConcreteParams, u) -> Tensor:
    """Binary Concrete sample sigmoid((logit + log u - log(1-u)) / temperature)."""
    return ad.sigmoid(relaxed_bernoulli_presample(params, u))


def relaxed_bernoulli_log_prob(x, params: ConcreteParams) -> Tensor:
    """Binary Concrete log-density at x in (0, 1)."""
    xd = np.asarray(x.data if isinstance(x, Tensor) else x)
    if np.any((xd <= 0) | (xd >= 1)):
        raise ValueError("relaxed_bernoulli_log_prob: x must lie strictly inside (0, 1)")
    x = ad.as_tensor(x)
    y = ad.log(x) - ad.log(1.0 - x)
    return relaxed_bernoulli_log_prob_presample(y, params)


def relaxed_bernoulli_log_prob_presample(y, params: ConcreteParams) -> Tensor:
    """Concrete log-density of sigmoid(y), written in terms of y.

    Stable when the sample saturates: log x and log(1 - x) are evaluated as
    log-sigmoids of y.
    """
    tau = params.temperature
    y = ad.as_tensor(y)
    logit = ad.as_tensor(params.logit)
    log_x = ad.log_sigmoid(y)
    log_1mx = ad.log_sigmoid(-y)
    return (
        math.log(tau)
        + logit
        - (tau + 1.0) * log_x
        + (tau - 1.0) * log_1mx
        - 2.0 * ad.softplus(logit - tau * y)
    )


def sample_normal(params: GaussianParams, eps) -> Tensor:
    """Reparameterised draw mean + scale * eps."""
    return ad.as_tensor(params.mean) + ad.as_tensor(params.scale) * eps
