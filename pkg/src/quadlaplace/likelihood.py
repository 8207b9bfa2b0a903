"""Gaussian observation model ``y ~ N(f, 1/beta)``."""

from __future__ import annotations

import math
from dataclasses import dataclass

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianLikelihood:
    """Homoscedastic Gaussian noise with precision ``noise_precision``."""

    noise_precision: float = 1.0

    def __post_init__(self):
        beta = float(self.noise_precision)
        if not (math.isfinite(beta) and beta > 0):
            raise ValueError(f"noise precision must be finite and > 0, got {self.noise_precision!r}")
        object.__setattr__(self, "noise_precision", beta)

    @property
    def noise_variance(self) -> float:
        return 1.0 / self.noise_precision

    def log_density(self, y, f):
        """``log N(y | f, 1/beta)``; works elementwise on arrays."""
        beta = self.noise_precision
        return -0.5 * beta * (y - f) ** 2 + 0.5 * math.log(beta) - 0.5 * LOG_2PI

    def residual(self, y, f):
        """First derivative of the log density in ``f``: ``beta * (y - f)``."""
        return self.noise_precision * (y - f)

    def noise(self) -> float:
        """Negative second derivative of the log density in ``f`` (constant ``beta``)."""
        return self.noise_precision
