"""Power-law fits of loss against training compute."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

FLOPS_PER_PFLOPS_DAY = 1e15 * 86400


@dataclass(frozen=True)
class PowerLawFit:
    """``loss = A * C ** -alpha``; ``residual`` is the RMS log-space residual."""

    A: float
    alpha: float
    residual: float = 0.0

    def predict(self, compute: float | np.ndarray) -> float | np.ndarray:
        return self.A * np.power(compute, -self.alpha)


def estimate_compute(active_params: float, tokens: float) -> float:
    """Training compute in PFLOP/s-days from the 6 * params * tokens rule."""
    if active_params < 0 or tokens < 0:
        raise ValueError("parameter and token counts must be non-negative")
    return 6.0 * active_params * tokens / FLOPS_PER_PFLOPS_DAY


def fit_power_law(points: Sequence[tuple[float, float]]) -> PowerLawFit:
    """Ordinary least squares of log(loss) on log(compute)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("need at least two (compute, loss) points")
    if np.any(pts <= 0):
        raise ValueError("compute and loss must be positive")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(x) == 0:
        raise ValueError("compute values must not all be equal")
    design = np.column_stack([np.ones_like(x), x])
    (intercept, slope), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - (intercept + slope * x)
    return PowerLawFit(float(np.exp(intercept)), float(-slope), float(np.sqrt(np.mean(resid**2))))


def compute_advantage(reference: PowerLawFit, improved: PowerLawFit, compute: float) -> float:
    """How much more compute ``reference`` needs to match ``improved`` at ``compute``.

    Solves ``reference(C') = improved(compute)`` and returns ``C' / compute``.
    """
    if compute <= 0:
        raise ValueError("compute must be positive")
    for fit in (reference, improved):
        if fit.A <= 0 or fit.alpha <= 0:
            raise ValueError(f"fit {fit} does not describe a decreasing power law")
    target = improved.predict(compute)
    matched = (reference.A / target) ** (1.0 / reference.alpha)
    return float(matched / compute)


# Activated non-embedding parameters, training tokens and final validation
# loss of the five-size sweep, per residual variant.
REFERENCE_PARAMS = (194e6, 241e6, 296e6, 436e6, 528e6)
REFERENCE_TOKENS = (38.7e9, 45.4e9, 62.1e9, 87.9e9, 119.0e9)
REFERENCE_LOSSES = {
    "baseline": (1.931, 1.895, 1.829, 1.766, 1.719),
    "block": (1.909, 1.875, 1.809, 1.746, 1.693),
    "full": (1.899, 1.874, 1.804, 1.737, 1.692),
}
