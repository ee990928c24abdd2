"""The common density-model surface shared by both prior families.

Every prior exposes per-sample mean log-density, the gradient of the *total*
log-density with respect to the input samples (when it exists), and sampling.
The autoregressive family is evaluation-only: its categorical likelihood has
no gradient in the continuous input, so ``supports_gradient`` is False there.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from .errors import ShapeError
from .signals import Frame


def as_samples(x) -> np.ndarray:
    arr = x.samples if isinstance(x, Frame) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError(f"expected a non-empty 1-D sample array, got shape {arr.shape}")
    return arr


@runtime_checkable
class DensityModel(Protocol):
    supports_gradient: bool

    def log_density(self, x) -> float:
        """Mean log-density in nats per sample."""
        ...

    def grad_log_density(self, x) -> np.ndarray:
        """Gradient of the total log-density w.r.t. every input sample."""
        ...

    def log_density_and_grad(self, x) -> tuple:
        ...

    def sample(self, rng: np.random.Generator, n_frames: int, frame_len: int) -> list:
        ...


class DiagonalGaussianPrior:
    """Closed-form elementwise Gaussian with the same surface as the learned priors.

    Used as the analytically tractable stand-in when validating the Langevin
    sampler, and by the CLI's oracle separation mode.
    """

    supports_gradient = True

    def __init__(self, mean: float = 0.0, var: float = 1.0, sample_rate: int = 16000):
        if var <= 0:
            raise ShapeError(f"variance must be positive, got {var}")
        self.mean = float(mean)
        self.var = float(var)
        self.sample_rate = sample_rate

    def log_density(self, x) -> float:
        s = as_samples(x)
        return float(np.mean(-0.5 * (s - self.mean) ** 2 / self.var
                             - 0.5 * np.log(2.0 * np.pi * self.var)))

    def grad_log_density(self, x) -> np.ndarray:
        s = as_samples(x)
        return -(s - self.mean) / self.var

    def log_density_and_grad(self, x) -> tuple:
        s = as_samples(x)
        ll = float(np.mean(-0.5 * (s - self.mean) ** 2 / self.var
                           - 0.5 * np.log(2.0 * np.pi * self.var)))
        return ll, -(s - self.mean) / self.var

    def sample(self, rng: np.random.Generator, n_frames: int, frame_len: int) -> list:
        std = np.sqrt(self.var)
        return [Frame(samples=self.mean + std * rng.standard_normal(frame_len),
                      sample_rate=self.sample_rate)
                for _ in range(n_frames)]
