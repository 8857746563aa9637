"""Discrete variance-preserving noise schedule."""

from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "build_vp_schedule", "inverse_sigma", "weight"]

WEIGHT_KINDS = ("constant", "sigma_sq", "snr")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Tabulated ``(alpha_t, sigma_t)`` for ``t = 0..T``.

    ``x_t = alphas[t] * x_0 + sigmas[t] * eps``. Index 0 is the clean data.
    """

    num_steps: int
    alphas: np.ndarray
    sigmas: np.ndarray
    weight_kind: str = "constant"
    beta_min: float = field(default=1e-4)
    beta_max: float = field(default=0.02)

    def __post_init__(self):
        if self.weight_kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight_kind {self.weight_kind!r}")
        self.alphas.setflags(write=False)
        self.sigmas.setflags(write=False)

    @property
    def T(self):
        return self.num_steps

    def sigma_inverse(self, target_sigma):
        return inverse_sigma(self, target_sigma)

    def weight(self, t):
        return weight(self, t)


def build_vp_schedule(T=1000, beta_min=1e-4, beta_max=0.02, weight_kind="constant"):
    """Linear-beta variance-preserving schedule.

    ``alpha_t = sqrt(prod_{s<=t} (1 - beta_s))`` with ``beta_1..beta_T``
    linearly spaced and ``sigma_t = sqrt(1 - alpha_t**2)``.
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    # log-space cumulative product keeps 1 - alpha^2 accurate at small t
    log_a2 = np.concatenate([[0.0], np.cumsum(np.log1p(-betas))])
    alphas = np.exp(0.5 * log_a2)
    sigmas = np.sqrt(-np.expm1(log_a2))
    if np.any(np.diff(sigmas) <= 0):
        raise ValueError("schedule is not strictly increasing in sigma")
    return NoiseSchedule(int(T), alphas, sigmas, weight_kind, float(beta_min), float(beta_max))


def inverse_sigma(s, target_sigma):
    """Smallest ``t`` with ``sigma_t >= target_sigma``, clamped to ``[0, T]``."""
    target_sigma = float(target_sigma)
    if not target_sigma > 0.0:
        return 0
    if target_sigma >= s.sigmas[-1]:
        return s.num_steps
    return int(np.searchsorted(s.sigmas, target_sigma, side="left"))


def weight(s, t):
    """Time weighting ``omega(t)`` applied to the score-difference gradient."""
    t = int(t)
    if not 0 <= t <= s.num_steps:
        raise ValueError(f"timestep {t} outside [0, {s.num_steps}]")
    if s.weight_kind == "constant":
        return 1.0
    if s.weight_kind == "sigma_sq":
        return float(s.sigmas[t] ** 2)
    if t == 0:
        raise ValueError("snr weight undefined at t=0")
    return float(s.alphas[t] / s.sigmas[t])
