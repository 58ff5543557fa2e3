"""
Classifier-free guidance
eps_w = (1 + w) eps(z_t, y, t) - w eps(z_t, null, t) and its vector-Jacobian product
"""

import math
from dataclasses import dataclass

import numpy as np

from .backend import NULL, Condition, ScoreBackend
from .core import Latent, check_same_shape
from .errors import DomainError, UsageError

DEFAULT_OMEGA = 7.5


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = DEFAULT_OMEGA

    def __post_init__(self):
        check_omega(self.omega)


def check_omega(omega: float) -> float:
    omega = float(omega)
    if not math.isfinite(omega) or omega < -1.0:
        raise DomainError(f"Guidance scale must be finite and >= -1, got {omega}")
    return omega


def cfg_combine(eps_cond: Latent, eps_uncond: Latent, omega: float) -> Latent:
    check_same_shape(eps_cond, eps_uncond, "conditional and unconditional scores")
    return (1.0 + omega) * np.asarray(eps_cond) - omega * np.asarray(eps_uncond)


def _require_label(cond: Condition) -> None:
    if cond.is_null:
        raise UsageError("Guided score needs a label condition; the null branch is taken internally")


def guided_score(backend: ScoreBackend, z_t: Latent, cond: Condition, t: float, omega: float) -> Latent:
    _require_label(cond)
    omega = check_omega(omega)
    eps_cond = backend.score(z_t, cond, t)
    if omega == 0.0:
        return eps_cond
    return cfg_combine(eps_cond, backend.score(z_t, NULL, t), omega)


def guided_score_vjp(backend: ScoreBackend, z_t: Latent, cond: Condition, t: float, omega: float,
                     u: Latent) -> Latent:
    _require_label(cond)
    omega = check_omega(omega)
    vjp_cond = backend.score_vjp(z_t, cond, t, u)
    if omega == 0.0:
        return vjp_cond
    return cfg_combine(vjp_cond, backend.score_vjp(z_t, NULL, t, u), omega)
