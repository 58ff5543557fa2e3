"""
Tweedie posterior means
z_{0|t} = (z_t - sqrt(1 - a) eps_hat) / sqrt(a), plus the distance-vs-t diagnostic
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence

import numpy as np

from .backend import Condition, ScoreBackend
from .core import Latent, Rng, alpha_at, check_same_shape, forward_diffuse, sample_gaussian
from .errors import DomainError, SingularityError
from .guidance import guided_score

logger = logging.getLogger(__name__)


def posterior_mean(z_t: Latent, eps_hat: Latent, t: float, schedule) -> Latent:
    check_same_shape(z_t, eps_hat, "z_t and eps_hat")
    alpha = alpha_at(schedule, t)
    if alpha <= 0.0:
        raise SingularityError(f"Posterior mean undefined where alpha(t) = 0 (t = {t})")
    return (np.asarray(z_t) - math.sqrt(1.0 - alpha) * np.asarray(eps_hat)) / math.sqrt(alpha)


def guided_posterior_mean(backend: ScoreBackend, z_t: Latent, cond: Condition, t: float, omega: float) -> Latent:
    """posterior_mean composed with the guided score of the backend"""
    return posterior_mean(z_t, guided_score(backend, z_t, cond, t, omega), t, backend.schedule)


@dataclass(frozen=True)
class SweepPoint:
    t: float
    z0t: Latent
    distance: float
    eps: Latent

    def to_row(self) -> Dict[str, Any]:
        return {"t": self.t, "distance": self.distance}


def posterior_mean_sweep(backend: ScoreBackend, z_src: Latent, cond: Condition, ts: Sequence[float],
                         rng: Rng, omega: float) -> List[SweepPoint]:
    """
    For each t draw eps, diffuse z_src and report how far the guided
    posterior mean lands from the source.
    """
    if len(ts) == 0:
        raise DomainError("Posterior sweep needs at least one time")
    points = []
    for t in ts:
        eps = sample_gaussian(rng, np.shape(z_src))
        z_t = forward_diffuse(z_src, eps, t, backend.schedule)
        z0t = guided_posterior_mean(backend, z_t, cond, t, omega)
        distance = float(np.linalg.norm(np.asarray(z0t) - np.asarray(z_src)))
        points.append(SweepPoint(float(t), z0t, distance, eps))
        logger.debug(f"Posterior sweep t={t:.3f}: distance {distance:.6f}")
    return points
