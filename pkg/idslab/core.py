"""
Core numerics for IDS Lab
Latents, noise schedules, the forward diffusion process and seeded randomness
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from typing_extensions import Literal

from .errors import DomainError, ShapeError

# A latent is a float64 array; its shape is the latent shape ([D] or [H, W]).
Latent = npt.NDArray[np.float64]

ScheduleKind = Literal["linear-alpha", "cosine"]

DEFAULT_ALPHA_MIN = 0.01


def as_latent(data: Union[Sequence[float], npt.ArrayLike], shape: Optional[Sequence[int]] = None) -> Latent:
    """Build a float64 latent, optionally reshaped, and reject non-finite entries"""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"Latent dimensions must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"Data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    ensure_finite(arr, "latent")
    return arr


def ensure_finite(arr: Latent, what: str = "value") -> Latent:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"Non-finite entries in {what}")
    return arr


def check_same_shape(a: Latent, b: Latent, what: str = "latents") -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"Shape mismatch between {what}: {np.shape(a)} vs {np.shape(b)}")


def check_time(t: float, allow_zero: bool = True) -> float:
    t = float(t)
    if not math.isfinite(t) or t < 0.0 or t > 1.0 or (not allow_zero and t == 0.0):
        raise DomainError(f"Diffusion time must lie in {'[0, 1]' if allow_zero else '(0, 1]'}, got {t}")
    return t


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Continuous signal fraction alpha(t) on t in [0, 1].
    alpha(0) = 1 and alpha(1) = alpha_min for both kinds.
    """
    kind: ScheduleKind = "linear-alpha"
    alpha_min: float = DEFAULT_ALPHA_MIN

    def __post_init__(self):
        if self.kind not in ("linear-alpha", "cosine"):
            raise DomainError(f"Unknown schedule kind: {self.kind}")
        if not (0.0 <= self.alpha_min < 1.0):
            raise DomainError(f"alpha_min must lie in [0, 1), got {self.alpha_min}")

    def alpha(self, t: float) -> float:
        return alpha_at(self, t)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha_min": self.alpha_min}


def alpha_at(schedule: NoiseSchedule, t: float) -> float:
    """Signal fraction alpha(t) of the schedule"""
    t = check_time(t)
    span = 1.0 - schedule.alpha_min
    if schedule.kind == "linear-alpha":
        return 1.0 - t * span
    return schedule.alpha_min + span * math.cos(math.pi * t / 2.0) ** 2


def alpha_values(schedule: NoiseSchedule, ts: np.ndarray) -> np.ndarray:
    """Vectorized alpha(t) for a batch of diffusion times"""
    ts = np.asarray(ts, dtype=np.float64)
    if np.any(ts < 0.0) or np.any(ts > 1.0):
        raise DomainError("Diffusion times must lie in [0, 1]")
    span = 1.0 - schedule.alpha_min
    if schedule.kind == "linear-alpha":
        return 1.0 - ts * span
    return schedule.alpha_min + span * np.cos(np.pi * ts / 2.0) ** 2


def forward_diffuse(z0: Latent, eps: Latent, t: float, schedule: NoiseSchedule) -> Latent:
    """z_t = sqrt(alpha) z0 + sqrt(1 - alpha) eps"""
    check_same_shape(z0, eps, "z0 and eps")
    alpha = alpha_at(schedule, t)
    return math.sqrt(alpha) * np.asarray(z0, dtype=np.float64) + math.sqrt(1.0 - alpha) * np.asarray(eps, dtype=np.float64)


class Rng:
    """
    Seeded random stream on numpy's Philox counter-based generator.

    The 128-bit Philox key is the seed itself; child streams for parallel
    task i use key seed + (i + 1) * 2**64 so they never collide with the
    parent or each other. Draws are identical on every platform numpy
    supports for a given key.
    """

    _CHILD_STRIDE = 1 << 64

    def __init__(self, seed: int, _key: Optional[int] = None):
        seed = int(seed)
        if seed < 0 or seed >= (1 << 64):
            raise DomainError(f"Seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.key = seed if _key is None else _key
        self._generator = np.random.Generator(np.random.Philox(key=self.key))

    def derive(self, index: int) -> "Rng":
        """Independent stream for task `index` of this master seed"""
        if index < 0:
            raise DomainError(f"Task index must be non-negative, got {index}")
        return Rng(self.seed, _key=self.seed + (int(index) + 1) * self._CHILD_STRIDE)

    def normal(self, shape: Tuple[int, ...]) -> Latent:
        return self._generator.standard_normal(tuple(shape))

    def uniform(self, low: float, high: float) -> float:
        return float(self._generator.uniform(low, high))

    def uniform_array(self, low: float, high: float, size: int) -> np.ndarray:
        return self._generator.uniform(low, high, size=int(size))

    def random_array(self, size: int) -> np.ndarray:
        return self._generator.random(int(size))

    def integers(self, low: int, high: int) -> int:
        return int(self._generator.integers(low, high))

    def random(self) -> float:
        return float(self._generator.random())

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)


def sample_gaussian(rng: Rng, shape: Sequence[int]) -> Latent:
    """Standard normal latent of the given shape"""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise DomainError(f"Shape must have positive dimensions, got {shape}")
    return rng.normal(shape)


def sample_time(rng: Rng, t_min: float, t_max: float) -> float:
    """Uniform diffusion time in [t_min, t_max)"""
    if not (0.0 <= t_min < t_max <= 1.0):
        raise DomainError(f"Need 0 <= t_min < t_max <= 1, got ({t_min}, {t_max})")
    return rng.uniform(t_min, t_max)
