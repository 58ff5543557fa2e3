"""
Synthetic tasks for IDS Lab
Labelled Gaussian-mixture vector worlds and square/disc shape-image datasets
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .backend import Condition, GaussianMixtureBackend
from .core import Latent, NoiseSchedule, Rng, as_latent
from .errors import DomainError

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("square", "disc")


@dataclass(frozen=True)
class ModeSpec:
    label: int
    center: Tuple[float, ...]
    sigma: float
    weight: float = 1.0


@dataclass(frozen=True)
class VectorWorldSpec:
    dimension: int
    modes: Tuple[ModeSpec, ...]
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    @classmethod
    def two_mode(cls, dimension: int = 2, offset: float = 2.0, sigma: float = 0.3,
                 schedule: Optional[NoiseSchedule] = None) -> "VectorWorldSpec":
        """Label 0 at (-offset, 0, ...), label 1 at (+offset, 0, ...)"""
        left = tuple([-offset] + [0.0] * (dimension - 1))
        right = tuple([offset] + [0.0] * (dimension - 1))
        return cls(dimension, (ModeSpec(0, left, sigma), ModeSpec(1, right, sigma)), schedule or NoiseSchedule())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dimension": self.dimension,
            "modes": [
                {"label": m.label, "center": list(m.center), "sigma": m.sigma, "weight": m.weight}
                for m in self.modes
            ],
            "schedule": self.schedule.to_dict(),
        }


@dataclass
class VectorWorld:
    spec: VectorWorldSpec
    backend: GaussianMixtureBackend

    @property
    def labels(self) -> List[int]:
        return [m.label for m in self.spec.modes]

    def mode(self, label: int) -> Latent:
        for m in self.spec.modes:
            if m.label == label:
                return np.array(m.center, dtype=np.float64)
        raise DomainError(f"World has no label {label}")

    def nearest_label(self, z: Latent) -> int:
        return min(self.labels, key=lambda k: float(np.linalg.norm(np.asarray(z) - self.mode(k))))

    def sample(self, cond: Condition, rng: Rng, count: int) -> np.ndarray:
        return self.backend.sample(cond, rng, count)

    def training_pairs(self, rng: Rng, per_label: int) -> List[Tuple[Latent, Condition]]:
        """per_label clean samples of every label, labels in world order"""
        pairs = []
        for label in self.labels:
            cond = Condition.of(label)
            pairs.extend((z, cond) for z in self.sample(cond, rng, per_label))
        return pairs


def make_vector_world(spec: VectorWorldSpec) -> VectorWorld:
    """One mixture component per label; label k selects its own component"""
    if spec.dimension <= 0:
        raise DomainError(f"World dimension must be positive, got {spec.dimension}")
    if len(spec.modes) < 2:
        raise DomainError("A vector world needs at least two labels")
    labels = [m.label for m in spec.modes]
    if len(set(labels)) != len(labels):
        raise DomainError(f"Duplicate labels in world spec: {labels}")
    for m in spec.modes:
        if len(m.center) != spec.dimension:
            raise DomainError(f"Mode {m.label} center has {len(m.center)} coordinates, world has {spec.dimension}")
        if not m.sigma > 0:
            raise DomainError(f"Mode {m.label} sigma must be positive, got {m.sigma}")
        if not m.weight > 0:
            raise DomainError(f"Mode {m.label} weight must be positive, got {m.weight}")

    means = np.stack([as_latent(m.center) for m in spec.modes])
    backend = GaussianMixtureBackend(
        means,
        [m.sigma for m in spec.modes],
        [m.weight for m in spec.modes],
        {m.label: [i] for i, m in enumerate(spec.modes)},
        spec.schedule,
    )
    return VectorWorld(spec, backend)


@dataclass(frozen=True)
class ShapeDatasetSpec:
    side: int = 16
    per_label: int = 8
    object_size: float = 6.0
    smoothing: float = 0.0

    def __post_init__(self):
        if not 8 <= self.side <= 32:
            raise DomainError(f"Grid side must lie in 8..32, got {self.side}")
        if self.per_label <= 0:
            raise DomainError("per_label must be positive")
        if not 0 < self.object_size < self.side:
            raise DomainError(f"Object size must lie in (0, {self.side}), got {self.object_size}")
        if self.smoothing < 0:
            raise DomainError("Smoothing must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return {"side": self.side, "per_label": self.per_label,
                "object_size": self.object_size, "smoothing": self.smoothing}


@dataclass(frozen=True)
class ShapeSample:
    image: Latent
    cond: Condition
    kind: str
    center: Tuple[float, float]


def _pixel_centers(side: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = np.arange(side) + 0.5
    return np.meshgrid(coords, coords, indexing="ij")


def render_square(side: int, center: Tuple[float, float], size: float) -> Latent:
    """Pixels whose centers fall in [c - s/2, c + s/2) on both axes"""
    rows, cols = _pixel_centers(side)
    half = size / 2.0
    inside = ((rows >= center[0] - half) & (rows < center[0] + half)
              & (cols >= center[1] - half) & (cols < center[1] + half))
    return inside.astype(np.float64)


def render_disc(side: int, center: Tuple[float, float], size: float) -> Latent:
    """Pixels whose centers lie within radius s/2 of the center"""
    rows, cols = _pixel_centers(side)
    inside = (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= (size / 2.0) ** 2
    return inside.astype(np.float64)


def render_shape(kind: str, side: int, center: Tuple[float, float], size: float, smoothing: float = 0.0) -> Latent:
    if kind == "square":
        image = render_square(side, center, size)
    elif kind == "disc":
        image = render_disc(side, center, size)
    else:
        raise DomainError(f"Unknown shape kind: {kind}")
    if smoothing > 0:
        image = np.clip(gaussian_filter(image, sigma=smoothing, mode="constant"), 0.0, 1.0)
    return image


@dataclass
class ShapeImageDataset:
    spec: ShapeDatasetSpec
    samples: List[ShapeSample]

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.spec.side, self.spec.side)

    def pairs(self) -> List[Tuple[Latent, Condition]]:
        return [(s.image, s.cond) for s in self.samples]

    def of_label(self, label: int) -> List[ShapeSample]:
        return [s for s in self.samples if s.cond.label == label]

    def manifest(self) -> Dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "images": [
                {"file": f"{i:04d}.pgm", "label": s.cond.label, "kind": s.kind, "center": list(s.center)}
                for i, s in enumerate(self.samples)
            ],
        }


def make_shape_dataset(spec: ShapeDatasetSpec, rng: Rng) -> ShapeImageDataset:
    """
    per_label squares (label 0) then per_label discs (label 1), each at a
    uniformly drawn center that keeps the whole object inside the grid.
    """
    half = spec.object_size / 2.0
    samples = []
    for label, kind in enumerate(SHAPE_KINDS):
        for _ in range(spec.per_label):
            center = (rng.uniform(half, spec.side - half), rng.uniform(half, spec.side - half))
            image = render_shape(kind, spec.side, center, spec.object_size, spec.smoothing)
            samples.append(ShapeSample(image, Condition.of(label), kind, center))
    logger.info(f"Generated {len(samples)} shape images of side {spec.side}")
    return ShapeImageDataset(spec, samples)


def shape_backend(dataset: ShapeImageDataset, sigma: float = 0.1,
                  schedule: Optional[NoiseSchedule] = None) -> GaussianMixtureBackend:
    """Memorizing mixture: one component per dataset image, labels select their own images"""
    if not sigma > 0:
        raise DomainError(f"Component sigma must be positive, got {sigma}")
    means = np.stack([s.image for s in dataset.samples])
    label_map: Dict[int, List[int]] = {}
    for i, s in enumerate(dataset.samples):
        label_map.setdefault(s.cond.label, []).append(i)
    count = len(dataset.samples)
    return GaussianMixtureBackend(means, [sigma] * count, [1.0] * count, label_map, schedule or NoiseSchedule())


def source_index(dataset: ShapeImageDataset, label: int, index: int) -> ShapeSample:
    members = dataset.of_label(label)
    if not 0 <= index < len(members):
        raise DomainError(f"Label {label} has {len(members)} images, index {index} requested")
    return members[index]

