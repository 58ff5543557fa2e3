"""
Score distillation operators and the editing loop
SDS, DDS, IDS (and FPR-refined SDS) gradients, edit, and the replayed inversion
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from typing_extensions import Literal

from .backend import Condition, ScoreBackend
from .core import (
    Latent,
    NoiseSchedule,
    Rng,
    check_same_shape,
    forward_diffuse,
    sample_gaussian,
    sample_time,
)
from .errors import DivergenceError, DomainError, ReplayError, UsageError
from .fpr import FprConfig, FprTrace, fpr_refine
from .guidance import DEFAULT_OMEGA, check_omega, guided_score

logger = logging.getLogger(__name__)

Method = Literal["sds", "dds", "ids", "fpr-sds"]

METHODS = ("sds", "dds", "ids", "fpr-sds")
THETA_NORM_LIMIT = 1e6
RESULT_SCHEMA = 1


@dataclass(frozen=True)
class DistillConfig:
    method: Method = "ids"
    omega: float = DEFAULT_OMEGA
    steps: int = 200
    lr: float = 0.05
    t_min: float = 0.05
    t_max: float = 0.95
    fpr: FprConfig = field(default_factory=FprConfig)
    seed: int = 0
    # keep every k-th iterate in the trajectory; 0 keeps none
    snapshot_every: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"Unknown distillation method: {self.method}")
        check_omega(self.omega)
        if self.steps < 0:
            raise DomainError(f"Step count must be non-negative, got {self.steps}")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise DomainError(f"Learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise DomainError(f"Need 0 <= t_min < t_max <= 1, got ({self.t_min}, {self.t_max})")
        if self.seed < 0 or self.seed >= (1 << 64):
            raise DomainError(f"Seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.snapshot_every < 0:
            raise DomainError("snapshot_every must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "omega": self.omega,
            "steps": self.steps,
            "lr": self.lr,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "fpr": self.fpr.to_dict(),
            "seed": self.seed,
            "snapshot_every": self.snapshot_every,
        }


@dataclass(frozen=True)
class EditTask:
    z_src: Latent
    cond_src: Condition
    cond_trg: Condition

    def check(self, backend: ScoreBackend) -> None:
        backend.check_latent(self.z_src, "z_src")
        for cond in (self.cond_src, self.cond_trg):
            if cond.is_null:
                raise UsageError("Edit conditions must be labels")
            backend.check_condition(cond)


@dataclass(frozen=True)
class NoiseRecord:
    """Diffusion time and the noise (eps, or eps* for refined methods) one step used"""
    t: float
    noise: Latent


@dataclass(frozen=True)
class EditResult:
    z_trg: Latent
    method: str
    noise_record: List[NoiseRecord]
    grad_norms: List[float]
    trajectory: List[Tuple[int, Latent]] = field(default_factory=list)
    fpr_final_losses: List[float] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        shape = list(np.shape(self.z_trg))
        return {
            "schema": RESULT_SCHEMA,
            "shape": shape,
            "method": self.method,
            "config": self.config,
            "z_trg": np.asarray(self.z_trg).reshape(-1).tolist(),
            "noise_record": {
                "t": [r.t for r in self.noise_record],
                "noise": [np.asarray(r.noise).reshape(-1).tolist() for r in self.noise_record],
            },
            "grad_norms": list(self.grad_norms),
            "fpr_final_losses": list(self.fpr_final_losses),
            "trajectory": [
                {"step": step, "theta": np.asarray(theta).reshape(-1).tolist()}
                for step, theta in self.trajectory
            ],
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "EditResult":
        if doc.get("schema") != RESULT_SCHEMA:
            raise ReplayError(f"Unsupported edit result schema: {doc.get('schema')}")
        shape = tuple(doc["shape"])
        record = doc["noise_record"]
        if len(record["t"]) != len(record["noise"]):
            raise ReplayError("Noise record times and noises differ in length")
        return cls(
            z_trg=np.asarray(doc["z_trg"], dtype=np.float64).reshape(shape),
            method=doc["method"],
            noise_record=[
                NoiseRecord(float(t), np.asarray(noise, dtype=np.float64).reshape(shape))
                for t, noise in zip(record["t"], record["noise"])
            ],
            grad_norms=[float(g) for g in doc["grad_norms"]],
            trajectory=[
                (int(item["step"]), np.asarray(item["theta"], dtype=np.float64).reshape(shape))
                for item in doc.get("trajectory", [])
            ],
            fpr_final_losses=[float(v) for v in doc.get("fpr_final_losses", [])],
            config=doc.get("config", {}),
        )


def sds_gradient(backend: ScoreBackend, z: Latent, cond: Condition, t: float, eps: Latent, omega: float,
                 schedule: Optional[NoiseSchedule] = None) -> Latent:
    """eps_w(z_t, y, t) - eps with z_t the forward diffusion of z; unit weighting, identity generator"""
    z_t = forward_diffuse(z, eps, t, schedule or backend.schedule)
    return guided_score(backend, z_t, cond, t, omega) - np.asarray(eps)


def dds_gradient(backend: ScoreBackend, z_trg: Latent, cond_trg: Condition, z_src: Latent, cond_src: Condition,
                 t: float, eps: Latent, omega: float, schedule: Optional[NoiseSchedule] = None) -> Latent:
    """Difference of target and source guided scores at latents sharing one eps"""
    check_same_shape(z_trg, z_src, "z_trg and z_src")
    schedule = schedule or backend.schedule
    z_t_trg = forward_diffuse(z_trg, eps, t, schedule)
    z_t_src = forward_diffuse(z_src, eps, t, schedule)
    return guided_score(backend, z_t_trg, cond_trg, t, omega) - guided_score(backend, z_t_src, cond_src, t, omega)


def ids_gradient(backend: ScoreBackend, z_trg: Latent, cond_trg: Condition, z_src: Latent, cond_src: Condition,
                 t: float, eps: Latent, omega: float, fpr_cfg: FprConfig,
                 schedule: Optional[NoiseSchedule] = None) -> Tuple[Latent, FprTrace]:
    """
    DDS with the source latent refined by FPR; both sides are diffused with
    the guided noise eps* so the source side reproduces the refined latent.
    """
    check_same_shape(z_trg, z_src, "z_trg and z_src")
    schedule = schedule or backend.schedule
    trace = fpr_refine(backend, z_src, cond_src, t, eps, fpr_cfg, schedule, omega=omega)
    grad = dds_gradient(backend, z_trg, cond_trg, z_src, cond_src, t, trace.eps_star, omega, schedule)
    return grad, trace


def fpr_sds_gradient(backend: ScoreBackend, z: Latent, cond: Condition, t: float, eps: Latent, omega: float,
                     fpr_cfg: FprConfig, schedule: Optional[NoiseSchedule] = None) -> Tuple[Latent, FprTrace]:
    """SDS evaluated at the FPR-refined latent of z against itself, with the guided noise as target"""
    schedule = schedule or backend.schedule
    trace = fpr_refine(backend, z, cond, t, eps, fpr_cfg, schedule, omega=omega)
    return sds_gradient(backend, z, cond, t, trace.eps_star, omega, schedule), trace


def _step_gradient(backend: ScoreBackend, theta: Latent, task: EditTask, cfg: DistillConfig, t: float,
                   eps: Latent, schedule: NoiseSchedule) -> Tuple[Latent, Latent, Optional[FprTrace]]:
    """Gradient for one step, the noise to record and the FPR trace if any"""
    if cfg.method == "sds":
        return sds_gradient(backend, theta, task.cond_trg, t, eps, cfg.omega, schedule), eps, None
    if cfg.method == "dds":
        grad = dds_gradient(backend, theta, task.cond_trg, task.z_src, task.cond_src, t, eps, cfg.omega, schedule)
        return grad, eps, None
    if cfg.method == "ids":
        grad, trace = ids_gradient(backend, theta, task.cond_trg, task.z_src, task.cond_src, t, eps,
                                   cfg.omega, cfg.fpr, schedule)
        return grad, trace.eps_star, trace
    grad, trace = fpr_sds_gradient(backend, theta, task.cond_trg, t, eps, cfg.omega, cfg.fpr, schedule)
    return grad, trace.eps_star, trace


def _check_theta(theta: Latent, step: int) -> None:
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(f"Edit latent became non-finite at step {step}", iteration=step)
    norm = float(np.linalg.norm(theta))
    if norm > THETA_NORM_LIMIT:
        raise DivergenceError(f"Edit latent norm {norm:.3e} exceeded {THETA_NORM_LIMIT:g} at step {step}",
                              iteration=step)


def edit(backend: ScoreBackend, task: EditTask, cfg: DistillConfig, schedule: Optional[NoiseSchedule] = None,
         rng: Optional[Rng] = None) -> EditResult:
    """
    Plain gradient descent on theta starting from the source latent. Each step
    draws t then eps from the seeded stream and records the noise it used.
    """
    task.check(backend)
    schedule = schedule or backend.schedule
    rng = rng or Rng(cfg.seed)

    theta = np.array(task.z_src, dtype=np.float64)
    records: List[NoiseRecord] = []
    grad_norms: List[float] = []
    fpr_final_losses: List[float] = []
    trajectory: List[Tuple[int, Latent]] = []

    for step in range(cfg.steps):
        t = sample_time(rng, cfg.t_min, cfg.t_max)
        eps = sample_gaussian(rng, theta.shape)
        grad, noise, trace = _step_gradient(backend, theta, task, cfg, t, eps, schedule)
        theta = theta - cfg.lr * grad
        _check_theta(theta, step)

        records.append(NoiseRecord(t, noise))
        grad_norms.append(float(np.linalg.norm(grad)))
        if trace is not None and trace.final_loss is not None:
            fpr_final_losses.append(trace.final_loss)
        if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            trajectory.append((step + 1, theta.copy()))
        logger.debug(f"{cfg.method} step {step}: t={t:.3f}, grad norm {grad_norms[-1]:.4e}")

    return EditResult(theta, cfg.method, records, grad_norms, trajectory, fpr_final_losses, cfg.to_dict())


def invert(backend: ScoreBackend, edit_result: EditResult, original_task: EditTask, cfg: DistillConfig,
           schedule: Optional[NoiseSchedule] = None) -> Latent:
    """
    Run the optimization back from the edited latent with source and target
    swapped, replaying the recorded noise in reverse order. Refined methods
    replay their stored guided noise through the delta-score form.
    """
    schedule = schedule or backend.schedule
    if edit_result.method != cfg.method:
        raise ReplayError(f"Edit used method {edit_result.method}, inversion asked for {cfg.method}")
    if len(edit_result.noise_record) != cfg.steps:
        raise ReplayError(f"Noise record has {len(edit_result.noise_record)} steps, config expects {cfg.steps}")
    if np.shape(edit_result.z_trg) != np.shape(original_task.z_src):
        raise ReplayError("Edited latent and source latent differ in shape")
    for record in edit_result.noise_record:
        if np.shape(record.noise) != np.shape(original_task.z_src):
            raise ReplayError("Recorded noise does not match the latent shape")
    original_task.check(backend)

    z_anchor = np.asarray(edit_result.z_trg, dtype=np.float64)
    theta = z_anchor.copy()
    for step, record in enumerate(reversed(edit_result.noise_record)):
        if cfg.method in ("dds", "ids"):
            grad = dds_gradient(backend, theta, original_task.cond_src, z_anchor, original_task.cond_trg,
                                record.t, record.noise, cfg.omega, schedule)
        else:
            grad = sds_gradient(backend, theta, original_task.cond_src, record.t, record.noise, cfg.omega, schedule)
        theta = theta - cfg.lr * grad
        _check_theta(theta, step)
    return theta
