"""
Configuration for IDS Lab
Environment defaults via python-dotenv and schema-checked JSON experiment configs
"""

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from .core import NoiseSchedule
from .distill import METHODS, DistillConfig
from .errors import ConfigError, LabError
from .fpr import FPR_METRICS, INNER_OMEGA, FprConfig
from .guidance import DEFAULT_OMEGA

logger = logging.getLogger(__name__)

CONFIG_SCHEMA = 1
VECTOR_LR = 0.05
GRID_LR = 0.1


@dataclass(frozen=True)
class Settings:
    """Process-level defaults, overridable from the CLI"""
    out_dir: str = "out"
    log_level: str = "INFO"
    jobs: int = 1


def load_settings() -> Settings:
    load_dotenv()
    try:
        jobs = int(os.getenv("IDSLAB_JOBS", "1"))
    except ValueError:
        logger.warning("IDSLAB_JOBS is not an integer; using 1 worker")
        jobs = 1
    return Settings(
        out_dir=os.getenv("IDSLAB_OUT_DIR", "out"),
        log_level=os.getenv("IDSLAB_LOG_LEVEL", "INFO").upper(),
        jobs=max(1, jobs),
    )


@dataclass(frozen=True)
class ModeConfig:
    label: int
    center: Tuple[float, ...]
    sigma: float
    weight: float = 1.0


@dataclass(frozen=True)
class WorldConfig:
    kind: str = "two-mode"
    dimension: int = 2
    offset: float = 2.0
    sigma: float = 0.3
    modes: Tuple[ModeConfig, ...] = ()


@dataclass(frozen=True)
class ShapesConfig:
    side: int = 16
    per_label: int = 8
    object_size: float = 6.0
    smoothing: float = 0.0
    sigma: float = 0.1


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "analytic"
    path: Optional[str] = None


@dataclass(frozen=True)
class TaskConfig:
    source_label: int = 0
    target_label: int = 1
    source: Optional[Tuple[float, ...]] = None
    source_index: int = 0
    name: Optional[str] = None


@dataclass(frozen=True)
class DistillSection:
    omega: float = DEFAULT_OMEGA
    steps: int = 200
    lr: Optional[float] = None
    t_min: float = 0.05
    t_max: float = 0.95
    snapshot_every: int = 0


@dataclass(frozen=True)
class MetricsConfig:
    window: Optional[int] = None
    threshold_modes: Tuple[str, ...] = ("mean", "median")


@dataclass(frozen=True)
class AblationConfig:
    methods: Tuple[str, ...] = ("dds", "ids", "fpr-sds")
    lambdas: Tuple[float, ...] = (0.5, 1.0, 2.0)
    n_iters: Tuple[int, ...] = (0, 1, 3)
    steps: Tuple[int, ...] = (200, 400)
    t_ranges: Tuple[Tuple[float, float], ...] = ((0.05, 0.95), (0.0, 0.2))
    metrics: Tuple[str, ...] = ("euclidean",)


@dataclass(frozen=True)
class SweepConfig:
    ts: Tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    updates: Tuple[str, ...] = ("z_t", "eps")


@dataclass(frozen=True)
class TrainingConfig:
    hidden: Tuple[int, ...] = (64, 64)
    epochs: int = 400
    lr: float = 0.05
    cond_drop_prob: float = 0.2
    per_label: int = 200
    batch_size: int = 32
    output: str = "denoiser.json"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    seeds: int = 1
    jobs: Optional[int] = None
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    world: Optional[WorldConfig] = None
    shapes: Optional[ShapesConfig] = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    tasks: Tuple[TaskConfig, ...] = (TaskConfig(),)
    methods: Tuple[str, ...] = ("ids",)
    distill: DistillSection = field(default_factory=DistillSection)
    fpr: FprConfig = field(default_factory=FprConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    base_dir: str = "."

    @property
    def is_grid(self) -> bool:
        return self.shapes is not None

    def distill_config(self, method: str, **overrides) -> DistillConfig:
        """DistillConfig for one method with the task-kind learning-rate default"""
        lr = self.distill.lr if self.distill.lr is not None else (GRID_LR if self.is_grid else VECTOR_LR)
        cfg = DistillConfig(
            method=method,
            omega=self.distill.omega,
            steps=self.distill.steps,
            lr=lr,
            t_min=self.distill.t_min,
            t_max=self.distill.t_max,
            fpr=self.fpr,
            seed=self.seed,
            snapshot_every=self.distill.snapshot_every,
        )
        return replace(cfg, **overrides) if overrides else cfg

    def resolve_path(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


def _item_start(text: str, pos: int, index: int) -> int:
    """Offset of the index-th object in the first list after pos"""
    start = text.find("[", pos)
    if start < 0:
        return pos
    depth = 0
    count = -1
    for offset in range(start, len(text)):
        ch = text[offset]
        if ch in "[{":
            depth += 1
            if ch == "{" and depth == 2:
                count += 1
                if count == index:
                    return offset
        elif ch in "]}":
            depth -= 1
            if depth == 0:
                break
    return start


class _Reader:
    """Typed access to one JSON object with line-anchored errors"""

    def __init__(self, text: str, doc: Any, path: Tuple[str, ...]):
        self.text = text
        self.path = path
        if not isinstance(doc, dict):
            raise ConfigError(f"'{self.where}' must be an object", line=self.line())
        self.doc = doc
        self.seen: set = set()

    @property
    def where(self) -> str:
        return ".".join(self.path) or "<root>"

    def line(self, key: Optional[str] = None) -> Optional[int]:
        """1-based line of the key (or this object) in the source text"""
        pos = 0
        keys = list(self.path) + ([key] if key is not None else [])
        for k in keys:
            if k.isdigit():
                pos = _item_start(self.text, pos, int(k))
                continue
            match = re.compile(r'"%s"\s*:' % re.escape(k)).search(self.text, pos)
            if match is None:
                return None
            pos = match.start()
        return self.text.count("\n", 0, pos) + 1 if keys else 1

    def fail(self, key: str, message: str) -> ConfigError:
        return ConfigError(f"{self.where}.{key}: {message}" if self.path else f"{key}: {message}", line=self.line(key))

    def has(self, key: str) -> bool:
        return key in self.doc

    def get(self, key: str, check: Callable[[Any], Any], default: Any) -> Any:
        self.seen.add(key)
        if key not in self.doc:
            return default
        try:
            return check(self.doc[key])
        except (TypeError, ValueError) as e:
            raise self.fail(key, str(e))

    def child(self, key: str) -> Optional["_Reader"]:
        self.seen.add(key)
        if key not in self.doc or self.doc[key] is None:
            return None
        return _Reader(self.text, self.doc[key], self.path + (key,))

    def children(self, key: str) -> Optional[List["_Reader"]]:
        self.seen.add(key)
        if key not in self.doc:
            return None
        items = self.doc[key]
        if not isinstance(items, list) or not items:
            raise self.fail(key, "expected a non-empty list")
        return [_Reader(self.text, item, self.path + (key, str(i))) for i, item in enumerate(items)]

    def finish(self) -> None:
        for key in self.doc:
            if key not in self.seen:
                raise self.fail(key, "unknown key")


def _integer(low: Optional[int] = None, high: Optional[int] = None) -> Callable[[Any], int]:
    def check(value: Any) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected an integer, got {value!r}")
        if (low is not None and value < low) or (high is not None and value > high):
            raise ValueError(f"{value} outside [{low}, {high}]")
        return value
    return check


def _number(low: Optional[float] = None, positive: bool = False) -> Callable[[Any], float]:
    def check(value: Any) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ValueError("expected a finite number")
        if positive and value <= 0:
            raise ValueError(f"expected a positive number, got {value}")
        if low is not None and value < low:
            raise ValueError(f"{value} below {low}")
        return value
    return check


def _optional(check: Callable[[Any], Any]) -> Callable[[Any], Any]:
    return lambda value: None if value is None else check(value)


def _string(choices: Optional[Sequence[str]] = None) -> Callable[[Any], str]:
    def check(value: Any) -> str:
        if not isinstance(value, str):
            raise TypeError(f"expected a string, got {value!r}")
        if choices is not None and value not in choices:
            raise ValueError(f"{value!r} is not one of {list(choices)}")
        return value
    return check


def _list(item: Callable[[Any], Any], non_empty: bool = True) -> Callable[[Any], tuple]:
    def check(value: Any) -> tuple:
        if not isinstance(value, list):
            raise TypeError(f"expected a list, got {value!r}")
        if non_empty and not value:
            raise ValueError("expected a non-empty list")
        return tuple(item(v) for v in value)
    return check


def _t_range(value: Any) -> Tuple[float, float]:
    pair = _list(_number(low=0.0))(value)
    if len(pair) != 2 or not (0.0 <= pair[0] < pair[1] <= 1.0):
        raise ValueError(f"t-range must be [t_min, t_max] with 0 <= t_min < t_max <= 1, got {list(value)}")
    return pair


def _read_schedule(r: Optional[_Reader]) -> NoiseSchedule:
    if r is None:
        return NoiseSchedule()
    kind = r.get("kind", _string(["linear-alpha", "cosine"]), "linear-alpha")
    alpha_min = r.get("alpha_min", _number(positive=True), 0.01)
    r.finish()
    if alpha_min >= 1.0:
        raise r.fail("alpha_min", "must lie in (0, 1)")
    return NoiseSchedule(kind, alpha_min)


def _read_world(r: _Reader) -> WorldConfig:
    kind = r.get("kind", _string(["two-mode", "modes"]), "two-mode")
    world = WorldConfig(
        kind=kind,
        dimension=r.get("dimension", _integer(1, 64), 2),
        offset=r.get("offset", _number(), 2.0),
        sigma=r.get("sigma", _number(positive=True), 0.3),
    )
    modes = r.children("modes")
    if kind == "modes":
        if modes is None or len(modes) < 2:
            raise r.fail("modes", "a 'modes' world needs at least two modes")
        parsed = []
        for m in modes:
            mode = ModeConfig(
                label=m.get("label", _integer(0), None),
                center=m.get("center", _list(_number()), None),
                sigma=m.get("sigma", _number(positive=True), world.sigma),
                weight=m.get("weight", _number(positive=True), 1.0),
            )
            if mode.label is None or mode.center is None:
                raise ConfigError(f"{m.where}: modes need 'label' and 'center'", line=m.line())
            if len(mode.center) != world.dimension:
                raise m.fail("center", f"expected {world.dimension} coordinates")
            m.finish()
            parsed.append(mode)
        world = replace(world, modes=tuple(parsed))
    elif modes is not None:
        raise r.fail("modes", "only allowed when kind is 'modes'")
    r.finish()
    return world


def _read_shapes(r: _Reader) -> ShapesConfig:
    shapes = ShapesConfig(
        side=r.get("side", _integer(8, 32), 16),
        per_label=r.get("per_label", _integer(1), 8),
        object_size=r.get("object_size", _number(positive=True), 6.0),
        smoothing=r.get("smoothing", _number(low=0.0), 0.0),
        sigma=r.get("sigma", _number(positive=True), 0.1),
    )
    r.finish()
    if shapes.object_size >= shapes.side:
        raise r.fail("object_size", "must be smaller than the grid side")
    return shapes


def _read_task(r: _Reader) -> TaskConfig:
    task = TaskConfig(
        source_label=r.get("source_label", _integer(0), 0),
        target_label=r.get("target_label", _integer(0), 1),
        source=r.get("source", _optional(_list(_number())), None),
        source_index=r.get("source_index", _integer(0), 0),
        name=r.get("name", _optional(_string()), None),
    )
    r.finish()
    return task


def _read_fpr(r: Optional[_Reader]) -> FprConfig:
    if r is None:
        return FprConfig()
    cfg = FprConfig(
        lam=r.get("lambda", _number(positive=True), 1.0),
        n_iters=r.get("n_iters", _integer(0), 3),
        metric=r.get("metric", _string(FPR_METRICS), "euclidean"),
        omega=r.get("omega", _optional(_number(low=-1.0)), INNER_OMEGA),
        update=r.get("update", _string(["z_t", "eps"]), "z_t"),
    )
    r.finish()
    return cfg


def _read_distill(r: Optional[_Reader]) -> DistillSection:
    if r is None:
        return DistillSection()
    section = DistillSection(
        omega=r.get("omega", _number(low=-1.0), DEFAULT_OMEGA),
        steps=r.get("steps", _integer(0), 200),
        lr=r.get("lr", _optional(_number(positive=True)), None),
        t_min=r.get("t_min", _number(low=0.0), 0.05),
        t_max=r.get("t_max", _number(low=0.0), 0.95),
        snapshot_every=r.get("snapshot_every", _integer(0), 0),
    )
    r.finish()
    if not section.t_min < section.t_max <= 1.0:
        raise r.fail("t_max", "need t_min < t_max <= 1")
    return section


def _read_sections(r: _Reader, key: str, reader: Callable[[_Reader], Any], default: Any) -> Any:
    child = r.child(key)
    return default if child is None else reader(child)


def _read_metrics(r: _Reader) -> MetricsConfig:
    cfg = MetricsConfig(
        window=r.get("window", _optional(_integer(1)), None),
        threshold_modes=r.get("threshold_modes", _list(_string(["mean", "median"])), ("mean", "median")),
    )
    r.finish()
    if cfg.window is not None and cfg.window % 2 == 0:
        raise r.fail("window", "must be odd")
    return cfg


def _read_ablation(r: _Reader) -> AblationConfig:
    default = AblationConfig()
    cfg = AblationConfig(
        methods=r.get("methods", _list(_string(METHODS)), default.methods),
        lambdas=r.get("lambdas", _list(_number(positive=True)), default.lambdas),
        n_iters=r.get("n_iters", _list(_integer(0)), default.n_iters),
        steps=r.get("steps", _list(_integer(1)), default.steps),
        t_ranges=r.get("t_ranges", _list(_t_range), default.t_ranges),
        metrics=r.get("metrics", _list(_string(FPR_METRICS)), default.metrics),
    )
    r.finish()
    return cfg


def _read_sweep(r: _Reader) -> SweepConfig:
    default = SweepConfig()
    cfg = SweepConfig(
        ts=r.get("ts", _list(_number(low=0.0)), default.ts),
        updates=r.get("updates", _list(_string(["z_t", "eps"])), default.updates),
    )
    r.finish()
    if any(t > 1.0 for t in cfg.ts):
        raise r.fail("ts", "times must lie in [0, 1]")
    return cfg


def _read_training(r: _Reader) -> TrainingConfig:
    default = TrainingConfig()
    cfg = TrainingConfig(
        hidden=r.get("hidden", _list(_integer(1)), default.hidden),
        epochs=r.get("epochs", _integer(0), default.epochs),
        lr=r.get("lr", _number(positive=True), default.lr),
        cond_drop_prob=r.get("cond_drop_prob", _number(low=0.0), default.cond_drop_prob),
        per_label=r.get("per_label", _integer(1), default.per_label),
        batch_size=r.get("batch_size", _integer(1), default.batch_size),
        output=r.get("output", _string(), default.output),
    )
    r.finish()
    if cfg.cond_drop_prob > 1.0:
        raise r.fail("cond_drop_prob", "must lie in [0, 1]")
    return cfg


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    """Validate a JSON config document and materialize its defaults"""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", line=e.lineno)
    root = _Reader(text, doc, ())
    schema = root.get("schema", _integer(), None)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"schema must be {CONFIG_SCHEMA}, got {schema}", line=root.line("schema") or 1)

    world_reader = root.child("world")
    shapes_reader = root.child("shapes")
    if world_reader is not None and shapes_reader is not None:
        raise root.fail("shapes", "a config has either 'world' or 'shapes', not both")
    world = _read_world(world_reader) if world_reader is not None else None
    shapes = _read_shapes(shapes_reader) if shapes_reader is not None else None
    if world is None and shapes is None:
        world = WorldConfig()

    backend = BackendConfig()
    backend_reader = root.child("backend")
    if backend_reader is not None:
        backend = BackendConfig(
            kind=backend_reader.get("kind", _string(["analytic", "trained"]), "analytic"),
            path=backend_reader.get("path", _optional(_string()), None),
        )
        backend_reader.finish()
        if backend.kind == "trained" and backend.path is None:
            raise backend_reader.fail("path", "a trained backend needs a weights path")

    task_readers = root.children("tasks")
    tasks = tuple(_read_task(t) for t in task_readers) if task_readers else (TaskConfig(),)

    try:
        cfg = ExperimentConfig(
            name=root.get("name", _string(), "experiment"),
            seed=root.get("seed", _integer(0, (1 << 64) - 1), 0),
            seeds=root.get("seeds", _integer(1), 1),
            jobs=root.get("jobs", _optional(_integer(1)), None),
            schedule=_read_schedule(root.child("schedule")),
            world=world,
            shapes=shapes,
            backend=backend,
            tasks=tasks,
            methods=root.get("methods", _list(_string(METHODS)), ("ids",)),
            distill=_read_distill(root.child("distill")),
            fpr=_read_fpr(root.child("fpr")),
            metrics=_read_sections(root, "metrics", _read_metrics, MetricsConfig()),
            ablation=_read_sections(root, "ablation", _read_ablation, AblationConfig()),
            sweep=_read_sections(root, "sweep", _read_sweep, SweepConfig()),
            training=_read_sections(root, "training", _read_training, TrainingConfig()),
            base_dir=base_dir,
        )
    except ConfigError:
        raise
    except LabError as e:
        raise ConfigError(str(e), line=None)
    root.finish()

    if not cfg.is_grid and "ssim" in cfg.ablation.metrics:
        raise ConfigError("ssim FPR metric needs a grid task ('shapes')", line=root.line("ablation"))
    if not cfg.is_grid and cfg.fpr.metric == "ssim":
        raise ConfigError("ssim FPR metric needs a grid task ('shapes')", line=root.line("fpr"))
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    logger.info(f"Loaded config {path}")
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


def resolve_config(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Every setting with defaults materialized, as written next to the results"""
    doc: Dict[str, Any] = {
        "schema": CONFIG_SCHEMA,
        "name": cfg.name,
        "seed": cfg.seed,
        "seeds": cfg.seeds,
        "schedule": cfg.schedule.to_dict(),
        "backend": {"kind": cfg.backend.kind, "path": cfg.backend.path},
        "tasks": [
            {"source_label": t.source_label, "target_label": t.target_label,
             "source": list(t.source) if t.source is not None else None,
             "source_index": t.source_index, "name": t.name}
            for t in cfg.tasks
        ],
        "methods": list(cfg.methods),
        "distill": {
            "omega": cfg.distill.omega,
            "steps": cfg.distill.steps,
            "lr": cfg.distill_config(cfg.methods[0]).lr,
            "t_min": cfg.distill.t_min,
            "t_max": cfg.distill.t_max,
            "snapshot_every": cfg.distill.snapshot_every,
        },
        "fpr": cfg.fpr.to_dict(),
        "metrics": {"window": cfg.metrics.window, "threshold_modes": list(cfg.metrics.threshold_modes)},
        "ablation": {
            "methods": list(cfg.ablation.methods),
            "lambdas": list(cfg.ablation.lambdas),
            "n_iters": list(cfg.ablation.n_iters),
            "steps": list(cfg.ablation.steps),
            "t_ranges": [list(r) for r in cfg.ablation.t_ranges],
            "metrics": list(cfg.ablation.metrics),
        },
        "sweep": {"ts": list(cfg.sweep.ts), "updates": list(cfg.sweep.updates)},
        "training": {
            "hidden": list(cfg.training.hidden),
            "epochs": cfg.training.epochs,
            "lr": cfg.training.lr,
            "cond_drop_prob": cfg.training.cond_drop_prob,
            "per_label": cfg.training.per_label,
            "batch_size": cfg.training.batch_size,
            "output": cfg.training.output,
        },
    }
    if cfg.jobs is not None:
        doc["jobs"] = cfg.jobs
    if cfg.world is not None:
        doc["world"] = {
            "kind": cfg.world.kind,
            "dimension": cfg.world.dimension,
            "offset": cfg.world.offset,
            "sigma": cfg.world.sigma,
        }
        if cfg.world.kind == "modes":
            doc["world"]["modes"] = [
                {"label": m.label, "center": list(m.center), "sigma": m.sigma, "weight": m.weight}
                for m in cfg.world.modes
            ]
    if cfg.shapes is not None:
        doc["shapes"] = {
            "side": cfg.shapes.side,
            "per_label": cfg.shapes.per_label,
            "object_size": cfg.shapes.object_size,
            "smoothing": cfg.shapes.smoothing,
            "sigma": cfg.shapes.sigma,
        }
    return doc


def with_seed(cfg: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    """Apply the CLI --seed override"""
    if seed is None:
        return cfg
    if seed < 0 or seed >= (1 << 64):
        raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {seed}")
    return replace(cfg, seed=seed)
