"""
Experiment Orchestrator for IDS Lab
Builds the backend and tasks of a config, runs edit / ablation / inversion /
posterior-sweep / training cells on a worker pool and writes their artifacts
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import psutil

from .backend import Condition, MlpDenoiserBackend, ScoreBackend, backend_from_dict, train_denoiser
from .config import ExperimentConfig, resolve_config
from .core import Latent, Rng
from .distill import DistillConfig, EditResult, EditTask, edit, invert
from .errors import ConfigError, DivergenceError
from .fpr import refined_posterior_sweep
from .metrics import (
    Sentinel,
    background_psnr,
    centroid,
    dynamic_range,
    identity_residual,
    iou,
    mse,
    psnr,
    ssim,
    threshold_mask,
)
from .persistence import ResultStore
from .tasks import (
    ModeSpec,
    ShapeDatasetSpec,
    ShapeImageDataset,
    VectorWorld,
    VectorWorldSpec,
    make_shape_dataset,
    make_vector_world,
    shape_backend,
    source_index,
)

logger = logging.getLogger(__name__)

# Stream index reserved for training draws, far above any cell index
TRAINING_STREAM = 1 << 63

INVERSION_METHODS = ("dds", "ids")


@dataclass
class Setting:
    """Backend plus the ground truth the metrics compare against"""
    backend: ScoreBackend
    world: Optional[VectorWorld] = None
    dataset: Optional[ShapeImageDataset] = None


@dataclass
class PreparedTask:
    cell_id: str
    task_name: str
    seed_index: int
    task: EditTask
    rng: Rng


class ExperimentOrchestrator:
    """
    Runs the commands of one experiment config
    Every cell owns a stream derived from (master seed, cell index); rows are
    collected in cell order whatever order the workers finish in
    """

    def __init__(self, cfg: ExperimentConfig, out_root: str, jobs: Optional[int] = None, default_jobs: int = 1):
        self.cfg = cfg
        self.out_root = out_root
        # an explicit worker count wins over the config, the config over the process default
        if jobs is None:
            jobs = cfg.jobs if cfg.jobs is not None else default_jobs
        self.jobs = max(1, jobs)
        self._setting: Optional[Setting] = None

    # ------------------------------------------------------------------ setup

    @property
    def setting(self) -> Setting:
        if self._setting is None:
            self._setting = self._build_setting()
        return self._setting

    def _world_spec(self) -> VectorWorldSpec:
        world = self.cfg.world
        if world.kind == "two-mode":
            return VectorWorldSpec.two_mode(world.dimension, world.offset, world.sigma, self.cfg.schedule)
        modes = tuple(ModeSpec(m.label, tuple(m.center), m.sigma, m.weight) for m in world.modes)
        return VectorWorldSpec(world.dimension, modes, self.cfg.schedule)

    def _shape_spec(self) -> ShapeDatasetSpec:
        shapes = self.cfg.shapes
        return ShapeDatasetSpec(shapes.side, shapes.per_label, shapes.object_size, shapes.smoothing)

    def _build_setting(self) -> Setting:
        master = Rng(self.cfg.seed)
        world = None
        dataset = None
        if self.cfg.is_grid:
            dataset = make_shape_dataset(self._shape_spec(), master)
            backend: ScoreBackend = shape_backend(dataset, self.cfg.shapes.sigma, self.cfg.schedule)
        else:
            world = make_vector_world(self._world_spec())
            backend = world.backend

        if self.cfg.backend.kind == "trained":
            path = self.cfg.resolve_path(self.cfg.backend.path)
            trained = backend_from_dict(ResultStore.read_json(path))
            if trained.shape != backend.shape:
                raise ConfigError(f"Trained backend shape {trained.shape} does not match the task shape {backend.shape}")
            logger.info(f"Loaded trained backend from {path}")
            backend = trained
        return Setting(backend, world, dataset)

    def output_dir(self, command: str) -> str:
        path = os.path.join(self.out_root, self.cfg.name, command)
        os.makedirs(path, exist_ok=True)
        ResultStore.write_json(os.path.join(path, "resolved-config.json"), resolve_config(self.cfg))
        return path

    def _task_name(self, index: int) -> str:
        name = self.cfg.tasks[index].name
        return name if name else f"task{index}"

    def prepare(self, task_index: int, seed_index: int) -> PreparedTask:
        """Source latent and the cell stream for one (task, seed) cell"""
        task_cfg = self.cfg.tasks[task_index]
        rng = Rng(self.cfg.seed).derive(task_index * self.cfg.seeds + seed_index)
        cond_src = Condition.of(task_cfg.source_label)
        cond_trg = Condition.of(task_cfg.target_label)
        setting = self.setting
        if setting.dataset is not None:
            z_src = source_index(setting.dataset, task_cfg.source_label, task_cfg.source_index).image
        elif task_cfg.source is not None:
            z_src = np.array(task_cfg.source, dtype=np.float64)
        else:
            z_src = setting.world.sample(cond_src, rng, 1)[0]
        name = self._task_name(task_index)
        return PreparedTask(f"{name}/seed{seed_index}", name, seed_index, EditTask(z_src, cond_src, cond_trg), rng)

    def _cells(self) -> List[Tuple[int, int]]:
        return [(i, j) for i in range(len(self.cfg.tasks)) for j in range(self.cfg.seeds)]

    def _run_cells(self, work: Callable[[Any], Any], cells: Sequence[Any]) -> List[Any]:
        if self.jobs == 1:
            return [work(cell) for cell in cells]
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(work, cells))

    def _edit(self, prepared: PreparedTask, dcfg: DistillConfig) -> EditResult:
        try:
            return edit(self.setting.backend, prepared.task, dcfg, rng=prepared.rng)
        except DivergenceError as e:
            e.task_id = f"{prepared.cell_id}/{dcfg.method}"
            logger.error(f"Edit diverged: {str(e)}")
            raise

    # ---------------------------------------------------------------- metrics

    def _nearest_distance(self, z: Latent, label: int) -> float:
        setting = self.setting
        if setting.dataset is not None:
            return min(float(np.linalg.norm(z - s.image)) for s in setting.dataset.of_label(label))
        return float(np.linalg.norm(z - setting.world.mode(label)))

    def edit_metrics(self, prepared: PreparedTask, z_edit: Latent) -> Dict[str, Any]:
        """Identity and fidelity measures of one edited latent against its source"""
        task = prepared.task
        z_src = task.z_src
        target = self._nearest_distance(z_edit, task.cond_trg.label)
        source = self._nearest_distance(z_edit, task.cond_src.label)
        row: Dict[str, Any] = {
            "mse_to_source": mse(z_edit, z_src),
            "target_mode_distance": target,
            "source_mode_distance": source,
            "lands_on_target": target < source,
        }
        if self.setting.dataset is None:
            world = self.setting.world
            row["identity_residual"] = identity_residual(
                z_edit, world.mode(world.nearest_label(z_edit)), z_src, world.mode(task.cond_src.label))
            return row

        peak = dynamic_range(z_src)
        row["psnr"] = psnr(z_src, z_edit, peak)
        row["ssim"] = ssim(z_src, z_edit)
        for mode in self.cfg.metrics.threshold_modes:
            row[f"background_psnr_{mode}"] = background_psnr(z_src, z_edit, self.cfg.metrics.window, mode, peak).value
        row["psnr_peak"] = peak
        if float(np.clip(z_edit, 0.0, None).sum()) > 0:
            shift = np.subtract(centroid(z_edit), centroid(z_src))
            row["centroid_shift"] = float(np.hypot(shift[0], shift[1]))
        else:
            row["centroid_shift"] = Sentinel.UNDEFINED
        row["mask_iou"] = iou(threshold_mask(z_src), threshold_mask(z_edit))
        return row

    def _metric_columns(self) -> List[str]:
        columns = ["mse_to_source", "target_mode_distance", "source_mode_distance", "lands_on_target"]
        if not self.cfg.is_grid:
            return columns + ["identity_residual"]
        columns += ["psnr", "ssim"]
        columns += [f"background_psnr_{mode}" for mode in self.cfg.metrics.threshold_modes]
        return columns + ["psnr_peak", "centroid_shift", "mask_iou"]

    # --------------------------------------------------------------- commands

    def run_edit(self) -> str:
        """Edit every task with every listed method; returns the results path"""
        out = self.output_dir("edit")
        logger.info(f"Running edit: {len(self.cfg.tasks)} tasks x {self.cfg.seeds} seeds x {list(self.cfg.methods)}")
        cells = [(i, j, m) for i, j in self._cells() for m in self.cfg.methods]

        def work(cell: Tuple[int, int, str]) -> Dict[str, Any]:
            task_index, seed_index, method = cell
            prepared = self.prepare(task_index, seed_index)
            dcfg = self.cfg.distill_config(method)
            result = self._edit(prepared, dcfg)
            reconstruction = invert(self.setting.backend, result, prepared.task, dcfg)
            stem = f"{prepared.task_name}-seed{seed_index}-{method}"
            ResultStore.write_json(os.path.join(out, "edits", f"{stem}.json"), result.to_dict())
            if self.cfg.is_grid:
                images = os.path.join(out, "images")
                ResultStore.write_pgm(os.path.join(images, f"{stem}-source.pgm"), prepared.task.z_src)
                ResultStore.write_pgm(os.path.join(images, f"{stem}-edited.pgm"), result.z_trg)
                ResultStore.write_pgm(os.path.join(images, f"{stem}-reconstruction.pgm"), reconstruction)
            row = {"task": prepared.task_name, "seed": seed_index, "method": method}
            row.update(self.edit_metrics(prepared, result.z_trg))
            row["reconstruction_mse"] = mse(reconstruction, prepared.task.z_src)
            row["final_grad_norm"] = result.grad_norms[-1] if result.grad_norms else 0.0
            logger.info(f"Edited {prepared.cell_id} with {method}")
            return row

        rows = self._run_cells(work, cells)
        columns = ["task", "seed", "method"] + self._metric_columns() + ["reconstruction_mse", "final_grad_norm"]
        return ResultStore.write_csv(os.path.join(out, "results.csv"), columns, rows)

    def ablation_cells(self) -> List[Dict[str, Any]]:
        """Cross product of the sweep lists; methods without FPR get one cell per (steps, t-range)"""
        ablation = self.cfg.ablation
        cells = []
        for task_index, seed_index in self._cells():
            for steps in ablation.steps:
                for t_min, t_max in ablation.t_ranges:
                    base = {"task_index": task_index, "seed_index": seed_index,
                            "steps": steps, "t_min": t_min, "t_max": t_max}
                    for method in ablation.methods:
                        if method in ("sds", "dds"):
                            cells.append(dict(base, method=method, lam=None, n_iters=None, metric=None))
                            continue
                        for metric in ablation.metrics:
                            for lam in ablation.lambdas:
                                for n_iters in ablation.n_iters:
                                    cells.append(dict(base, method=method, lam=lam, n_iters=n_iters, metric=metric))
        return cells

    def run_ablation(self) -> str:
        """FPR scale / iteration / step-count / t-range sweep with timing and memory per cell"""
        out = self.output_dir("ablate")
        cells = self.ablation_cells()
        logger.info(f"Running ablation over {len(cells)} cells")
        process = psutil.Process()

        def work(cell: Dict[str, Any]) -> Tuple[Dict[str, Any], Dict[str, Any]]:
            prepared = self.prepare(cell["task_index"], cell["seed_index"])
            overrides: Dict[str, Any] = {"steps": cell["steps"], "t_min": cell["t_min"], "t_max": cell["t_max"]}
            if cell["lam"] is not None:
                overrides["fpr"] = replace(self.cfg.fpr, lam=cell["lam"], n_iters=cell["n_iters"], metric=cell["metric"])
            dcfg = self.cfg.distill_config(cell["method"], **overrides)
            started = time.perf_counter()
            result = self._edit(prepared, dcfg)
            elapsed = time.perf_counter() - started
            key = {
                "task": prepared.task_name, "seed": prepared.seed_index, "method": cell["method"],
                "steps": cell["steps"], "t_min": cell["t_min"], "t_max": cell["t_max"],
                "lambda": cell["lam"], "n_iters": cell["n_iters"], "fpr_metric": cell["metric"],
            }
            row = dict(key)
            row.update(self.edit_metrics(prepared, result.z_trg))
            timing = dict(key, seconds_per_latent=elapsed, rss_mb=process.memory_info().rss / (1024.0 * 1024.0))
            logger.info(f"Ablation cell {prepared.cell_id} {cell['method']} steps={cell['steps']} done in {elapsed:.2f}s")
            return row, timing

        results = self._run_cells(work, cells)
        keys = ["task", "seed", "method", "steps", "t_min", "t_max", "lambda", "n_iters", "fpr_metric"]
        rows = [r for r, _ in results]
        ResultStore.write_csv(os.path.join(out, "timings.csv"), keys + ["seconds_per_latent", "rss_mb"],
                              [t for _, t in results])
        ResultStore.write_csv(os.path.join(out, "trend.csv"),
                              ["method", "steps", "lambda", "n_iters", "fpr_metric", "mean_identity", "cells"],
                              self._trend(rows))
        return ResultStore.write_csv(os.path.join(out, "results.csv"), keys + self._metric_columns(), rows)

    def _trend(self, rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
        """Mean identity measure per (method, steps, lambda, N, metric) group, in first-seen order"""
        column = "centroid_shift" if self.cfg.is_grid else "identity_residual"
        groups: Dict[Tuple, List[float]] = {}
        for row in rows:
            value = row.get(column)
            if isinstance(value, Sentinel):
                continue
            key = (row["method"], row["steps"], row["lambda"], row["n_iters"], row["fpr_metric"])
            groups.setdefault(key, []).append(value)
        return [
            {"method": k[0], "steps": k[1], "lambda": k[2], "n_iters": k[3], "fpr_metric": k[4],
             "mean_identity": float(np.mean(v)), "cells": len(v)}
            for k, v in groups.items()
        ]

    def run_inversion(self) -> str:
        """Edit then invert with dds and ids; reconstruction error per seed"""
        out = self.output_dir("invert")
        cells = [(i, j, m) for i, j in self._cells() for m in INVERSION_METHODS]

        def work(cell: Tuple[int, int, str]) -> Dict[str, Any]:
            task_index, seed_index, method = cell
            prepared = self.prepare(task_index, seed_index)
            dcfg = self.cfg.distill_config(method)
            result = self._edit(prepared, dcfg)
            reconstruction = invert(self.setting.backend, result, prepared.task, dcfg)
            if self.cfg.is_grid:
                ResultStore.write_triptych(
                    os.path.join(out, "images", f"{prepared.task_name}-seed{seed_index}-{method}.pgm"),
                    [prepared.task.z_src, result.z_trg, reconstruction])
            return {
                "task": prepared.task_name,
                "seed": seed_index,
                "method": method,
                "reconstruction_mse": mse(reconstruction, prepared.task.z_src),
                "edit_mse_to_source": mse(result.z_trg, prepared.task.z_src),
            }

        rows = self._run_cells(work, cells)
        for method in INVERSION_METHODS:
            errors = [r["reconstruction_mse"] for r in rows if r["method"] == method]
            logger.info(f"Inversion {method}: mean reconstruction MSE {np.mean(errors):.6e}")
        return ResultStore.write_csv(os.path.join(out, "results.csv"),
                                     ["task", "seed", "method", "reconstruction_mse", "edit_mse_to_source"], rows)

    def run_posterior_sweep(self) -> str:
        """Posterior-mean distance vs t before and after FPR, for each update variable"""
        out = self.output_dir("sweep-posterior")
        updates = list(self.cfg.sweep.updates)

        def work(cell: Tuple[int, int]) -> List[Dict[str, Any]]:
            prepared = self.prepare(*cell)
            rows = refined_posterior_sweep(self.setting.backend, prepared.task.z_src, prepared.task.cond_src,
                                           self.cfg.sweep.ts, prepared.rng, self.cfg.distill.omega,
                                           self.cfg.fpr, updates)
            for row in rows:
                row.update(task=prepared.task_name, seed=prepared.seed_index)
            return rows

        rows = [row for chunk in self._run_cells(work, self._cells()) for row in chunk]
        columns = ["task", "seed", "t", "distance_pre"] + [f"distance_post_{u}" for u in updates]
        return ResultStore.write_csv(os.path.join(out, "results.csv"), columns, rows)

    def train(self) -> str:
        """Train the MLP denoiser on the config's data; persists initial and trained weights"""
        out = self.output_dir("train")
        training = self.cfg.training
        rng = Rng(self.cfg.seed).derive(TRAINING_STREAM)
        setting = self.setting
        if setting.dataset is not None:
            pairs = setting.dataset.pairs()
            n_labels = 2
        else:
            pairs = setting.world.training_pairs(rng, training.per_label)
            n_labels = max(setting.world.labels) + 1

        initial = MlpDenoiserBackend.initialize(setting.backend.shape, n_labels, training.hidden,
                                                self.cfg.schedule, rng)
        ResultStore.write_json(os.path.join(out, "denoiser-init.json"), initial.to_dict())
        trained, losses = train_denoiser(initial, pairs, self.cfg.schedule, rng, training.epochs, training.lr,
                                         training.cond_drop_prob, training.batch_size)
        path = ResultStore.write_json(os.path.join(out, training.output), trained.to_dict())
        ResultStore.write_csv(os.path.join(out, "losses.csv"), ["epoch", "loss"],
                              [{"epoch": i, "loss": loss} for i, loss in enumerate(losses)])
        logger.info(f"Saved trained denoiser to {path}")
        return path
