#!/usr/bin/env python3
"""
IDS Lab command line
Score-distillation editing experiments: edit, ablate, invert, sweep-posterior, train
"""

import logging
import sys
from typing import Callable, Optional

import click

from idslab.config import load_config, load_settings, with_seed
from idslab.errors import ConfigError, DivergenceError, LabError
from idslab.experiment_runner import ExperimentOrchestrator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s %(message)s'


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


def run_command(command: str, config_path: str, out: Optional[str], jobs: Optional[int], seed: Optional[int],
                log_level: Optional[str], action: Callable[[ExperimentOrchestrator], str]) -> int:
    """Load settings and config, run one orchestrator command and map failures to exit codes"""
    settings = load_settings()
    configure_logging(log_level or settings.log_level)
    try:
        cfg = with_seed(load_config(config_path), seed)
        orchestrator = ExperimentOrchestrator(cfg, out or settings.out_dir, jobs, settings.jobs)
        logger.info(f"🚀 Starting {command} for experiment '{cfg.name}' (seed {cfg.seed})")
        path = action(orchestrator)
        logger.info(f"✅ {command} finished: {path}")
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"Config error in {config_path}: {str(e)}")
        click.echo(f"config error: {e}", err=True)
        return EXIT_CONFIG
    except DivergenceError as e:
        logger.error(f"Numeric divergence: {str(e)}")
        click.echo(f"divergence: {e}", err=True)
        return EXIT_DIVERGENCE
    except OSError as e:
        logger.error(f"I/O error: {str(e)}")
        click.echo(f"i/o error: {e}", err=True)
        return EXIT_IO
    except LabError as e:
        logger.error(f"Invalid experiment setup: {str(e)}")
        click.echo(f"config error: {e}", err=True)
        return EXIT_CONFIG


def common_options(func):
    func = click.option('--log-level', help='Logging level  [default: $IDSLAB_LOG_LEVEL or INFO]', metavar='LEVEL',
                        type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))(func)
    func = click.option('--seed', help='Master seed override', metavar='U64',
                        type=click.IntRange(min=0, max=(1 << 64) - 1))(func)
    func = click.option('--jobs', help='Worker threads  [default: $IDSLAB_JOBS or 1]', metavar='INT',
                        type=click.IntRange(min=1))(func)
    func = click.option('--out', help='Output root  [default: $IDSLAB_OUT_DIR or out]', metavar='DIR', type=str)(func)
    func = click.option('--config', 'config_path', help='Experiment config (JSON)', metavar='PATH',
                        type=str, required=True)(func)
    return func


@click.group()
def cli():
    """Identity-preserving score distillation experiments on desk-scale worlds"""


@cli.command()
@common_options
def edit(config_path, out, jobs, seed, log_level):
    """Edit every task with every listed method"""
    sys.exit(run_command("edit", config_path, out, jobs, seed, log_level, lambda o: o.run_edit()))


@cli.command()
@common_options
def ablate(config_path, out, jobs, seed, log_level):
    """Sweep FPR scale, iterations, step counts and t-ranges"""
    sys.exit(run_command("ablate", config_path, out, jobs, seed, log_level, lambda o: o.run_ablation()))


@cli.command()
@common_options
def invert(config_path, out, jobs, seed, log_level):
    """Edit then invert with dds and ids; report reconstruction error"""
    sys.exit(run_command("invert", config_path, out, jobs, seed, log_level, lambda o: o.run_inversion()))


@cli.command('sweep-posterior')
@common_options
def sweep_posterior(config_path, out, jobs, seed, log_level):
    """Posterior-mean distance vs t before and after FPR"""
    sys.exit(run_command("sweep-posterior", config_path, out, jobs, seed, log_level,
                         lambda o: o.run_posterior_sweep()))


@cli.command()
@common_options
def train(config_path, out, jobs, seed, log_level):
    """Train the MLP denoiser and save its weights"""
    sys.exit(run_command("train", config_path, out, jobs, seed, log_level, lambda o: o.train()))


if __name__ == '__main__':
    cli()
