#!/usr/bin/env python3
"""
Co-DA Lab - Main Entry Point

Command-line front end and the orchestration class that turns a resolved run
configuration into datasets, a hypothesis pair, training artifacts and reports.
Every command writes into ``<out>/<name>/`` together with the resolved config.
"""
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import click
import numpy as np
from dotenv import load_dotenv
from pythonjsonlogger import jsonlogger
from rich.console import Console
from rich.logging import RichHandler

import autodiff as ad
from checkpoint import load_checkpoint, save_checkpoint
from config import RunConfig, __version__, load_run_config, log_level_from_env, write_resolved
from datagen import DomainDataset, export_csv, gen_pair, split_validation
from errors import CodaError, ConfigError, exit_code_for
from evaluator import MetricsRecord, emit_metrics, feature_probe, read_metrics
from grid import run_grid
from idxreader import export_idx, load_idx_dataset
from layers import instance_norm_input
from models import HypothesisPair, build_pair
from optimizers import ema_applied
from plots import emit_plots
from trainer import CoDATrainer, ema_values_by_id, refine_pair, report_refinement, run_training

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.coda"
DIRTT_CHECKPOINT_NAME = "dirtt.coda"
REFINED_KEY = "meta/refined"
LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"

Datasets = Tuple[DomainDataset, DomainDataset, Optional[DomainDataset]]


def setup_logging(level: str) -> None:
    """Console logging through rich; replaces whatever the root logger had."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
    console = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False)
    console.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(console)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


@contextmanager
def run_log(run_dir: Path) -> Iterator[None]:
    """JSON-lines log file for the duration of one command."""
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(jsonlogger.JsonFormatter(LOG_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield
    finally:
        root.removeHandler(handler)
        handler.close()


class CoDALab:
    """Orchestration of one run directory."""

    def __init__(self, cfg: RunConfig, run_dir: Optional[Path] = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else Path(cfg.out_dir) / cfg.name
        ad.set_default_dtype(np.float64 if cfg.arch.precision == "float64" else np.float32)

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / CHECKPOINT_NAME

    def prepare(self) -> None:
        write_resolved(self.cfg, self.run_dir)
        logger.info(f"Run directory {self.run_dir} (variant {self.cfg.variant.value}, version {__version__})")

    def load_data(self, preprocess: bool = True) -> Datasets:
        """Source, target and validation splits; images are instance-normalized unless ``preprocess`` is off."""
        data = self.cfg.data
        if data.idx is not None:
            source, target = load_idx_dataset(data.idx)
            split_seed = self.cfg.train.seed
        else:
            source, target = gen_pair(data.shift)
            split_seed = data.shift.seed
        target, validation = split_validation(target, data.validation_size, split_seed)
        if preprocess and self.cfg.arch.instance_norm and source.inputs.ndim == 4:
            # VAT radii are measured in normalized input units
            source, target = _instance_normalized(source), _instance_normalized(target)
            validation = _instance_normalized(validation) if validation is not None else None
        return source, target, validation

    def new_pair(self, source: DomainDataset, refined: bool = False) -> HypothesisPair:
        train = self.cfg.train
        pair = build_pair(self.cfg.arch, source.sample_shape, source.n_classes, train.sharing,
                          seed=train.seed, members=train.members, same_init=train.same_init)
        if refined:
            # refined hypotheses no longer share parameters
            pair = HypothesisPair([m.clone() for m in pair.members], pair.sharing)
        return pair

    def restore(self, checkpoint: Optional[Path] = None) -> Tuple[CoDATrainer, Datasets]:
        path = Path(checkpoint) if checkpoint is not None else self.checkpoint_path
        datasets = self.load_data()
        source, target, validation = datasets
        iteration, state = load_checkpoint(path)
        pair = self.new_pair(source, refined=REFINED_KEY in state)
        trainer = CoDATrainer(pair, self.cfg.train, source, target, validation, self.cfg.probe)
        trainer.load_state_dict(state, iteration)
        logger.info(f"Restored {path} at iteration {iteration}")
        return trainer, datasets

    def generate(self) -> Dict[str, Path]:
        self.prepare()
        source, target, validation = self.load_data(preprocess=False)
        written = {}
        for name, dataset in (("source", source), ("target", target), ("validation", validation)):
            if dataset is None:
                continue
            written[f"{name}_csv"] = self.run_dir / f"{name}.csv"
            export_csv(dataset, written[f"{name}_csv"])
            if dataset.inputs.ndim == 4:
                images, labels = self.run_dir / f"{name}-images.idx", self.run_dir / f"{name}-labels.idx"
                export_idx(dataset, images, labels)
                written[f"{name}_idx"] = images
        return written

    def train(self) -> List[MetricsRecord]:
        self.prepare()
        source, target, validation = self.load_data()
        pair = self.new_pair(source)
        metrics_path = self.run_dir / "metrics.jsonl"
        trainer = run_training(pair, self.cfg.train, source, target, validation, self.cfg.probe,
                               metrics_path=metrics_path, checkpoint_path=self.checkpoint_path)
        records = read_metrics(metrics_path)
        logger.info(f"Training finished at iteration {trainer.iteration}; metrics in {metrics_path}")
        return records

    def dirtt(self, checkpoint: Optional[Path] = None) -> List[MetricsRecord]:
        self.prepare()
        trainer, (source, target, validation) = self.restore(checkpoint)
        before = trainer.evaluate()
        refined = refine_pair(trainer.pair, target, self.cfg.dirtt, self.cfg.train,
                              ema_values_by_id(trainer.pair, trainer.ema))
        report_refinement(trainer.pair, refined, target)
        refined_trainer = CoDATrainer(refined, self.cfg.train, source, target, validation, self.cfg.probe)
        refined_trainer.iteration = trainer.iteration + self.cfg.dirtt.iterations
        after = refined_trainer.evaluate(with_probe=True)
        emit_metrics([before, after], self.run_dir / "dirtt_metrics.jsonl")
        state = refined_trainer.state_dict()
        state[REFINED_KEY] = np.array([1], dtype=np.int64)
        save_checkpoint(self.run_dir / DIRTT_CHECKPOINT_NAME, refined_trainer.iteration, state)
        return [before, after]

    def evaluate(self, checkpoint: Optional[Path] = None) -> MetricsRecord:
        self.prepare()
        trainer, _ = self.restore(checkpoint)
        record = trainer.evaluate()
        (self.run_dir / "eval.json").write_text(record.to_json() + "\n")
        return record

    def probe(self, checkpoint: Optional[Path] = None) -> Dict[str, Dict[str, float]]:
        self.prepare()
        trainer, (source, target, _) = self.restore(checkpoint)
        if target.labels is None:
            raise ConfigError("probe needs target labels for evaluation")
        results = {}
        trainer.pair.eval()
        with ema_applied(trainer.ema, trainer.pair.classifier_parameters()):
            for m in trainer.pair.members:
                knn = feature_probe(m, source, target, self.cfg.probe, self.cfg.train.seed)
                results[f"f{m.index}"] = {str(k): v for k, v in knn.items()}
        (self.run_dir / "probe.json").write_text(json.dumps(results, indent=2) + "\n")
        return results

    def grid(self) -> Path:
        self.prepare()
        run_grid(self.cfg, self.run_dir, train_cell)
        return self.run_dir / "grid_summary.csv"


def _instance_normalized(dataset: DomainDataset) -> DomainDataset:
    return DomainDataset(instance_norm_input(dataset.inputs), dataset.labels, dataset.domain,
                         dataset.n_classes, dataset.name)


def train_cell(cfg: RunConfig, run_dir: Path) -> List[MetricsRecord]:
    """Module-level so grid worker processes can unpickle it."""
    with run_log(run_dir):
        return CoDALab(cfg, run_dir).train()


def _parse_k(value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--k expects a comma-separated list of integers, got {value!r}") from None


def _fail(error: BaseException, debug: bool) -> None:
    code = exit_code_for(error)
    if debug:
        logger.error(f"{type(error).__name__}: {error}", exc_info=True)
    else:
        logger.error(f"{type(error).__name__}: {error}")
    sys.exit(code)


def _lab(ctx: click.Context) -> CoDALab:
    opts: Dict[str, Any] = ctx.obj
    overrides = {"seed": opts["seed"], "out": opts["out"], "variant": opts["variant"],
                 "iterations": opts["iterations"], "k": _parse_k(opts["k"])}
    return CoDALab(load_run_config(opts["config"], overrides))


def _invoke(ctx: click.Context, action) -> Any:
    try:
        lab = _lab(ctx)
        with run_log(lab.run_dir):
            return action(lab)
    except (CodaError, OSError) as e:
        _fail(e, ctx.obj["log_level"] == "DEBUG")


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="Run config (JSON).")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@click.option("--out", type=click.Path(), default=None, help="Output root (default $CODA_OUT or ./runs).")
@click.option("--variant", default=None, help="co-da | co-da-bn | co-da-sh | vada-single | co-da-nodiv | source-only")
@click.option("--iterations", type=int, default=None, help="Override train.iterations.")
@click.option("--k", default=None, help="Comma-separated kNN k values.")
@click.option("--log-level", default=None, help="Log level (default $LOG_LEVEL or INFO).")
@click.version_option(__version__)
@click.pass_context
def cli(ctx, config_path, seed, out, variant, iterations, k, log_level):
    """Co-regularized domain alignment lab."""
    load_dotenv()
    level = (log_level or log_level_from_env()).upper()
    setup_logging(level)
    ctx.obj = {"config": config_path, "seed": seed, "out": out, "variant": variant,
               "iterations": iterations, "k": k, "log_level": level}


@cli.command()
@click.pass_context
def gen(ctx):
    """Generate the source/target datasets and export them."""
    written = _invoke(ctx, lambda lab: lab.generate())
    for name, path in written.items():
        click.echo(f"{name}: {path}")


@cli.command()
@click.pass_context
def train(ctx):
    """Train the hypothesis pair; writes metrics.jsonl and checkpoint.coda."""
    records = _invoke(ctx, lambda lab: lab.train())
    click.echo(records[-1].to_json())


@cli.command()
@click.option("--checkpoint", type=click.Path(), default=None, help="Checkpoint to refine.")
@click.pass_context
def dirtt(ctx, checkpoint):
    """Refine each hypothesis on target data only."""
    records = _invoke(ctx, lambda lab: lab.dirtt(checkpoint))
    click.echo(records[-1].to_json())


@cli.command("eval")
@click.option("--checkpoint", type=click.Path(), default=None, help="Checkpoint to evaluate.")
@click.pass_context
def eval_cmd(ctx, checkpoint):
    """Evaluate a checkpoint with its averaged weights."""
    record = _invoke(ctx, lambda lab: lab.evaluate(checkpoint))
    click.echo(record.to_json())


@cli.command()
@click.option("--checkpoint", type=click.Path(), default=None, help="Checkpoint to probe.")
@click.pass_context
def probe(ctx, checkpoint):
    """PCA + kNN feature-alignment probe."""
    results = _invoke(ctx, lambda lab: lab.probe(checkpoint))
    click.echo(json.dumps(results))


@cli.command()
@click.argument("metrics", type=click.Path())
@click.pass_context
def plot(ctx, metrics):
    """Render SVG curves (and CSV data) next to a metrics JSONL file."""
    try:
        out_dir = Path(ctx.obj["out"]) if ctx.obj["out"] else Path(metrics).parent
        written = emit_plots(Path(metrics), out_dir)
    except (CodaError, OSError) as e:
        _fail(e, ctx.obj["log_level"] == "DEBUG")
    for name, path in written.items():
        click.echo(f"{name}: {path}")


@cli.command()
@click.pass_context
def grid(ctx):
    """Train every cell of the config's loss-weight grid and pick the best."""
    summary = _invoke(ctx, lambda lab: lab.grid())
    click.echo(f"summary: {summary}")


if __name__ == "__main__":
    cli()
