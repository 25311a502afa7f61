#!/usr/bin/env python3
"""
Grid - Loss-weight grid enumeration, per-cell runs (optionally in worker processes) and best-cell selection.
"""
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import pandas as pd

from config import GridSpec, LossWeights, RunConfig, apply_variant
from errors import ConfigError
from evaluator import MetricsRecord

logger = logging.getLogger(__name__)

CellRunner = Callable[[RunConfig, Path], List[MetricsRecord]]


def grid_cells(grid: GridSpec) -> List[Dict[str, float]]:
    """Cartesian product of the axes, axes in sorted name order."""
    names = sorted(grid.axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(grid.axes[n] for n in names))]


def cell_name(values: Dict[str, float]) -> str:
    return "_".join(f"{k}={v:g}" for k, v in values.items()) or "default"


def cell_config(cfg: RunConfig, values: Dict[str, float]) -> RunConfig:
    """Run config for one cell; the variant rules are re-applied on top of the grid values."""
    merged = {**cfg.train.weights.model_dump(), **values}
    weights = LossWeights.model_validate(merged)
    train = cfg.train.model_copy(update={"weights": weights})
    return apply_variant(cfg.model_copy(update={"train": train, "name": f"{cfg.name}-{cell_name(values)}",
                                                "grid": None}))


def cell_score(records: Sequence[MetricsRecord]) -> float:
    """Mean validation accuracy of the members at the final record, else final target accuracy of f_1."""
    final = records[-1]
    vals = [v for v in (final.acc_val_1, final.acc_val_2) if v is not None]
    return sum(vals) / len(vals) if vals else final.acc_tgt_1


def _summary_row(values: Dict[str, float], records: Sequence[MetricsRecord]) -> Dict[str, float]:
    final = records[-1]
    row = {**values, "cell": cell_name(values), "score": cell_score(records), "acc_tgt_1": final.acc_tgt_1}
    if final.acc_tgt_2 is not None:
        row["acc_tgt_2"] = final.acc_tgt_2
        row["agree"] = final.agree
    return row


def run_grid(cfg: RunConfig, out_dir: Path, run_cell: CellRunner, workers: Optional[int] = None) -> pd.DataFrame:
    if cfg.grid is None or not cfg.grid.axes:
        raise ConfigError("grid command needs a 'grid' section with at least one axis")
    cells = grid_cells(cfg.grid)
    workers = workers or cfg.grid.workers
    configs = [cell_config(cfg, values) for values in cells]
    dirs = [Path(out_dir) / "cells" / cell_name(values) for values in cells]
    logger.info(f"Running {len(cells)} grid cell(s) with {workers} worker(s)")

    if workers == 1:
        results = [run_cell(c, d) for c, d in zip(configs, dirs)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, configs, dirs))

    summary = pd.DataFrame([_summary_row(v, r) for v, r in zip(cells, results)])
    summary.to_csv(Path(out_dir) / "grid_summary.csv", index=False)
    best = summary.sort_values("score", ascending=False, kind="stable").iloc[0]
    best_values = {name: float(best[name]) for name in sorted(cfg.grid.axes)}
    (Path(out_dir) / "best_cell.json").write_text(json.dumps(
        {"cell": best["cell"], "score": float(best["score"]), "weights": best_values}, indent=2) + "\n")
    logger.info(f"Best cell {best['cell']} with score {best['score']:.4f}")
    return summary
