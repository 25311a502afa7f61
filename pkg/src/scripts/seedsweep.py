#!/usr/bin/env python3
"""
Seed sweep - train several variants over several seeds and report seed-mean ± stddev
of the final target accuracy. Run with ``PYTHONPATH=src``.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import pandas as pd
from rich.console import Console
from rich.table import Table

from config import load_run_config
from main import setup_logging, train_cell

logger = logging.getLogger(__name__)

DEFAULT_VARIANTS = "source-only,vada-single,co-da"


def _final_accuracy(records) -> float:
    final = records[-1]
    accs = [a for a in (final.acc_tgt_1, final.acc_tgt_2) if a is not None]
    return sum(accs) / len(accs)


def _job(config_path, variant, seed, out_root):
    cfg = load_run_config(config_path, {"variant": variant, "seed": seed, "out": out_root})
    cfg = cfg.model_copy(update={"name": f"{variant}-seed{seed}"})
    records = train_cell(cfg, Path(out_root) / cfg.name)
    final = records[-1]
    return {"variant": variant, "seed": seed, "acc_tgt": _final_accuracy(records),
            "agree": final.agree, "knn": final.knn}


@click.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--variants", default=DEFAULT_VARIANTS, show_default=True)
@click.option("--seeds", default=5, show_default=True, help="Seeds 0..N-1.")
@click.option("--workers", default=1, show_default=True)
@click.option("--out", "out_root", default="runs/seedsweep", show_default=True)
def main(config_path, variants, seeds, workers, out_root):
    setup_logging("INFO")
    names = [v.strip() for v in variants.split(",") if v.strip()]
    jobs = [(config_path, v, s, out_root) for v in names for s in range(seeds)]
    if workers == 1:
        rows = [_job(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_job, *zip(*jobs)))

    frame = pd.DataFrame(rows)
    Path(out_root).mkdir(parents=True, exist_ok=True)
    frame.drop(columns=["knn"]).to_csv(Path(out_root) / "seedsweep.csv", index=False)
    stats = frame.groupby("variant", sort=False)["acc_tgt"].agg(["mean", "std", "count"])

    table = Table(title="Final target accuracy over seeds")
    table.add_column("variant")
    table.add_column("mean ± std", justify="right")
    table.add_column("seeds", justify="right")
    for variant, row in stats.iterrows():
        table.add_row(variant, f"{row['mean']:.4f} ± {row['std']:.4f}", str(int(row["count"])))
    Console().print(table)


if __name__ == "__main__":
    main()
