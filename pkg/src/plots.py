#!/usr/bin/env python3
"""
Plots - Training curves and kNN probe charts as SVG, with the plotted data exported as CSV.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from evaluator import MetricsRecord, read_metrics  # noqa: E402

logger = logging.getLogger(__name__)

SVG_DPI = 72  # SVG user units are points; keep display pixels equal to them
CURVE_COLUMNS = ["acc_tgt_1", "acc_tgt_2", "acc_tgt_ens", "agree", "acc_src_1", "acc_src_2"]


@dataclass
class ChartGeometry:
    """Where the axes landed in the SVG (user units, y pointing down) and the data limits drawn into it."""
    path: Path
    axes_box: Tuple[float, float, float, float]  # left, top, width, height
    xlim: Tuple[float, float]
    ylim: Tuple[float, float]
    series: List[str] = field(default_factory=list)


def metrics_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    rows = [r.model_dump(exclude_none=True, exclude={"knn"}) for r in records]
    return pd.DataFrame(rows)


def knn_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        for k, acc in (r.knn or {}).items():
            rows.append({"iter": r.iter, "k": int(k), "knn_acc": acc})
    return pd.DataFrame(rows, columns=["iter", "k", "knn_acc"])


def line_chart(x: Sequence[float], series: Dict[str, Sequence[float]], path: Path, xlabel: str,
               ylabel: str, title: str = "") -> ChartGeometry:
    """One SVG line chart; each series gets gid ``series-<name>`` so its polyline can be found in the file."""
    with plt.rc_context({"path.simplify": False, "svg.fonttype": "none", "svg.hashsalt": "coda"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=SVG_DPI)
        try:
            for name, values in series.items():
                (line,) = ax.plot(list(x), list(values), marker="o", markersize=2, linewidth=1.2, label=name)
                line.set_gid(f"series-{name}")
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
            if title:
                ax.set_title(title)
            ax.grid(True, alpha=0.3)
            ax.legend(loc="lower right", fontsize=8)
            fig.canvas.draw()
            bbox = ax.get_window_extent()
            height = fig.get_figheight() * SVG_DPI
            geometry = ChartGeometry(path=Path(path),
                                     axes_box=(bbox.x0, height - bbox.y1, bbox.width, bbox.height),
                                     xlim=tuple(ax.get_xlim()), ylim=tuple(ax.get_ylim()),
                                     series=list(series))
            fig.savefig(path, format="svg", dpi=SVG_DPI, metadata={"Date": None})
        except OSError as e:
            raise OSError(f"cannot write plot {path}: {e}") from e
        finally:
            plt.close(fig)
    return geometry


def emit_plots(metrics_path: Path, out_dir: Path) -> Dict[str, Path]:
    """Render the curves of a metrics JSONL file; an empty stream produces no plot and a warning."""
    records = read_metrics(metrics_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not records:
        logger.warning(f"No metrics in {metrics_path}; nothing to plot")
        return {}

    written: Dict[str, Path] = {}
    frame = metrics_frame(records)
    written["curves_csv"] = out_dir / "curves.csv"
    frame.to_csv(written["curves_csv"], index=False)
    columns = [c for c in CURVE_COLUMNS if c in frame.columns]
    written["curves_svg"] = out_dir / "curves.svg"
    line_chart(frame["iter"], {c: frame[c] for c in columns}, written["curves_svg"],
               xlabel="iteration", ylabel="accuracy / agreement", title="Target accuracy and agreement")

    knn = knn_frame(records)
    if not knn.empty:
        last = knn[knn["iter"] == knn["iter"].max()].sort_values("k")
        written["knn_csv"] = out_dir / "knn.csv"
        knn.to_csv(written["knn_csv"], index=False)
        written["knn_svg"] = out_dir / "knn.svg"
        line_chart(last["k"], {"knn_acc": last["knn_acc"]}, written["knn_svg"],
                   xlabel="k", ylabel="kNN target accuracy", title=f"Feature probe at iteration {int(last['iter'].iloc[0])}")
    logger.info(f"Wrote {len(written)} plot artifacts to {out_dir}")
    return written
