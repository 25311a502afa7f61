import logging
import re

import numpy as np
import pandas as pd
import pytest

from evaluator import MetricsRecord, emit_metrics
from plots import emit_plots, knn_frame, line_chart, metrics_frame

NUMBER = r"-?\d+(?:\.\d+)?(?:e[-+]?\d+)?"


def _series_points(svg: str, name: str) -> np.ndarray:
    group = svg.index(f'<g id="series-{name}"')
    match = re.search(r'<path[^>]*?\sd="([^"]+)"', svg[group:])
    values = [float(v) for v in re.findall(NUMBER, match.group(1))]
    return np.array(values).reshape(-1, 2)


def _expected_pixels(geometry, x, y) -> np.ndarray:
    left, top, width, height = geometry.axes_box
    (x0, x1), (y0, y1) = geometry.xlim, geometry.ylim
    px = left + (np.asarray(x, dtype=float) - x0) / (x1 - x0) * width
    py = top + (y1 - np.asarray(y, dtype=float)) / (y1 - y0) * height
    return np.column_stack([px, py])


def test_line_chart_places_points_where_the_axes_map_them(tmp_path):
    x = [0, 100, 200, 300]
    series = {"acc": [0.1, 0.55, 0.4, 0.9], "agree": [0.3, 0.35, 0.6, 0.65]}
    geometry = line_chart(x, series, tmp_path / "chart.svg", xlabel="iteration", ylabel="value")
    svg = (tmp_path / "chart.svg").read_text()
    assert geometry.series == ["acc", "agree"]
    for name, y in series.items():
        drawn = _series_points(svg, name)
        np.testing.assert_allclose(drawn, _expected_pixels(geometry, x, y), atol=0.5)


def test_line_chart_is_deterministic(tmp_path):
    for name in ("a.svg", "b.svg"):
        line_chart([0, 1], {"s": [0.2, 0.8]}, tmp_path / name, xlabel="x", ylabel="y")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


@pytest.fixture
def metrics_file(tmp_path):
    records = [
        MetricsRecord(iter=0, acc_tgt_1=0.5, acc_tgt_2=0.45, acc_src_1=0.5, acc_src_2=0.55, agree=0.6),
        MetricsRecord(iter=50, acc_tgt_1=0.7, acc_tgt_2=0.72, acc_src_1=0.9, acc_src_2=0.88, agree=0.8),
        MetricsRecord(iter=100, acc_tgt_1=0.8, acc_tgt_2=0.79, acc_src_1=0.95, acc_src_2=0.96, agree=0.9,
                      knn={"1": 0.7, "5": 0.78, "3": 0.74}),
    ]
    path = tmp_path / "metrics.jsonl"
    emit_metrics(records, path)
    return path, records


def test_emit_plots_writes_charts_and_their_data(metrics_file, tmp_path):
    path, records = metrics_file
    written = emit_plots(path, tmp_path / "plots")
    assert set(written) == {"curves_csv", "curves_svg", "knn_csv", "knn_svg"}
    curves = pd.read_csv(written["curves_csv"])
    np.testing.assert_array_equal(curves["iter"], [0, 50, 100])
    np.testing.assert_allclose(curves["agree"], [0.6, 0.8, 0.9])
    assert "knn" not in curves.columns
    knn = pd.read_csv(written["knn_csv"])
    assert sorted(knn["k"]) == [1, 3, 5]
    svg = written["curves_svg"].read_text()
    for name in ("acc_tgt_1", "acc_tgt_2", "agree"):
        assert f'id="series-{name}"' in svg


def test_frames(metrics_file):
    _, records = metrics_file
    assert list(metrics_frame(records)["acc_tgt_1"]) == [0.5, 0.7, 0.8]
    knn = knn_frame(records)
    assert list(knn.columns) == ["iter", "k", "knn_acc"] and len(knn) == 3
    assert knn_frame(records[:1]).empty


def test_empty_metrics_produce_no_plots(tmp_path, caplog):
    path = tmp_path / "metrics.jsonl"
    emit_metrics([], path)
    with caplog.at_level(logging.WARNING):
        assert emit_plots(path, tmp_path / "plots") == {}
    assert "nothing to plot" in caplog.text
    assert not list((tmp_path / "plots").iterdir())
