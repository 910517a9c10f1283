import numpy as np
import pandas as pd

from doda.layout import BoundingBox, LayoutSpec
from doda.ReportPlotter import ReportPlotter, clean_outliers, loss_decreased, moving_average


def test_clean_outliers_replaces_spikes():
    data = np.ones(11)
    data[5] = 1000.0
    cleaned = clean_outliers(data + np.linspace(0, 0.1, 11))
    assert cleaned[5] < 2.0


def test_moving_average_is_trailing_mean():
    np.testing.assert_allclose(moving_average([1, 2, 3, 4], window=2), [1.0, 1.5, 2.5, 3.5])
    assert moving_average([]).size == 0


def test_loss_decreased():
    assert loss_decreased(np.linspace(2.0, 1.0, 200))
    assert not loss_decreased(np.linspace(1.0, 2.0, 200))
    assert not loss_decreased([1.0])


def test_files_are_written(tmp_path):
    plotter = ReportPlotter(tmp_path)
    df = plotter.save_table("rows", [{"a": 1, "b": 0.5}, {"a": 2, "b": 0.25}])
    assert (tmp_path / "plots" / "rows.csv").exists()
    assert list(pd.read_csv(tmp_path / "plots" / "rows.csv")["a"]) == [1, 2]
    assert plotter.loss_curves("loss", {"x": np.linspace(1, 0.1, 100), "empty": []}).exists()
    sweep = pd.DataFrame({"n": [1, 1, 2, 2], "ap": [0.1, 0.2, 0.3, 0.4], "g": ["a", "b", "a", "b"]})
    assert plotter.sweep("sweep", sweep, "n", "ap", group="g").exists()
    images = np.random.default_rng(0).random((3, 8, 8, 3))
    layouts = [LayoutSpec(8, 8, [BoundingBox(0, 1, 1, 4, 4)])] * 3
    assert plotter.sample_grid("grid", images, layouts, cols=2).exists()
    assert len(df) == 2
