import numpy as np
import pytest

from stdlab.data import gen_data
from stdlab.models import default_gmm
from stdlab.plotting import plot_csv


def test_plot_is_pure_function_of_csv(tmp_path):
    gen_data(default_gmm(), 200, 0, tmp_path / "d.csv")
    plot_csv(tmp_path / "d.csv", tmp_path / "a.svg", "scatter", group="label")
    plot_csv(tmp_path / "d.csv", tmp_path / "b.svg", "scatter", group="label")
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    assert a.lstrip().startswith(b"<?xml") and b"<svg" in a


def test_line_plot(tmp_path):
    (tmp_path / "m.csv").write_text("iteration,loss\n1,0.5\n2,0.25\n3,0.125\n")
    plot_csv(tmp_path / "m.csv", tmp_path / "m.svg", "line")
    assert b"<svg" in (tmp_path / "m.svg").read_bytes()


def test_plot_errors(tmp_path):
    (tmp_path / "m.csv").write_text("iteration,mode\n1,std\n")
    with pytest.raises(ValueError):
        plot_csv(tmp_path / "m.csv", tmp_path / "m.svg", "line")
    with pytest.raises(ValueError):
        plot_csv(tmp_path / "m.csv", tmp_path / "m.svg", "pie")
    with pytest.raises(ValueError):
        plot_csv(tmp_path / "m.csv", tmp_path / "m.svg", "line", x="iteration", y="nope")
