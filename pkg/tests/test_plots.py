import xml.etree.ElementTree as ET

import numpy as np

from mastrack.dynamics import Mode
from mastrack.plots import Chart, mode_bands, render, _nice_ticks

NS = "{http://www.w3.org/2000/svg}"


def test_render_parses():
    c = Chart("demo <x>", ylabel="y")
    t = np.linspace(0, 10, 5000)
    c.add("sin", t, np.sin(t))
    c.add("cos", t, np.cos(t), dashed=True)
    root = ET.fromstring(render(c))
    lines = root.findall(f"{NS}polyline")
    assert len(lines) == 2
    assert len(lines[0].get("points").split()) <= 1500
    texts = [e.text for e in root.iter(f"{NS}text")]
    assert "sin" in texts and "demo <x>" in texts


def test_log_axis_skips_nonpositive():
    c = Chart("log", logy=True)
    c.add("v", [0, 1, 2, 3], [1.0, 0.0, 1e-3, np.inf])
    root = ET.fromstring(render(c))
    pts = root.find(f"{NS}polyline").get("points").split()
    assert len(pts) == 2


def test_empty_chart():
    ET.fromstring(render(Chart("empty")))


def test_mode_bands():
    t = np.arange(6.0)
    modes = [Mode.COMM.value] * 3 + [Mode.SILENT.value] * 3
    bands = mode_bands(t, modes)
    assert [(a, b) for a, b, _ in bands] == [(0.0, 3.0), (3.0, 5.0)]


def test_ticks():
    assert _nice_ticks(0, 100) == [0, 20, 40, 60, 80, 100]
