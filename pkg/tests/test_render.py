import re

import numpy as np
import pytest

from latent_atlas import render, statmap


def test_three_points_two_colours():
    svg = render.scatter_svg(np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.2]]), [0, 1, 1], "categorical")
    circles = re.findall(r'<circle [^>]*fill="(#[0-9a-f]{6})"', svg)
    assert len(circles) == 3 and len(set(circles)) == 2


def test_categorical_legend_is_sorted_numerically():
    labels = [str(v) for v in (9, 10, 0, 1, 2, 3, 4, 5, 6, 7, 8)]
    svg = render.scatter_svg(np.random.default_rng(0).random((11, 2)), labels)
    texts = re.findall(r'font-size="12">([^<]*)<', svg)
    assert texts == [str(v) for v in range(11)]


def test_output_is_deterministic():
    pts = np.random.default_rng(0).random((20, 2))
    a = render.scatter_svg(pts, pts[:, 0], "continuous", title="x <y>")
    b = render.scatter_svg(pts, pts[:, 0], "continuous", title="x <y>")
    assert a == b and "x &lt;y&gt;" in a


def test_cluster_outline_drawn():
    r = np.zeros((4, 4))
    r[1:3, 1:3] = 0.5
    cs = statmap.extract_clusters(statmap.CorrelationMap(r, np.zeros_like(r), "pearson", "t", 1.0, 5), 0.2, "full", 1)
    svg = render.scatter_svg(np.array([[0.0, 0.0], [1.0, 1.0]]), clusters=cs, R=4)
    path = re.search(r'<path d="([^"]+)"[^>]*stroke="#c00000"', svg)
    assert path is not None and path.group(1).count("M") == 8


def test_rejects_non_2d():
    with pytest.raises(ValueError):
        render.scatter_svg(np.zeros((3, 3)))
