import json
import re

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from diseasemap.fixtures import lattice_units
from diseasemap.maps import PALETTE, choropleth_svg, class_colors, classify, quantile_breaks, rr_geojson


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 10), min_size=2, max_size=80), st.integers(1, 9))
def test_classes_in_range_and_monotone(values, k):
    v = np.array(values)
    br = quantile_breaks(v, k)
    cls = classify(v, br)
    assert cls.min() >= 0 and cls.max() <= k - 1
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(cls[order]) >= 0)
    assert np.all(v[cls == 0] >= br[0]) and np.all(v <= br[-1])


def test_quintiles_balanced():
    v = np.arange(1, 101, dtype=float)
    cls = classify(v, quantile_breaks(v, 5))
    assert np.bincount(cls).tolist() == [20] * 5


def test_class_colors():
    assert class_colors(9) == list(PALETTE)
    assert len(set(class_colors(5))) == 5
    with pytest.raises(ValueError):
        class_colors(10)


def _frame(units):
    rr = np.linspace(0.8, 1.3, len(units))
    br = quantile_breaks(rr, 5)
    return pd.DataFrame({"unit_id": [u.id for u in units], "RR": rr, "lo": rr - 0.1, "hi": rr + 0.1,
                         "exceedance": np.linspace(0, 1, len(units)), "map_class": classify(rr, br)}), br


def test_geojson_properties():
    units = lattice_units(3, 4)
    frame, _ = _frame(units)
    doc = json.loads(rr_geojson(units, frame))
    assert len(doc["features"]) == 12
    props = doc["features"][5]["properties"]
    assert set(props) == {"id", "RR", "lo", "hi", "exceedance", "map_class"}
    assert props["RR"] == pytest.approx(frame["RR"][5], abs=1e-6)


def test_svg_one_path_per_unit_matching_class():
    units = lattice_units(3, 4)
    frame, br = _frame(units)
    svg = choropleth_svg(units, frame["RR"].to_numpy(), frame["map_class"].to_numpy(), br,
                         overlay=lattice_units(1, 1, cell=4.0))
    found = re.findall(r'data-unit="([^"]+)" data-class="(\d+)"', svg)
    assert len(found) == 12
    expect = dict(zip(frame["unit_id"], frame["map_class"]))
    assert all(expect[u] == int(c) for u, c in found)
    assert svg.count("data-overlay=") == 1
    assert svg.count("<rect") == 5
