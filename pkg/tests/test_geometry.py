import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from conftest import brute_raster
from layoutfm.geometry import (DEFAULT_LAYER_NAMES, GridSpec, LayerRegistry, Layout, LayoutError,
                               RegistryMismatchError, Window, polygonize, rasterize_polygons,
                               rasterize_window, rect, render_svg, signed_area2, validate_polygon)


def test_default_registry_has_21_layers_in_order():
    reg = LayerRegistry()
    assert len(reg) == 21
    assert reg.names[:7] == ("NWELL", "DIFF", "POLY", "NIMP", "PIMP", "CONTACT", "M1")
    assert reg.names[-1] == "M8"
    assert [reg.index(n) for n in reg.names] == list(range(21))
    assert reg.connects("VIA2") == (("M2",), "M3")
    assert set(reg.connects("CONTACT")[0]) == {"DIFF", "POLY"}


def test_registry_rejects_orphan_via():
    with pytest.raises(LayoutError):
        LayerRegistry(["M1", "VIA1"])


def test_grid_rejects_odd_patch():
    with pytest.raises(LayoutError):
        GridSpec(10, 63)


def test_rect_two_pixels(registry, grid):
    lay = Layout()
    lay.add_rect("M1", 0, 0, 20, 10)
    pt = rasterize_window(lay, Window((0, 0)), grid, registry)
    m1 = pt.values[registry.index("M1")]
    assert m1[0, 0] and m1[0, 1]
    assert m1.sum() == 2 and pt.values.sum() == 2


def test_half_open_centre_rule(registry, grid):
    lay = Layout()
    lay.add_rect("M1", 0, 0, 15, 10)
    m1 = rasterize_window(lay, Window((0, 0)), grid, registry).values[registry.index("M1")]
    assert m1.sum() == 1 and m1[0, 0]


def test_empty_layout_rasterizes_to_zero(registry, grid):
    pt = rasterize_window(Layout(), Window((-100, 250)), grid, registry)
    assert pt.values.shape == (21, 64, 64) and not pt.values.any()


def test_unknown_layer_is_registry_mismatch(registry, grid):
    lay = Layout()
    lay.add_rect("M99", 0, 0, 10, 10)
    with pytest.raises(RegistryMismatchError):
        rasterize_window(lay, Window((0, 0)), grid, registry)


def test_negative_origin_reads_padding_as_empty(registry, grid):
    lay = Layout()
    lay.add_rect("M1", 0, 0, 10, 10)
    m1 = rasterize_window(lay, Window((-20, -30)), grid, registry).values[registry.index("M1")]
    assert m1.sum() == 1 and m1[3, 2]


def test_polygonize_two_pixel_bar():
    m = np.zeros((3, 3), bool)
    m[0, 0] = m[0, 1] = True
    polys = polygonize(m, 10)
    assert len(polys) == 1
    xs = sorted({x for x, _ in polys[0]})
    ys = sorted({y for _, y in polys[0]})
    assert (xs, ys) == ([0, 20], [0, 10]) and len(polys[0]) == 4


def test_polygonize_l_shape_has_six_vertices():
    m = np.zeros((2, 2), bool)
    m[0, 0] = m[0, 1] = m[1, 0] = True
    polys = polygonize(m, 10)
    assert len(polys) == 1 and len(polys[0]) == 6
    assert signed_area2(polys[0]) == 2 * 300  # counter-clockwise, three 10×10 pixels
    assert (rasterize_polygons(polys, (0, 0), 2, 2, 10) == m).all()


def test_polygonize_diagonal_pixels_are_separate():
    m = np.eye(2, dtype=bool)
    polys = polygonize(m, 10)
    assert len(polys) == 2 and all(len(p) == 4 for p in polys)


def test_polygonize_hole_is_clockwise():
    m = np.ones((3, 3), bool)
    m[1, 1] = False
    polys = polygonize(m, 10, (100, 200))
    areas = sorted(signed_area2(p) for p in polys)
    assert areas == [-200, 1800]
    assert (rasterize_polygons(polys, (100, 200), 3, 3, 10) == m).all()


def test_polygonize_empty():
    assert polygonize(np.zeros((4, 4), bool), 10) == []


def test_validate_polygon_rejects_diagonal_edge():
    with pytest.raises(LayoutError):
        validate_polygon([[0, 0], [10, 10], [0, 10]])


def test_layout_json_round_trip(corpus):
    lay = corpus[0][0]
    again = Layout.from_json(lay.to_json())
    assert again.to_json() == lay.to_json()
    d = json.loads(lay.to_json())
    assert set(d) == {"grid_nm", "layers", "pins"}
    assert {"net", "layer", "at"} == set(d["pins"][0])


def test_layout_validate_rejects_stray_pin():
    lay = Layout()
    lay.add_rect("M1", 0, 0, 30, 30)
    lay.validate()
    from layoutfm.geometry import Pin
    lay.pins.append(Pin("a", "M1", (50, 5)))
    with pytest.raises(LayoutError):
        lay.validate()


def test_svg_empty_and_single_rect_and_deterministic():
    empty = render_svg(Layout())
    assert empty.startswith("<?xml") and "<path" not in empty
    lay = Layout()
    lay.add_rect("M1", 0, 0, 20, 10)
    svg = render_svg(lay)
    assert svg.count("<path") == 1
    assert render_svg(lay) == svg


# ---------------------------------------------------------------------------
# properties

rects = st.tuples(st.integers(0, 15), st.integers(0, 15), st.integers(1, 8), st.integers(1, 8))


def _layout_from(rs, p=10, layer="M1"):
    lay = Layout()
    for x, y, w, h in rs:
        lay.add_rect(layer, x * p, y * p, (x + w) * p, (y + h) * p)
    return lay


@settings(max_examples=60, deadline=None)
@given(st.lists(rects, min_size=1, max_size=5), st.integers(-3, 3), st.integers(-3, 3))
def test_rasterize_matches_point_in_polygon_oracle(rs, ox, oy):
    polys = [rect(x * 10 + 3, y * 10 - 4, (x + w) * 10 + 7, (y + h) * 10 + 1) for x, y, w, h in rs]
    origin = (ox * 7, oy * 5)
    got = rasterize_polygons(polys, origin, 26, 26, 10)
    assert (got == brute_raster(polys, origin, 26, 26, 10)).all()


@settings(max_examples=60, deadline=None)
@given(st.lists(rects, min_size=0, max_size=6))
def test_polygonize_round_trip(rs):
    m = rasterize_polygons(_layout_from(rs).polygons("M1"), (0, 0), 24, 24, 10)
    polys = polygonize(m, 10)
    assert (rasterize_polygons(polys, (0, 0), 24, 24, 10) == m).all()
    _, n = ndimage.label(m, ndimage.generate_binary_structure(2, 1))
    assert sum(signed_area2(p) > 0 for p in polys) == n
    assert polygonize(rasterize_polygons(polys, (0, 0), 24, 24, 10), 10) == polys


@settings(max_examples=40, deadline=None)
@given(st.lists(rects, min_size=1, max_size=4), rects)
def test_rasterization_monotone(rs, extra):
    base = rasterize_polygons(_layout_from(rs).polygons("M1"), (0, 0), 24, 24, 10)
    more = rasterize_polygons(_layout_from(rs + [extra]).polygons("M1"), (0, 0), 24, 24, 10)
    assert (more >= base).all()


@settings(max_examples=40, deadline=None)
@given(st.lists(rects, min_size=1, max_size=4), st.integers(0, 6), st.integers(0, 6))
def test_translation_equivariance(rs, dx, dy):
    polys = _layout_from(rs).polygons("M1")
    full = rasterize_polygons(polys, (0, 0), 30, 30, 10)
    shifted = rasterize_polygons(polys, (dx * 10, dy * 10), 24, 24, 10)
    assert (shifted == full[dy:dy + 24, dx:dx + 24]).all()
