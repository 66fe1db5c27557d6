import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layoutfm.geometry import Layout, Pin, rect
from layoutfm.verify import (CutRule, GoldenNetlist, RuleDeck, dice, drc_check, extract_connectivity,
                             iou, layout_passes, lvs_check, success_ratio, success_topk)


def _rules_of(v, prefix):
    return [x for x in v if x.rule.startswith(prefix)]


# --------------------------------------------------------------------------- rule deck

def test_default_deck_values(rules):
    assert rules.layers["M1"].min_width == 30 and rules.layers["M1"].min_space == 30
    assert rules.cuts["VIA1"] == CutRule(40, 10, 10, 30)
    assert rules.cuts["CONTACT"].size == 40


def test_deck_json_round_trip(tmp_path, rules):
    rules.save(tmp_path / "deck.json")
    assert RuleDeck.load(tmp_path / "deck.json").to_dict() == rules.to_dict()


def test_deck_rejects_off_grid_values(rules):
    d = rules.to_dict()
    d["layers"]["M1"]["min_space"] = 25
    with pytest.raises(ValueError):
        RuleDeck.from_dict(d)


# --------------------------------------------------------------------------- DRC

def test_two_m1_rects_one_pixel_apart(rules):
    lay = Layout()
    lay.add_rect("M1", 0, 0, 50, 50)
    lay.add_rect("M1", 60, 0, 110, 50)
    v = drc_check(lay, rules)
    assert len(v) == 1 and v[0].rule == "M1.SPACE"
    assert v[0].measured == 10 and v[0].required == 30


def test_uncovered_via_gives_one_enclosure_violation(rules):
    lay = Layout()
    lay.add_rect("M1", 0, 0, 60, 60)
    lay.add_rect("VIA1", 10, 10, 50, 50)
    v = drc_check(lay, rules)
    assert [x.rule for x in v] == ["VIA1.ENC_UPPER"]
    assert v[0].measured < v[0].required


def test_enclosed_via_is_clean(rules):
    lay = Layout()
    lay.add_rect("M1", 0, 0, 60, 60)
    lay.add_rect("M2", 0, 0, 60, 60)
    lay.add_rect("VIA1", 10, 10, 50, 50)
    assert drc_check(lay, rules) == []


def test_wrong_via_size(rules):
    lay = Layout()
    lay.add_rect("M1", 0, 0, 70, 70)
    lay.add_rect("M2", 0, 0, 70, 70)
    lay.add_rect("VIA1", 10, 10, 60, 60)
    v = drc_check(lay, rules)
    assert [x.rule for x in v] == ["VIA1.SIZE"] and v[0].measured == 50


def test_nwell_rules(rules):
    lay = Layout()
    lay.add_rect("DIFF", 100, 100, 200, 200)
    lay.add_rect("PIMP", 80, 80, 220, 220)
    lay.add_rect("NWELL", 80, 80, 220, 220)  # 2 px of enclosure, 3 required
    v = drc_check(lay, rules)
    assert [x.rule for x in v] == ["NWELL.ENC_PDIFF"] and v[0].measured == 20
    lay2 = Layout()
    lay2.add_rect("DIFF", 100, 100, 200, 200)
    lay2.add_rect("NIMP", 80, 80, 220, 220)
    lay2.add_rect("NWELL", 220, 100, 300, 200)
    v2 = drc_check(lay2, rules)
    assert [x.rule for x in v2] == ["NWELL.SPACE_NDIFF"] and v2[0].measured == 20


def _gap_nm(a, b):
    gx = max(0, max(a[0], b[0]) - min(a[2], b[2]))
    gy = max(0, max(a[1], b[1]) - min(a[3], b[3]))
    return math.hypot(gx, gy)


boxes = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(3, 8), st.integers(3, 8))


@settings(max_examples=80, deadline=None)
@given(boxes, boxes)
def test_spacing_matches_geometric_gap(b1, b2):
    rs = [(x * 10, y * 10, (x + w) * 10, (y + h) * 10) for x, y, w, h in (b1, b2)]
    lay = Layout()
    for r in rs:
        lay.add_rect("M1", *r)
    v = drc_check(lay, RuleDeck.default())
    space = _rules_of(v, "M1.SPACE")
    g = _gap_nm(*rs)
    # touching along an edge merges the shapes; a corner touch is a zero-gap spacing error
    edge_touch = g == 0 and (min(rs[0][2], rs[1][2]) > max(rs[0][0], rs[1][0]) or
                             min(rs[0][3], rs[1][3]) > max(rs[0][1], rs[1][1]))
    expect = 0 if edge_touch or g >= 30 else 1
    assert len(space) == expect
    if expect:
        assert space[0].measured == pytest.approx(g)
    for x in v:
        assert x.measured < x.required


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6))
def test_width_matches_rect_size(w, h):
    lay = Layout()
    lay.add_rect("M2", 100, 100, 100 + 10 * w, 100 + 10 * h)
    v = _rules_of(drc_check(lay, RuleDeck.default()), "M2.WIDTH")
    if min(w, h) >= 3:
        assert v == []
    else:
        assert len(v) == 1 and v[0].measured == 10 * min(w, h)


def test_drc_ordering_is_deterministic(rules):
    lay = Layout()
    for i in range(4):
        lay.add_rect("M1", i * 50, 0, i * 50 + 40, 40)
    a, b = drc_check(lay, rules), drc_check(lay, rules)
    assert a == b and len(a) == 3


# --------------------------------------------------------------------------- connectivity

def test_overlapping_rects_one_component():
    lay = Layout()
    lay.add_rect("M1", 0, 0, 50, 30)
    lay.add_rect("M1", 30, 0, 80, 30)
    assert extract_connectivity(lay).n_components() == 1


def test_corner_touch_two_components():
    lay = Layout()
    lay.add_rect("M1", 0, 0, 30, 30)
    lay.add_rect("M1", 30, 30, 60, 60)
    assert extract_connectivity(lay).n_components() == 2


def test_via_stack_one_component():
    lay = Layout()
    lay.add_rect("M1", 0, 0, 60, 60)
    lay.add_rect("VIA1", 10, 10, 50, 50)
    lay.add_rect("M2", 0, 0, 60, 200)
    g = extract_connectivity(lay)
    assert g.n_components() == 1 and not g.warnings
    assert g.component_at("M1", (5, 5)) == g.component_at("M2", (5, 150))


def test_floating_via_warns():
    lay = Layout()
    lay.add_rect("M1", 0, 0, 60, 60)
    lay.add_rect("VIA1", 10, 10, 50, 50)
    g = extract_connectivity(lay)
    assert len(g.warnings) == 1 and "floating VIA1" in g.warnings[0]


def test_poly_cuts_diffusion():
    lay = Layout()
    lay.add_rect("DIFF", 0, 0, 200, 100)
    lay.add_rect("POLY", 80, -0, 110, 100)
    g = extract_connectivity(lay)
    assert g.component_at("DIFF", (10, 50)) != g.component_at("DIFF", (190, 50))


def _two_net_layout():
    lay = Layout()
    lay.add_rect("M1", 0, 0, 200, 30)
    lay.add_rect("M1", 0, 100, 200, 130)
    net = GoldenNetlist({"a": ["a0", "a1"], "b": ["b0", "b1"]},
                        {"a0": ("M1", (5, 5)), "a1": ("M1", (195, 5)),
                         "b0": ("M1", (5, 105)), "b1": ("M1", (195, 105))})
    return lay, net


def test_lvs_pass_open_short():
    lay, net = _two_net_layout()
    net.validate()
    assert lvs_check(lay, net).passed
    cut, _ = lay.without(lambda l, i, p, t: i == 0)
    cut.add_rect("M1", 0, 0, 90, 30)
    cut.add_rect("M1", 110, 0, 200, 30)
    r = lvs_check(cut, net)
    assert not r.passed and r.opens == ["a"] and r.shorts == []
    bridged = lay.copy()
    bridged.add_rect("M1", 90, 0, 120, 130)
    r = lvs_check(bridged, net)
    assert r.opens == [] and r.shorts == [("a", "b")]


def test_lvs_uncovered_pin_is_open():
    lay, net = _two_net_layout()
    net.pins["b1"] = ("M1", (500, 500))
    r = lvs_check(lay, net)
    assert r.opens == ["b"] and r.uncovered_pins == ["b1"]


def test_golden_netlist_validation():
    with pytest.raises(ValueError):
        GoldenNetlist({"a": ["p"]}, {"p": ("M1", (0, 0))}).validate()
    with pytest.raises(ValueError):
        GoldenNetlist({"a": ["p", "q"], "b": ["q", "r"]},
                      {k: ("M1", (0, 0)) for k in "pqr"}).validate()


def test_corpus_cells_verify_clean(pairs, rules):
    for lay, net in pairs:
        assert drc_check(lay, rules) == []
        assert lvs_check(lay, net).passed


def test_deleting_route_metal_opens_exactly_that_net(pairs):
    lay, net = next((l, n) for l, n in pairs if any(t.startswith("route:") for t in l.tags.get("M2", [])))
    i, tag = next((i, t) for i, t in enumerate(lay.tags["M2"]) if t.startswith("route:"))
    cut, _ = lay.without(lambda l, j, p, t: l == "M2" and j == i)
    r = lvs_check(cut, net)
    assert r.opens == [tag[6:]] and r.shorts == []


# --------------------------------------------------------------------------- metrics

def test_iou_dice_examples():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    assert iou(a, b) == 1.0 and dice(a, b) == 1.0
    a[0, :3] = True
    b[0, :2] = True
    b[1, :2] = True
    assert dice(a, b) == pytest.approx(2 * 2 / 7)
    a2 = np.zeros((3, 4), bool)
    b2 = np.zeros((3, 4), bool)
    a2[0, :] = True
    a2[1, :2] = True  # |pred| = 6
    b2[0, 1:4] = True
    b2[2, 0] = True  # |truth| = 4, overlap 3
    assert dice(a2, b2) == pytest.approx(0.6)
    assert iou(a2, b2) == pytest.approx(3 / 7)
    c = np.zeros((3, 4), bool)
    c[2, 3] = True
    assert iou(a2, c) == 0.0 and dice(a2, c) == 0.0


def test_iou_on_polygons():
    assert iou([rect(0, 0, 30, 10)], [rect(10, 0, 40, 10)]) == pytest.approx(2 / 4)


def _brute(a, b):
    inter = union = sa = sb = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x and y
        union += x or y
        sa += x
        sb += y
    return (1.0 if union == 0 else inter / union), (1.0 if sa + sb == 0 else 2 * inter / (sa + sb))


masks = st.integers(0, 2 ** 32 - 1).map(lambda s: np.random.default_rng(s).random((6, 7)) <
                                          np.random.default_rng(s + 1).random())


@settings(max_examples=200, deadline=None)
@given(masks, masks, st.integers(-2, 2), st.integers(-2, 2))
def test_metric_properties(a, b, dy, dx):
    i, d = iou(a, b), dice(a, b)
    bi, bd = _brute(a, b)
    assert i == bi and d == bd
    assert abs(d - 2 * i / (1 + i)) < 1e-12
    assert iou(b, a) == i and dice(b, a) == d
    pa = np.roll(np.pad(a, 3), (dy, dx), axis=(0, 1))
    pb = np.roll(np.pad(b, 3), (dy, dx), axis=(0, 1))
    assert iou(pa, pb) == i and dice(pa, pb) == d


def test_success_topk_counts_checks():
    assert success_topk([1, 2, 3], 10, lambda c: c == 1) == (True, 1)
    cands = list(range(12))
    assert success_topk(cands, 10, lambda c: c == 9) == (True, 10)
    assert success_topk(cands, 10, lambda c: c == 10) == (False, 10)
    assert success_topk([], 10, lambda c: True) == (False, 0)
    assert success_ratio([True, False, False, True]) == 0.5


def test_layout_passes(pairs, rules):
    lay, net = pairs[0]
    assert layout_passes(lay, net, rules)
