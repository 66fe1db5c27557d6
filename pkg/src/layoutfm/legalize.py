"""Probability rasters to rule-clean rectilinear polygons."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import LayerRegistry, Layout, Point, Polygon, polygonize, rect
from .verify import RuleDeck, close_pairs, opening

_CROSS = ndimage.generate_binary_structure(2, 1)


class LegalizeEmptyWarning(UserWarning):
    """A nonempty mask legalized to nothing."""


@dataclass(frozen=True)
class LegalizeParams:
    threshold: float = 0.5
    min_area_px: int | None = None  # None: derived from the layer's rules
    hole_fill_px: int = 4
    snap_nm: int | None = None  # None: the pixel pitch
    candidate_floor: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if (self.min_area_px is not None and self.min_area_px < 0) or self.hole_fill_px < 0:
            raise ValueError("areas must be >= 0")


def binarize_clean(channel: np.ndarray, params: LegalizeParams, min_area: int | None = None) -> np.ndarray:
    """Threshold, drop small 4-connected specks, fill small enclosed holes."""
    mask = np.asarray(channel) >= params.threshold
    area = params.min_area_px if min_area is None else min_area
    if area and mask.any():
        lab, n = ndimage.label(mask, structure=_CROSS)
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        small = sizes < area
        small[0] = False
        mask &= ~small[lab]
    if params.hole_fill_px and (~mask).any():
        lab, n = ndimage.label(~mask, structure=_CROSS)
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        edge = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
        fill = sizes < params.hole_fill_px
        fill[0] = False
        fill[edge] = False
        mask |= fill[lab]
    return mask


def _default_min_area(layer: str, rules: RuleDeck) -> int:
    p = rules.pixel_nm
    if layer in rules.cuts:
        return max(1, (rules.cuts[layer].size // p) ** 2 // 4)
    if layer in rules.layers:
        return (rules.layers[layer].min_width // p) ** 2
    return 1


def _snap(v: float, step: int) -> int:
    return int(math.floor(v / step + 0.5)) * step


def via_square(center_nm: tuple[float, float], size_nm: int, snap_nm: int) -> Polygon:
    """Exact cut square whose lower-left corner snaps to the grid nearest the centred position."""
    x0 = _snap(center_nm[0] - size_nm / 2, snap_nm)
    y0 = _snap(center_nm[1] - size_nm / 2, snap_nm)
    return rect(x0, y0, x0 + size_nm, y0 + size_nm)


def _centroid_nm(rr: np.ndarray, cc: np.ndarray, origin: Point, p: int,
                 weights: np.ndarray | None = None) -> tuple[float, float]:
    w = np.ones(len(rr)) if weights is None else weights
    cx = origin[0] + (np.average(cc, weights=w) + 0.5) * p
    cy = origin[1] + (np.average(rr, weights=w) + 0.5) * p
    return float(cx), float(cy)


def legalize_channel(mask: np.ndarray, layer: str, rules: RuleDeck, pixel_nm: int | None = None,
                     origin_nm: Point = (0, 0), params: LegalizeParams | None = None,
                     report: list | None = None) -> list[Polygon]:
    """Rule-shaped polygons for one layer.

    Cut layers become one exact square per component, centred on its snapped
    centroid. Other layers are opened with a min-width square, so every kept
    pixel sits inside a legal square, then traced.
    """
    params = params or LegalizeParams()
    p = pixel_nm or rules.pixel_nm
    snap = params.snap_nm or p
    mask = np.asarray(mask, bool)
    if layer in rules.cuts:
        size = rules.cuts[layer].size
        space = rules.cuts[layer].min_space
        lab, n = ndimage.label(mask, structure=_CROSS)
        comps = []
        for k, sl in enumerate(ndimage.find_objects(lab), start=1):
            rr, cc = np.nonzero(lab[sl] == k)
            comps.append((-len(rr), _centroid_nm(rr + sl[0].start, cc + sl[1].start, origin_nm, p)))
        comps.sort()
        out: list[Polygon] = []
        for _, ctr in comps:
            sq = via_square(ctr, size, snap)
            if all(_gap(sq, o) >= space for o in out):
                out.append(sq)
            elif report is not None:
                report.append(f"{layer}: dropped cut at {sq[0]} too close to a stronger one")
        polys = sorted(out, key=lambda q: (q[0][1], q[0][0]))
    else:
        w = rules.layers[layer].min_width // p if layer in rules.layers else 1
        clean = opening(mask, w)
        if report is not None and layer in rules.layers:
            lab, _ = ndimage.label(clean, structure=_CROSS)
            s = rules.layers[layer].min_space // p
            for (a, b), (d, r, c) in sorted(close_pairs(lab, lab, s, same=True).items()):
                report.append(f"{layer}: shapes {a} and {b} closer than min space near pixel ({r}, {c})")
        polys = polygonize(clean, p, origin_nm)
    if mask.any() and not polys:
        warnings.warn(f"{layer}: mask legalized to nothing", LegalizeEmptyWarning, stacklevel=2)
    return polys


def _gap(a: Polygon, b: Polygon) -> float:
    ax0, ay0 = a[0]
    ax1, ay1 = a[2]
    bx0, by0 = b[0]
    bx1, by1 = b[2]
    gx = max(0, max(ax0, bx0) - min(ax1, bx1))
    gy = max(0, max(ay0, by0) - min(ay1, by1))
    return math.hypot(gx, gy)


def legalize_raster(values: np.ndarray, layers, rules: RuleDeck, registry: LayerRegistry | None = None,
                    origin_nm: Point = (0, 0), pixel_nm: int | None = None,
                    params: LegalizeParams | None = None) -> Layout:
    """Legalize the listed channels of a C×H×W probability raster into a layout."""
    registry = registry or LayerRegistry()
    params = params or LegalizeParams()
    out = Layout(grid_nm=pixel_nm or rules.pixel_nm)
    for name in layers:
        ch = values[registry.index(name)]
        area = params.min_area_px if params.min_area_px is not None else _default_min_area(name, rules)
        mask = binarize_clean(ch, params, area)
        for poly in legalize_channel(mask, name, rules, pixel_nm, origin_nm, params):
            out.add(name, poly, "predicted")
    return out


@dataclass(frozen=True)
class ViaCandidate:
    layer: str
    center_nm: tuple[float, float]
    score: float
    area_px: int
    shape: Polygon


def extract_via_candidates(channel: np.ndarray, layer: str, rules: RuleDeck,
                           params: LegalizeParams | None = None, pixel_nm: int | None = None,
                           origin_nm: Point = (0, 0)) -> list[ViaCandidate]:
    """Components above the floor, best mean probability first; ties go lower, then left."""
    params = params or LegalizeParams()
    p = pixel_nm or rules.pixel_nm
    snap = params.snap_nm or p
    channel = np.asarray(channel, np.float64)
    lab, n = ndimage.label(channel > params.candidate_floor, structure=_CROSS)
    size = rules.cuts[layer].size
    cands = []
    for k, sl in enumerate(ndimage.find_objects(lab), start=1):
        sel = lab[sl] == k
        rr, cc = np.nonzero(sel)
        vals = channel[sl][sel]
        ctr = _centroid_nm(rr + sl[0].start, cc + sl[1].start, origin_nm, p)
        cands.append(ViaCandidate(layer, ctr, float(vals.mean()), int(sel.sum()), via_square(ctr, size, snap)))
    cands.sort(key=lambda c: (-c.score, c.center_nm[1], c.center_nm[0]))
    return cands
