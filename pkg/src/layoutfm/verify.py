"""DRC-lite, connectivity extraction, LVS-lite and overlap metrics.

All checks run on the layout raster at the layout's pixel pitch, which is
exact for on-grid geometry. Same-layer shapes that overlap or share an edge
are one conductor; corner contact does not connect (4-connectivity).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .geometry import (GridSpec, LayerRegistry, Layout, Point, Polygon, rasterize_polygons,
                       rasterize_region)

_CROSS = ndimage.generate_binary_structure(2, 1)


# ----------------------------------------------------------------------------
# rule deck


@dataclass(frozen=True)
class LayerRule:
    min_width: int
    min_space: int


@dataclass(frozen=True)
class CutRule:
    size: int
    enc_lower: int
    enc_upper: int
    min_space: int


@dataclass(frozen=True)
class WellRule:
    nwell_enclose_pdiff: int
    nwell_space_ndiff: int


@dataclass
class RuleDeck:
    """Geometric rules in nm. Cut layers are contacts and vias."""

    layers: dict[str, LayerRule]
    cuts: dict[str, CutRule]
    well: WellRule | None = None
    pixel_nm: int = 10

    @classmethod
    def default(cls, pixel_nm: int = 10, registry: LayerRegistry | None = None) -> "RuleDeck":
        registry = registry or LayerRegistry()
        p = pixel_nm
        layers, cuts = {}, {}
        for l in registry:
            if l.kind in ("contact", "via"):
                cuts[l.name] = CutRule(size=4 * p, enc_lower=p, enc_upper=p, min_space=3 * p)
            else:
                layers[l.name] = LayerRule(min_width=3 * p, min_space=3 * p)
        return cls(layers, cuts, WellRule(3 * p, 3 * p), pixel_nm)

    def validate(self) -> None:
        vals = [v for r in self.layers.values() for v in asdict(r).values()]
        vals += [v for r in self.cuts.values() for v in asdict(r).values()]
        if self.well:
            vals += list(asdict(self.well).values())
        for v in vals:
            if v <= 0 or v % self.pixel_nm:
                raise ValueError(f"rule value {v} is not a positive multiple of {self.pixel_nm} nm")

    def to_dict(self) -> dict:
        return {
            "pixel_nm": self.pixel_nm,
            "layers": {k: asdict(v) for k, v in self.layers.items()},
            "cuts": {k: asdict(v) for k, v in self.cuts.items()},
            "well": asdict(self.well) if self.well else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RuleDeck":
        deck = cls({k: LayerRule(**v) for k, v in d["layers"].items()},
                   {k: CutRule(**v) for k, v in d["cuts"].items()},
                   WellRule(**d["well"]) if d.get("well") else None,
                   int(d.get("pixel_nm", 10)))
        deck.validate()
        return deck

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RuleDeck":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Violation:
    """One rule failure. ``measured < required`` except for exact-size rules."""

    rule: str
    layers: tuple[str, ...]
    location: Point
    measured: float
    required: float

    def to_dict(self) -> dict:
        return {"rule": self.rule, "layers": list(self.layers), "location": list(self.location),
                "measured": self.measured, "required": self.required}


# ----------------------------------------------------------------------------
# raster helpers


class _Canvas:
    """Whole-layout raster with a blank margin so neighbourhood checks never clip."""

    def __init__(self, layout: Layout, registry: LayerRegistry, pixel_nm: int, margin: int):
        self.p = pixel_nm
        self.m = margin
        h, w = layout.extent_px(pixel_nm)
        self.origin = (-margin * pixel_nm, -margin * pixel_nm)
        self.shape = (h + 2 * margin, w + 2 * margin)
        self.registry = registry
        self._layout = layout
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, layer: str) -> np.ndarray:
        if layer not in self._cache:
            self._cache[layer] = rasterize_polygons(self._layout.polygons(layer), self.origin,
                                                    self.shape[0], self.shape[1], self.p)
        return self._cache[layer]

    def to_nm(self, r: int, c: int) -> Point:
        """Centre of pixel (r, c) in nm."""
        return (self.origin[0] + c * self.p + self.p // 2, self.origin[1] + r * self.p + self.p // 2)

    def pixel_of(self, pt: Point) -> tuple[int, int]:
        return (pt[1] - self.origin[1]) // self.p, (pt[0] - self.origin[0]) // self.p


def _box_sum(a: np.ndarray, k: int) -> np.ndarray:
    """Sum over the k×k box whose top-left is each pixel (zero outside)."""
    h, w = a.shape
    s = np.zeros((h + k + 1, w + k + 1), dtype=np.int32)
    s[1:h + 1, 1:w + 1] = np.cumsum(np.cumsum(a.astype(np.int32), axis=0), axis=1)
    s[h + 1:, 1:w + 1] = s[h, 1:w + 1]
    s[:, w + 1:] = s[:, w:w + 1]
    return s[k:k + h, k:k + w] - s[:h, k:k + w] - s[k:k + h, :w] + s[:h, :w]


def _box_any_back(a: np.ndarray, k: int) -> np.ndarray:
    """True where some k×k box with top-left in ``a`` covers the pixel."""
    h, w = a.shape
    flipped = a[::-1, ::-1]
    return (_box_sum(flipped, k) > 0)[::-1, ::-1]


def opening(mask: np.ndarray, k: int) -> np.ndarray:
    """Union of all k×k squares that fit inside ``mask``."""
    if k <= 1:
        return mask.copy()
    fits = _box_sum(mask, k) == k * k
    return _box_any_back(fits, k)


def dilate_square(mask: np.ndarray, r: int) -> np.ndarray:
    if r <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((2 * r + 1, 2 * r + 1), bool))


def _gap_offsets(space_px: int) -> list[tuple[int, int, float]]:
    """Half-plane offsets whose edge-to-edge pixel gap is below ``space_px``."""
    out = []
    for dr in range(0, space_px + 1):
        for dc in range(-space_px, space_px + 1):
            if dr == 0 and dc <= 0:
                continue
            gx, gy = max(abs(dc) - 1, 0), max(dr - 1, 0)
            d = float(np.hypot(gx, gy))
            if d < space_px:
                out.append((dr, dc, d))
    return out


def _shifted(a: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """b[r, c] = a[r + dr, c + dc], zero outside."""
    h, w = a.shape
    b = np.zeros_like(a)
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    if r1 > r0 and c1 > c0:
        b[r0:r1, c0:c1] = a[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    return b


def close_pairs(labels_a: np.ndarray, labels_b: np.ndarray, space_px: int,
                same: bool) -> dict[tuple[int, int], tuple[float, int, int]]:
    """Label pairs closer than ``space_px``: (a, b) → (gap px, row, col).

    With ``same`` the two label maps are one layer and pairs are unordered.
    """
    found: dict[tuple[int, int], tuple[float, int, int]] = {}
    offsets = _gap_offsets(space_px)
    if not same:
        offsets = offsets + [(-dr, -dc, d) for dr, dc, d in offsets]
    for dr, dc, d in offsets:
        other = _shifted(labels_b, dr, dc)
        hit = (labels_a > 0) & (other > 0)
        if same:
            hit &= labels_a != other
        if not hit.any():
            continue
        rr, cc = np.nonzero(hit)
        la, lb = labels_a[rr, cc], other[rr, cc]
        for a, b, r, c in zip(la.tolist(), lb.tolist(), rr.tolist(), cc.tolist()):
            key = (min(a, b), max(a, b)) if same else (a, b)
            cur = found.get(key)
            if cur is None or (d, r, c) < cur:
                found[key] = (d, r, c)
    return found


# ----------------------------------------------------------------------------
# DRC


def drc_check(layout: Layout, rules: RuleDeck, registry: LayerRegistry | None = None) -> list[Violation]:
    registry = registry or LayerRegistry()
    p = rules.pixel_nm
    biggest = max([r.min_space for r in rules.layers.values()] +
                  [r.min_space + r.size for r in rules.cuts.values()] +
                  ([rules.well.nwell_enclose_pdiff, rules.well.nwell_space_ndiff] if rules.well else []))
    cv = _Canvas(layout, registry, p, margin=biggest // p + 2)
    out: list[Violation] = []
    present = [name for name in registry.names if layout.polygons(name)]

    for name in present:
        if name in rules.layers:
            out += _width_space(cv, name, rules.layers[name])
        elif name in rules.cuts:
            out += _cut_checks(cv, name, rules.cuts[name], registry)
    if rules.well is not None:
        out += _well_checks(cv, rules.well)
    return sorted(out, key=lambda v: (v.rule, v.layers, v.location[1], v.location[0], v.measured))


def _width_space(cv: _Canvas, name: str, rule: LayerRule) -> list[Violation]:
    p = cv.p
    m = cv[name]
    out = []
    labels, n = ndimage.label(m, structure=_CROSS)
    w = rule.min_width // p
    if w > 1:
        bad = m & ~opening(m, w)
        if bad.any():
            for lab in np.unique(labels[bad]).tolist():
                comp = labels == lab
                comp_bad = bad & comp
                k = w - 1
                while k > 1 and (comp_bad & ~opening(comp, k)).any():
                    k -= 1
                rr, cc = np.nonzero(comp_bad)
                out.append(Violation(f"{name}.WIDTH", (name,), cv.to_nm(int(rr[0]), int(cc[0])),
                                     float(k * p), float(rule.min_width)))
    s = rule.min_space // p
    for (a, b), (d, r, c) in sorted(close_pairs(labels, labels, s, same=True).items()):
        out.append(Violation(f"{name}.SPACE", (name,), cv.to_nm(r, c), d * p, float(rule.min_space)))
    return out


def _enclosure(box: tuple[int, int, int, int], cover: np.ndarray, limit: int) -> int:
    """Largest e <= limit with the box grown by e covered; -1 if the box itself is not."""
    r0, c0, r1, c1 = box
    best = -1
    for e in range(0, limit + 1):
        if cover[r0 - e:r1 + e, c0 - e:c1 + e].all():
            best = e
        else:
            break
    return best


def _cut_checks(cv: _Canvas, name: str, rule: CutRule, registry: LayerRegistry) -> list[Violation]:
    p = cv.p
    m = cv[name]
    labels, n = ndimage.label(m, structure=_CROSS)
    out = []
    size = rule.size // p
    lower_names, upper = registry.connects(name)
    upper_m = cv[upper]
    lowers = [cv[l] for l in lower_names]
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels[sl] == lab
        r0, c0 = sl[0].start, sl[1].start
        r1, c1 = sl[0].stop, sl[1].stop
        loc = cv.to_nm(r0, c0)
        hh, ww = r1 - r0, c1 - c0
        if hh != size or ww != size or not comp.all():
            dim = hh if hh != size else ww
            out.append(Violation(f"{name}.SIZE", (name,), loc, float(dim * p), float(rule.size)))
            continue
        box = (r0, c0, r1, c1)
        eu = _enclosure(box, upper_m, rule.enc_upper // p)
        if eu * p < rule.enc_upper:
            out.append(Violation(f"{name}.ENC_UPPER", (name, upper), loc, float(eu * p),
                                 float(rule.enc_upper)))
        el = max(_enclosure(box, low, rule.enc_lower // p) for low in lowers)
        if el * p < rule.enc_lower:
            out.append(Violation(f"{name}.ENC_LOWER", (name,) + tuple(lower_names), loc,
                                 float(el * p), float(rule.enc_lower)))
    s = rule.min_space // p
    for (a, b), (d, r, c) in sorted(close_pairs(labels, labels, s, same=True).items()):
        out.append(Violation(f"{name}.SPACE", (name,), cv.to_nm(r, c), d * p, float(rule.min_space)))
    return out


def _well_checks(cv: _Canvas, rule: WellRule) -> list[Violation]:
    p = cv.p
    diff, nwell = cv["DIFF"], cv["NWELL"]
    out = []
    pdiff = diff & cv["PIMP"]
    ndiff = diff & cv["NIMP"]
    e = rule.nwell_enclose_pdiff // p
    labels, n = ndimage.label(pdiff, structure=_CROSS)
    for lab in range(1, n + 1):
        comp = labels == lab
        got = -1
        for k in range(0, e + 1):
            if (dilate_square(comp, k) & ~nwell).any():
                break
            got = k
        if got < e:
            rr, cc = np.nonzero(comp)
            out.append(Violation("NWELL.ENC_PDIFF", ("NWELL", "DIFF", "PIMP"),
                                 cv.to_nm(int(rr[0]), int(cc[0])), float(got * p),
                                 float(rule.nwell_enclose_pdiff)))
    s = rule.nwell_space_ndiff // p
    nl, _ = ndimage.label(nwell, structure=_CROSS)
    dl, _ = ndimage.label(ndiff, structure=_CROSS)
    # overlap counts as zero spacing
    inside = (nl > 0) & (dl > 0)
    pairs = close_pairs(nl, dl, s, same=False)
    if inside.any():
        rr, cc = np.nonzero(inside)
        for a, b, r, c in zip(nl[rr, cc].tolist(), dl[rr, cc].tolist(), rr.tolist(), cc.tolist()):
            if (a, b) not in pairs or pairs[(a, b)][0] > -1:
                pairs[(a, b)] = (-1.0, r, c)
    for (a, b), (d, r, c) in sorted(pairs.items()):
        out.append(Violation("NWELL.SPACE_NDIFF", ("NWELL", "DIFF", "NIMP"), cv.to_nm(r, c),
                             max(d, 0.0) * p, float(rule.nwell_space_ndiff)))
    return out


# ----------------------------------------------------------------------------
# connectivity


@dataclass
class GoldenNetlist:
    nets: dict[str, list[str]]
    pins: dict[str, tuple[str, Point]]

    def to_dict(self) -> dict:
        return {"nets": {k: list(v) for k, v in self.nets.items()},
                "pins": {k: {"layer": l, "at": list(pt)} for k, (l, pt) in self.pins.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "GoldenNetlist":
        return cls({k: list(v) for k, v in d["nets"].items()},
                   {k: (v["layer"], (int(v["at"][0]), int(v["at"][1]))) for k, v in d["pins"].items()})

    @classmethod
    def from_json(cls, text: str) -> "GoldenNetlist":
        return cls.from_dict(json.loads(text))

    def validate(self) -> None:
        owner: dict[str, str] = {}
        for net, pins in self.nets.items():
            if len(pins) < 2:
                raise ValueError(f"net {net} has fewer than 2 pins")
            for pid in pins:
                if pid in owner:
                    raise ValueError(f"pin {pid} in nets {owner[pid]} and {net}")
                if pid not in self.pins:
                    raise ValueError(f"net {net} references unknown pin {pid}")
                owner[pid] = net
        missing = set(self.pins) - set(owner)
        if missing:
            raise ValueError(f"pins without a net: {sorted(missing)[:5]}")


Node = tuple[str, int]


@dataclass
class NetGraph:
    """Conductor pieces (layer, label) joined by overlap and vertical cuts."""

    nodes: list[Node]
    edges: list[tuple[Node, Node]]
    component: dict[Node, int]
    warnings: list[str] = field(default_factory=list)
    canvas: _Canvas | None = None
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def node_at(self, layer: str, pt: Point) -> Node | None:
        lab = self.labels.get(layer)
        if lab is None or self.canvas is None:
            return None
        r, c = self.canvas.pixel_of(pt)
        if not (0 <= r < lab.shape[0] and 0 <= c < lab.shape[1]) or lab[r, c] == 0:
            return None
        return (layer, int(lab[r, c]))

    def component_at(self, layer: str, pt: Point) -> int | None:
        n = self.node_at(layer, pt)
        return None if n is None else self.component[n]

    def n_components(self) -> int:
        return len(set(self.component.values()))


def _conductor_layers(registry: LayerRegistry) -> list[str]:
    return [l.name for l in registry if l.kind in ("diffusion", "poly", "metal")]


def extract_connectivity(layout: Layout, registry: LayerRegistry | None = None,
                         pixel_nm: int | None = None) -> NetGraph:
    """Connectivity graph; diffusion under poly is a transistor channel and does not conduct."""
    registry = registry or LayerRegistry()
    p = pixel_nm or layout.grid_nm
    cv = _Canvas(layout, registry, p, margin=1)
    labels: dict[str, np.ndarray] = {}
    nodes: list[Node] = []
    for name in _conductor_layers(registry):
        m = cv[name]
        if name == "DIFF" and "POLY" in registry:
            m = m & ~cv["POLY"]
        lab, n = ndimage.label(m, structure=_CROSS)
        labels[name] = lab
        nodes += [(name, i) for i in range(1, n + 1)]
    parent = {nd: nd for nd in nodes}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges: list[tuple[Node, Node]] = []
    warnings: list[str] = []
    for cut in registry.cut_layers():
        if not layout.polygons(cut):
            continue
        lower_names, upper = registry.connects(cut)
        cl, n = ndimage.label(cv[cut], structure=_CROSS)
        for lab, sl in enumerate(ndimage.find_objects(cl), start=1):
            sel = cl[sl] == lab
            touched_lower: list[Node] = []
            for ln in lower_names:
                if ln in labels:
                    touched_lower += [(ln, int(v)) for v in np.unique(labels[ln][sl][sel]) if v]
            touched_upper = [(upper, int(v)) for v in np.unique(labels[upper][sl][sel]) if v] \
                if upper in labels else []
            r0, c0 = sl[0].start, sl[1].start
            if not touched_lower or not touched_upper:
                warnings.append(f"floating {cut} at {cv.to_nm(r0, c0)}")
                continue
            group = touched_lower + touched_upper
            for other in group[1:]:
                edges.append((group[0], other))
                ra, rb = find(group[0]), find(other)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots: dict[Node, int] = {}
    component = {}
    for nd in nodes:
        r = find(nd)
        component[nd] = roots.setdefault(r, len(roots))
    return NetGraph(nodes, edges, component, warnings, cv, labels)


@dataclass
class LVSResult:
    passed: bool
    opens: list[str]
    shorts: list[tuple[str, str]]
    uncovered_pins: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pass": self.passed, "opens": self.opens, "shorts": [list(s) for s in self.shorts],
                "uncovered_pins": self.uncovered_pins}


def lvs_check(layout: Layout, golden: GoldenNetlist, registry: LayerRegistry | None = None,
              graph: NetGraph | None = None) -> LVSResult:
    registry = registry or LayerRegistry()
    graph = graph or extract_connectivity(layout, registry)
    opens: list[str] = []
    uncovered: list[str] = []
    comp_nets: dict[int, set[str]] = {}
    for net in sorted(golden.nets):
        comps = set()
        is_open = False
        for pid in golden.nets[net]:
            layer, pt = golden.pins[pid]
            comp = graph.component_at(layer if layer != "DIFF" else "DIFF", pt)
            if comp is None:
                uncovered.append(pid)
                is_open = True
                continue
            comps.add(comp)
            comp_nets.setdefault(comp, set()).add(net)
        if is_open or len(comps) > 1:
            opens.append(net)
    shorts = set()
    for nets in comp_nets.values():
        if len(nets) > 1:
            ordered = sorted(nets)
            for i in range(len(ordered)):
                for j in range(i + 1, len(ordered)):
                    shorts.add((ordered[i], ordered[j]))
    shorts_l = sorted(shorts)
    return LVSResult(not opens and not shorts_l, opens, shorts_l, uncovered)


# ----------------------------------------------------------------------------
# metrics


def _as_mask(x, like=None, pixel_nm: int = 10, origin: Point = (0, 0), shape=None) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(bool)
    return rasterize_polygons(list(x), origin, shape[0], shape[1], pixel_nm)


def _masks(pred, truth, pixel_nm: int, origin: Point, shape) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(pred, np.ndarray) or not isinstance(truth, np.ndarray):
        if shape is None:
            polys = [p for src in (pred, truth) if not isinstance(src, np.ndarray) for p in src]
            xs = [x for poly in polys for x, _ in poly] or [0]
            ys = [y for poly in polys for _, y in poly] or [0]
            shape = (-(-(max(ys) - origin[1]) // pixel_nm), -(-(max(xs) - origin[0]) // pixel_nm))
            for src in (pred, truth):
                if isinstance(src, np.ndarray):
                    shape = src.shape
    a = _as_mask(pred, pixel_nm=pixel_nm, origin=origin, shape=shape)
    b = _as_mask(truth, pixel_nm=pixel_nm, origin=origin, shape=shape)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(pred, truth, pixel_nm: int = 10, origin: Point = (0, 0), shape=None) -> float:
    """|pred ∩ truth| / |pred ∪ truth| in pixels; two empty regions score 1."""
    a, b = _masks(pred, truth, pixel_nm, origin, shape)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def dice(pred, truth, pixel_nm: int = 10, origin: Point = (0, 0), shape=None) -> float:
    """2|pred ∩ truth| / (|pred| + |truth|); two empty regions score 1."""
    a, b = _masks(pred, truth, pixel_nm, origin, shape)
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2 * int(np.count_nonzero(a & b)) / total


def success_topk(candidates: Sequence, k: int, checker: Callable[[object], bool]) -> tuple[bool, int]:
    """Try candidates in rank order; (passed, number of checks run)."""
    checks = 0
    for cand in list(candidates)[:max(0, k)]:
        checks += 1
        if checker(cand):
            return True, checks
    return False, checks


def success_ratio(outcomes: Iterable[bool]) -> float:
    outcomes = list(outcomes)
    if not outcomes:
        return 0.0
    return sum(1 for o in outcomes if o) / len(outcomes)


def layout_passes(layout: Layout, golden: GoldenNetlist, rules: RuleDeck,
                  registry: LayerRegistry | None = None) -> bool:
    return not drc_check(layout, rules, registry) and lvs_check(layout, golden, registry).passed
