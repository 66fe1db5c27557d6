"""Layout data model, rasterization to patches and mask-to-polygon tracing.

Coordinates are integer nanometres, y pointing up. Pixel ``(r, c)`` of a raster
with origin ``(ox, oy)`` covers ``[ox + c·p, ox + (c+1)·p) × [oy + r·p, oy + (r+1)·p)``
and is set iff its centre lies inside the layer. A layer's rings are combined
by winding number: counter-clockwise rings add one, clockwise rings (holes)
subtract one, and a centre is inside when the sum is positive. Left and bottom
edges are inclusive, right and top edges exclusive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from html import escape
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Point = tuple[int, int]
Polygon = tuple[Point, ...]


class LayoutError(ValueError):
    pass


class RegistryMismatchError(LayoutError):
    pass


# ----------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class LayerId:
    index: int
    name: str
    kind: str  # well | diffusion | implant | poly | contact | metal | via
    level: int = 0  # metal/via level, 0 otherwise


DEFAULT_LAYER_NAMES = (
    "NWELL", "DIFF", "POLY", "NIMP", "PIMP", "CONTACT",
    "M1", "VIA1", "M2", "VIA2", "M3", "VIA3", "M4", "VIA4",
    "M5", "VIA5", "M6", "VIA6", "M7", "VIA7", "M8",
)


def _kind_of(name: str) -> tuple[str, int]:
    fixed = {"NWELL": "well", "DIFF": "diffusion", "POLY": "poly", "NIMP": "implant",
             "PIMP": "implant", "CONTACT": "contact"}
    if name in fixed:
        return fixed[name], 0
    if name.startswith("VIA") and name[3:].isdigit():
        return "via", int(name[3:])
    if name.startswith("M") and name[1:].isdigit():
        return "metal", int(name[1:])
    raise LayoutError(f"cannot infer layer kind for {name!r}")


class LayerRegistry:
    """Ordered layer table plus the vertical connectivity it implies."""

    def __init__(self, names: Sequence[str] = DEFAULT_LAYER_NAMES):
        if len(set(names)) != len(names):
            raise LayoutError("duplicate layer names")
        self.layers = tuple(LayerId(i, n, *_kind_of(n)) for i, n in enumerate(names))
        self._by_name = {l.name: l for l in self.layers}
        metals = {l.level for l in self.layers if l.kind == "metal"}
        for l in self.layers:
            if l.kind == "via" and not {l.level, l.level + 1} <= metals:
                raise LayoutError(f"{l.name} needs M{l.level} and M{l.level + 1}")
            if l.kind == "contact" and 1 not in metals:
                raise LayoutError("CONTACT needs M1")

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> LayerId:
        try:
            return self._by_name[name]
        except KeyError:
            raise RegistryMismatchError(f"layer {name!r} not in registry") from None

    def index(self, name: str) -> int:
        return self[name].index

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(l.name for l in self.layers)

    def connects(self, cut: str) -> tuple[tuple[str, ...], str] | None:
        """For a contact/via layer: (lower layer names, upper layer name)."""
        l = self[cut]
        if l.kind == "contact":
            return ("POLY", "DIFF"), "M1"
        if l.kind == "via":
            return (f"M{l.level}",), f"M{l.level + 1}"
        return None

    def cut_layers(self) -> list[str]:
        return [l.name for l in self.layers if l.kind in ("contact", "via")]

    def to_list(self) -> list[str]:
        return list(self.names)


@dataclass(frozen=True)
class GridSpec:
    pixel_nm: int = 10
    patch_px: int = 64

    def __post_init__(self):
        if self.pixel_nm <= 0 or self.patch_px <= 0 or self.patch_px % 2:
            raise LayoutError(f"invalid grid {self}: pixel_nm > 0 and even patch_px required")

    @property
    def patch_nm(self) -> int:
        return self.pixel_nm * self.patch_px


@dataclass(frozen=True)
class Window:
    origin_nm: Point

    def bounds(self, grid: GridSpec) -> tuple[int, int, int, int]:
        x, y = self.origin_nm
        return x, y, x + grid.patch_nm, y + grid.patch_nm


@dataclass
class PatchTensor:
    values: np.ndarray  # C×H×W
    origin_nm: Point = (0, 0)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


# ----------------------------------------------------------------------------
# polygons


def rect(x0: int, y0: int, x1: int, y1: int) -> Polygon:
    """Counter-clockwise rectangle [x0, x1) × [y0, y1)."""
    if x1 <= x0 or y1 <= y0:
        raise LayoutError(f"degenerate rectangle {(x0, y0, x1, y1)}")
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


def poly_bbox(poly: Polygon) -> tuple[int, int, int, int]:
    xs = [p[0] for p in poly]
    ys = [p[1] for p in poly]
    return min(xs), min(ys), max(xs), max(ys)


def signed_area2(poly: Polygon) -> int:
    """Twice the signed area; positive for counter-clockwise rings."""
    s = 0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return s


def is_rectangle(poly: Polygon) -> bool:
    if len(poly) != 4:
        return False
    x0, y0, x1, y1 = poly_bbox(poly)
    return set(poly) == {(x0, y0), (x1, y0), (x1, y1), (x0, y1)}


def _segments_cross(a0, a1, b0, b1) -> bool:
    """Axis-aligned closed segments share at least one point."""
    ax0, ax1 = sorted((a0[0], a1[0]))
    ay0, ay1 = sorted((a0[1], a1[1]))
    bx0, bx1 = sorted((b0[0], b1[0]))
    by0, by1 = sorted((b0[1], b1[1]))
    return ax0 <= bx1 and bx0 <= ax1 and ay0 <= by1 and by0 <= ay1


def validate_polygon(poly: Sequence[Sequence[int]]) -> Polygon:
    """Normalise to a tuple ring and check it is rectilinear and simple."""
    pts = tuple((int(p[0]), int(p[1])) for p in poly)
    if len(pts) >= 2 and pts[0] == pts[-1]:
        pts = pts[:-1]
    n = len(pts)
    if n < 4 or n % 2:
        raise LayoutError(f"rectilinear ring needs an even vertex count >= 4, got {n}")
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        if a == b or (a[0] != b[0] and a[1] != b[1]):
            raise LayoutError(f"edge {a}->{b} is not axis-aligned")
        c = pts[(i + 2) % n]
        if (a[0] == b[0]) == (b[0] == c[0]):
            raise LayoutError(f"collinear or reversing vertices at {b}")
    if n > 4:
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_cross(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]):
                    raise LayoutError(f"ring self-intersects near {pts[i]}")
    if signed_area2(pts) == 0:
        raise LayoutError("zero-area ring")
    return pts


# ----------------------------------------------------------------------------
# layout


@dataclass(frozen=True)
class Pin:
    net: str
    layer: str
    at: Point


@dataclass
class Layout:
    """Per-layer polygon lists plus net-labelled pins.

    ``tags`` runs parallel to ``layers``; a tag names what a shape is
    (e.g. ``"dummy"``, ``"contact:n3"``, ``"route:n3"``) so task builders can
    remove elements by role.
    """

    layers: dict[str, list[Polygon]] = field(default_factory=dict)
    tags: dict[str, list[str]] = field(default_factory=dict)
    pins: list[Pin] = field(default_factory=list)
    grid_nm: int = 10

    def add(self, layer: str, poly: Polygon, tag: str = "") -> None:
        self.layers.setdefault(layer, []).append(tuple(poly))
        self.tags.setdefault(layer, []).append(tag)

    def add_rect(self, layer: str, x0: int, y0: int, x1: int, y1: int, tag: str = "") -> None:
        self.add(layer, rect(x0, y0, x1, y1), tag)

    def polygons(self, layer: str) -> list[Polygon]:
        return self.layers.get(layer, [])

    def items(self, layer: str) -> list[tuple[Polygon, str]]:
        return list(zip(self.layers.get(layer, []), self.tags.get(layer, [])))

    def copy(self) -> "Layout":
        return Layout({k: list(v) for k, v in self.layers.items()},
                      {k: list(v) for k, v in self.tags.items()},
                      list(self.pins), self.grid_nm)

    def without(self, predicate) -> tuple["Layout", "Layout"]:
        """Split into (kept, removed) by ``predicate(layer, index, poly, tag)``."""
        kept = Layout(grid_nm=self.grid_nm, pins=list(self.pins))
        removed = Layout(grid_nm=self.grid_nm)
        for name, polys in self.layers.items():
            kept.layers.setdefault(name, [])
            kept.tags.setdefault(name, [])
            for i, (p, t) in enumerate(zip(polys, self.tags[name])):
                (removed if predicate(name, i, p, t) else kept).add(name, p, t)
        return kept, removed

    def merged(self, other: "Layout") -> "Layout":
        out = self.copy()
        for name, polys in other.layers.items():
            for p, t in zip(polys, other.tags.get(name, [""] * len(polys))):
                out.add(name, p, t)
        return out

    def count(self) -> int:
        return sum(len(v) for v in self.layers.values())

    def bbox(self) -> tuple[int, int, int, int] | None:
        boxes = [poly_bbox(p) for polys in self.layers.values() for p in polys]
        if not boxes:
            return None
        return (min(b[0] for b in boxes), min(b[1] for b in boxes),
                max(b[2] for b in boxes), max(b[3] for b in boxes))

    def extent_px(self, pixel_nm: int) -> tuple[int, int]:
        """(height, width) in pixels of the box [0, max) rounded up to the grid."""
        bb = self.bbox()
        if bb is None:
            return 0, 0
        return -(-bb[3] // pixel_nm), -(-bb[2] // pixel_nm)

    def validate(self, registry: LayerRegistry | None = None) -> None:
        for name, polys in self.layers.items():
            if registry is not None and name not in registry:
                raise RegistryMismatchError(f"layer {name!r} not in registry")
            for p in polys:
                validate_polygon(p)
                if min(min(x, y) for x, y in p) < 0:
                    raise LayoutError(f"negative coordinate on {name}")
        for pin in self.pins:
            m = rasterize_polygons(self.polygons(pin.layer), (pin.at[0], pin.at[1]), 1, 1, 1)
            if not m[0, 0]:
                raise LayoutError(f"pin {pin.net} at {pin.at} not inside any {pin.layer} shape")

    # JSON interchange -----------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for name, polys in self.layers.items():
            entry = {"name": name, "polygons": [[list(pt) for pt in p] for p in polys]}
            tags = self.tags.get(name, [])
            if any(tags):
                entry["tags"] = list(tags)
            layers.append(entry)
        return {
            "grid_nm": self.grid_nm,
            "layers": layers,
            "pins": [{"net": p.net, "layer": p.layer, "at": list(p.at)} for p in self.pins],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        out = cls(grid_nm=int(d.get("grid_nm", 10)))
        for entry in d.get("layers", []):
            polys = entry.get("polygons", [])
            tags = entry.get("tags") or [""] * len(polys)
            if len(tags) != len(polys):
                raise LayoutError(f"layer {entry['name']}: tags and polygons differ in length")
            out.layers.setdefault(entry["name"], [])
            out.tags.setdefault(entry["name"], [])
            for p, t in zip(polys, tags):
                out.add(entry["name"], validate_polygon(p), t)
        for p in d.get("pins", []):
            out.pins.append(Pin(p["net"], p["layer"], (int(p["at"][0]), int(p["at"][1]))))
        return out

    @classmethod
    def from_json(cls, text: str) -> "Layout":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Layout":
        return cls.from_json(Path(path).read_text())


# ----------------------------------------------------------------------------
# rasterization


def _ceil_div(a: np.ndarray, b: int) -> np.ndarray:
    return -((-a) // b)


def rasterize_polygons(polys: Iterable[Polygon], origin: Point, height: int, width: int,
                       pixel_nm: int) -> np.ndarray:
    """Boolean H×W raster of the union of ``polys`` by the centre rule."""
    xs, y0s, y1s, signs = [], [], [], []
    for poly in polys:
        n = len(poly)
        for i in range(n):
            (ax, ay), (bx, by) = poly[i], poly[(i + 1) % n]
            if ax == bx and ay != by:
                xs.append(ax)
                y0s.append(min(ay, by))
                y1s.append(max(ay, by))
                signs.append(1 if by > ay else -1)
    out_shape = (height, width)
    if not xs or height <= 0 or width <= 0:
        return np.zeros(out_shape, dtype=bool)
    ox, oy = origin
    p = pixel_nm
    x = np.asarray(xs, dtype=np.int64)
    ya = np.asarray(y0s, dtype=np.int64)
    yb = np.asarray(y1s, dtype=np.int64)
    s = np.asarray(signs, dtype=np.int32)
    # an edge at x adds its sign to every centre strictly left of it
    cend = np.clip(_ceil_div(2 * (x - ox) - p, 2 * p), 0, width)
    r0 = np.clip(_ceil_div(2 * (ya - oy) - p, 2 * p), 0, height)
    r1 = np.clip(_ceil_div(2 * (yb - oy) - p, 2 * p), 0, height)
    keep = (r1 > r0) & (cend > 0)
    if not keep.any():
        return np.zeros(out_shape, dtype=bool)
    cend, r0, r1, s = cend[keep], r0[keep], r1[keep], s[keep]
    d = np.zeros((height + 1, width + 1), dtype=np.int32)
    np.add.at(d, (r0, np.zeros_like(r0)), s)
    np.add.at(d, (r1, np.zeros_like(r1)), -s)
    np.add.at(d, (r0, cend), -s)
    np.add.at(d, (r1, cend), s)
    wind = np.cumsum(np.cumsum(d, axis=0), axis=1)[:height, :width]
    return wind > 0


def rasterize_region(layout: Layout, origin: Point, height: int, width: int, pixel_nm: int,
                     registry: LayerRegistry) -> np.ndarray:
    """L×H×W uint8 raster of an arbitrary region."""
    for name in layout.layers:
        if name not in registry:
            raise RegistryMismatchError(f"layout layer {name!r} not in registry")
    out = np.zeros((len(registry), height, width), dtype=np.uint8)
    for name, polys in layout.layers.items():
        if polys:
            out[registry.index(name)] = rasterize_polygons(polys, origin, height, width, pixel_nm)
    return out


def rasterize_window(layout: Layout, window: Window, grid: GridSpec,
                     registry: LayerRegistry) -> PatchTensor:
    vals = rasterize_region(layout, window.origin_nm, grid.patch_px, grid.patch_px,
                            grid.pixel_nm, registry)
    return PatchTensor(vals, window.origin_nm)


def rasterize_full(layout: Layout, grid: GridSpec, registry: LayerRegistry,
                   shape: tuple[int, int] | None = None) -> np.ndarray:
    """Raster of the layout's extent from the origin (0, 0)."""
    h, w = shape if shape is not None else layout.extent_px(grid.pixel_nm)
    return rasterize_region(layout, (0, 0), h, w, grid.pixel_nm, registry)


# ----------------------------------------------------------------------------
# polygonization

_LEFT = {(1, 0): (0, 1), (0, 1): (-1, 0), (-1, 0): (0, -1), (0, -1): (1, 0)}


def polygonize(mask: np.ndarray, pixel_nm: int, origin_nm: Point = (0, 0)) -> list[Polygon]:
    """Trace 4-connected pixel components into rectilinear rings.

    Outer rings come out counter-clockwise and holes clockwise, so
    ``rasterize_polygons`` of the result reproduces ``mask`` exactly.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError("polygonize expects a 2-D mask")
    h, w = m.shape
    pad = np.zeros((h + 2, w + 2), dtype=bool)
    pad[1:-1, 1:-1] = m
    core = pad[1:-1, 1:-1]
    edges: dict[Point, list[Point]] = {}

    def add(kind: np.ndarray, start, step):
        rr, cc = np.nonzero(kind)
        for r, c in zip(rr.tolist(), cc.tolist()):
            sx, sy = start(c, r)
            edges.setdefault((sx, sy), []).append(step)

    # vertices are (x, y) in pixel units; interior kept on the left of travel
    add(core & ~pad[:-2, 1:-1], lambda c, r: (c, r), (1, 0))           # bottom, east
    add(core & ~pad[1:-1, 2:], lambda c, r: (c + 1, r), (0, 1))        # right, north
    add(core & ~pad[2:, 1:-1], lambda c, r: (c + 1, r + 1), (-1, 0))   # top, west
    add(core & ~pad[1:-1, :-2], lambda c, r: (c, r + 1), (0, -1))      # left, south

    rings: list[Polygon] = []
    ox, oy = origin_nm
    for start in sorted(edges, key=lambda v: (v[1], v[0])):
        while edges.get(start):
            d = edges[start].pop(0)
            ring = [start]
            v = (start[0] + d[0], start[1] + d[1])
            while True:
                outs = edges.get(v)
                # at a saddle the incoming edge pairs with its left turn; back at
                # the start, a missing left turn means we came round to the first edge
                if v == start and (not outs or _LEFT[d] not in outs):
                    break
                if not outs:
                    raise RuntimeError("open boundary while tracing mask")
                nd = _LEFT[d] if _LEFT[d] in outs else outs[0]
                outs.remove(nd)
                ring.append(v)
                d = nd
                v = (v[0] + d[0], v[1] + d[1])
            for part in _split_at_repeats(ring):
                rings.append(_simplify(part, pixel_nm, ox, oy))
    return rings


def _split_at_repeats(ring: list[Point]) -> list[list[Point]]:
    """Break a ring that revisits a vertex into simple rings with the same edges."""
    out = []
    stack = [ring]
    while stack:
        r = stack.pop()
        seen: dict[Point, int] = {}
        for j, v in enumerate(r):
            if v in seen:
                i = seen[v]
                stack.append(r[i:j])
                stack.append(r[:i] + r[j:])
                break
            seen[v] = j
        else:
            out.append(r)
    return out[::-1]


def _simplify(ring: list[Point], p: int, ox: int, oy: int) -> Polygon:
    n = len(ring)
    keep = []
    for i in range(n):
        a, b, c = ring[i - 1], ring[i], ring[(i + 1) % n]
        if (a[0] == b[0] == c[0]) or (a[1] == b[1] == c[1]):
            continue
        keep.append((ox + b[0] * p, oy + b[1] * p))
    return tuple(keep)


# ----------------------------------------------------------------------------
# SVG

DEFAULT_STYLE = {
    "NWELL": "#9bd1a0", "DIFF": "#d8b25a", "POLY": "#d9534f", "NIMP": "#7fb3d5",
    "PIMP": "#f1a7c5", "CONTACT": "#222222", "M1": "#3a7bd5", "VIA1": "#444444",
    "M2": "#8e44ad", "VIA2": "#555555", "M3": "#16a085",
}


def render_svg(layout: Layout, registry: LayerRegistry | None = None,
               style: dict[str, str] | None = None) -> str:
    registry = registry or LayerRegistry()
    style = {**DEFAULT_STYLE, **(style or {})}
    bb = layout.bbox() or (0, 0, 0, 0)
    x0, y0, x1, y1 = bb
    w, h = max(x1 - x0, 1), max(y1 - y0, 1)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0} {-y1} {w} {h}" '
        f'width="{w}" height="{h}">',
        '<g transform="scale(1,-1)">',
    ]
    for layer in registry:
        color = style.get(layer.name, "#888888")
        out.append(f'<g id="{escape(layer.name)}" fill="{color}" fill-opacity="0.5" '
                   f'stroke="{color}" stroke-width="1">')
        for poly in layout.polygons(layer.name):
            d = "M " + " L ".join(f"{x} {y}" for x, y in poly) + " Z"
            out.append(f'<path d="{d}"/>')
        out.append("</g>")
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
