"""Deterministic synthetic analog cells with golden netlists.

A cell is a stack of row pairs. Each pair has an NMOS row at the bottom, a
routing channel, and a mirrored PMOS row on top sitting in an N-well. Devices
are multi-finger transistors: a diffusion strip cut by poly fingers, joined by
a poly gate bar on the outer side. Every source/drain region carries a column
of contacts under an M1 strap that runs toward the channel. Routed nets join
two straps through M2 tracks (same row) or through an M2 track and an M3 drop
(across rows).

Geometry is laid out in pixel units and scaled to nm at the end, so every
edge lies on the pixel grid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Layout, Pin, Point, rect
from .verify import GoldenNetlist


class GenerationError(RuntimeError):
    """Raised when a requested cell cannot be built within the retry budget."""


# fixed device template, in pixels
POLY_W = 3
CUT = 4
STRAP_W = 8
BAR_H = 8
DIFF_H = 16
TRACK_W = 8
TRACK_PITCH = 12
IMP_MARGIN = 2

# row template heights (outer edge at 0, toward the channel is +y)
_BAR0, _BAR1 = 4, 4 + BAR_H
_DIFF0, _DIFF1 = 15, 15 + DIFF_H
_POLY_OVER = 2
_STUB = 40  # strap end, where the M1 pin sits
_TRACK0 = _STUB + 4


@dataclass(frozen=True)
class CellParams:
    seed: int = 0
    rows: int = 1
    devices_per_row: tuple[int, int] = (1, 2)
    fingers: tuple[int, int] = (1, 3)
    finger_pitch_nm: int = 130
    routes: int = 2
    max_metal: int = 3  # 2: same-row M2 routes only; 3: also cross-row M3 routes
    tracks: int = 2  # per half channel
    via_density: float = 0.5  # chance a terminal gets a second contact
    nwell_margin_nm: int = 60
    dummies: int = 1
    max_route_span_nm: int = 500
    max_extent_nm: int = 4000
    pixel_nm: int = 10

    def validate(self) -> None:
        p = self.pixel_nm
        for name in ("finger_pitch_nm", "nwell_margin_nm", "max_route_span_nm", "max_extent_nm"):
            v = getattr(self, name)
            if v <= 0 or v % p:
                raise ValueError(f"{name}={v} must be a positive multiple of {p}")
        if self.finger_pitch_nm < 13 * p:
            raise ValueError("finger pitch must leave room for a contact beside each finger")
        if self.nwell_margin_nm < 3 * p:
            raise ValueError("nwell margin below the well enclosure rule")
        lo, hi = self.fingers
        dlo, dhi = self.devices_per_row
        if not (1 <= lo <= hi and 1 <= dlo <= dhi):
            raise ValueError("finger and device ranges must be 1 <= lo <= hi")
        if self.rows < 1 or self.routes < 0 or self.tracks < 1 or self.dummies < 0:
            raise ValueError("rows, tracks >= 1 and routes, dummies >= 0 required")
        if self.max_metal not in (2, 3):
            raise ValueError("max_metal must be 2 or 3")
        if not 0.0 <= self.via_density <= 1.0:
            raise ValueError("via_density must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["devices_per_row"] = list(self.devices_per_row)
        d["fingers"] = list(self.fingers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown cell parameter keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("devices_per_row", "fingers"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Terminal:
    net: str
    x: int  # strap centre column, px
    pair: int
    pmos: bool
    stub_y: int  # strap end in absolute px (channel side)
    routed: bool = False


@dataclass
class _Builder:
    params: CellParams
    layout: Layout = field(default_factory=Layout)
    nets: dict[str, list[str]] = field(default_factory=dict)
    pins: dict[str, tuple[str, Point]] = field(default_factory=dict)
    n_nets: int = 0

    def new_net(self, prefix: str) -> str:
        self.n_nets += 1
        return f"{prefix}{self.n_nets}"

    def pin(self, net: str, layer: str, x: int, y: int) -> None:
        """Pin at the centre of pixel (x, y)."""
        p = self.params.pixel_nm
        pt = (x * p + p // 2, y * p + p // 2)
        pid = f"{net}.{len(self.nets.setdefault(net, []))}"
        self.nets[net].append(pid)
        self.pins[pid] = (layer, pt)
        self.layout.pins.append(Pin(net, layer, pt))


class _Row:
    """Maps template y to absolute y; PMOS rows are mirrored about the channel."""

    def __init__(self, base: int, height: int, mirrored: bool):
        self.base, self.height, self.mirrored = base, height, mirrored

    def span(self, y0: int, y1: int) -> tuple[int, int]:
        if self.mirrored:
            return self.base + self.height - y1, self.base + self.height - y0
        return self.base + y0, self.base + y1

    def at(self, y: int) -> int:
        """Absolute row of the template pixel row y."""
        return self.base + self.height - 1 - y if self.mirrored else self.base + y


def _pair_height(tracks: int) -> int:
    return 2 * _STUB + 4 + 2 * TRACK_PITCH * tracks


def generate_cell(params: CellParams) -> tuple[Layout, GoldenNetlist]:
    params.validate()
    rng = np.random.default_rng(params.seed)
    b = _Builder(params)
    pitch = params.finger_pitch_nm // params.pixel_nm
    sd_w = pitch - POLY_W
    dummy_span = params.dummies * pitch
    x_start = dummy_span + params.nwell_margin_nm // params.pixel_nm + 2
    height = _pair_height(params.tracks)
    pair_gap = 8
    terminals: list[Terminal] = []
    for pair in range(params.rows):
        base = pair * (height + pair_gap)
        for pmos in (False, True):
            row = _Row(base, height, pmos)
            n_dev = int(rng.integers(params.devices_per_row[0], params.devices_per_row[1] + 1))
            fingers = [int(rng.integers(params.fingers[0], params.fingers[1] + 1)) for _ in range(n_dev)]
            terminals += _place_row(b, row, pair, pmos, x_start, fingers, pitch, sd_w, rng)
    _route(b, terminals, rng, height, pair_gap)
    lay = b.layout
    extent = max(lay.bbox()[2], lay.bbox()[3]) * params.pixel_nm
    if extent > params.max_extent_nm:
        raise GenerationError(f"cell extent {extent} nm exceeds max_extent_nm={params.max_extent_nm}")
    _scale(lay, params.pixel_nm)
    lay.grid_nm = params.pixel_nm
    golden = GoldenNetlist(b.nets, b.pins)
    golden.validate()
    return lay, golden


def _scale(layout: Layout, p: int) -> None:
    for name, polys in layout.layers.items():
        layout.layers[name] = [tuple((x * p, y * p) for x, y in poly) for poly in polys]


def _place_row(b: _Builder, row: _Row, pair: int, pmos: bool, x_start: int, fingers: list[int],
               pitch: int, sd_w: int, rng) -> list[Terminal]:
    lay = b.layout
    prm = b.params
    terms: list[Terminal] = []
    diff_x0 = []
    diff_x1 = []
    x = x_start
    poly_y0, poly_y1 = row.span(_BAR0, _DIFF1 + _POLY_OVER)
    dummy_y0, dummy_y1 = row.span(_DIFF0 - _POLY_OVER, _DIFF1 + _POLY_OVER)
    dy0, dy1 = row.span(_DIFF0, _DIFF1)
    for nf in fingers:
        width = (nf + 1) * sd_w + nf * POLY_W
        lay.add_rect("DIFF", x, dy0, x + width, dy1, "diff")
        diff_x0.append(x)
        diff_x1.append(x + width)
        # gate fingers and bar
        gate = b.new_net("g")
        f0 = x + sd_w
        fl = x + sd_w + (nf - 1) * pitch + POLY_W
        for k in range(nf):
            fx = x + sd_w + k * pitch
            lay.add_rect("POLY", fx, poly_y0, fx + POLY_W, poly_y1, f"gate:{gate}")
        gx = (f0 + fl) // 2
        bx0, bx1 = min(f0, gx - STRAP_W // 2), max(fl, gx + STRAP_W // 2)
        by0, by1 = row.span(_BAR0, _BAR1)
        lay.add_rect("POLY", bx0, by0, bx1, by1, f"gate:{gate}")
        cy0, cy1 = row.span(_BAR0 + 2, _BAR0 + 2 + CUT)
        lay.add_rect("CONTACT", gx - 2, cy0, gx + 2, cy1, f"contact:{gate}")
        lay.add_rect("M1", gx - STRAP_W // 2, by0, gx + STRAP_W // 2, by1, f"pad:{gate}")
        b.pin(gate, "POLY", f0 + 1, row.at(_DIFF1))
        b.pin(gate, "M1", gx, row.at(_BAR0 + 1))
        # source/drain terminals
        for k in range(nf + 1):
            sx = x + k * pitch
            cx = sx + sd_w // 2
            net = b.new_net("n")
            rows = [(_DIFF0 + 2, _DIFF0 + 2 + CUT)]
            if rng.random() < prm.via_density:
                rows.append((_DIFF0 + 9, _DIFF0 + 9 + CUT))
            for r0, r1 in rows:
                c0, c1 = row.span(r0, r1)
                lay.add_rect("CONTACT", cx - 2, c0, cx + 2, c1, f"contact:{net}")
            s0, s1 = row.span(_DIFF0, _STUB)
            lay.add_rect("M1", cx - STRAP_W // 2, s0, cx + STRAP_W // 2, s1, f"strap:{net}")
            b.pin(net, "DIFF", cx, row.at(_DIFF0 + 7))
            b.pin(net, "M1", cx, row.at(_STUB - 2))
            terms.append(Terminal(net, cx, pair, pmos, s0 if pmos else s1))
        x += width + pitch
    # dummy fingers continue the pitch beyond each row end
    left, right = diff_x0[0], diff_x1[-1]
    for d in range(prm.dummies):
        lx = left - POLY_W - d * pitch
        rx = right + d * pitch
        lay.add_rect("POLY", lx, dummy_y0, lx + POLY_W, dummy_y1, "dummy")
        lay.add_rect("POLY", rx, dummy_y0, rx + POLY_W, dummy_y1, "dummy")
    iy0, iy1 = row.span(_DIFF0 - IMP_MARGIN, _DIFF1 + IMP_MARGIN)
    lay.add_rect("PIMP" if pmos else "NIMP", left - IMP_MARGIN, iy0, right + IMP_MARGIN, iy1,
                 "pimp" if pmos else "nimp")
    if pmos:
        m = prm.nwell_margin_nm // prm.pixel_nm
        lay.add_rect("NWELL", left - m, dy0 - m, right + m, dy1 + m, "nwell")
    return terms


def _route(b: _Builder, terminals: list[Terminal], rng, height: int, pair_gap: int) -> None:
    prm = b.params
    lay = b.layout
    span_px = prm.max_route_span_nm // prm.pixel_nm
    # occupied x-intervals per (pair, half, track)
    busy: dict[tuple[int, int, int], list[tuple[int, int]]] = {}
    half = STRAP_W // 2

    def free_track(pair: int, upper: int, lo: int, hi: int) -> int | None:
        order = range(prm.tracks) if not upper else reversed(range(prm.tracks))
        for t in order:
            if all(hi + 3 <= a or b_ + 3 <= lo for a, b_ in busy.get((pair, upper, t), [])):
                return t
        return None

    def track_y(pair: int, upper: int, t: int) -> int:
        base = pair * (height + pair_gap)
        return base + _TRACK0 + (prm.tracks * TRACK_PITCH if upper else 0) + t * TRACK_PITCH

    for i in range(prm.routes):
        net = f"r{i + 1}"
        for attempt in range(50):
            free = [t for t in terminals if not t.routed]
            if len(free) < 2:
                raise GenerationError(f"no free terminals left for net {net}")
            a = free[int(rng.integers(len(free)))]
            cands = [t for t in free if t is not a and t.pair == a.pair and 0 < abs(t.x - a.x) <= span_px]
            if prm.max_metal < 3:
                cands = [t for t in cands if t.pmos == a.pmos]
            if not cands:
                continue
            c = cands[int(rng.integers(len(cands)))]
            if a.pmos != c.pmos and not a.pmos:
                a, c = c, a  # cross routes start on the PMOS side
            upper = 1 if a.pmos else 0
            lo, hi = min(a.x, c.x) - half, max(a.x, c.x) + half
            t = free_track(a.pair, upper, lo, hi)
            if t is None:
                continue
            busy.setdefault((a.pair, upper, t), []).append((lo, hi))
            y = track_y(a.pair, upper, t)
            _draw_route(b, a, c, y, net)
            break
        else:
            raise GenerationError(f"could not place route for net {net} after 50 attempts")


def _draw_route(b: _Builder, a: Terminal, c: Terminal, y: int, net: str) -> None:
    """a is the terminal whose strap drops to the track at row y."""
    lay = b.layout
    half = STRAP_W // 2
    tag = f"route:{net}"
    # rename both terminal nets to the route net
    for t in (a, c):
        pins = b.nets.pop(t.net)
        b.nets.setdefault(net, [])
        for pid in pins:
            new = f"{net}.{len(b.nets[net])}"
            b.nets[net].append(new)
            b.pins[new] = b.pins.pop(pid)
        b.layout.pins = [Pin(net if p.net == t.net else p.net, p.layer, p.at) for p in b.layout.pins]
        for layer in ("CONTACT", "M1"):
            lay.tags[layer] = [f"{tt.split(':')[0]}:{net}" if tt.endswith(f":{t.net}") else tt
                               for tt in lay.tags.get(layer, [])]
        t.net = net
        t.routed = True

    def strap_to_track(t: Terminal) -> None:
        if t.pmos:
            lay.add_rect("M1", t.x - half, y, t.x + half, t.stub_y + 8, tag)
        else:
            lay.add_rect("M1", t.x - half, t.stub_y - 8, t.x + half, y + TRACK_W, tag)
        lay.add_rect("VIA1", t.x - 2, y + 2, t.x + 2, y + 6, tag)

    lo, hi = min(a.x, c.x) - half, max(a.x, c.x) + half
    lay.add_rect("M2", lo, y, hi, y + TRACK_W, tag)
    strap_to_track(a)
    if a.pmos == c.pmos:
        strap_to_track(c)
        return
    # drop on M3 from the track to a via stack on top of the NMOS strap
    lay.add_rect("VIA2", c.x - 2, y + 2, c.x + 2, y + 6, tag)
    lay.add_rect("M3", c.x - half, c.stub_y - 8, c.x + half, y + TRACK_W, tag)
    lay.add_rect("M2", c.x - half, c.stub_y - 8, c.x + half, c.stub_y, tag)
    lay.add_rect("VIA2", c.x - 2, c.stub_y - 6, c.x + 2, c.stub_y - 2, tag)
    lay.add_rect("VIA1", c.x - 2, c.stub_y - 6, c.x + 2, c.stub_y - 2, tag)


# ----------------------------------------------------------------------------
# corpus


def jitter_params(base: CellParams, rng: np.random.Generator, index: int) -> CellParams:
    """Per-cell parameters drawn around ``base``."""
    f_hi = int(rng.integers(base.fingers[0], base.fingers[1] + 1))
    return replace(
        base,
        seed=int(rng.integers(0, 2 ** 31 - 1)),
        fingers=(base.fingers[0], max(base.fingers[0], f_hi)),
        routes=int(rng.integers(max(0, base.routes - 1), base.routes + 2)),
        dummies=int(rng.integers(max(1, base.dummies), base.dummies + 2)) if base.dummies else 0,
        via_density=float(np.round(rng.uniform(0.25, 0.75), 3)),
    )


def generate_corpus(count: int, base: CellParams, seed: int = 0,
                    max_tries: int = 20) -> list[tuple[Layout, GoldenNetlist, CellParams]]:
    """``count`` cells with jittered parameters; infeasible draws are redrawn."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        last: GenerationError | None = None
        for _ in range(max_tries):
            p = jitter_params(base, rng, i)
            try:
                lay, net = generate_cell(p)
            except GenerationError as e:
                last = e
                continue
            out.append((lay, net, p))
            break
        else:
            raise GenerationError(f"cell {i}: {last}")
    return out


def write_corpus(cells, directory, base: CellParams, seed: int) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (lay, net, p) in enumerate(cells):
        lay.save(d / f"cell_{i:04d}.layout.json")
        (d / f"cell_{i:04d}.netlist.json").write_text(net.to_json())
        entries.append({"index": i, "params": p.to_dict()})
    manifest = {"count": len(cells), "seed": seed, "base": base.to_dict(), "cells": entries}
    path = d / "corpus_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_corpus(directory) -> list[tuple[Layout, GoldenNetlist]]:
    d = Path(directory)
    manifest = json.loads((d / "corpus_manifest.json").read_text())
    out = []
    for i in range(manifest["count"]):
        lay = Layout.load(d / f"cell_{i:04d}.layout.json")
        net = GoldenNetlist.from_json((d / f"cell_{i:04d}.netlist.json").read_text())
        out.append((lay, net))
    return out
