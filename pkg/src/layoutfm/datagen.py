"""Training pairs from layouts: random masking for pre-training, task removal for fine-tuning.

A sample holds three binary rasters over one window: the layout with some
elements removed (input), the removed pixels (target) and optional command
channels. Per channel, input and target partition the unmasked raster.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .geometry import (GridSpec, LayerRegistry, Layout, Point, Polygon, Window, poly_bbox,
                       rasterize_polygons, rasterize_region)
from .verify import GoldenNetlist

MAGIC = b"ALFD"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHH")
_META = struct.Struct("<IiiBB")


class EmptyMaskError(ValueError):
    """The window holds nothing that could be removed."""


class DatasetFormatError(ValueError):
    pass


class TaskKind(enum.Enum):
    CONTACT = "contact"
    VIA = "via"
    DUMMY_FINGER = "dummy_finger"
    NWELL = "nwell"
    METAL_ROUTE = "metal_route"

    @property
    def tag(self) -> int:
        """Meta-block code; 0 is reserved for pre-training samples."""
        return list(TaskKind).index(self) + 1

    @property
    def command_channels(self) -> int:
        return 2 if self is TaskKind.METAL_ROUTE else 0

    @property
    def layers(self) -> tuple[str, ...]:
        return {
            TaskKind.CONTACT: ("CONTACT",),
            TaskKind.VIA: ("VIA1", "VIA2", "VIA3"),
            TaskKind.DUMMY_FINGER: ("POLY",),
            TaskKind.NWELL: ("NWELL",),
            TaskKind.METAL_ROUTE: ("M1", "VIA1", "M2", "VIA2", "M3"),
        }[self]

    @classmethod
    def parse(cls, name: str) -> "TaskKind":
        key = name.strip().lower().replace("-", "").replace("_", "")
        for t in cls:
            if t.value.replace("_", "") == key:
                return t
        raise ValueError(f"unknown task {name!r}; choose from {[t.value for t in cls]}")


@dataclass(frozen=True)
class MaskSpec:
    layer: str
    rho: float = 0.5
    min_removed: int = 1

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"removal probability must be in (0, 1], got {self.rho}")


@dataclass(frozen=True)
class SampleMeta:
    cell: int
    origin_nm: Point
    task: int  # 0 pretrain, else TaskKind.tag
    layer: int  # masked layer index (first target layer for tasks)


@dataclass
class Sample:
    input: np.ndarray  # L×P×P uint8
    target: np.ndarray  # L×P×P uint8
    command: np.ndarray  # K×P×P uint8
    meta: SampleMeta


# ----------------------------------------------------------------------------
# windows


def _extent_px(layout: Layout, p: int) -> tuple[int, int, int, int]:
    bb = layout.bbox()
    if bb is None:
        return 0, 0, 0, 0
    return bb[0] // p, bb[1] // p, -(-bb[2] // p), -(-bb[3] // p)


def sample_random_windows(layout: Layout, n: int, grid: GridSpec, seed) -> list[Window]:
    """Pixel-aligned windows drawn uniformly from positions lying inside the layout box."""
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = _extent_px(layout, grid.pixel_nm)
    P = grid.patch_px
    xs = rng.integers(x0, max(x0, x1 - P) + 1, size=n)
    ys = rng.integers(y0, max(y0, y1 - P) + 1, size=n)
    p = grid.pixel_nm
    return [Window((int(x) * p, int(y) * p)) for x, y in zip(xs, ys)]


def _window_raster(layout: Layout, window: Window, grid: GridSpec, registry: LayerRegistry) -> np.ndarray:
    P = grid.patch_px
    return rasterize_region(layout, window.origin_nm, P, P, grid.pixel_nm, registry)


def _elements(layout: Layout, layer: str, window: Window, grid: GridSpec,
              pred: Callable[[int, Polygon, str], bool] | None = None) -> list[tuple[int, np.ndarray]]:
    """(polygon index, its clipped raster) for each polygon that sets a pixel in the window."""
    wx0, wy0, wx1, wy1 = window.bounds(grid)
    out = []
    P = grid.patch_px
    for i, (poly, tag) in enumerate(layout.items(layer)):
        bx0, by0, bx1, by1 = poly_bbox(poly)
        if bx1 <= wx0 or bx0 >= wx1 or by1 <= wy0 or by0 >= wy1:
            continue
        if pred is not None and not pred(i, poly, tag):
            continue
        r = rasterize_polygons([poly], window.origin_nm, P, P, grid.pixel_nm)
        if r.any():
            out.append((i, r))
    return out


def _layer_raster(polys, window: Window, grid: GridSpec) -> np.ndarray:
    P = grid.patch_px
    return rasterize_polygons(polys, window.origin_nm, P, P, grid.pixel_nm).astype(np.uint8)


def random_mask(layout: Layout, window: Window, spec: MaskSpec, grid: GridSpec,
                registry: LayerRegistry, seed, *, base: np.ndarray | None = None,
                cell: int = 0) -> Sample:
    """Remove each element of ``spec.layer`` with probability rho (at least one)."""
    elems = _elements(layout, spec.layer, window, grid)
    if not elems:
        raise EmptyMaskError(f"no {spec.layer} element in window at {window.origin_nm}")
    rng = np.random.default_rng(seed)
    chosen = rng.random(len(elems)) < spec.rho
    if chosen.sum() < spec.min_removed:
        pick = rng.choice(len(elems), size=min(spec.min_removed, len(elems)), replace=False)
        chosen[pick] = True
    removed = {elems[k][0] for k in np.flatnonzero(chosen)}
    original = base if base is not None else _window_raster(layout, window, grid, registry)
    li = registry.index(spec.layer)
    kept = [p for i, p in enumerate(layout.polygons(spec.layer)) if i not in removed]
    inp = original.copy()
    inp[li] = _layer_raster(kept, window, grid)
    tgt = np.zeros_like(original)
    tgt[li] = original[li] & (1 - inp[li])
    P = grid.patch_px
    return Sample(inp, tgt, np.zeros((0, P, P), np.uint8), SampleMeta(cell, window.origin_nm, 0, li))


# ----------------------------------------------------------------------------
# balanced layer schedule


def balanced_schedule(present: Sequence[Sequence[int]], per_window: int, n_layers: int,
                      ) -> tuple[list[list[int]], list[int]]:
    """Assign ``per_window`` maskings per window so layer counts differ by at most one.

    Returns (per-window layer lists, excluded layers). Solved as a feasible flow
    with lower bounds; layers that are too rare to reach the common count are
    dropped, rarest first, until the rest balance. A window left with no
    included layer gets no maskings.
    """
    W = len(present)
    included = sorted({l for s in present for l in s})
    excluded: list[int] = []
    if W == 0 or per_window == 0:
        return [[] for _ in range(W)], [l for l in range(n_layers) if l not in included]
    while included:
        sched = _flow_schedule(present, per_window, included)
        if sched is not None:
            never = [l for l in range(n_layers) if l not in included and l not in excluded]
            return sched, sorted(excluded + never)
        supply = {l: sum(per_window for s in present if l in s) for l in included}
        worst = min(included, key=lambda l: (supply[l], l))
        included.remove(worst)
        excluded.append(worst)
    raise EmptyMaskError("no window has a maskable layer")


def _flow_schedule(present, m: int, layers: list[int]) -> list[list[int]] | None:
    W, k = len(present), len(layers)
    N = sum(m for sw in present if any(l in layers for l in sw))
    q, r = divmod(N, k)
    lo_l, hi_l = q, q + (1 if r else 0)
    pos = {l: i for i, l in enumerate(layers)}
    # nodes: s=0, windows 1..W, layers W+1..W+k, t=W+k+1, S'=W+k+2, T'=W+k+3
    s, t = 0, W + k + 1
    S, T = t + 1, t + 2
    rows, cols, caps = [], [], []
    excess = np.zeros(T + 1, np.int64)

    def edge(u, v, lo, hi):
        if hi - lo > 0:
            rows.append(u), cols.append(v), caps.append(hi - lo)
        excess[v] += lo
        excess[u] -= lo

    win_edges = []
    for w, sw in enumerate(present):
        usable = [l for l in sw if l in pos]
        if not usable:
            continue
        edge(s, 1 + w, m, m)
        for l in usable:
            win_edges.append((1 + w, W + 1 + pos[l]))
            edge(1 + w, W + 1 + pos[l], 0, m)
    for l in layers:
        edge(W + 1 + pos[l], t, lo_l, hi_l)
    edge(t, s, 0, N)
    need = 0
    for v in range(T - 1):
        if excess[v] > 0:
            rows.append(S), cols.append(v), caps.append(int(excess[v]))
            need += int(excess[v])
        elif excess[v] < 0:
            rows.append(v), cols.append(T), caps.append(int(-excess[v]))
    # merge parallel edges by summing capacities
    g = csr_matrix((np.array(caps, np.int32), (np.array(rows), np.array(cols))), shape=(T + 1, T + 1))
    g.sum_duplicates()
    res = maximum_flow(g, S, T)
    if res.flow_value != need:
        return None
    flow = res.flow.tocsr() if hasattr(res, "flow") else res.residual.tocsr()
    out: list[list[int]] = [[] for _ in range(W)]
    for u, v in win_edges:
        f = int(flow[u, v])
        out[u - 1] += [layers[v - W - 1]] * f
    return out


# ----------------------------------------------------------------------------
# dataset container and file format


@dataclass
class Dataset:
    """Bit-packed samples; decoded per batch to keep memory small."""

    n_layers: int
    n_command: int
    patch_px: int
    packed: np.ndarray  # N × bytes_per_sample uint8
    meta: list[SampleMeta]
    manifest: dict = field(default_factory=dict)

    @property
    def bits_per_sample(self) -> int:
        return (2 * self.n_layers + self.n_command) * self.patch_px ** 2

    def __len__(self) -> int:
        return len(self.meta)

    @classmethod
    def empty(cls, n_layers: int, n_command: int, patch_px: int) -> "Dataset":
        nb = -(-((2 * n_layers + n_command) * patch_px ** 2) // 8)
        return cls(n_layers, n_command, patch_px, np.zeros((0, nb), np.uint8), [])

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], n_layers: int, n_command: int,
                     patch_px: int) -> "Dataset":
        ds = cls.empty(n_layers, n_command, patch_px)
        if samples:
            ds.packed = np.stack([pack_sample(s) for s in samples])
            ds.meta = [s.meta for s in samples]
        return ds

    def sample(self, i: int) -> Sample:
        L, K, P = self.n_layers, self.n_command, self.patch_px
        bits = np.unpackbits(self.packed[i], bitorder="little")[:self.bits_per_sample]
        arr = bits.reshape(2 * L + K, P, P)
        return Sample(arr[:L].copy(), arr[L:2 * L].copy(), arr[2 * L:].copy(), self.meta[i])

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """(model input with command channels appended, target) as float32."""
        L, K, P = self.n_layers, self.n_command, self.patch_px
        idx = np.asarray(idx)
        bits = np.unpackbits(self.packed[idx], axis=1, bitorder="little")[:, :self.bits_per_sample]
        arr = bits.reshape(len(idx), 2 * L + K, P, P).astype(np.float32)
        x = np.concatenate([arr[:, :L], arr[:, 2 * L:]], axis=1)
        return x, arr[:, L:2 * L]

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.n_layers, self.n_command, self.patch_px, self.packed[idx],
                       [self.meta[i] for i in idx], dict(self.manifest))


def pack_sample(s: Sample) -> np.ndarray:
    arr = np.concatenate([s.input, s.target, s.command], axis=0).astype(np.uint8)
    return np.packbits(arr.reshape(-1), bitorder="little")


def write_dataset(ds: Dataset, path, manifest: dict | None = None) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(ds), ds.n_layers, ds.n_command, ds.patch_px))
        for m, row in zip(ds.meta, ds.packed):
            f.write(_META.pack(m.cell, m.origin_nm[0], m.origin_nm[1], m.task, m.layer))
            f.write(row.tobytes())
    man = dict(ds.manifest if manifest is None else manifest)
    man.setdefault("count", len(ds))
    manifest_path(path).write_text(json.dumps(man, indent=1, sort_keys=True))
    return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetFormatError(f"dataset file too short for header ({len(data)} bytes)")
    magic, version, count, L, K, P = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError("bad magic at offset 0")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    ds = Dataset.empty(L, K, P)
    nb = ds.packed.shape[1]
    rec = _META.size + nb
    body = len(data) - _HEADER.size
    if body != count * rec:
        raise DatasetFormatError(f"expected {count} records of {rec} bytes after offset {_HEADER.size}, "
                                 f"found {body} bytes")
    raw = np.frombuffer(data, np.uint8, offset=_HEADER.size).reshape(count, rec)
    ds.packed = raw[:, _META.size:].copy()
    for k in range(count):
        c, ox, oy, task, layer = _META.unpack_from(data, _HEADER.size + k * rec)
        ds.meta.append(SampleMeta(c, (ox, oy), task, layer))
    mp = manifest_path(path)
    if mp.exists():
        ds.manifest = json.loads(mp.read_text())
    return ds


# ----------------------------------------------------------------------------
# builders


def _seed_for(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *keys])


def build_pretrain_dataset(corpus: Sequence, windows_per_cell: int, maskings_per_window: int,
                           grid: GridSpec, registry: LayerRegistry, seed: int = 0,
                           rho: float = 0.5, path=None) -> Dataset:
    """Randomly masked windows with per-layer counts balanced to within one."""
    if not corpus:
        raise ValueError("corpus is empty")
    L, P = len(registry), grid.patch_px
    windows: list[tuple[int, Window]] = []
    present: list[list[int]] = []
    bases: list[np.ndarray] = []
    for ci, item in enumerate(corpus):
        layout = item[0] if isinstance(item, tuple) else item
        wins = sample_random_windows(layout, windows_per_cell, grid, _seed_for(seed, ci, 0))
        for k, w in enumerate(wins):
            base = _window_raster(layout, w, grid, registry)
            layers = [l for l in range(L) if base[l].any()]
            tries = 0
            while not layers and tries < 100:  # an empty window cannot be masked; redraw
                tries += 1
                w = sample_random_windows(layout, 1, grid, _seed_for(seed, ci, 1, k, tries))[0]
                base = _window_raster(layout, w, grid, registry)
                layers = [l for l in range(L) if base[l].any()]
            windows.append((ci, w))
            present.append(layers)
            bases.append(np.packbits(base, axis=-1))
    schedule, excluded = balanced_schedule(present, maskings_per_window, L)
    samples: list[Sample] = []
    counts = np.zeros(L, np.int64)
    for wi, ((ci, w), layers) in enumerate(zip(windows, schedule)):
        layout = corpus[ci][0] if isinstance(corpus[ci], tuple) else corpus[ci]
        base = np.unpackbits(bases[wi], axis=-1)[..., :P]
        for j, li in enumerate(layers):
            s = random_mask(layout, w, MaskSpec(registry.names[li], rho), grid, registry,
                            _seed_for(seed, wi, j, 2), base=base, cell=ci)
            samples.append(s)
            counts[li] += 1
    ds = Dataset.from_samples(samples, L, 0, P)
    inc = [int(c) for l, c in enumerate(counts) if l not in excluded]
    ds.manifest = {
        "kind": "pretrain", "seed": seed, "windows_per_cell": windows_per_cell,
        "maskings_per_window": maskings_per_window, "rho": rho, "cells": len(corpus),
        "patch_px": P, "pixel_nm": grid.pixel_nm, "count": len(samples),
        "balance": {registry.names[l]: int(counts[l]) for l in range(L) if l not in excluded},
        "balance_spread": (max(inc) - min(inc)) if inc else 0,
        "excluded_layers": [registry.names[l] for l in excluded],
        "unmasked_windows": sum(1 for l in schedule if not l) if maskings_per_window else 0,
    }
    if path is not None:
        write_dataset(ds, path)
    return ds


@dataclass
class TaskRemoval:
    """What one fine-tune or benchmark sample removes from a layout."""

    removed: Layout
    kept: Layout
    command_points: tuple[Point, Point] | None = None
    anchor: Point = (0, 0)  # nm point the window must contain


def _center(poly: Polygon) -> Point:
    x0, y0, x1, y1 = poly_bbox(poly)
    return (x0 + x1) // 2, (y0 + y1) // 2


def route_nets(layout: Layout) -> list[str]:
    nets = {t.split(":", 1)[1] for tags in layout.tags.values() for t in tags if t.startswith("route:")}
    return sorted(nets, key=lambda n: (len(n), n))


def route_endpoints(layout: Layout, net: str, golden: GoldenNetlist | None = None) -> tuple[Point, Point]:
    """The two M1 stub-end pins of a routed net, in pin order."""
    pts = [p.at for p in layout.pins if p.net == net and p.layer == "M1"]
    if golden is not None and not pts:
        pts = [golden.pins[pid][1] for pid in golden.nets[net] if golden.pins[pid][0] == "M1"]
    if len(pts) < 2:
        raise ValueError(f"net {net} has fewer than two M1 pins")
    return pts[0], pts[-1]


def contact_groups(layout: Layout) -> list[list[int]]:
    """Contact indices grouped per terminal: same tag and same centre column."""
    groups: dict[tuple[str, int], list[int]] = {}
    for i, (poly, tag) in enumerate(layout.items("CONTACT")):
        groups.setdefault((tag, _center(poly)[0]), []).append(i)
    return [groups[k] for k in sorted(groups, key=lambda k: (min(groups[k]), k))]


def task_candidates(layout: Layout, task: TaskKind) -> list:
    """Independent removal units of the task in this layout."""
    if task is TaskKind.CONTACT:
        return contact_groups(layout)
    if task is TaskKind.VIA:
        return [(l, i) for l in ("VIA1", "VIA2", "VIA3") for i in range(len(layout.polygons(l)))]
    if task is TaskKind.DUMMY_FINGER:
        return [i for i, (_, t) in enumerate(layout.items("POLY")) if t == "dummy"]
    if task is TaskKind.NWELL:
        return list(range(len(layout.polygons("NWELL"))))
    return route_nets(layout)


def remove_for_task(layout: Layout, task: TaskKind, units: Sequence) -> TaskRemoval:
    """Remove the given candidate units (see ``task_candidates``)."""
    if task is TaskKind.CONTACT:
        idx = {i for g in units for i in g}
        kept, rem = layout.without(lambda l, i, p, t: l == "CONTACT" and i in idx)
    elif task is TaskKind.VIA:
        keys = set(map(tuple, units))
        kept, rem = layout.without(lambda l, i, p, t: (l, i) in keys)
    elif task is TaskKind.DUMMY_FINGER:
        idx = set(units)
        kept, rem = layout.without(lambda l, i, p, t: l == "POLY" and i in idx)
    elif task is TaskKind.NWELL:
        idx = set(units)
        kept, rem = layout.without(lambda l, i, p, t: l == "NWELL" and i in idx)
    else:
        nets = set(units)
        kept, rem = layout.without(lambda l, i, p, t: t.startswith("route:") and t[6:] in nets)
    cmd = None
    if task is TaskKind.METAL_ROUTE:
        cmd = route_endpoints(layout, list(units)[0])
    polys = [p for ps in rem.layers.values() for p in ps]
    anchor = _center(polys[0]) if polys else (0, 0)
    if cmd is not None:
        anchor = ((cmd[0][0] + cmd[1][0]) // 2, (cmd[0][1] + cmd[1][1]) // 2)
    return TaskRemoval(rem, kept, cmd, anchor)


def command_raster(points: tuple[Point, Point] | None, origin: Point, h: int, w: int,
                   pixel_nm: int) -> np.ndarray:
    """Two channels, each a 3×3 block centred on the pixel holding the start/end point."""
    out = np.zeros((2, h, w), np.uint8)
    if points is None:
        return out
    for k, (x, y) in enumerate(points):
        c = (x - origin[0]) // pixel_nm
        r = (y - origin[1]) // pixel_nm
        out[k, max(0, r - 1):max(0, r + 2), max(0, c - 1):max(0, c + 2)] = 1
    return out


def task_sample(removal: TaskRemoval, original: Layout, window: Window, grid: GridSpec,
                registry: LayerRegistry, task: TaskKind, cell: int) -> Sample:
    orig = _window_raster(original, window, grid, registry)
    inp = _window_raster(removal.kept, window, grid, registry)
    tgt = orig & (1 - inp)
    P = grid.patch_px
    if task.command_channels:
        cmd = command_raster(removal.command_points, window.origin_nm, P, P, grid.pixel_nm)
    else:
        cmd = np.zeros((0, P, P), np.uint8)
    return Sample(inp, tgt, cmd, SampleMeta(cell, window.origin_nm, task.tag,
                                            registry.index(task.layers[0])))


def _pick_units(task: TaskKind, cands: list, rng, rho: float) -> list:
    if task in (TaskKind.DUMMY_FINGER, TaskKind.NWELL):
        return list(cands)
    if task is TaskKind.METAL_ROUTE:
        return [cands[int(rng.integers(len(cands)))]]
    chosen = [c for c in cands if rng.random() < rho]
    return chosen or [cands[int(rng.integers(len(cands)))]]


def _window_around(anchor: Point, grid: GridSpec, rng,
                   keep: tuple[Point, ...] = ()) -> Window:
    """Random window holding the anchor pixel, and the 3×3 blocks around ``keep`` if they fit."""
    p, P = grid.pixel_nm, grid.patch_px
    c, r = anchor[0] // p, anchor[1] // p
    lo_x, hi_x, lo_y, hi_y = c - P + 1, c, r - P + 1, r
    if keep:
        cs = [x // p for x, _ in keep]
        rs = [y // p for _, y in keep]
        kx0, kx1 = max(cs) + 2 - P, min(cs) - 1
        ky0, ky1 = max(rs) + 2 - P, min(rs) - 1
        if kx0 <= kx1 and ky0 <= ky1:
            lo_x, hi_x, lo_y, hi_y = kx0, kx1, ky0, ky1
    ox = int(rng.integers(lo_x, hi_x + 1))
    oy = int(rng.integers(lo_y, hi_y + 1))
    return Window((ox * p, oy * p))


def _local_units(layout: Layout, task: TaskKind, cands: list, window: Window, grid: GridSpec) -> list:
    """Candidates with at least one pixel inside the window."""
    wx0, wy0, wx1, wy1 = window.bounds(grid)

    def polys_of(u):
        if task is TaskKind.CONTACT:
            return [layout.polygons("CONTACT")[i] for i in u]
        if task is TaskKind.VIA:
            return [layout.polygons(u[0])[u[1]]]
        if task is TaskKind.DUMMY_FINGER:
            return [layout.polygons("POLY")[u]]
        if task is TaskKind.NWELL:
            return [layout.polygons("NWELL")[u]]
        return [p for l in layout.layers for p, t in layout.items(l) if t == f"route:{u}"]

    out = []
    for u in cands:
        for poly in polys_of(u):
            if rasterize_polygons([poly], window.origin_nm, grid.patch_px, grid.patch_px,
                                  grid.pixel_nm).any():
                out.append(u)
                break
    return out


def build_finetune_dataset(corpus: Sequence, task: TaskKind, n: int, grid: GridSpec,
                           registry: LayerRegistry, seed: int = 0, rho: float = 0.5,
                           path=None, max_attempts_factor: int = 20) -> Dataset:
    """Windows centred on task elements; removal follows the task's rule."""
    task = TaskKind.parse(task) if isinstance(task, str) else task
    rng = np.random.default_rng(_seed_for(seed, task.tag))
    L, P, K = len(registry), grid.patch_px, task.command_channels
    layouts = [c[0] if isinstance(c, tuple) else c for c in corpus]
    pool = [(ci, task_candidates(lay, task)) for ci, lay in enumerate(layouts)]
    pool = [(ci, c) for ci, c in pool if c]
    samples: list[Sample] = []
    seen: set = set()
    attempts = 0
    warning = None
    if not pool:
        warning = f"corpus has no {task.value} elements"
    while pool and len(samples) < n:
        attempts += 1
        if attempts > max_attempts_factor * max(n, 1):
            warning = f"only {len(samples)} distinct windows found for {n} requested"
            break
        ci, cands = pool[int(rng.integers(len(pool)))]
        lay = layouts[ci]
        anchor_unit = cands[int(rng.integers(len(cands)))]
        probe = remove_for_task(lay, task, [anchor_unit])
        w = _window_around(probe.anchor, grid, rng, probe.command_points or ())
        if task is TaskKind.METAL_ROUTE:
            units = [anchor_unit]
        else:
            local = _local_units(lay, task, cands, w, grid)
            if not local:
                continue
            units = _pick_units(task, local, rng, rho)
        key = (ci, w.origin_nm, repr(units))
        if key in seen:
            continue
        removal = remove_for_task(lay, task, units)
        s = task_sample(removal, lay, w, grid, registry, task, ci)
        if not s.target.any():
            continue
        seen.add(key)
        samples.append(s)
    ds = Dataset.from_samples(samples, L, K, P)
    ds.manifest = {"kind": "finetune", "task": task.value, "seed": seed, "requested": n,
                   "count": len(samples), "rho": rho, "cells": len(layouts), "patch_px": P,
                   "pixel_nm": grid.pixel_nm, "warning": warning}
    if path is not None:
        write_dataset(ds, path)
    return ds
