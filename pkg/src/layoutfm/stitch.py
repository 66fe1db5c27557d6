"""Whole-layout inference on two half-offset slicing grids, blended per pixel."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import command_raster
from .geometry import GridSpec, LayerRegistry, Layout, Point, rasterize_region

MAGIC = b"ALFR"
VERSION = 1
_HEAD = struct.Struct("<4sIIIIiiI")


class MissingCommandError(ValueError):
    pass


@dataclass(frozen=True)
class SliceGrid:
    offset_px: int
    origins: tuple[tuple[int, int], ...]  # (row, col) of each window, row-major
    extent: tuple[int, int]
    patch_px: int

    @property
    def shape(self) -> tuple[int, int]:
        rows = sorted({r for r, _ in self.origins})
        cols = sorted({c for _, c in self.origins})
        return len(rows), len(cols)


def make_double_grids(extent_px, patch_px: int) -> tuple[SliceGrid, SliceGrid]:
    """Grid A tiles from (0, 0); grid B is shifted by half a patch and has one more window per axis."""
    if patch_px % 2:
        raise ValueError("patch_px must be even")
    h, w = (extent_px, extent_px) if np.isscalar(extent_px) else extent_px
    P = patch_px
    ny, nx = max(1, -(-h // P)), max(1, -(-w // P))
    a = tuple((r * P, c * P) for r in range(ny) for c in range(nx))
    half = P // 2
    b = tuple((r * P - half, c * P - half) for r in range(ny + 1) for c in range(nx + 1))
    return SliceGrid(0, a, (h, w), P), SliceGrid(-half, b, (h, w), P)


def border_weight(h: int, w: int, offset: int, patch_px: int) -> np.ndarray:
    """Per-pixel dx + dy: distances to the nearest vertical and horizontal border of the window."""
    P = patch_px
    ys = (np.arange(h) - offset) % P
    xs = (np.arange(w) - offset) % P
    dy = np.minimum(ys, P - ys)
    dx = np.minimum(xs, P - xs)
    return (dy[:, None] + dx[None, :]).astype(np.float64)


def combine_double(value_a, weight_a, value_b, weight_b):
    """Weighted blend; falls back to the plain mean where both weights vanish."""
    va, vb = np.asarray(value_a, np.float64), np.asarray(value_b, np.float64)
    wa, wb = np.asarray(weight_a, np.float64), np.asarray(weight_b, np.float64)
    tot = wa + wb
    safe = np.where(tot > 0, tot, 1.0)
    blended = (wa * va + wb * vb) / safe
    return np.where(tot > 0, blended, 0.5 * (va + vb))


@dataclass
class FullRaster:
    values: np.ndarray  # C×H×W float32 in [0, 1]
    origin_nm: Point = (0, 0)
    pixel_nm: int = 10

    def to_pgm(self, channel: int) -> bytes:
        img = np.clip(np.rint(self.values[channel] * 255.0), 0, 255).astype(np.uint8)[::-1]
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()

    def save_pgm(self, directory, registry: LayerRegistry | None = None) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = registry.names if registry else [str(i) for i in range(len(self.values))]
        out = []
        for i, name in enumerate(names[:len(self.values)]):
            path = d / f"{name}.pgm"
            path.write_bytes(self.to_pgm(i))
            out.append(path)
        return out

    def save(self, path) -> None:
        c, h, w = self.values.shape
        head = _HEAD.pack(MAGIC, VERSION, c, h, w, self.origin_nm[0], self.origin_nm[1], self.pixel_nm)
        Path(path).write_bytes(head + np.ascontiguousarray(self.values, "<f4").tobytes())

    @classmethod
    def load(cls, path) -> "FullRaster":
        data = Path(path).read_bytes()
        if len(data) < _HEAD.size:
            raise ValueError("raster file shorter than its header")
        magic, ver, c, h, w, ox, oy, p = _HEAD.unpack_from(data)
        if magic != MAGIC or ver != VERSION:
            raise ValueError("not an ALFR v1 raster")
        want = _HEAD.size + 4 * c * h * w
        if len(data) != want:
            raise ValueError(f"raster payload is {len(data) - _HEAD.size} bytes, expected {want - _HEAD.size}")
        vals = np.frombuffer(data, "<f4", offset=_HEAD.size).reshape(c, h, w).astype(np.float32)
        return cls(vals, (ox, oy), p)


def _command_count(model) -> int:
    cfg = getattr(model, "config", None)
    return int(getattr(cfg, "command_channels", getattr(model, "command_channels", 0)))


def _run_grid(model, layout: Layout, g: SliceGrid, grid: GridSpec, registry: LayerRegistry,
              command_points, batch: int) -> tuple[np.ndarray, int]:
    """Predictions of every window pasted into a canvas aligned to the grid's first origin."""
    P, p = g.patch_px, grid.pixel_nm
    K = _command_count(model)
    rows = sorted({r for r, _ in g.origins})
    cols = sorted({c for _, c in g.origins})
    canvas = None
    for i in range(0, len(g.origins), batch):
        chunk = g.origins[i:i + batch]
        xs = []
        for r, c in chunk:
            origin = (c * p, r * p)
            x = rasterize_region(layout, origin, P, P, p, registry).astype(np.float32)
            if K:
                x = np.concatenate([x, command_raster(command_points, origin, P, P, p).astype(np.float32)])
            xs.append(x)
        if getattr(model, "wants_origins", False):
            out = model.predict(np.stack(xs), origins=[(c * p, r * p) for r, c in chunk])
        else:
            out = model.predict(np.stack(xs))
        out = np.asarray(out, np.float32)
        if canvas is None:
            canvas = np.zeros((out.shape[1], len(rows) * P, len(cols) * P), np.float32)
        for (r, c), o in zip(chunk, out):
            rr, cc = r - rows[0], c - cols[0]
            canvas[:, rr:rr + P, cc:cc + P] = o
    return canvas, rows[0]


def infer_full(model, layout: Layout, grid: GridSpec, registry: LayerRegistry | None = None,
               command_points: tuple[Point, Point] | None = None, use_grid_b: bool = True,
               batch: int = 8, extent_px: tuple[int, int] | None = None) -> FullRaster:
    """Model probabilities over the whole layout extent (or ``extent_px`` from the origin)."""
    registry = registry or LayerRegistry()
    if _command_count(model) and command_points is None:
        raise MissingCommandError("this model needs start/end command points")
    h, w = extent_px or layout.extent_px(grid.pixel_nm)
    h, w = max(h, 1), max(w, 1)
    ga, gb = make_double_grids((h, w), grid.patch_px)
    ca, _ = _run_grid(model, layout, ga, grid, registry, command_points, batch)
    va = ca[:, :h, :w]
    if not use_grid_b:
        return FullRaster(np.clip(va, 0, 1).astype(np.float32), (0, 0), grid.pixel_nm)
    cb, ob = _run_grid(model, layout, gb, grid, registry, command_points, batch)
    vb = cb[:, -ob:-ob + h, -ob:-ob + w]
    wa = border_weight(h, w, 0, grid.patch_px)
    wb = border_weight(h, w, gb.offset_px, grid.patch_px)
    out = combine_double(va, wa[None], vb, wb[None])
    return FullRaster(np.clip(out, 0, 1).astype(np.float32), (0, 0), grid.pixel_nm)


def border_discontinuity(values: np.ndarray, patch_px: int) -> float:
    """Mean absolute jump across grid-A window borders (interior borders only)."""
    P = patch_px
    values = np.asarray(values, np.float64)
    diffs = []
    for x in range(P, values.shape[-1], P):
        diffs.append(np.abs(values[..., :, x] - values[..., :, x - 1]).ravel())
    for y in range(P, values.shape[-2], P):
        diffs.append(np.abs(values[..., y, :] - values[..., y - 1, :]).ravel())
    if not diffs:
        return 0.0
    return float(np.concatenate(diffs).mean())
