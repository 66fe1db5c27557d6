"""Held-out task benchmarks: infer on the whole cell, legalize, verify, score."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import TaskKind, TaskRemoval, remove_for_task, task_candidates
from .geometry import GridSpec, LayerRegistry, Layout, rasterize_polygons
from .legalize import LegalizeParams, ViaCandidate, extract_via_candidates, legalize_raster
from .stitch import infer_full
from .verify import GoldenNetlist, RuleDeck, dice, drc_check, iou, lvs_check, success_topk

DEFAULT_K = {TaskKind.CONTACT: 1, TaskKind.VIA: 10}


@dataclass
class BenchSample:
    cell: int
    layout: Layout  # the complete cell
    golden: GoldenNetlist
    removal: TaskRemoval


def build_benchmark(corpus: Sequence, task: TaskKind, n: int, seed: int = 0) -> list[BenchSample]:
    """One removal per sample: a terminal's contacts, one via, all dummies, the N-well, or one route."""
    task = TaskKind.parse(task) if isinstance(task, str) else task
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99, task.tag]))
    units = []
    for ci, (lay, net) in enumerate(corpus):
        cands = task_candidates(lay, task)
        if not cands:
            continue
        if task in (TaskKind.NWELL, TaskKind.DUMMY_FINGER):
            units.append((ci, tuple(cands)))
        else:
            units += [(ci, (c,)) for c in cands]
    if not units:
        return []
    order = rng.permutation(len(units))
    picks = [units[i] for i in order[:n]]
    while len(picks) < n:  # fewer distinct units than requested: reuse in a fixed order
        picks.append(units[order[len(picks) % len(units)]])
    out = []
    for ci, u in picks:
        lay, net = corpus[ci]
        out.append(BenchSample(ci, lay, net, remove_for_task(lay, task, list(u))))
    return out


@dataclass
class SampleResult:
    sample: int
    task: str
    passed: bool
    n_violations: int
    iou: float
    dice: float
    checks: int = 0


@dataclass
class BenchmarkReport:
    task: str
    rows: list[SampleResult] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return sum(r.passed for r in self.rows) / len(self.rows) if self.rows else 0.0

    @property
    def mean_iou(self) -> float:
        return float(np.mean([r.iou for r in self.rows])) if self.rows else 0.0

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r.dice for r in self.rows])) if self.rows else 0.0

    def score(self) -> float:
        """Headline number: success ratio for cut tasks, IoU for fill tasks, dice for routes."""
        t = TaskKind.parse(self.task)
        if t in (TaskKind.CONTACT, TaskKind.VIA):
            return self.ratio
        if t is TaskKind.METAL_ROUTE:
            return self.mean_dice
        return self.mean_iou

    def summary(self) -> dict:
        return {"task": self.task, "n": len(self.rows), "ratio": self.ratio, "mean_iou": self.mean_iou,
                "mean_dice": self.mean_dice, "score": self.score()}

    def write(self, csv_path=None, json_path=None) -> None:
        if csv_path is not None:
            with open(csv_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["sample", "task", "pass", "n_violations", "iou", "dice"])
                for r in self.rows:
                    w.writerow([r.sample, r.task, int(r.passed), r.n_violations,
                                f"{r.iou:.6f}", f"{r.dice:.6f}"])
        if json_path is not None:
            d = self.summary()
            d["samples"] = [asdict(r) for r in self.rows]
            Path(json_path).write_text(json.dumps(d, indent=1, sort_keys=True))


def _stack(layout: Layout, layers: Sequence[str], shape, p: int) -> np.ndarray:
    return np.stack([rasterize_polygons(layout.polygons(l), (0, 0), shape[0], shape[1], p)
                     for l in layers])


def _verify(layout: Layout, golden: GoldenNetlist, rules: RuleDeck, registry) -> tuple[bool, int]:
    v = drc_check(layout, rules, registry)
    ok = not v and lvs_check(layout, golden, registry).passed
    return ok, len(v)


def evaluate_sample(task: TaskKind, model, s: BenchSample, rules: RuleDeck, grid: GridSpec,
                    registry: LayerRegistry, k: int, params: LegalizeParams, index: int = 0) -> SampleResult:
    kept = s.removal.kept
    fr = infer_full(model, kept, grid, registry, s.removal.command_points,
                    extent_px=s.layout.extent_px(grid.pixel_nm))
    shape = fr.values.shape[1:]
    p = grid.pixel_nm
    layers = task.layers
    truth = _stack(s.removal.removed, layers, shape, p)
    pred = legalize_raster(fr.values, layers, rules, registry, (0, 0), p, params)
    pm = _stack(pred, layers, shape, p)
    overlap = iou(pm, truth), dice(pm, truth)
    if task in (TaskKind.CONTACT, TaskKind.VIA):
        cands: list[ViaCandidate] = []
        for l in layers:
            if l in registry and l in rules.cuts:
                cands += extract_via_candidates(fr.values[registry.index(l)], l, rules, params, p)
        cands.sort(key=lambda c: (-c.score, c.center_nm[1], c.center_nm[0]))
        last_viol = [0]

        def check(c: ViaCandidate) -> bool:
            trial = kept.copy()
            trial.add(c.layer, c.shape, "predicted")
            ok, nv = _verify(trial, s.golden, rules, registry)
            last_viol[0] = nv
            return ok

        passed, checks = success_topk(cands, k, check)
        return SampleResult(index, task.value, passed, last_viol[0], *overlap, checks)
    ok, nv = _verify(kept.merged(pred), s.golden, rules, registry)
    return SampleResult(index, task.value, ok, nv, *overlap, 1)


def run_benchmark(task, model, samples: Sequence[BenchSample], rules: RuleDeck,
                  k: int | None = None, grid: GridSpec | None = None,
                  registry: LayerRegistry | None = None,
                  params: LegalizeParams | None = None) -> BenchmarkReport:
    task = TaskKind.parse(task) if isinstance(task, str) else task
    registry = registry or LayerRegistry()
    cfg = getattr(model, "config", None)
    grid = grid or GridSpec(rules.pixel_nm, getattr(cfg, "patch_px", 64))
    params = params or LegalizeParams()
    k = DEFAULT_K.get(task, 1) if k is None else k
    rep = BenchmarkReport(task.value)
    for i, s in enumerate(samples):
        rep.rows.append(evaluate_sample(task, model, s, rules, grid, registry, k, params, i))
    return rep


class OracleModel:
    """Stub that returns exactly the removed shapes for each window it is shown."""

    wants_origins = True

    def __init__(self, removed: Layout, registry: LayerRegistry, grid: GridSpec, command_channels: int = 0):
        self.removed, self.registry, self.grid = removed, registry, grid
        self.command_channels = command_channels

    def predict(self, x: np.ndarray, origins=None) -> np.ndarray:
        from .geometry import rasterize_region
        P, p = self.grid.patch_px, self.grid.pixel_nm
        return np.stack([rasterize_region(self.removed, o, P, P, p, self.registry).astype(np.float32)
                         for o in origins])


class ZeroModel:
    """Stub that never predicts anything."""

    def __init__(self, n_layers: int = 21, command_channels: int = 0):
        self.n_layers, self.command_channels = n_layers, command_channels

    def predict(self, x: np.ndarray, origins=None) -> np.ndarray:
        return np.zeros((len(x), self.n_layers) + x.shape[2:], np.float32)
