"""Command-line driver for the whole workflow.

File formats:
  corpus directory   cell_NNNN.layout.json, cell_NNNN.netlist.json, corpus_manifest.json
  dataset            ALFD bit-packed samples plus <file>.manifest.json
  weights            ALFW (model fingerprint, named float32 tensors)
  raster             ALFR (C, H, W, origin, pixel pitch, float32 values)
  rule deck          JSON {pixel_nm, layers, cuts, well}
  run config         JSON, see ``RunConfig``; unknown keys are rejected

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a run depends on; CLI flags override individual fields."""

    seed: int = 0
    pixel_nm: int = 10
    patch_px: int = 64
    registry: str | None = None  # JSON list of layer names; None: the default 21
    rules: str | None = None  # rule deck JSON; None: the default deck
    model: dict = field(default_factory=dict)  # ModelConfig fields
    train: dict = field(default_factory=dict)  # TrainConfig fields for pre-training and scratch
    finetune_train: dict = field(default_factory=dict)  # overrides; lr defaults to train lr / 10
    corpus: dict = field(default_factory=dict)  # CellParams fields
    corpus_count: int = 100
    windows_per_cell: int = 8
    maskings_per_window: int = 4
    rho: float = 0.5
    finetune_samples: int = 256
    bench_samples: int = 100
    compare_repeats: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read run config {path}: {e}") from e
        if not isinstance(d, dict):
            raise UsageError("run config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    # resolved objects

    def grid(self):
        from .geometry import GridSpec
        return GridSpec(self.pixel_nm, self.patch_px)

    def layer_registry(self):
        from .geometry import LayerRegistry
        if self.registry is None:
            return LayerRegistry()
        return LayerRegistry(json.loads(Path(self.registry).read_text()))

    def rule_deck(self):
        from .verify import RuleDeck
        if self.rules is None:
            return RuleDeck.default(self.pixel_nm, self.layer_registry())
        return RuleDeck.load(self.rules)

    def model_config(self, command_channels: int = 0):
        from .unet import ModelConfig
        d = {**self.model, "command_channels": command_channels, "patch_px": self.patch_px,
             "in_channels": len(self.layer_registry())}
        cfg = ModelConfig.from_dict(d)
        cfg.validate()
        return cfg

    def train_config(self, finetune: bool = False):
        from .trainer import TrainConfig
        base = TrainConfig.from_dict({"seed": self.seed, **self.train})
        if finetune:
            ft = {"lr": base.lr / 10.0, **self.finetune_train}
            from dataclasses import replace
            return replace(base, **ft)
        return base

    def cell_params(self):
        from .synthgen import CellParams
        return CellParams.from_dict({"pixel_nm": self.pixel_nm, **self.corpus})


def _point(text: str):
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y in nm, got {text!r}")
    return x, y


def _sizes(text: str):
    try:
        out = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated sizes, got {text!r}")
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return out


def _task(text: str):
    from .datagen import TaskKind
    try:
        return TaskKind.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _echo(cfg: RunConfig, args) -> None:
    extra = {k: (str(v) if isinstance(v, Path) else getattr(v, "value", v))
             for k, v in vars(args).items() if k not in ("func", "config")}
    print(json.dumps({"resolved_config": cfg.to_dict(), "args": extra}, sort_keys=True, default=str),
          file=sys.stderr)


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(cfg: RunConfig, a) -> int:
    from .synthgen import generate_corpus, write_corpus
    cells = generate_corpus(a.count or cfg.corpus_count, cfg.cell_params(), cfg.seed)
    write_corpus(cells, a.out, cfg.cell_params(), cfg.seed)
    print(f"wrote {len(cells)} cells to {a.out}")
    return EXIT_OK


def _corpus(path):
    from .synthgen import read_corpus
    return read_corpus(path)


def cmd_make_pretrain(cfg: RunConfig, a) -> int:
    from .datagen import build_pretrain_dataset
    ds = build_pretrain_dataset(_corpus(a.corpus), cfg.windows_per_cell, cfg.maskings_per_window,
                                cfg.grid(), cfg.layer_registry(), cfg.seed, cfg.rho, a.out)
    print(f"wrote {len(ds)} samples to {a.out}; excluded layers: {ds.manifest['excluded_layers']}")
    return EXIT_OK


def cmd_make_finetune(cfg: RunConfig, a) -> int:
    from .datagen import build_finetune_dataset
    ds = build_finetune_dataset(_corpus(a.corpus), a.task, a.n or cfg.finetune_samples, cfg.grid(),
                                cfg.layer_registry(), cfg.seed, cfg.rho, a.out)
    print(f"wrote {len(ds)} {a.task.value} samples to {a.out}")
    if ds.manifest.get("warning"):
        print(f"warning: {ds.manifest['warning']}", file=sys.stderr)
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, a) -> int:
    from .datagen import read_dataset
    from .trainer import pretrain
    ds = read_dataset(a.data)
    _, log = pretrain(ds, cfg.model_config(), cfg.train_config(), a.out)
    if a.log:
        log.save(a.log)
    for e in log.epochs:
        print(f"epoch {e['epoch']}: train {e['train_loss']:.4f} val {e['val_loss']}")
    return EXIT_OK


def _load_model(cfg: RunConfig, path, command_channels: int):
    from .unet import load_weights
    return load_weights(path, cfg.model_config(command_channels))


def cmd_finetune(cfg: RunConfig, a) -> int:
    from .datagen import read_dataset
    from .trainer import finetune
    from .unet import read_weights
    ds = read_dataset(a.data)
    _, found = read_weights(a.foundation)
    _, log = finetune(found, cfg.model_config(), ds, cfg.model_config(a.task.command_channels),
                      cfg.train_config(finetune=True), a.out, task=a.task.value)
    if a.log:
        log.save(a.log)
    for e in log.epochs:
        print(f"epoch {e['epoch']}: train {e['train_loss']:.4f} val {e['val_loss']}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, a) -> int:
    from .geometry import Layout
    from .stitch import infer_full
    if a.task.command_channels and (a.start is None or a.end is None):
        raise UsageError(f"--task {a.task.value} needs --start x,y and --end x,y")
    model = _load_model(cfg, a.weights, a.task.command_channels)
    pts = (a.start, a.end) if a.task.command_channels else None
    fr = infer_full(model, Layout.load(a.layout), cfg.grid(), cfg.layer_registry(), pts)
    fr.save(a.out)
    if a.pgm_dir:
        fr.save_pgm(a.pgm_dir, cfg.layer_registry())
    print(f"wrote {fr.values.shape} raster to {a.out}")
    return EXIT_OK


def cmd_legalize(cfg: RunConfig, a) -> int:
    from .geometry import Layout
    from .legalize import LegalizeParams, legalize_raster
    from .stitch import FullRaster
    fr = FullRaster.load(a.raster)
    layers = a.task.layers if a.task else [l for l in a.layers.split(",") if l]
    if not layers:
        raise UsageError("give --task or --layers")
    pred = legalize_raster(fr.values, layers, cfg.rule_deck(), cfg.layer_registry(), fr.origin_nm,
                           fr.pixel_nm, LegalizeParams(threshold=a.threshold))
    if a.base:
        pred = Layout.load(a.base).merged(pred)
    pred.save(a.out)
    print(f"wrote {pred.count()} polygons to {a.out}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, a) -> int:
    from .geometry import Layout
    from .verify import GoldenNetlist, drc_check, lvs_check
    lay = Layout.load(a.layout)
    reg = cfg.layer_registry()
    viol = drc_check(lay, cfg.rule_deck(), reg)
    for v in viol:
        print(json.dumps(v.to_dict(), sort_keys=True))
    ok = not viol
    if a.netlist:
        res = lvs_check(lay, GoldenNetlist.from_json(Path(a.netlist).read_text()), reg)
        for n in res.opens:
            print(f"open: {n}")
        for s in res.shorts:
            print(f"short: {s[0]} {s[1]}")
        for p in res.uncovered_pins:
            print(f"uncovered pin: {p}")
        ok = ok and res.passed
    print(f"{'PASS' if ok else 'FAIL'}: {len(viol)} DRC violations")
    return EXIT_OK if ok else EXIT_FAIL


def _bench(cfg: RunConfig, task, model, corpus_dir, n):
    from .benchmark import build_benchmark, run_benchmark
    samples = build_benchmark(_corpus(corpus_dir), task, n, cfg.seed)
    return run_benchmark(task, model, samples, cfg.rule_deck(), grid=cfg.grid(),
                         registry=cfg.layer_registry())


def cmd_bench(cfg: RunConfig, a) -> int:
    model = _load_model(cfg, a.weights, a.task.command_channels)
    rep = _bench(cfg, a.task, model, a.corpus, a.n or cfg.bench_samples)
    rep.write(a.csv, a.json)
    print(json.dumps(rep.summary(), sort_keys=True))
    return EXIT_OK


def cmd_compare(cfg: RunConfig, a) -> int:
    from .datagen import build_finetune_dataset
    from .trainer import compare_scratch_vs_finetune
    from .unet import read_weights
    train = _corpus(a.corpus)
    grid, reg = cfg.grid(), cfg.layer_registry()
    _, found = read_weights(a.foundation)
    repeats = a.repeats or cfg.compare_repeats

    def make(size, seed):
        return build_finetune_dataset(train, a.task, size, grid, reg, seed, cfg.rho)

    def score(model):
        return _bench(cfg, a.task, model, a.heldout, a.n or cfg.bench_samples).score()

    rows = compare_scratch_vs_finetune(
        a.task.value, a.sizes, repeats, [cfg.seed + r for r in range(repeats)], make, found,
        cfg.model_config(), cfg.model_config(a.task.command_channels), cfg.train_config(),
        score, cfg.train_config(finetune=True), a.csv)
    for r in rows:
        print(f"{r.variant} size={r.size} repeat={r.repeat} score={r.score:.4f} "
              f"epochs_to_threshold={r.epochs_to_threshold}")
    return EXIT_OK


def cmd_render(cfg: RunConfig, a) -> int:
    from .geometry import Layout, render_svg
    from .stitch import FullRaster
    if a.input.endswith(".json"):
        Path(a.out).write_text(render_svg(Layout.load(a.input), cfg.layer_registry()))
        print(f"wrote {a.out}")
    else:
        paths = FullRaster.load(a.input).save_pgm(a.out, cfg.layer_registry())
        print(f"wrote {len(paths)} PGM images to {a.out}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layoutfm", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="numeric worker threads (results do not depend on it)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        s = sub.add_parser(name, help=help)
        s.set_defaults(func=func)
        return s

    s = add("gen-corpus", cmd_gen_corpus, "generate DRC/LVS-clean synthetic cells")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int)

    s = add("make-pretrain", cmd_make_pretrain, "build the masked pre-training dataset")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)

    s = add("make-finetune", cmd_make_finetune, "build a task dataset")
    s.add_argument("--task", type=_task, required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)

    s = add("pretrain", cmd_pretrain, "train the foundation model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")

    s = add("finetune", cmd_finetune, "fine-tune the foundation model on a task")
    s.add_argument("--task", type=_task, required=True)
    s.add_argument("--foundation", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")

    s = add("infer", cmd_infer, "predict missing shapes over a whole layout")
    s.add_argument("--task", type=_task, required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--layout", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--start", type=_point)
    s.add_argument("--end", type=_point)
    s.add_argument("--pgm-dir")

    s = add("legalize", cmd_legalize, "turn a probability raster into polygons")
    s.add_argument("--raster", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--task", type=_task)
    s.add_argument("--layers", default="")
    s.add_argument("--base", help="layout to merge the legalized shapes into")
    s.add_argument("--threshold", type=float, default=0.5)

    s = add("verify", cmd_verify, "run DRC-lite and, with --netlist, LVS-lite")
    s.add_argument("--layout", required=True)
    s.add_argument("--netlist")

    s = add("bench", cmd_bench, "score a task model on held-out cells")
    s.add_argument("--task", type=_task, required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--csv")
    s.add_argument("--json")

    s = add("compare", cmd_compare, "fine-tuning versus training from scratch")
    s.add_argument("--task", type=_task, required=True)
    s.add_argument("--sizes", type=_sizes, required=True)
    s.add_argument("--foundation", required=True)
    s.add_argument("--corpus", required=True, help="training cells")
    s.add_argument("--heldout", required=True, help="benchmark cells")
    s.add_argument("--repeats", type=int)
    s.add_argument("--n", type=int, help="benchmark samples per score")
    s.add_argument("--csv")

    s = add("render", cmd_render, "layout JSON to SVG, or raster to per-layer PGM images")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    return p


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if a.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    _set_threads(a.threads)
    from .datagen import DatasetFormatError
    from .geometry import LayoutError
    from .nn.tensor import ConfigError, DimensionError
    try:
        cfg = RunConfig.load(a.config) if a.config else RunConfig()
        if a.seed is not None:
            cfg.seed = a.seed
        _echo(cfg, a)
        return a.func(cfg, a)
    except (UsageError, ConfigError, DimensionError, DatasetFormatError, LayoutError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e, UsageError):
            parser.print_usage(sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
