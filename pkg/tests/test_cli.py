import json

import pytest

from layoutfm.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, RunConfig, main
from layoutfm.geometry import Layout

TINY = {
    "seed": 3, "patch_px": 16, "corpus_count": 3, "windows_per_cell": 2, "maskings_per_window": 1,
    "finetune_samples": 4, "bench_samples": 1, "compare_repeats": 1,
    "model": {"stem_channels": 8, "levels": 2, "res_blocks_per_level": 1},
    "train": {"epochs": 1, "batch_size": 4},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(TINY))
    return d


def run(work, *args):
    return main(["--config", str(work / "cfg.json"), *map(str, args)])


@pytest.fixture(scope="module")
def pipeline(work):
    steps = [
        ("gen-corpus", "--out", work / "corpus"),
        ("gen-corpus", "--out", work / "held", "--count", 2),
        ("make-pretrain", "--corpus", work / "corpus", "--out", work / "pre.alfd"),
        ("pretrain", "--data", work / "pre.alfd", "--out", work / "found.alfw", "--log", work / "pre.json"),
        ("make-finetune", "--task", "nwell", "--corpus", work / "corpus", "--out", work / "nw.alfd"),
        ("finetune", "--task", "NWell", "--foundation", work / "found.alfw", "--data", work / "nw.alfd",
         "--out", work / "nw.alfw", "--log", work / "ft.json"),
        ("infer", "--task", "nwell", "--weights", work / "nw.alfw",
         "--layout", work / "corpus" / "cell_0000.layout.json", "--out", work / "r.alfr",
         "--pgm-dir", work / "pgm"),
        ("legalize", "--raster", work / "r.alfr", "--task", "nwell", "--out", work / "leg.json"),
        ("bench", "--task", "nwell", "--weights", work / "nw.alfw", "--corpus", work / "held",
         "--csv", work / "b.csv", "--json", work / "b.json"),
        ("compare", "--task", "nwell", "--sizes", "2", "--foundation", work / "found.alfw",
         "--corpus", work / "corpus", "--heldout", work / "held", "--csv", work / "cmp.csv"),
        ("render", "--input", work / "corpus" / "cell_0000.layout.json", "--out", work / "c.svg"),
        ("render", "--input", work / "r.alfr", "--out", work / "pgm2"),
    ]
    return [(s[0], run(work, *s)) for s in steps]


def test_full_pipeline_exits_zero(pipeline, work):
    assert [c for _, c in pipeline] == [EXIT_OK] * len(pipeline)
    for f in ("found.alfw", "nw.alfw", "r.alfr", "leg.json", "b.csv", "b.json", "cmp.csv", "c.svg"):
        assert (work / f).exists(), f
    assert len(list((work / "pgm").glob("*.pgm"))) == 21
    assert json.loads((work / "ft.json").read_text())["kind"] == "finetune"


def test_verify_clean_and_mutated(pipeline, work, capsys):
    cell = work / "corpus" / "cell_0000"
    assert run(work, "verify", "--layout", f"{cell}.layout.json", "--netlist", f"{cell}.netlist.json") == EXIT_OK
    lay = Layout.load(f"{cell}.layout.json")
    lay.add("M1", ((0, 0), (10, 0), (10, 10), (0, 10)))
    lay.save(work / "bad.json")
    capsys.readouterr()
    assert run(work, "verify", "--layout", work / "bad.json") == EXIT_FAIL
    out = capsys.readouterr().out
    assert "M1.WIDTH" in out and out.strip().endswith("DRC violations") and "FAIL" in out


def test_route_infer_needs_points(pipeline, work):
    code = run(work, "infer", "--task", "metal_route", "--weights", work / "nw.alfw",
               "--layout", work / "corpus" / "cell_0000.layout.json", "--out", work / "x.alfr")
    assert code == EXIT_USAGE


def test_usage_errors(work, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sedd": 1}))
    assert main(["--config", str(bad), "gen-corpus", "--out", str(tmp_path / "c")]) == EXIT_USAGE
    assert main(["make-finetune", "--task", "bogus", "--corpus", "x", "--out", "y"]) == EXIT_USAGE
    assert main(["pretrain", "--data", str(tmp_path / "missing.alfd"), "--out", "w"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_config_echo(work, tmp_path, capsys):
    run(work, "--seed", 9, "gen-corpus", "--out", tmp_path / "c", "--count", 1)
    err = capsys.readouterr().err
    echoed = json.loads(err.strip().splitlines()[0])
    assert echoed["resolved_config"]["seed"] == 9 and echoed["resolved_config"]["patch_px"] == 16


def test_artifacts_deterministic(work, tmp_path):
    outs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        assert run(work, "gen-corpus", "--out", d / "corpus", "--count", 2) == EXIT_OK
        assert run(work, "make-pretrain", "--corpus", d / "corpus", "--out", d / "p.alfd") == EXIT_OK
        assert run(work, "pretrain", "--data", d / "p.alfd", "--out", d / "w.alfw") == EXIT_OK
        outs.append(d)
    for name in ("corpus/cell_0001.layout.json", "p.alfd", "w.alfw"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_run_config_round_trip():
    cfg = RunConfig.from_dict(TINY)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.train_config(finetune=True).lr == pytest.approx(cfg.train_config().lr / 10)
    assert cfg.model_config(2).command_channels == 2 and cfg.model_config().patch_px == 16
