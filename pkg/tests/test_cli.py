import json
import os
import shutil

import numpy as np
import pytest

from casl import ckpt
from casl.cli import main, report_text
from casl.pipeline import MANIFEST, STAGES


def _run(cfg, out, *extra):
    return main(["run", "--stage", "all", "--config", str(cfg), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    from conftest import TINY_CONFIG

    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    out = root / "run"
    assert _run(cfg, out) == 0
    return cfg, out


def test_run_all_builds_every_stage(tiny_run):
    _, out = tiny_run
    for s in STAGES:
        m = json.loads((out / s / MANIFEST).read_text())
        assert m["stage"] == s and m["artifacts"]
        for rel, h in m["artifacts"].items():
            assert ckpt.file_hash(out / s / rel) == h
    assert not list(out.glob(".*.*"))  # no temp dirs left behind


def test_rerun_is_noop(tiny_run, capsys):
    cfg, out = tiny_run
    before = {p: p.stat().st_mtime_ns for p in out.rglob("*")}
    assert _run(cfg, out) == 0
    assert "up-to-date" in capsys.readouterr().out
    assert {p: p.stat().st_mtime_ns for p in out.rglob("*")} == before


def test_changed_config_is_stale(tiny_run, tmp_path, capsys):
    cfg, out = tiny_run
    data = json.loads(cfg.read_text())
    data["align"] = {"epochs": 2}
    changed = tmp_path / "changed.json"
    changed.write_text(json.dumps(data))
    work = tmp_path / "run"
    shutil.copytree(out, work)
    assert main(["run", "--stage", "align", "--config", str(changed), "--out", str(work)]) == 3
    assert "--force" in capsys.readouterr().err
    assert main(["run", "--stage", "align", "--config", str(changed), "--out", str(work), "--force"]) == 0
    # downstream of the rebuilt stage is now stale
    assert main(["run", "--stage", "eval", "--config", str(changed), "--out", str(work)]) == 3


def test_missing_upstream_names_stage(tiny_run, tmp_path, capsys):
    cfg, out = tiny_run
    work = tmp_path / "run"
    shutil.copytree(out, work)
    shutil.rmtree(work / "align")
    assert main(["run", "--stage", "eval", "--config", str(cfg), "--out", str(work)]) == 2
    err = capsys.readouterr().err
    assert "align" in err and "casl run --stage align" in err


def test_usage_errors(tmp_path, tiny_config):
    assert main(["run", "--stage", "bogus", "--out", str(tmp_path)]) == 1
    assert main(["run"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1, "sae": {"lamda": 1}}')
    assert main(["run", "--stage", "gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["run", "--stage", "gen-data", "--config", str(tmp_path / "nope.json")]) == 1
    assert main(["run", "--stage", "gen-data", "--config", str(tiny_config), "--seed", "-1"]) == 1


def test_report_tables_and_determinism(tiny_run, capsys):
    _, out = tiny_run
    assert main(["report", "--out", str(out)]) == 0
    first = capsys.readouterr().out
    assert main(["report", "--out", str(out)]) == 0
    assert capsys.readouterr().out == first
    n_concepts = len(json.loads((out / "align" / MANIFEST).read_text())["config"]["align"]["concepts"])
    epr_block = first.split("\n\n")[0].splitlines()
    assert len(epr_block) - 3 == n_concepts
    assert "Probe accuracy" in first and "SAE sweep" in first


def test_report_on_empty_dir(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 2
    assert "eval" in capsys.readouterr().err


def test_steer_command(tiny_run, tmp_path):
    cfg, out = tiny_run
    src = tmp_path / "in"
    imgs = ckpt.load(out / "gen-data" / "corpus")[0]["images"][:2]
    for i, img in enumerate(imgs):
        ckpt.write_pgm(src / f"im{i}.pgm", img)
    dst = tmp_path / "out"
    code = main(["steer", "--run", str(out), "--config", str(cfg), "--concept", "1", "--alpha", "2", "--topk", "2", "--in", str(src), "--out", str(dst)])
    assert code == 0
    assert sorted(p.name for p in dst.glob("*.pgm")) == ["im0_orig.pgm", "im0_steered.pgm", "im1_orig.pgm", "im1_steered.pgm"]
    assert (dst / "trace.csv").exists() and (dst / "logits.csv").exists()
    assert main(["steer", "--run", str(out), "--config", str(cfg), "--concept", "1", "--in", str(tmp_path / "none"), "--out", str(dst)]) != 0


def test_lock_blocks_concurrent_run(tiny_run, tmp_path, capsys):
    cfg, out = tiny_run
    work = tmp_path / "run"
    shutil.copytree(out, work)
    (work / ".casl.lock").write_text(str(os.getppid()))
    assert _run(cfg, work) == 2
    assert "locked" in capsys.readouterr().err
    (work / ".casl.lock").write_text("999999999")  # dead pid: stale lock is cleared
    assert _run(cfg, work) == 0


def test_tiny_runs_are_byte_identical(tiny_run, tmp_path):
    cfg, out = tiny_run
    other = tmp_path / "again"
    assert _run(cfg, other) == 0
    files = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file() and p.suffix in (".bin", ".csv", ".json"))
    assert files
    for rel in files:
        assert (out / rel).read_bytes() == (other / rel).read_bytes(), rel
