import json
import subprocess
import sys

import numpy as np
import pytest

from cavlab import microcnn as mc
from cavlab import probes as P
from cavlab import tensor as T
from cavlab.cli import build_parser, main
from conftest import TINY_PIPELINE

SUBCOMMANDS = ("gen-corpus", "pretrain", "probe", "fp-cav", "curate", "report", "clm", "prototypes", "actmax",
               "tcav", "validate", "run")


def test_help_lists_every_subcommand(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for name in SUBCOMMANDS:
        assert name in out


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_subcommand_help_documents_flags(name, capsys):
    with pytest.raises(SystemExit) as e:
        main([name, "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[name]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in out
        if action.help is None and action.option_strings and action.dest != "help":
            pytest.fail(f"{name} {action.option_strings} has no help text")


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "cavlab.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-corpus" in r.stdout


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["gen-corpus", "--concept", "circle"]) == 1
    assert main(["gen-corpus", "--concept", "blob", "--out", "x"]) == 1


def test_config_validation_exits_1_before_any_work(tmp_path, capsys):
    bad = dict(TINY_PIPELINE, methods=[], output_dir=str(tmp_path / "out"))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(bad))
    assert main(["run", "--config", str(cfg)]) == 1
    assert not (tmp_path / "out").exists()
    log = [json.loads(line) for line in capsys.readouterr().err.splitlines()]
    assert log[-1]["error"] == "ConfigError"
    cfg.write_text("{not json")
    assert main(["run", "--config", str(cfg)]) == 1
    cfg.write_text(json.dumps(dict(TINY_PIPELINE, concepts=[])))
    assert main(["report", "--config", str(cfg), "--out", str(tmp_path / "r.csv")]) == 1


def test_numeric_failure_exits_3(tmp_path, capsys):
    code = main(["pretrain", "--lr", "1000", "--epochs", "1", "--n-images", "64", "--out", str(tmp_path / "m.cavm")])
    assert code == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert json.loads(err[-1])["error"] == "TrainingDiverged"


# --- validate -------------------------------------------------------------------


def _write_cav(tmp_path, name, w, pooled="none"):
    cav = P.Cav(weights=w, bias=0.1, method="clf", pooled=pooled)
    return P.save_cav(cav, tmp_path / name)


def test_validate_reports(tmp_path, rng, capsys):
    w = rng.normal(size=(4, 3, 3))
    good = _write_cav(tmp_path, "good", w / np.linalg.norm(w))
    assert main(["validate", str(good)]) == 0
    out = capsys.readouterr().out
    assert "ok" in out.lower() and "clf" in out

    half = _write_cav(tmp_path, "half", 0.5 * w / np.linalg.norm(w))
    assert main(["validate", str(half)]) != 0
    assert "norm is 0.5" in capsys.readouterr().out

    a = rng.normal(size=4)
    pw = T.expand(a, (3, 3))
    pw[2, 1, 1] += 0.3
    uneven = _write_cav(tmp_path, "uneven", pw / np.linalg.norm(pw), pooled="sum")
    assert main(["validate", str(uneven)]) != 0
    assert "not constant on channels [2]" in capsys.readouterr().out

    assert main(["validate", str(tmp_path / "missing.cav")]) == 2
    (tmp_path / "nomagic.cav").write_text((tmp_path / "good.cav").read_text())
    (tmp_path / "nomagic.cavt").write_bytes(b"JUNK" + good.with_suffix(".cavt").read_bytes()[4:])
    assert main(["validate", str(tmp_path / "nomagic.cav")]) != 0
    assert "magic" in capsys.readouterr().out


# --- single-step subcommands ---------------------------------------------------------


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A corpus with stored activations and an untrained model on disk."""
    root = tmp_path_factory.mktemp("cli")
    mc.save_model(mc.init_model(42), root / "m.cavm")
    args = ["gen-corpus", "--concept", "circle", "--rho", "0.95", "--seed", "7", "--n-train", "12", "--n-test", "6",
            "--n-buffer", "200", "--model", str(root / "m.cavm"), "--out", str(root / "corpus")]
    assert main(args) == 0
    return root


def test_probe_curate_and_validate(workspace, capsys):
    w = workspace
    common = ["--corpus", str(w / "corpus"), "--model", str(w / "m.cavm"), "--out", str(w / "cavs")]
    for method, pooled in (("clf", "none"), ("pat", "sum"), ("seg", "none"), ("mix", "none"), ("joint", "sum")):
        assert main(["probe", "--method", method, "--pooled", pooled] + common) == 0
    names = sorted(p.name for p in (w / "cavs").glob("*.cav"))
    assert names == ["circle_clf.cav", "circle_joint_sum.cav", "circle_mix.cav", "circle_pat_sum.cav", "circle_seg.cav"]
    assert main(["validate"] + [str(w / "cavs" / n) for n in names]) == 0
    assert main(["curate", "--cav", str(w / "cavs/circle_clf.cav"), "--reject", str(w / "cavs/circle_seg.cav"),
                 "--out", str(w / "cavs/cured.cav")]) == 0
    cured, seg = P.load_cav(w / "cavs/cured.cav"), P.load_cav(w / "cavs/circle_seg.cav")
    assert abs(T.dot(cured.weights.astype(np.float64), seg.weights.astype(np.float64))) <= 1e-6
    # mixing pooled with unpooled is a data error, not a crash
    assert main(["curate", "--cav", str(w / "cavs/circle_clf.cav"), "--reject", str(w / "cavs/circle_pat_sum.cav"),
                 "--out", str(w / "cavs/bad.cav")]) != 0


def test_probe_is_deterministic(workspace):
    w = workspace
    for out in ("d1", "d2"):
        assert main(["probe", "--method", "clf", "--corpus", str(w / "corpus"), "--model", str(w / "m.cavm"),
                     "--out", str(w / out)]) == 0
    assert (w / "d1/circle_clf.cavt").read_bytes() == (w / "d2/circle_clf.cavt").read_bytes()
    assert (w / "d1/circle_clf.cav").read_bytes() == (w / "d2/circle_clf.cav").read_bytes()


def test_viz_subcommands(workspace):
    w = workspace
    main(["probe", "--method", "clf", "--corpus", str(w / "corpus"), "--model", str(w / "m.cavm"), "--out", str(w / "v")])
    common = ["--cav", str(w / "v/circle_clf.cav"), "--model", str(w / "m.cavm")]
    corpus = ["--corpus", str(w / "corpus")]
    assert main(["clm"] + common + corpus + ["--count", "2", "--out", str(w / "clm")]) == 0
    assert len(list((w / "clm").glob("clm_*.png"))) == 2
    assert main(["prototypes"] + common + corpus + ["--k", "4", "--out", str(w / "proto")]) == 0
    ranked = json.loads((w / "proto/prototypes.json").read_text())
    assert len(ranked) == 4 and ranked[0]["cosine"] >= ranked[-1]["cosine"]
    assert main(["actmax"] + common + ["--steps", "2", "--out", str(w / "am.png")]) == 0
    assert (w / "am.png").read_bytes()[:4] == b"\x89PNG"
    assert main(["actmax"] + common + ["--steps", "0", "--out", str(w / "am0.png")]) != 0
    assert main(["tcav"] + common + corpus + ["--out", str(w / "tcav.csv")]) == 0
    rows = (w / "tcav.csv").read_text().splitlines()
    assert rows[0] == "class_index,class_name,score" and len(rows) == 9


def test_fp_cav_subcommand(workspace, capsys):
    w = workspace
    main(["probe", "--method", "clf", "--corpus", str(w / "corpus"), "--model", str(w / "m.cavm"), "--out", str(w / "f")])
    code = main(["fp-cav", "--cav", str(w / "f/circle_clf.cav"), "--corpus", str(w / "corpus"), "--model",
                 str(w / "m.cavm"), "--n", "3", "--out", str(w / "f/fp_circle.json")])
    assert code == 0
    rep = json.loads((w / "f/fp_circle.json").read_text())
    assert len(rep["false_positive_ids"]) == 3
    assert P.load_cav(w / "f/fp_circle.cav").method == "fp"
    code = main(["fp-cav", "--cav", str(w / "f/circle_clf.cav"), "--corpus", str(w / "corpus"), "--model",
                 str(w / "m.cavm"), "--n", "100000", "--out", str(w / "f/none.json")])
    assert code == 2
    assert "InsufficientFalsePositives" in capsys.readouterr().err


# --- full pipeline ----------------------------------------------------------------


def test_pipeline_layout_and_provenance(tiny_runs):
    _, a, _ = tiny_runs
    for stage in ("corpora", "model", "report", "fp", "viz"):
        prov = json.loads((a / stage / "provenance.json").read_text())
        assert {"stage_key", "config_hash", "tool_version", "seeds", "outputs"} <= set(prov)
    rows = (a / "report/report.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 5 * 2 * 1 * 1


def test_rerun_is_all_cached(tiny_runs, capsys):
    cfg, a, _ = tiny_runs
    before = {p: p.stat().st_mtime_ns for p in a.rglob("*") if p.is_file()}
    assert main(["run", "--config", str(cfg), "--out", str(a)]) == 0
    assert "all stages cached" in capsys.readouterr().out
    after = {p: p.stat().st_mtime_ns for p in a.rglob("*") if p.is_file()}
    assert before == after


def test_threads_do_not_change_outputs(tiny_runs):
    _, a, b = tiny_runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "config.json")
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "config.json")
    for rel in files:
        if rel.name == "provenance.json":
            continue
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_tampered_output_is_recomputed(tiny_runs, tmp_path, capsys):
    cfg, a, _ = tiny_runs
    import shutil

    c = tmp_path / "copy"
    shutil.copytree(a, c)
    original = (c / "report/report.csv").read_bytes()
    (c / "report/report.csv").write_text("garbage")
    assert main(["run", "--config", str(cfg), "--out", str(c)]) == 0
    assert "all stages cached" not in capsys.readouterr().out
    assert (c / "report/report.csv").read_bytes() == original
