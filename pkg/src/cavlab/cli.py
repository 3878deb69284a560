"""Command-line entry point: ``cavlab <subcommand> ...``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric failure.
Progress is logged to stderr as one JSON object per line.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as me
from . import microcnn as mc
from . import misalign as ma
from . import probes as P
from . import synthcorpus as sc
from . import viz as V
from .errors import CavlabError
from .pipeline import (
    ConfigError,
    ExperimentConfig,
    StageError,
    build_corpus,
    build_model,
    cav_name,
    class_names,
    run_pipeline,
    threads,
    validate_cav_file,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(rec):
    print(json.dumps(rec, sort_keys=True, default=str), file=sys.stderr, flush=True)


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _model(path):
    return mc.load_model(path) if path else None


def _corpus(path):
    return sc.ingest_external(path)


# --- subcommands -----------------------------------------------------------------


def cmd_gen_corpus(a):
    spec = sc.ConceptSpec(a.concept, fill_style=a.fill, min_area_fraction=a.min_area)
    counts = sc.Counts(a.n_train, a.n_train, a.n_test, a.n_test, a.n_buffer)
    corpus = sc.generate(spec, sc.SpuriousSpec(a.cue, a.rho), counts, seed=a.seed,
                         negative_shape_prob=a.negative_shape_prob)
    if a.model:
        corpus.activations = corpus.features(_model(a.model))
    sc.export_corpus(corpus, a.out)
    corr, mi = sc.cue_label_stats(corpus)
    _log(dict(event="corpus", out=a.out, n=len(corpus), cue_label_corr=corr, cue_label_mi=mi))
    return 0


def cmd_pretrain(a):
    data = _corpus(a.corpus) if a.corpus else sc.generate_classification(a.n_images, seed=a.seed)
    task = mc.PretrainTask(epochs=a.epochs, learning_rate=a.lr, batch_size=a.batch_size, seed=a.seed)
    model = mc.pretrain(task, data, log=_log)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    mc.save_model(model, a.out)
    _log(dict(event="saved", out=a.out))
    return 0


def cmd_probe(a):
    corpus = _corpus(a.corpus)
    model = _model(a.model)
    data = me.training_view(corpus, model)
    pool = min(len(corpus.indices("train", True)), len(corpus.indices("train", False)))
    n = a.train_size or pool
    cfg = P.ProbeConfig(beta=a.beta, pooled=a.pooled)
    cav = me.train_cell_cavs(data, [a.method], a.pooled, n, 0, a.seed, cfg)[a.method]
    if isinstance(cav, Exception):
        raise cav
    name = a.name or cav_name(corpus.concept_id or "concept", a.method, a.pooled)
    path = P.save_cav(cav, Path(a.out) / name)
    acc = me.accuracy(cav, data.Z[data.test_pos], data.Z[data.test_neg]) if len(data.test_pos) else None
    _log(dict(event="probe", out=str(path), test_accuracy=acc, iterations=cav.diagnostics.get("iterations")))
    return 0


def cmd_fp_cav(a):
    v_clf = P.load_cav(a.cav)
    corpus = _corpus(a.corpus)
    v_fp, report = ma.fp_cav_from_corpus(v_clf, corpus, _model(a.model), N=a.n)
    _write_json(a.out, report.to_dict())
    P.save_cav(v_fp, Path(a.out).with_suffix(".cav"))
    _log(dict(event="fp_cav", acc_clf=report.acc_clf, acc_fp=report.acc_fp, cosine=report.cosine))
    return 0


def cmd_curate(a):
    cav = ma.reject(P.load_cav(a.cav), P.load_cav(a.reject))
    path = P.save_cav(cav, a.out)
    _log(dict(event="curate", out=str(path)))
    return 0


def cmd_report(a):
    cfg = ExperimentConfig.load(a.config)
    model = _model(a.model) or build_model(cfg, log=_log)
    corpora = {s.concept_id: build_corpus(cfg, s) for s in cfg.concepts}
    report, cavs = me.run_report(corpora, model, methods=cfg.methods, train_sizes=cfg.train_sizes,
                                 repeats=cfg.repeats, seed=cfg.sweep_seed(), poolings=cfg.pooling, log=_log,
                                 workers=threads())
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(a.out)
    if a.cavs:
        for cell, cav in sorted(cavs.items()):
            P.save_cav(cav, Path(a.cavs) / cav_name(cell.concept, cell.method, cell.pooled, cell.train_size, cell.repeat))
    _log(dict(event="report", out=a.out, rows=len(report.rows)))
    return 0


def _test_positives(corpus, model, cav, limit=None):
    idx = corpus.indices("test", True)
    if limit is not None:
        idx = idx[:limit]
    return idx, corpus.features(model, cav.layer_id)


def cmd_clm(a):
    cav = P.load_cav(a.cav)
    corpus = _corpus(a.corpus)
    model = _model(a.model)
    idx, Z = _test_positives(corpus, model, cav, a.count)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    conc = []
    for i in idx:
        h = V.render_clm(cav, corpus.images[i], model, z=Z[i])
        h.save(out / f"clm_{i:05d}.png")
        conc.append(V.corner_concentration(h.attribution))
    _log(dict(event="clm", out=str(out), images=len(idx), mean_corner_concentration=float(np.mean(conc))))
    return 0


def cmd_prototypes(a):
    cav = P.load_cav(a.cav)
    corpus = _corpus(a.corpus)
    idx = corpus.indices(a.split) if a.split != "all" else np.arange(len(corpus))
    Z = corpus.features(_model(a.model), cav.layer_id)[idx]
    order, cos = V.prototypes(cav, None, k=min(a.k, len(idx)), Z=Z)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "prototypes.json", [dict(index=int(idx[j]), cosine=float(c)) for j, c in zip(order, cos)])
    if corpus.images is not None:
        V.write_png_grid(corpus.images[idx[order]], out / "prototypes.png")
    _log(dict(event="prototypes", out=str(out), k=len(order)))
    return 0


def cmd_actmax(a):
    cav = P.load_cav(a.cav)
    x, trace = V.activation_maximization(cav, _model(a.model), steps=a.steps, step_size=a.step_size, seed=a.seed,
                                         return_trace=True)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    V.save_image(x, a.out)
    _log(dict(event="actmax", out=a.out, objective_init=trace[0], objective_final=trace[-1]))
    return 0


def cmd_tcav(a):
    cav = P.load_cav(a.cav)
    corpus = _corpus(a.corpus)
    model = _model(a.model)
    if model is None:
        raise UsageError("tcav needs --model for the class-probability gradients")
    idx, Z = _test_positives(corpus, model, cav)
    curve = V.tcav_scores(cav, Z[idx], model, window=a.window, class_names=class_names(model))
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    curve.write_csv(a.out)
    _log(dict(event="tcav", out=a.out, scores=curve.scores.tolist()))
    return 0


def cmd_validate(a):
    status = 0
    for path in a.paths:
        rep = validate_cav_file(path)
        print("\n".join(rep.lines()))
        if not rep.ok:
            status = 2
    return status


def cmd_run(a):
    cfg = ExperimentConfig.load(a.config)
    if a.out:
        cfg = replace(cfg, output_dir=a.out)
    print(f"config hash {cfg.hash()}")
    ran = run_pipeline(cfg, log=_log)
    print("all stages cached" if ran == 0 else f"{ran} stage(s) run")
    return 0


# --- parser ----------------------------------------------------------------------


def _common(p, cav=True, corpus=True, model=True, seed=True):
    if cav:
        p.add_argument("--cav", required=True, help="CAV header file (NAME.cav, weights in NAME.cavt)")
    if corpus:
        p.add_argument("--corpus", required=True, help="corpus directory with manifest.json")
    if model:
        p.add_argument("--model", help="model file (.cavm); optional when the corpus carries activations")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")


def build_parser():
    ap = _Parser(prog="cavlab", description="Train, evaluate and visualize concept activation vectors.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate a synthetic concept corpus")
    p.add_argument("--concept", required=True, choices=sc.SHAPE_KINDS, help="concept shape")
    p.add_argument("--rho", type=float, default=0.9, help="P(cue | concept) = P(no cue | no concept)")
    p.add_argument("--cue", default="corner_marker", choices=sc.CUE_KINDS, help="spurious cue kind")
    p.add_argument("--fill", default="solid", choices=sc.FILL_STYLES, help="shape fill style")
    p.add_argument("--min-area", type=float, default=0.01, help="minimum shape area as a fraction of the image")
    p.add_argument("--n-train", type=int, default=50, help="training images per class")
    p.add_argument("--n-test", type=int, default=100, help="test images per class")
    p.add_argument("--n-buffer", type=int, default=500, help="concept-free buffer images")
    p.add_argument("--negative-shape-prob", type=float, default=0.8, help="chance a negative shows another shape")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--model", help="also store probe-layer activations computed with this model")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="train the small CNN on shape classification")
    p.add_argument("--seed", type=int, default=0, help="initialization, data and order seed")
    p.add_argument("--corpus", help="classification corpus directory (default: generate one)")
    p.add_argument("--n-images", type=int, default=2000, help="size of the generated classification corpus")
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--lr", type=float, default=0.1, help="SGD learning rate")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="train one CAV")
    p.add_argument("--method", required=True, choices=("clf", "pat", "seg", "mix", "joint"), help="probe type")
    p.add_argument("--pooled", default="none", choices=P.POOLINGS, help="channel pooling constraint")
    _common(p, cav=False)
    p.add_argument("--train-size", type=int, help="samples per class (default: the whole training split)")
    p.add_argument("--beta", type=float, default=0.5, help="mix/joint weight on the classifier term")
    p.add_argument("--name", help="output file stem (default CONCEPT_METHOD[_POOLED])")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("fp-cav", help="train a CAV on a probe's false positives")
    _common(p, seed=False)
    p.add_argument("--n", type=int, help="false positives to collect (default: training negatives count)")
    p.add_argument("--out", required=True, help="JSON report path; the CAV is written next to it")
    p.set_defaults(fn=cmd_fp_cav)

    p = sub.add_parser("curate", help="remove one CAV's direction from another")
    p.add_argument("--cav", required=True, help="CAV to curate")
    p.add_argument("--reject", required=True, help="CAV whose direction is removed")
    p.add_argument("--out", required=True, help="output CAV path")
    p.set_defaults(fn=cmd_curate)

    p = sub.add_parser("report", help="evaluate a sweep and write the alignment CSV")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--model", help="model file (default: pretrain one from the config)")
    p.add_argument("--cavs", help="directory to store every trained CAV")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("clm", help="render concept localization maps for test positives")
    _common(p)
    p.add_argument("--count", type=int, default=8, help="number of test positives to render")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_clm)

    p = sub.add_parser("prototypes", help="rank images by cosine similarity with a CAV")
    _common(p)
    p.add_argument("--k", type=int, default=16, help="number of images to keep")
    p.add_argument("--split", default="test", choices=("train", "test", "buffer", "all"), help="images to rank")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_prototypes)

    p = sub.add_parser("actmax", help="synthesize an image that maximizes CAV similarity")
    _common(p, corpus=False)
    p.add_argument("--corpus", help="unused; accepted for a uniform interface")
    p.add_argument("--steps", type=int, default=128, help="ascent steps (>= 1)")
    p.add_argument("--step-size", type=float, default=0.05, help="step length in RMS-normalized pixel units")
    p.add_argument("--out", required=True, help="PNG path")
    p.set_defaults(fn=cmd_actmax)

    p = sub.add_parser("tcav", help="TCAV score per model class")
    _common(p)
    p.add_argument("--window", type=int, default=1, help="moving-average window recorded with the curve")
    p.add_argument("--out", required=True, help="tcav.csv path")
    p.set_defaults(fn=cmd_tcav)

    p = sub.add_parser("validate", help="check CAV files for format and invariant violations")
    p.add_argument("paths", nargs="+", help="CAV header files")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("run", help="run the full pipeline for a config, reusing cached stages")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", help="output directory (overrides output_dir in the config)")
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except StageError as e:
        _log(dict(event="error", stage=e.stage, cell=e.cell, error=type(e.cause).__name__, message=str(e.cause)))
        return e.exit_code
    except ConfigError as e:
        _log(dict(event="error", error="ConfigError", message=str(e)))
        return 1
    except CavlabError as e:
        _log(dict(event="error", error=type(e).__name__, message=str(e)))
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        _log(dict(event="error", error=type(e).__name__, message=str(e)))
        return 2
    except ValueError as e:
        # argument values the operation cannot accept, such as mismatched CAVs
        _log(dict(event="error", error=type(e).__name__, message=str(e)))
        return 1


if __name__ == "__main__":
    sys.exit(main())
