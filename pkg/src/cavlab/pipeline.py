"""Experiment configuration, staged pipeline with content-hash caching, and CAV file validation."""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as me
from . import microcnn as mc
from . import misalign as ma
from . import probes as P
from . import synthcorpus as sc
from . import tensor as T
from . import viz as V
from .errors import CavlabError, DataError, InsufficientFalsePositives, SchemaError
from .seeding import derive_seed

TOOL_VERSION = "0.1.0"
DEFAULT_METHODS = ("clf", "pat", "seg", "mix", "joint")
DEFAULT_POOLING = ("none", "sum")


class ConfigError(CavlabError):
    exit_code = 1


class StageError(CavlabError):
    """A stage failed; carries the stage name and the cell that was being processed."""

    def __init__(self, stage, cell, cause):
        self.stage = stage
        self.cell = cell
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 2)
        super().__init__(f"stage {stage} failed at {cell}: {type(cause).__name__}: {cause}")


def threads():
    try:
        return max(1, int(os.environ.get("CAVLAB_THREADS", "1")))
    except ValueError:
        raise ConfigError("CAVLAB_THREADS must be an integer") from None


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data):
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def file_hash(path):
    return sha256_hex(Path(path).read_bytes())


# --- configuration ---------------------------------------------------------------


@dataclass
class ExperimentConfig:
    concepts: list
    spurious: sc.SpuriousSpec = field(default_factory=lambda: sc.SpuriousSpec("corner_marker", 0.9))
    methods: tuple = DEFAULT_METHODS
    pooling: tuple = DEFAULT_POOLING
    train_sizes: tuple = (50,)
    repeats: int = 5
    master_seed: int = 0
    output_dir: str = "out"
    counts: sc.Counts = field(default_factory=sc.Counts)
    pretrain: dict = field(default_factory=lambda: dict(epochs=10, learning_rate=0.1, batch_size=32, n_images=2000))
    fp_size: int = None
    viz_images: int = 4
    actmax_steps: int = 128

    def __post_init__(self):
        if not self.concepts:
            raise ConfigError("concepts must not be empty")
        if not self.methods:
            raise ConfigError("methods must not be empty")
        bad = set(self.methods) - set(DEFAULT_METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}")
        if not self.pooling or set(self.pooling) - set(P.POOLINGS):
            raise ConfigError(f"pooling must be a non-empty subset of {P.POOLINGS}")
        if not self.train_sizes or any(int(n) < 1 for n in self.train_sizes):
            raise ConfigError("train_sizes must be positive integers")
        if int(self.repeats) < 1:
            raise ConfigError("repeats must be at least 1")
        ids = [c.concept_id for c in self.concepts]
        if len(set(ids)) != len(ids):
            raise ConfigError("concept ids must be unique")
        unknown = set(self.pretrain) - {"epochs", "learning_rate", "batch_size", "n_images"}
        if unknown:
            raise ConfigError(f"unknown pretrain keys {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            concepts = [sc.ConceptSpec(c) if isinstance(c, str) else sc.ConceptSpec(**c) for c in d.pop("concepts", [])]
            spurious = sc.SpuriousSpec(**d.pop("spurious", {"cue_kind": "corner_marker", "rho": 0.9}))
            counts = sc.Counts(**d.pop("counts", {}))
            pretrain = {**cls.__dataclass_fields__["pretrain"].default_factory(), **d.pop("pretrain", {})}
            for key in ("methods", "pooling", "train_sizes"):
                if key in d:
                    d[key] = tuple(d[key])
            return cls(concepts=concepts, spurious=spurious, counts=counts, pretrain=pretrain, **d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None

    def to_dict(self):
        d = asdict(self)
        for key in ("methods", "pooling", "train_sizes"):
            d[key] = list(d[key])
        return d

    def scientific(self):
        """Everything that determines results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return d

    def hash(self):
        return sha256_hex(canonical_json(self.scientific()))

    # seeds are pure functions of the master seed and coordinates
    def corpus_seed(self, concept_id):
        return derive_seed(self.master_seed, "corpus", concept_id)

    def model_seed(self):
        return derive_seed(self.master_seed, "model")

    def classification_seed(self):
        return derive_seed(self.master_seed, "pretrain-data")

    def sweep_seed(self):
        return derive_seed(self.master_seed, "sweep")

    def viz_seed(self, concept_id):
        return derive_seed(self.master_seed, "viz", concept_id)


def build_corpus(cfg, spec):
    return sc.generate(spec, cfg.spurious, cfg.counts, seed=cfg.corpus_seed(spec.concept_id))


def build_model(cfg, log=None):
    p = cfg.pretrain
    data = sc.generate_classification(int(p["n_images"]), seed=cfg.classification_seed())
    task = mc.PretrainTask(epochs=int(p["epochs"]), learning_rate=float(p["learning_rate"]),
                           batch_size=int(p["batch_size"]), seed=cfg.model_seed())
    return mc.pretrain(task, data, log=log)


def cav_name(concept, method, pooled, n=None, repeat=None):
    parts = [concept, method] + ([pooled] if pooled != "none" else [])
    if n is not None:
        parts += [f"N{n}", f"r{repeat}"]
    return "_".join(parts)


def class_names(model):
    return list(sc.SHAPE_KINDS[: model.num_classes])


# --- stages ----------------------------------------------------------------------


class Stage:
    name = ""

    def __init__(self, cfg, root, log):
        self.cfg = cfg
        self.root = Path(root)
        self.dir = self.root / self.name
        self.log = log

    def key_material(self):
        raise NotImplementedError

    def key(self, upstream):
        return sha256_hex(canonical_json(dict(stage=self.name, tool=TOOL_VERSION, cfg=self.key_material(), upstream=upstream)))

    def provenance_path(self):
        return self.dir / "provenance.json"

    def cached(self, key):
        p = self.provenance_path()
        if not p.is_file():
            return False
        try:
            prov = json.loads(p.read_text())
        except json.JSONDecodeError:
            return False
        if prov.get("stage_key") != key:
            return False
        for rel, digest in prov.get("outputs", {}).items():
            f = self.dir / rel
            if not f.is_file() or file_hash(f) != digest:
                return False
        return True

    def record(self, key, seeds):
        outputs = {}
        for f in sorted(self.dir.rglob("*")):
            if f.is_file() and f.name != "provenance.json":
                outputs[f.relative_to(self.dir).as_posix()] = file_hash(f)
        prov = dict(
            stage=self.name,
            stage_key=key,
            config_hash=self.cfg.hash(),
            tool_version=TOOL_VERSION,
            seeds=seeds,
            outputs=outputs,
        )
        self.provenance_path().write_text(json.dumps(prov, indent=1, sort_keys=True) + "\n")
        return key

    def run(self):
        raise NotImplementedError


class CorpusStage(Stage):
    name = "corpora"

    def key_material(self):
        c = self.cfg
        return dict(concepts=[asdict(s) for s in c.concepts], spurious=asdict(c.spurious), counts=asdict(c.counts),
                    seed=c.master_seed)

    def run(self):
        seeds = {}
        for spec in self.cfg.concepts:
            cell = dict(concept=spec.concept_id)
            try:
                corpus = build_corpus(self.cfg, spec)
                sc.export_corpus(corpus, self.dir / spec.concept_id)
            except CavlabError as e:
                raise StageError(self.name, cell, e) from e
            seeds[spec.concept_id] = self.cfg.corpus_seed(spec.concept_id)
            self.log(dict(event="corpus", **cell, n=len(corpus)))
        return seeds


class ModelStage(Stage):
    name = "model"

    def key_material(self):
        return dict(pretrain=self.cfg.pretrain, seed=self.cfg.master_seed)

    def run(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        try:
            model = build_model(self.cfg, log=lambda r: self.log(dict(stage=self.name, **r)))
        except CavlabError as e:
            raise StageError(self.name, {}, e) from e
        mc.save_model(model, self.dir / "model.cavm")
        return dict(model=self.cfg.model_seed(), data=self.cfg.classification_seed())


def _load_inputs(root, cfg):
    model = mc.load_model(Path(root) / "model" / "model.cavm")
    corpora = {s.concept_id: sc.ingest_external(Path(root) / "corpora" / s.concept_id) for s in cfg.concepts}
    return model, corpora


class ReportStage(Stage):
    name = "report"

    def key_material(self):
        c = self.cfg
        return dict(methods=list(c.methods), pooling=list(c.pooling), train_sizes=[int(n) for n in c.train_sizes],
                    repeats=int(c.repeats), seed=c.master_seed)

    def run(self):
        model, corpora = _load_inputs(self.root, self.cfg)
        self.dir.mkdir(parents=True, exist_ok=True)
        seed = self.cfg.sweep_seed()
        report, cavs = me.run_report(
            corpora, model, methods=self.cfg.methods, train_sizes=self.cfg.train_sizes, repeats=self.cfg.repeats,
            seed=seed, poolings=self.cfg.pooling, log=lambda r: self.log(dict(stage=self.name, **r)), workers=threads(),
        )
        report.write_csv(self.dir / "report.csv")
        for cell, cav in sorted(cavs.items()):
            P.save_cav(cav, self.dir / "cavs" / cav_name(cell.concept, cell.method, cell.pooled, cell.train_size, cell.repeat))
        return dict(sweep=seed)


class FpStage(Stage):
    """FP-CAVs built from every concept's first unpooled CLF CAV of the sweep."""

    name = "fp"

    def key_material(self):
        return dict(fp_size=self.cfg.fp_size, n=int(self.cfg.train_sizes[0]))

    def run(self):
        model, corpora = _load_inputs(self.root, self.cfg)
        self.dir.mkdir(parents=True, exist_ok=True)
        n = int(self.cfg.train_sizes[0])
        summary = {}
        for cid, corpus in corpora.items():
            src = self.root / "report" / "cavs" / (cav_name(cid, "clf", "none", n, 0) + ".cav")
            if not src.is_file():
                summary[cid] = dict(error="MissingClassifierCav")
                continue
            v_clf = P.load_cav(src)
            try:
                v_fp, rep = ma.fp_cav_from_corpus(v_clf, corpus, model, N=self.cfg.fp_size)
            except InsufficientFalsePositives as e:
                # a concept whose probe makes too few mistakes is an outcome, not a failure
                summary[cid] = dict(error="InsufficientFalsePositives", found=e.found, required=e.required)
                self.log(dict(event="fp_skipped", concept=cid, found=e.found, required=e.required))
                continue
            except CavlabError as e:
                raise StageError(self.name, dict(concept=cid), e) from e
            P.save_cav(v_fp, self.dir / cav_name(cid, "fp", "none"))
            (self.dir / f"fp_{cid}.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
            summary[cid] = {k: v for k, v in rep.to_dict().items() if k != "false_positive_ids"}
        (self.dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        return {}


class VizStage(Stage):
    name = "viz"

    def key_material(self):
        return dict(viz_images=self.cfg.viz_images, actmax_steps=self.cfg.actmax_steps, n=int(self.cfg.train_sizes[0]),
                    seed=self.cfg.master_seed)

    def run(self):
        model, corpora = _load_inputs(self.root, self.cfg)
        n = int(self.cfg.train_sizes[0])
        seeds = {}
        for cid, corpus in corpora.items():
            src = self.root / "report" / "cavs" / (cav_name(cid, "clf", "none", n, 0) + ".cav")
            if not src.is_file():
                continue
            cav = P.load_cav(src)
            out = self.dir / cid
            out.mkdir(parents=True, exist_ok=True)
            seeds[cid] = seed = self.cfg.viz_seed(cid)
            cell = dict(concept=cid)
            try:
                write_viz(cav, corpus, model, out, seed, self.cfg.viz_images, self.cfg.actmax_steps)
            except CavlabError as e:
                raise StageError(self.name, cell, e) from e
            self.log(dict(event="viz", **cell))
        return seeds


def write_viz(cav, corpus, model, out, seed, n_images=4, actmax_steps=128):
    out = Path(out)
    Z = corpus.features(model, cav.layer_id)
    tp = corpus.indices("test", True)
    for i in tp[:n_images]:
        V.render_clm(cav, corpus.images[i], model, z=Z[i]).save(out / f"clm_{i:05d}.png")
    test = corpus.indices("test")
    order, cos = V.prototypes(cav, None, k=min(8, len(test)), Z=Z[test])
    (out / "prototypes.json").write_text(json.dumps(
        [dict(index=int(test[j]), cosine=float(c)) for j, c in zip(order, cos)], indent=1) + "\n")
    x = V.activation_maximization(cav, model, steps=actmax_steps, seed=seed)
    V.save_image(x, out / "actmax.png")
    V.tcav_scores(cav, Z[tp], model, class_names=class_names(model)).write_csv(out / "tcav.csv")


STAGES = (CorpusStage, ModelStage, ReportStage, FpStage, VizStage)


def run_pipeline(cfg, log=None, output_dir=None):
    """Run every stage in order, skipping stages whose inputs and outputs are unchanged.

    Returns the number of stages that actually ran.
    """
    log = log or (lambda r: None)
    root = Path(output_dir or cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    text = json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n"
    cpath = root / "config.json"
    if not cpath.is_file() or cpath.read_text() != text:
        cpath.write_text(text)
    log(dict(event="start", config_hash=cfg.hash(), output_dir=str(root), threads=threads()))
    upstream = ""
    ran = 0
    for cls in STAGES:
        stage = cls(cfg, root, log)
        key = stage.key(upstream)
        if stage.cached(key):
            log(dict(event="stage_cached", stage=stage.name))
        else:
            log(dict(event="stage_start", stage=stage.name))
            stage.dir.mkdir(parents=True, exist_ok=True)
            stage.provenance_path().unlink(missing_ok=True)
            seeds = stage.run()
            stage.record(key, seeds)
            log(dict(event="stage_done", stage=stage.name))
            ran += 1
        upstream = key
    if ran == 0:
        log(dict(event="done", message="all stages cached"))
    else:
        log(dict(event="done", stages_run=ran))
    return ran


# --- validation ------------------------------------------------------------------


@dataclass
class ValidationReport:
    path: str
    header: dict = field(default_factory=dict)
    problems: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.problems

    def lines(self):
        out = [f"{self.path}: {'ok' if self.ok else 'INVALID'}"]
        out += [f"  {k}: {self.header[k]}" for k in sorted(self.header)]
        out += [f"  problem: {p}" for p in self.problems]
        return out


def validate_cav_file(path, norm_tol=1e-5, const_tol=1e-6):
    """Check a .cav/.cavt pair: magic, shape, unit norm and pooled constancy."""
    head, body = P._paths(path)
    rep = ValidationReport(str(head))
    if not head.is_file():
        raise DataError(f"no such CAV header: {head}")
    try:
        rep.header = json.loads(head.read_text())
    except json.JSONDecodeError as e:
        rep.problems.append(f"header is not valid JSON: {e}")
        return rep
    for key in ("concept_id", "method", "pooled", "layer_id", "train_size", "seed", "bias", "norm_before_normalize"):
        if key not in rep.header:
            rep.problems.append(f"header lacks {key}")
    if rep.header.get("method") not in P.METHODS:
        rep.problems.append(f"unknown method {rep.header.get('method')!r}")
    pooled = rep.header.get("pooled", "none")
    if pooled not in P.POOLINGS:
        rep.problems.append(f"unknown pooling {pooled!r}")
    if not body.is_file():
        rep.problems.append(f"missing weights file {body.name}")
        return rep
    raw = body.read_bytes()
    if raw[: len(T.MAGIC)] != T.MAGIC:
        rep.problems.append("weights file lacks CAVT magic bytes")
        return rep
    try:
        w = T.read_tensor(body)
    except SchemaError as e:
        rep.problems.append(f"weights file unreadable: {e}")
        return rep
    if w.ndim != 3:
        rep.problems.append(f"weights have rank {w.ndim}, expected 3 (C, H, W)")
        return rep
    if "shape" in rep.header and list(w.shape) != list(rep.header["shape"]):
        rep.problems.append(f"weights shape {list(w.shape)} differs from header {rep.header['shape']}")
    if not np.all(np.isfinite(w)) or not np.isfinite(rep.header.get("bias", 0.0)):
        rep.problems.append("non-finite weights or bias")
        return rep
    n = T.norm(w)
    if abs(n - 1.0) > norm_tol:
        rep.problems.append(f"norm is {n:.6g}, expected 1")
    if pooled in ("sum", "mean", "max"):
        flat = w.reshape(w.shape[0], -1).astype(np.float64)
        spread = flat.max(axis=1) - flat.min(axis=1)
        bad = np.flatnonzero(spread > const_tol * np.maximum(1.0, np.abs(flat).max(axis=1)))
        if len(bad):
            rep.problems.append(f"pooled CAV is not constant on channels {bad.tolist()}")
    return rep
