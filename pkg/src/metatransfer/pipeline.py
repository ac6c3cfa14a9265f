"""Configuration and the staged, resumable end-to-end pipeline.

Config files hold one ``key = <JSON value>`` per line; ``#`` starts a comment.
Stages run in order ingest, filter, features, train, evaluate. Each writes
``<out>/<stage>/manifest.json`` with the hash of its inputs and of every file
it produced. A rerun skips a stage whose input hash is unchanged, after
checking its files against the manifest; a mismatch halts naming the stage.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .behavior_features import (
    FEATURE_NAMES,
    FeatureConfig,
    NormStats,
    apply_norm_stats,
    compute_raw_behavior,
    pad_weeks,
)
from .datamodel import Corpus, CourseIteration, load_corpus, weeks_visible
from .datasets import Dataset, FeatureBuilder
from .dropout_filter import FilterResult
from .errors import ConfigError, DataError, MetaTransferError, ShapeError
from .experiments import (
    SETTINGS,
    ExperimentConfig,
    ExperimentReport,
    attention_report,
    fit_on_courses,
    n_one_diff_seed,
    render_table,
    rows_to_csv,
    run_ablation,
    run_transfer,
)
from .meta_features import MetaFeaturizer, load_external_embeddings, parse_subset
from .models import KINDS, THRESHOLD, ArchitectureSpec, TrainConfig, TrainedModel
from .synthgen import export_corpus, generate_corpus, load_scenario

log = logging.getLogger(__name__)

STAGES = ("ingest", "filter", "features", "train", "evaluate")
MANIFEST = "manifest.json"
# keys that change where or how fast things run, not what they compute
_UNHASHED = ("out", "jobs")


@dataclass(frozen=True)
class PipelineConfig:
    scenario: str | None = "small"
    scenario_seed: int | None = None
    corpus: str | None = None
    out: str = "pipeline-out"
    levels: tuple[float, ...] = (0.4, 0.6)
    seed: int = 0
    archs: tuple[str, ...] = KINDS
    settings: tuple[str, ...] = SETTINGS
    grids: Any = None
    session_gap: float = 1800.0
    terminal_credit: float = 60.0
    pause_cap: float = 1800.0
    pass_threshold: float = 0.5
    w_g: int = 2
    embedding_dims: tuple[int, int, int] = (30, 30, 58)
    meta_feature_subset: tuple[str, ...] = ("duration", "level", "language", "title", "short", "long")
    external_embeddings: str | None = None
    bilstm_layers: int = 1
    bilstm_units: int = 32
    head_dense: tuple[int, ...] = (256, 64)
    dropout: float = 0.1
    attention_hidden: int = 64
    batch_size: int = 64
    lr: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    fine_tune_lr: float = 1e-4
    folds: int = 10
    val_fraction: float = 0.1
    ablation: bool = True
    attention: bool = True
    jobs: int = 1

    def __post_init__(self):
        for name in ("levels", "archs", "settings", "embedding_dims", "head_dense", "meta_feature_subset"):
            value = getattr(self, name)
            if isinstance(value, (str, int, float)):
                value = [value]
            object.__setattr__(self, name, tuple(value))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        object.__setattr__(self, "archs", tuple(str(a).upper() for a in self.archs))
        object.__setattr__(self, "meta_feature_subset", parse_subset(self.meta_feature_subset))
        if self.scenario is None and self.corpus is None:
            raise ConfigError("config needs either 'scenario' or 'corpus'")
        for lv in self.levels:
            if not 0.0 < lv <= 1.0:
                raise ConfigError(f"levels must lie in (0, 1], got {lv}")
        bad = [a for a in self.archs if a not in KINDS]
        if bad:
            raise ConfigError(f"unknown architectures {bad}; choose from {KINDS}")
        bad = [s for s in self.settings if s not in SETTINGS]
        if bad:
            raise ConfigError(f"unknown settings {bad}; choose from {SETTINGS}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        self.architecture("BO")
        self.train_config()

    # ---------------------------------------------------------- derived

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(session_gap=self.session_gap, terminal_credit=self.terminal_credit,
                             pause_cap=self.pause_cap, pass_threshold=self.pass_threshold)

    def architecture(self, kind: str) -> ArchitectureSpec:
        try:
            return ArchitectureSpec(kind, bilstm_layers=self.bilstm_layers, bilstm_units=self.bilstm_units,
                                    head_dense=self.head_dense, meta_feature_subset=self.meta_feature_subset,
                                    embedding_dims=self.embedding_dims, dropout=self.dropout,
                                    attention_hidden=self.attention_hidden, seed=self.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid architecture settings: {exc}") from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(batch_size=self.batch_size, lr=self.lr, max_epochs=self.max_epochs,
                               patience=self.patience, seed=self.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid training settings: {exc}") from None

    def experiment_config(self, kind: str) -> ExperimentConfig:
        return ExperimentConfig(arch=self.architecture(kind), train=self.train_config(),
                                fine_tune=replace(self.train_config(), lr=self.fine_tune_lr),
                                grids=load_grids(self.grids), val_fraction=self.val_fraction,
                                folds=self.folds, seed=self.seed, jobs=self.jobs)

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def hash(self) -> str:
        d = {k: v for k, v in self.to_json().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_values(self, **values) -> "PipelineConfig":
        merged = {f.name: getattr(self, f.name) for f in fields(self)}
        merged.update({k: v for k, v in values.items() if v is not None})
        return PipelineConfig.from_mapping(merged)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = json.loads(raw.strip())
        except json.JSONDecodeError:
            raise ConfigError(f"{source}:{lineno}: value of {key!r} is not valid JSON: {raw.strip()}") from None
    return values


def load_config(path: str | Path | None, **overrides) -> PipelineConfig:
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        values = parse_config_text(text, str(p))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_mapping(values)


def load_grids(grids: Any) -> dict | None:
    """Grid mapping from a dict, a JSON file path, or None."""
    if grids is None or isinstance(grids, Mapping):
        return grids
    try:
        data = json.loads(Path(grids).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid file {grids}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"grid file {grids} must hold a JSON object")
    return data


# ------------------------------------------------------------ artifacts


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def level_dir(level: float) -> str:
    return f"L{level:g}"


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], config_hash: str | None = None):
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: Path) -> list[dict[str, str]]:
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_filter_outputs(fb: FeatureBuilder, cids: Sequence[str], out: Path,
                         config_hash: str | None = None) -> None:
    """Per course: ``<cid>.kept.csv``, ``<cid>.removed.csv`` and ``<cid>.filter.json``."""
    out.mkdir(parents=True, exist_ok=True)
    for cid in cids:
        res = fb.filter_result(cid)
        model = fb.filter_model(cid)
        for name, ids in (("kept", res.kept), ("removed", res.removed)):
            rows = [[s, f"{res.per_student_fail_prob.get(s, 0.0):.17g}"] for s in sorted(ids)]
            write_csv(out / f"{cid}.{name}.csv", ["student_id", "p_fail"], rows, config_hash)
        info = {"course_id": cid, "level": fb.level, "threshold": res.threshold,
                "n_kept": len(res.kept), "n_removed": len(res.removed),
                "model": model.to_json() if model is not None else None}
        if config_hash:
            info["config_hash"] = config_hash
        write_json(out / f"{cid}.filter.json", info)


def read_filter_outputs(fb: FeatureBuilder, cids: Sequence[str], directory: Path) -> None:
    for cid in cids:
        info = json.loads((directory / f"{cid}.filter.json").read_text(encoding="utf-8"))
        kept = read_csv(directory / f"{cid}.kept.csv")
        removed = read_csv(directory / f"{cid}.removed.csv")
        probs = {r["student_id"]: float(r["p_fail"]) for r in kept + removed}
        fb.set_filter(cid, FilterResult({r["student_id"] for r in kept}, {r["student_id"] for r in removed},
                                        float(info["threshold"]), probs))


def write_feature_outputs(fb: FeatureBuilder, out: Path, config_hash: str | None = None) -> NormStats:
    """Per course ``<cid>.npz`` (raw and normalised padded tensors) plus ``features.json``."""
    out.mkdir(parents=True, exist_ok=True)
    corpus = fb.corpus
    fb.precompute(corpus.ids)
    stats = fb.fit_behavior_stats(corpus.train_ids)
    shapes = {}
    for cid in corpus.ids:
        raw = fb.raw(cid)
        norm = pad_weeks(apply_norm_stats(raw, stats), fb.max_weeks)
        np.savez(out / f"{cid}.npz", raw=raw, normalized=norm,
                 student_ids=np.array(corpus[cid].students), config_hash=np.array(config_hash or ""))
        shapes[cid] = {"raw": list(raw.shape), "normalized": list(norm.shape)}
    manifest = {"feature_names": FEATURE_NAMES, "level": fb.level, "max_weeks": fb.max_weeks,
                "shapes": shapes, "norm_stats": stats.to_json(), "mask_value": -1.0,
                "fitted_on": list(corpus.train_ids)}
    if config_hash:
        manifest["config_hash"] = config_hash
    write_json(out / "features.json", manifest)
    return stats


def read_feature_outputs(fb: FeatureBuilder, directory: Path) -> NormStats:
    manifest = json.loads((directory / "features.json").read_text(encoding="utf-8"))
    for cid in fb.corpus.ids:
        with np.load(directory / f"{cid}.npz") as z:
            if list(z["student_ids"]) != fb.corpus[cid].students:
                raise DataError(f"{cid}: feature file students do not match the corpus")
            fb.set_raw(cid, z["raw"])
    return NormStats.from_json(manifest["norm_stats"])


# ---------------------------------------------------------- prediction


def course_dataset(tm: TrainedModel, course: CourseIteration,
                   feature_config: FeatureConfig = FeatureConfig(), external=None) -> Dataset:
    """Model inputs for every student of ``course`` using the checkpoint's statistics."""
    if tm.level is None or tm.behavior_stats is None:
        raise DataError("checkpoint lacks the level or normalisation statistics needed to predict")
    weeks = weeks_visible(course.duration_weeks, tm.level)
    if weeks > tm.max_weeks:
        raise ShapeError(f"{course.course_id}: {weeks} visible weeks exceed the model's {tm.max_weeks}")
    raw = compute_raw_behavior(course, weeks, feature_config)
    H = pad_weeks(apply_norm_stats(raw, tm.behavior_stats), tm.max_weeks)
    n = len(course.students)
    if tm.spec.uses_meta:
        feat = MetaFeaturizer(tm.meta_config, external)
        feat.stats = tm.meta_stats
        meta = feat.transform(course).values
        M = np.repeat(meta[None, :], n, axis=0)
        layout = tm.meta_config.layout()
    else:
        M, layout = np.zeros((n, 0)), {}
    y = np.array([course.labels[s].is_fail if s in course.labels else 0 for s in course.students],
                 dtype=np.float64)
    return Dataset(H, M, y, list(course.students), [course.course_id] * n, layout)


def predict_course(tm: TrainedModel, course: CourseIteration,
                   feature_config: FeatureConfig = FeatureConfig(), external=None):
    """``[(student_id, p_fail, predicted_label)]`` for every student."""
    data = course_dataset(tm, course, feature_config, external)
    p = tm.predict(data)
    return [(s, float(q), "Fail" if q > THRESHOLD else "Pass") for s, q in zip(data.student_ids, p)]


# ------------------------------------------------------------------ stages


class StageError(MetaTransferError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` is the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class StageStatus:
    stage: str
    skipped: bool
    outputs: dict[str, str] = field(default_factory=dict)


class Pipeline:
    def __init__(self, config: PipelineConfig, out: str | Path | None = None):
        self.config = config
        self.out = Path(out or config.out)
        self.config_hash = config.hash()
        self._corpus: Corpus | None = None
        self._builders: dict[float, FeatureBuilder] = {}
        self._external = load_external_embeddings(config.external_embeddings) \
            if config.external_embeddings else None

    # -------------------------------------------------------- plumbing

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    def _input_hash(self, stage: str, upstream: Mapping[str, str]) -> str:
        payload = {"stage": stage, "config": self.config_hash, "upstream": dict(sorted(upstream.items()))}
        if stage == "ingest" and self.config.corpus is not None:
            root = Path(self.config.corpus)
            if not root.is_dir():
                raise DataError(f"corpus directory {root} does not exist")
            payload["corpus_files"] = {str(p.relative_to(root)): file_digest(p)
                                       for p in sorted(root.rglob("*")) if p.is_file()}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def _completed(self, stage: str, input_hash: str) -> dict[str, str] | None:
        """Recorded outputs of a finished stage with matching inputs, verified on disk."""
        path = self.stage_dir(stage) / MANIFEST
        if not path.exists():
            return None
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
            recorded_input, outputs = manifest["input_hash"], manifest["outputs"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise DataError(f"{path}: corrupt manifest") from None
        if recorded_input != input_hash:
            return None
        for rel, digest in outputs.items():
            f = self.stage_dir(stage) / rel
            if not f.is_file():
                raise DataError(f"artifact {f} listed in the manifest is missing")
            if file_digest(f) != digest:
                raise DataError(f"artifact {f} is corrupted (hash mismatch with manifest)")
        return outputs

    def _record(self, stage: str, input_hash: str) -> dict[str, str]:
        d = self.stage_dir(stage)
        outputs = {str(p.relative_to(d)): file_digest(p)
                   for p in sorted(d.rglob("*")) if p.is_file() and p.name != MANIFEST}
        write_json(d / MANIFEST, {"stage": stage, "config_hash": self.config_hash,
                                  "input_hash": input_hash, "outputs": outputs})
        return outputs

    def run(self, stages: Sequence[str] = STAGES, *, force: bool = False,
            progress: Callable[[str, bool], None] | None = None) -> list[StageStatus]:
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}; choose from {STAGES}")
        # a stage needs everything upstream of it, so run (or verify) the prefix
        last = max(STAGES.index(s) for s in stages)
        statuses = []
        upstream: dict[str, str] = {}
        for stage in STAGES[:last + 1]:
            try:
                input_hash = self._input_hash(stage, upstream)
                outputs = None if force else self._completed(stage, input_hash)
                skipped = outputs is not None
                if not skipped:
                    d = self.stage_dir(stage)
                    if d.exists():
                        shutil.rmtree(d)
                    d.mkdir(parents=True)
                    getattr(self, f"_stage_{stage}")(d)
                    outputs = self._record(stage, input_hash)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(stage, exc) from exc
            log.info("stage %s %s", stage, "skipped (inputs unchanged)" if skipped else "done")
            if progress:
                progress(stage, skipped)
            statuses.append(StageStatus(stage, skipped, outputs))
            upstream = {f"{stage}/{k}": v for k, v in outputs.items()}
        return statuses

    # ------------------------------------------------------ state loading

    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = load_corpus(self.stage_dir("ingest") / "corpus")
        return self._corpus

    def builder(self, level: float) -> FeatureBuilder:
        if level not in self._builders:
            c = self.config
            self._builders[level] = FeatureBuilder(self.corpus(), level, feature_config=c.feature_config(),
                                                   external=self._external, w_g=c.w_g, seed=c.seed,
                                                   jobs=c.jobs)
        return self._builders[level]

    def _loaded_builder(self, level: float) -> tuple[FeatureBuilder, NormStats]:
        fb = self.builder(level)
        lv = level_dir(level)
        read_filter_outputs(fb, fb.corpus.ids, self.stage_dir("filter") / lv)
        stats = read_feature_outputs(fb, self.stage_dir("features") / lv)
        return fb, stats

    # ------------------------------------------------------------- stages

    def _stage_ingest(self, d: Path) -> None:
        c = self.config
        if c.corpus is not None:
            corpus = load_corpus(c.corpus)
            export_corpus(corpus, d / "corpus")
            source = {"corpus": str(c.corpus)}
        else:
            scenario = load_scenario(c.scenario)
            if c.scenario_seed is not None:
                scenario = scenario.with_overrides(seed=c.scenario_seed)
            corpus, truth = generate_corpus(scenario)
            export_corpus(corpus, d / "corpus", truth)
            source = {"scenario": scenario.name}
        for course in corpus.courses:
            course.validate()
        summary = {"config_hash": self.config_hash, **source,
                   "courses": {cc.course_id: {"students": len(cc.students), "weeks": cc.duration_weeks,
                                              "set": cc.course_set_id}
                               for cc in corpus.courses},
                   "train": list(corpus.train_ids), "transfer": list(corpus.transfer_ids)}
        write_json(d / "summary.json", summary)
        self._corpus = None

    def _stage_filter(self, d: Path) -> None:
        for level in self.config.levels:
            fb = self.builder(level)
            write_filter_outputs(fb, fb.corpus.ids, d / level_dir(level), self.config_hash)

    def _stage_features(self, d: Path) -> None:
        for level in self.config.levels:
            fb = self.builder(level)
            read_filter_outputs(fb, fb.corpus.ids, self.stage_dir("filter") / level_dir(level))
            write_feature_outputs(fb, d / level_dir(level), self.config_hash)

    def _stage_train(self, d: Path) -> None:
        for level in self.config.levels:
            fb, _ = self._loaded_builder(level)
            (d / level_dir(level)).mkdir()
            for kind in self.config.archs:
                cfg = self.config.experiment_config(kind)
                tm, _, _ = fit_on_courses(fb, fb.corpus.train_ids, cfg, n_one_diff_seed(cfg.seed))
                payload = tm.to_json()
                payload["config_hash"] = self.config_hash
                (d / level_dir(level) / f"{kind}.json").write_text(json.dumps(payload, sort_keys=True),
                                                                   encoding="utf-8")

    def _checkpoint(self, level: float, kind: str) -> TrainedModel:
        return TrainedModel.load(self.stage_dir("train") / level_dir(level) / f"{kind}.json")

    def _stage_evaluate(self, d: Path) -> None:
        c = self.config
        report = ExperimentReport(config={"config_hash": self.config_hash,
                                          **{k: v for k, v in c.to_json().items() if k not in _UNHASHED}})
        for level in c.levels:
            fb, stats = self._loaded_builder(level)
            train_ids = fb.corpus.train_ids
            for kind in c.archs:
                cfg = c.experiment_config(kind)
                tm = self._checkpoint(level, kind)
                feat = fb.featurizer(train_ids, tm.spec.meta_config)
                for setting in c.settings:
                    report.rows.extend(run_transfer(setting, fb.corpus, level, cfg, builder=fb,
                                                    pretrained=(tm, tm.behavior_stats, feat)))
                if kind == "BSM" and c.attention and fb.corpus.transfer_ids:
                    report.attention.extend(attention_report(tm, fb, fb.corpus.transfer_ids,
                                                             tm.behavior_stats, feat))
            if c.ablation:
                report.ablation.extend(run_ablation(fb.corpus, level, c.experiment_config("BTM"), builder=fb))
        report.save(d / "report.json")
        for pop in ("filtered", "full"):
            (d / f"table_{pop}.csv").write_text(f"# config_hash={self.config_hash}\n"
                                                + render_table(report, pop), encoding="utf-8")
        for name, rows in (("attention", report.attention), ("ablation", report.ablation)):
            if rows:
                (d / f"{name}.csv").write_text(f"# config_hash={self.config_hash}\n" + rows_to_csv(rows),
                                               encoding="utf-8")


def run_pipeline(config: PipelineConfig, out: str | Path | None = None, **kw) -> list[StageStatus]:
    return Pipeline(config, out).run(**kw)
