"""Transfer settings, meta-feature ablation and attention analysis.

Settings:

* ``OneOneSame``  10-fold cross validation inside one course.
* ``NOneSame``    train on earlier iterations of the same course set.
* ``OneOneDiff``  one model per other transfer course, BACs averaged.
* ``NOneDiff``    one model on every training course.
* ``NCDiff``      hold out a whole course set, evaluate its last iteration.
* ``NCDiffFT``    as ``NCDiff``, then fine-tune on the earlier iterations.

Every setting is evaluated on the filtered population (early dropouts
removed) and on the full population. Reports carry the raw predictions so
each BAC can be recomputed independently.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datamodel import Corpus
from .datasets import Dataset, FeatureBuilder, split_fraction, split_with_fallback
from .errors import ConfigError, DataError, InapplicableSettingError
from .meta_features import SLICE_NAMES
from .metrics import accuracy, balanced_accuracy, confusion_counts, stratified_kfold, stratified_split
from .models import (
    THRESHOLD,
    ArchitectureSpec,
    TrainConfig,
    TrainedModel,
    Model,
    extract_attention,
    fine_tune,
    grid_search,
    train,
)

__all__ = [
    "SETTINGS", "ExperimentConfig", "ResultRow", "ExperimentReport", "balanced_accuracy",
    "stratified_split", "derive_seed", "n_one_diff_seed", "fit_on_courses", "run_transfer",
    "run_one_one_same", "run_ablation", "attention_report", "render_table", "rows_to_csv",
]

log = logging.getLogger(__name__)

SETTINGS = ("OneOneSame", "NOneSame", "OneOneDiff", "NOneDiff", "NCDiff", "NCDiffFT")
POPULATIONS = ("filtered", "full")
REPORT_SCHEMA = "metatransfer-report"
REPORT_VERSION = 1


def derive_seed(master: int, *parts) -> int:
    """Stable 31-bit seed from a master seed and labels (blake2b of their text form)."""
    text = "|".join([str(master)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=4).digest(), "little") & 0x7FFFFFFF


def n_one_diff_seed(master: int) -> int:
    return derive_seed(master, "NOneDiff")


@dataclass(frozen=True)
class ExperimentConfig:
    arch: ArchitectureSpec = ArchitectureSpec("BO")
    train: TrainConfig = TrainConfig()
    fine_tune: TrainConfig = TrainConfig(lr=1e-4)
    grids: Mapping[str, Sequence] | None = None
    val_fraction: float = 0.1
    folds: int = 10
    seed: int = 0
    jobs: int = 1

    def for_kind(self, kind: str) -> "ExperimentConfig":
        return replace(self, arch=replace(self.arch, kind=kind))


@dataclass
class ResultRow:
    setting: str
    arch: str
    course_id: str
    level: float
    population: str
    status: str = "ok"
    bac: float | None = None
    accuracy: float | None = None
    confusion: dict[str, int] | None = None
    n: int = 0
    source_bacs: dict[str, float] | None = None
    fold_bacs: list[float] | None = None
    predictions: list[list] = field(default_factory=list)

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class ExperimentReport:
    rows: list[ResultRow] = field(default_factory=list)
    ablation: list[dict] = field(default_factory=list)
    attention: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "config": self.config,
            "rows": [r.to_json() for r in self.rows],
            "ablation": self.ablation,
            "attention": self.attention,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if d.get("schema") != REPORT_SCHEMA or d.get("version") != REPORT_VERSION:
            raise DataError(f"{path}: not a version {REPORT_VERSION} experiment report")
        rows = [ResultRow(**r) for r in d["rows"]]
        return cls(rows, d.get("ablation", []), d.get("attention", []), d.get("config", {}))


# ---------------------------------------------------------------- helpers


def _score_row(row: ResultRow, p: np.ndarray, data: Dataset) -> ResultRow:
    pred = p > THRESHOLD
    row.n = len(data)
    row.confusion = confusion_counts(pred, data.y)
    row.accuracy = accuracy(pred, data.y)
    try:
        row.bac = balanced_accuracy(pred, data.y)
    except DataError:
        row.status = "single-class"
    row.predictions = [[s, float(q), int(y)] for s, q, y in zip(data.student_ids, p, data.y)]
    return row


def fit_on_courses(fb: FeatureBuilder, cids: Sequence[str], cfg: ExperimentConfig, seed: int,
         students: Mapping[str, Sequence[str]] | None = None):
    """Fit normalisation on ``cids`` and train one model; returns (model, stats, featurizer)."""
    spec = replace(cfg.arch, seed=seed)
    stats = fb.fit_behavior_stats(cids, students=students)
    feats: dict = {}

    def featurizer(s: ArchitectureSpec):
        key = s.embedding_dims
        if key not in feats:
            feats[key] = fb.featurizer(cids, s.meta_config)
        return feats[key]

    def data_for(s: ArchitectureSpec):
        data = fb.dataset(cids, stats, featurizer(s), students=students)
        return split_fraction(data, cfg.val_fraction, seed)

    tcfg = replace(cfg.train, seed=seed)
    if cfg.grids:
        result = grid_search(spec.kind, cfg.grids, data_for, tcfg, max_weeks=fb.max_weeks, base=spec,
                             jobs=cfg.jobs, level=fb.level,
                             stats_for=lambda s: (stats, featurizer(s).stats))
        tm = result.best_model
    else:
        tr, va = data_for(spec)
        tm = train(Model(spec, fb.max_weeks), tr, va, tcfg, behavior_stats=stats,
                   meta_stats=featurizer(spec).stats, level=fb.level)
    return tm, stats, featurizer(tm.spec)


def _evaluate(tm: TrainedModel, fb: FeatureBuilder, cid: str, stats, feat, setting: str,
              train_keys: set | None = None) -> list[ResultRow]:
    rows = []
    for pop in POPULATIONS:
        data = fb.dataset([cid], stats, feat, filtered=pop == "filtered")
        if train_keys is not None and set(data.keys) & train_keys:
            raise DataError(f"{setting}: evaluation students of {cid} were seen in training")
        row = ResultRow(setting, tm.spec.kind, cid, fb.level, pop)
        rows.append(_score_row(row, tm.predict(data), data))
    return rows


def _training_keys(fb: FeatureBuilder, cids: Iterable[str]) -> set:
    return {(c, s) for c in cids for s in fb.corpus[c].students}


# ---------------------------------------------------------------- settings


def run_one_one_same(fb: FeatureBuilder, cid: str, cfg: ExperimentConfig) -> list[ResultRow]:
    """Stratified k-fold CV inside one course: fold k tests, fold k+1 validates."""
    course = fb.corpus[cid]
    removed = fb.filter_result(cid).removed
    students = course.students
    keys = [(course.labels[s].is_fail, s in removed) for s in students]
    fold_seed = derive_seed(cfg.seed, "folds", cid)
    for options in (keys, [k[0] for k in keys], [0] * len(keys)):
        try:
            folds = stratified_kfold(students, options, cfg.folds, seed=fold_seed)
            break
        except DataError:
            continue
    else:
        raise DataError(f"OneOneSame: {cid} has fewer than {cfg.folds} students")
    preds = {pop: {} for pop in POPULATIONS}
    fold_bacs: dict[str, list[float]] = {pop: [] for pop in POPULATIONS}
    for k in range(cfg.folds):
        test, val = folds[k], folds[(k + 1) % cfg.folds]
        rest = [s for j, f in enumerate(folds) if j not in (k, (k + 1) % cfg.folds) for s in f]
        fit_students = [s for s in rest + val if s not in removed]
        val_set = set(val)
        seed = derive_seed(cfg.seed, "OneOneSame", cid, k)
        spec = replace(cfg.arch, seed=seed)
        stats = fb.fit_behavior_stats([cid], students={cid: [s for s in fit_students if s not in val_set]})
        feat = fb.featurizer([cid], spec.meta_config)
        data = fb.dataset([cid], stats, feat, students={cid: fit_students})
        is_val = np.array([s in val_set for s in data.student_ids])
        tm = train(Model(spec, fb.max_weeks), data.take(np.flatnonzero(~is_val)),
                   data.take(np.flatnonzero(is_val)), replace(cfg.train, seed=seed),
                   behavior_stats=stats, meta_stats=feat.stats, level=fb.level)
        for pop in POPULATIONS:
            members = [s for s in test if pop == "full" or s not in removed]
            if not members:
                continue
            tdata = fb.dataset([cid], stats, feat, students={cid: members})
            p = tm.predict(tdata)
            preds[pop].update({s: (float(q), int(y)) for s, q, y in zip(tdata.student_ids, p, tdata.y)})
            try:
                fold_bacs[pop].append(balanced_accuracy(p > THRESHOLD, tdata.y))
            except DataError:
                pass
    rows = []
    for pop in POPULATIONS:
        sids = sorted(preds[pop])
        p = np.array([preds[pop][s][0] for s in sids])
        y = np.array([preds[pop][s][1] for s in sids], dtype=np.float64)
        row = ResultRow("OneOneSame", cfg.arch.kind, cid, fb.level, pop)
        pred = p > THRESHOLD
        row.n = len(sids)
        row.confusion = confusion_counts(pred, y)
        row.accuracy = accuracy(pred, y)
        row.fold_bacs = fold_bacs[pop]
        row.bac = float(np.mean(fold_bacs[pop])) if fold_bacs[pop] else None
        if row.bac is None:
            row.status = "single-class"
        row.predictions = [[s, q, int(t)] for s, q, t in zip(sids, p.tolist(), y)]
        rows.append(row)
    return rows


def _prior_iterations(corpus: Corpus, cid: str) -> list[str]:
    course = corpus[cid]
    train = set(corpus.train_ids)
    return [c.course_id for c in corpus.iterations_of(course.course_set_id)
            if c.iteration_index < course.iteration_index and c.course_id in train]


def _check_applicable(setting: str, corpus: Corpus, cid: str) -> None:
    if setting == "NOneSame" and not _prior_iterations(corpus, cid):
        raise InapplicableSettingError(f"setting inapplicable: {cid} has no earlier iteration in training")
    if setting == "OneOneDiff" and len([c for c in corpus.transfer_ids if c != cid]) == 0:
        raise InapplicableSettingError(f"setting inapplicable: no other transfer course for {cid}")
    if setting in ("NCDiff", "NCDiffFT"):
        its = corpus.iterations_of(corpus[cid].course_set_id)
        if its[-1].course_id != cid:
            raise InapplicableSettingError(f"setting inapplicable: {cid} is not the last iteration of its set")
        if setting == "NCDiffFT" and len(its) < 2:
            raise InapplicableSettingError(f"setting inapplicable: {cid} has no earlier iteration to fine-tune on")


def run_transfer(setting: str, corpus: Corpus, level: float, cfg: ExperimentConfig = ExperimentConfig(),
                 *, course_ids: Sequence[str] | None = None,
                 builder: FeatureBuilder | None = None,
                 pretrained: tuple | None = None) -> list[ResultRow]:
    """Rows of one setting for ``course_ids`` (default: every transfer course).

    Explicitly requested courses for which the setting cannot apply raise
    :class:`InapplicableSettingError`; with the default course list they
    produce an ``inapplicable`` row instead. ``pretrained`` is an optional
    ``(model, behavior_stats, featurizer)`` reused by ``NOneDiff``; it must come
    from :func:`fit_on_courses` on the training courses to keep results identical.
    """
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; choose from {SETTINGS}")
    fb = builder or FeatureBuilder(corpus, level, seed=cfg.seed, jobs=cfg.jobs)
    explicit = course_ids is not None
    targets = list(course_ids) if explicit else list(corpus.transfer_ids)
    rows: list[ResultRow] = []
    shared = pretrained
    for cid in targets:
        try:
            _check_applicable(setting, corpus, cid)
        except InapplicableSettingError:
            if explicit:
                raise
            rows.append(ResultRow(setting, cfg.arch.kind, cid, level, "filtered", status="inapplicable"))
            continue
        if setting == "OneOneSame":
            rows.extend(run_one_one_same(fb, cid, cfg))
        elif setting == "NOneSame":
            sources = _prior_iterations(corpus, cid)
            tm, stats, feat = fit_on_courses(fb, sources, cfg, derive_seed(cfg.seed, setting, cid))
            rows.extend(_evaluate(tm, fb, cid, stats, feat, setting, _training_keys(fb, sources)))
        elif setting == "OneOneDiff":
            per_source: dict[str, list[ResultRow]] = {}
            for src in [c for c in corpus.transfer_ids if c != cid]:
                tm, stats, feat = fit_on_courses(fb, [src], cfg, derive_seed(cfg.seed, setting, src))
                per_source[src] = _evaluate(tm, fb, cid, stats, feat, setting, _training_keys(fb, [src]))
            for i, pop in enumerate(POPULATIONS):
                bacs = {s: r[i].bac for s, r in per_source.items() if r[i].bac is not None}
                first = next(iter(per_source.values()))[i]
                row = ResultRow(setting, cfg.arch.kind, cid, level, pop, n=first.n, source_bacs=bacs)
                row.bac = float(np.mean(list(bacs.values()))) if bacs else None
                row.status = "ok" if bacs else "single-class"
                row.predictions = [[src] + p for src, r in per_source.items() for p in r[i].predictions]
                rows.append(row)
        elif setting == "NOneDiff":
            if shared is None:
                shared = fit_on_courses(fb, corpus.train_ids, cfg, n_one_diff_seed(cfg.seed))
            tm, stats, feat = shared
            rows.extend(_evaluate(tm, fb, cid, stats, feat, setting, _training_keys(fb, corpus.train_ids)))
        else:
            held_set = corpus[cid].course_set_id
            sources = [c for c in corpus.ids if corpus[c].course_set_id != held_set]
            tm, stats, feat = fit_on_courses(fb, sources, cfg, derive_seed(cfg.seed, "NCDiff", held_set))
            seen = _training_keys(fb, sources)
            if setting == "NCDiffFT":
                priors = [c.course_id for c in corpus.iterations_of(held_set) if c.course_id != cid]
                ft_data = fb.dataset(priors, stats, feat)
                tm = fine_tune(tm, ft_data, replace(cfg.fine_tune, seed=derive_seed(cfg.seed, setting, held_set)))
                seen |= _training_keys(fb, priors)
            rows.extend(_evaluate(tm, fb, cid, stats, feat, setting, seen))
    return rows


# ---------------------------------------------------------------- ablation


def run_ablation(corpus: Corpus, level: float, cfg: ExperimentConfig = ExperimentConfig(),
                 *, builder: FeatureBuilder | None = None) -> list[dict]:
    """BTM with one meta slice at a time plus a BO baseline, 80/10/10 over training students."""
    fb = builder or FeatureBuilder(corpus, level, seed=cfg.seed, jobs=cfg.jobs)
    cids = list(corpus.train_ids)
    if not cids:
        raise DataError("ablation needs training courses")
    pool = {c: fb.population(c) for c in cids}
    items = [(c, s) for c in cids for s in pool[c]]
    keys = [(c, fb.corpus[c].labels[s].is_fail) for c, s in items]
    labels = [k[1] for k in keys]
    train_keys, val_keys, test_keys = split_with_fallback(items, [keys, labels], (0.8, 0.1, 0.1),
                                                          derive_seed(cfg.seed, "ablation"))
    fit_students = {c: [s for cc, s in train_keys if cc == c] for c in cids}
    stats = fb.fit_behavior_stats(cids, students=fit_students)
    rows = []
    variants = [("BTM", (name,)) for name in SLICE_NAMES] + [("BO", SLICE_NAMES)]
    for kind, subset in variants:
        seed = derive_seed(cfg.seed, "ablation", kind, *subset)
        spec = replace(cfg.arch, kind=kind, meta_feature_subset=subset, seed=seed)
        feat = fb.featurizer(cids, spec.meta_config)
        data = fb.dataset(cids, stats, feat, students=pool)
        tm = train(Model(spec, fb.max_weeks), data.select(train_keys), data.select(val_keys),
                   replace(cfg.train, seed=seed), behavior_stats=stats, meta_stats=feat.stats, level=level)
        test = data.select(test_keys)
        p = tm.predict(test)
        rows.append({
            "feature": "baseline" if kind == "BO" else subset[0],
            "arch": kind,
            "level": level,
            "input_width": tm.model.input_width,
            "bac": balanced_accuracy(p > THRESHOLD, test.y),
            "n_test": len(test),
        })
    return rows


# ---------------------------------------------------------------- attention


def attention_report(tm: TrainedModel, fb: FeatureBuilder, course_ids: Sequence[str], stats=None,
                     featurizer=None) -> list[dict]:
    """Quartiles of per-slice meta attention and behavior/meta latent mass across students."""
    if tm.spec.kind != "BSM":
        raise ConfigError("attention report needs a BSM model")
    stats = stats or tm.behavior_stats
    if featurizer is None:
        raise ConfigError("attention report needs the meta featurizer used in training")
    data = fb.dataset(list(course_ids), stats, featurizer)
    summary = extract_attention(tm, data)
    rows = []
    columns = {f"meta:{n}": summary.per_student_slices[:, i] for i, n in enumerate(summary.slice_names)}
    columns["latent:behavior"] = summary.behavior_mass
    columns["latent:meta"] = summary.meta_mass
    for name, values in columns.items():
        q1, q2, q3 = np.quantile(values, [0.25, 0.5, 0.75])
        rows.append({"level": fb.level, "weight": name, "mean": float(values.mean()),
                     "q1": float(q1), "q2": float(q2), "q3": float(q3), "n": int(len(values))})
    return rows


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def render_table(report: ExperimentReport, population: str = "filtered") -> str:
    """Wide CSV: one line per (course, level), one column per setting:arch."""
    cells: dict[tuple, dict[str, str]] = {}
    columns: list[str] = []
    for r in report.rows:
        if r.population != population and r.status != "inapplicable":
            continue
        col = f"{r.setting}:{r.arch}"
        if col not in columns:
            columns.append(col)
        value = "-" if r.status == "inapplicable" else ("" if r.bac is None else f"{r.bac:.4f}")
        cells.setdefault((r.course_id, r.level), {})[col] = value
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["course", "level"] + columns)
    for (cid, level) in sorted(cells):
        w.writerow([cid, level] + [cells[(cid, level)].get(c, "") for c in columns])
    return buf.getvalue()
