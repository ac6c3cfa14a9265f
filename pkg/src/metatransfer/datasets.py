"""Model-ready tensors assembled from a corpus at one early-prediction level."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .behavior_features import (
    N_FEATURES,
    FeatureConfig,
    NormStats,
    apply_norm_stats,
    compute_raw_many,
    fit_norm_stats,
    pad_weeks,
)
from .datamodel import Corpus, weeks_visible
from .dropout_filter import DEFAULT_GRADE_WEEKS, FilterResult, LogisticModel, fit_course_filter
from .errors import DataError
from .meta_features import ExternalEmbeddings, MetaConfig, MetaFeaturizer
from .metrics import stratified_split


@dataclass
class Dataset:
    H: np.ndarray
    M: np.ndarray
    y: np.ndarray
    student_ids: list[str]
    course_ids: list[str]
    meta_layout: dict[str, slice] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def keys(self) -> list[tuple[str, str]]:
        return list(zip(self.course_ids, self.student_ids))

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.H[idx], self.M[idx], self.y[idx],
                       [self.student_ids[i] for i in idx], [self.course_ids[i] for i in idx],
                       self.meta_layout)

    def select(self, keys: Iterable[tuple[str, str]]) -> "Dataset":
        pos = {k: i for i, k in enumerate(self.keys)}
        return self.take([pos[k] for k in keys])

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise DataError("cannot concatenate empty datasets")
        return Dataset(
            np.concatenate([p.H for p in parts]), np.concatenate([p.M for p in parts]),
            np.concatenate([p.y for p in parts]),
            [s for p in parts for s in p.student_ids], [c for p in parts for c in p.course_ids],
            parts[0].meta_layout,
        )


def split_with_fallback(items: Sequence, key_options: Sequence[Sequence], fractions: Sequence[float],
                        seed: int) -> list[list]:
    """Stratified split on the first key list whose strata are all large enough.

    An unstratified split is the last resort, for sets where one class has a
    single member.
    """
    for keys in list(key_options) + [[0] * len(items)]:
        try:
            return stratified_split(items, keys, fractions, seed=seed)
        except DataError:
            continue
    raise DataError(f"cannot split {len(items)} items into {len(fractions)} parts")


def split_fraction(data: Dataset, fraction: float, seed: int, *, by_course: bool = True):
    """Stratified (course, label) split into ``(rest, held_out)`` with ``fraction`` held out."""
    labels = [int(y) for y in data.y]
    options = ([list(zip(data.course_ids, labels))] if by_course else []) + [labels]
    rest, held = split_with_fallback(list(range(len(data))), options, (1.0 - fraction, fraction), seed)
    return data.take(rest), data.take(held)


class FeatureBuilder:
    """Caches raw features and dropout filters per course for one level."""

    def __init__(self, corpus: Corpus, level: float, *,
                 feature_config: FeatureConfig = FeatureConfig(),
                 external: ExternalEmbeddings | None = None,
                 w_g: int = DEFAULT_GRADE_WEEKS, seed: int = 0, jobs: int = 1):
        self.corpus = corpus
        self.level = level
        self.feature_config = feature_config
        self.external = external
        self.w_g = w_g
        self.seed = seed
        self.jobs = jobs
        self.max_weeks = corpus.max_weeks
        self._raw: dict[str, np.ndarray] = {}
        self._filters: dict[str, FilterResult] = {}
        self._filter_models: dict[str, LogisticModel] = {}

    def weeks(self, cid: str) -> int:
        return weeks_visible(self.corpus[cid].duration_weeks, self.level)

    def precompute(self, cids: Iterable[str]) -> None:
        todo = [c for c in dict.fromkeys(cids) if c not in self._raw]
        courses = [self.corpus[c] for c in todo]
        for cid, raw in zip(todo, compute_raw_many(courses, self.level, self.feature_config, self.jobs)):
            self._raw[cid] = raw

    def raw(self, cid: str) -> np.ndarray:
        if cid not in self._raw:
            self.precompute([cid])
        return self._raw[cid]

    def filter_result(self, cid: str) -> FilterResult:
        if cid not in self._filters:
            course = self.corpus[cid]
            # never look at grades beyond the visible prefix
            w_g = max(1, min(self.w_g, self.weeks(cid)))
            self._filter_models[cid], self._filters[cid] = fit_course_filter(course, w_g=w_g, seed=self.seed)
        return self._filters[cid]

    def filter_model(self, cid: str) -> LogisticModel | None:
        """The fitted logistic filter, or None when the result was injected."""
        self.filter_result(cid)
        return self._filter_models.get(cid)

    def set_filter(self, cid: str, result: FilterResult) -> None:
        students = set(self.corpus[cid].students)
        if result.kept | result.removed != students or result.kept & result.removed:
            raise DataError(f"{cid}: filter result does not partition the course's students")
        self._filters[cid] = result

    def set_raw(self, cid: str, raw: np.ndarray) -> None:
        expected = (len(self.corpus[cid].students), self.weeks(cid), N_FEATURES)
        if raw.shape != expected:
            raise DataError(f"{cid}: raw features have shape {raw.shape}, expected {expected}")
        self._raw[cid] = raw

    def population(self, cid: str, filtered: bool = True) -> list[str]:
        students = self.corpus[cid].students
        if not filtered:
            return students
        kept = self.filter_result(cid).kept
        return [s for s in students if s in kept]

    def _rows(self, cid: str, students: Iterable[str]) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.corpus[cid].students)}
        return np.array([index[s] for s in students], dtype=np.int64)

    def fit_behavior_stats(self, cids: Sequence[str], filtered: bool = True,
                           students: Mapping[str, Sequence[str]] | None = None) -> NormStats:
        self.precompute(cids)
        parts = []
        for cid in cids:
            pop = students[cid] if students is not None else self.population(cid, filtered)
            parts.append(self.raw(cid)[self._rows(cid, pop)])
        return fit_norm_stats(parts)

    def featurizer(self, cids: Sequence[str], meta_config: MetaConfig = MetaConfig()) -> MetaFeaturizer:
        return MetaFeaturizer(meta_config, self.external).fit([self.corpus[c] for c in cids])

    def dataset(self, cids: Sequence[str], stats: NormStats, featurizer: MetaFeaturizer, *,
                filtered: bool = True,
                students: Mapping[str, Sequence[str]] | None = None) -> Dataset:
        self.precompute(cids)
        H, M, y, sids, cids_out = [], [], [], [], []
        for cid in cids:
            course = self.corpus[cid]
            pop = list(students[cid]) if students is not None and cid in students \
                else self.population(cid, filtered)
            if not pop:
                continue
            raw = self.raw(cid)[self._rows(cid, pop)]
            H.append(pad_weeks(apply_norm_stats(raw, stats), self.max_weeks))
            meta = featurizer.transform(course).values
            M.append(np.repeat(meta[None, :], len(pop), axis=0))
            y.append(np.array([course.labels[s].is_fail for s in pop], dtype=np.float64))
            sids.extend(pop)
            cids_out.extend([cid] * len(pop))
        if not H:
            raise DataError(f"no students in courses {list(cids)}")
        return Dataset(np.concatenate(H), np.concatenate(M), np.concatenate(y), sids, cids_out,
                       featurizer.config.layout())
