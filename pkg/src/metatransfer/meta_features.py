"""Course meta vector: duration, level, language and three text embeddings.

Text is embedded with a seeded hashing embedder over character n-grams, so
no pretrained model or network access is needed. Real vectors can be
supplied per course through a JSON override file.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datamodel import CourseIteration, CourseMetaRaw, Language, Level
from .errors import ConfigError, DataError, ShapeError

SLICE_NAMES = ("duration", "level", "language", "title", "short", "long")
LEVEL_ORDER = (Level.Bachelor, Level.Master, Level.Propedeutic)
LANGUAGE_ORDER = (Language.French, Language.English)
DEFAULT_TOTAL = 124
TABLE_SIZE = 2 ** 20
_ONE_HOT = ("level", "language")
_PUNCT = re.compile(r"[^\w\s]")


@dataclass(frozen=True)
class MetaConfig:
    title_dim: int = 30
    short_dim: int = 30
    long_dim: int = 58
    seed: int = 0
    expected_total: int | None = DEFAULT_TOTAL

    def __post_init__(self):
        for name in ("title_dim", "short_dim", "long_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.expected_total is not None and self.total != self.expected_total:
            raise ConfigError(
                f"meta dims give {self.total} values, expected {self.expected_total} "
                f"(1 + 3 + 2 + title + short + long)"
            )

    @property
    def sizes(self) -> dict[str, int]:
        return {"duration": 1, "level": 3, "language": 2,
                "title": self.title_dim, "short": self.short_dim, "long": self.long_dim}

    @property
    def total(self) -> int:
        return sum(self.sizes.values())

    def layout(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, size in self.sizes.items():
            out[name] = slice(start, start + size)
            start += size
        return out

    def to_json(self) -> dict:
        return {"title_dim": self.title_dim, "short_dim": self.short_dim,
                "long_dim": self.long_dim, "seed": self.seed, "expected_total": self.expected_total}


@dataclass
class MetaVector:
    values: np.ndarray
    layout: dict[str, slice]

    def slice(self, name: str) -> np.ndarray:
        return self.values[self.layout[name]]

    def select(self, subset: Iterable[str]) -> np.ndarray:
        """Concatenate the chosen slices in canonical order."""
        chosen = set(subset)
        unknown = chosen - set(SLICE_NAMES)
        if unknown:
            raise ConfigError(f"unknown meta slices: {sorted(unknown)}")
        parts = [self.values[self.layout[n]] for n in SLICE_NAMES if n in chosen]
        return np.concatenate(parts) if parts else np.zeros(0)


class TextEmbedder:
    """Hashed character n-gram embedder (subword style, no training)."""

    def __init__(self, dim: int, seed: int = 0, ngram_range: tuple[int, int] = (3, 5),
                 table_size: int = TABLE_SIZE):
        if dim < 1:
            raise ConfigError("embedding dim must be positive")
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("embedder seed must fit in 64 unsigned bits")
        self.dim = dim
        self.seed = seed
        self.ngram_range = ngram_range
        self.table_size = table_size
        self._key = seed.to_bytes(8, "little")
        self._cache: dict[int, np.ndarray] = {}

    def bucket(self, gram: str) -> int:
        h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self._key)
        return int.from_bytes(h.digest(), "little") % self.table_size

    def bucket_vector(self, bucket: int) -> np.ndarray:
        vec = self._cache.get(bucket)
        if vec is None:
            rng = np.random.default_rng([self.seed, bucket, self.dim])
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            self._cache[bucket] = vec
        return vec

    def ngrams(self, token: str) -> list[str]:
        lo, hi = self.ngram_range
        if len(token) < lo:
            return [token]
        return [token[i:i + n] for n in range(lo, hi + 1) for i in range(len(token) - n + 1)]

    def token_vector(self, token: str) -> np.ndarray:
        return np.mean([self.bucket_vector(self.bucket(g)) for g in self.ngrams(token)], axis=0)


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub("", text.lower()).split()


def embed_text(text: str, embedder: TextEmbedder) -> np.ndarray:
    tokens = tokenize(text)
    if not tokens:
        return np.zeros(embedder.dim)
    return np.mean([embedder.token_vector(t) for t in tokens], axis=0)


def encode_categorical(meta: CourseMetaRaw) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    duration = np.array([float(meta.duration_weeks)])
    level = np.array([float(meta.level is l) for l in LEVEL_ORDER])
    language = np.array([float(meta.language is l) for l in LANGUAGE_ORDER])
    return duration, level, language


@dataclass
class ExternalEmbeddings:
    """Per-course text vectors read from ``{course_id: {title, short, long}}``."""

    vectors: dict[str, dict[str, np.ndarray]]

    def lookup(self, course: CourseIteration, config: MetaConfig) -> dict[str, np.ndarray]:
        entry = self.vectors.get(course.course_id, self.vectors.get(course.course_set_id))
        if entry is None:
            raise DataError(f"external embeddings missing course {course.course_id}")
        out = {}
        for name in ("title", "short", "long"):
            if name not in entry:
                raise DataError(f"external embeddings for {course.course_id} lack '{name}'")
            vec = np.asarray(entry[name], dtype=np.float64)
            want = config.sizes[name]
            if vec.shape != (want,):
                raise DataError(
                    f"external {name} vector for {course.course_id} has length {vec.size}, expected {want}"
                )
            out[name] = vec
        return out


def load_external_embeddings(path: str | Path) -> ExternalEmbeddings:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise DataError(f"{path}: expected an object keyed by course id")
    return ExternalEmbeddings({cid: {k: np.asarray(v, dtype=np.float64) for k, v in entry.items()}
                               for cid, entry in raw.items()})


@dataclass
class MetaNormStats:
    mins: np.ndarray
    maxs: np.ndarray
    layout: dict[str, slice]

    def to_json(self) -> dict:
        return {"min": self.mins.tolist(), "max": self.maxs.tolist()}


class MetaFeaturizer:
    """Raw meta vectors plus min-max scaling fitted on training courses.

    One-hot slices keep their 0/1 values; every other dimension is scaled to
    [0, 1] with training-course statistics and clamped for unseen courses.
    """

    def __init__(self, config: MetaConfig = MetaConfig(), external: ExternalEmbeddings | None = None):
        self.config = config
        self.external = external
        self.stats: MetaNormStats | None = None
        self._embedders = {name: TextEmbedder(config.sizes[name], config.seed + i)
                           for i, name in enumerate(("title", "short", "long"))}

    @property
    def dim(self) -> int:
        return self.config.total

    def raw(self, course: CourseIteration) -> np.ndarray:
        meta = course.meta
        duration, level, language = encode_categorical(meta)
        if self.external is not None:
            texts = self.external.lookup(course, self.config)
        else:
            texts = {
                "title": embed_text(meta.title, self._embedders["title"]),
                "short": embed_text(meta.short_description, self._embedders["short"]),
                "long": embed_text(meta.long_description, self._embedders["long"]),
            }
        return np.concatenate([duration, level, language, texts["title"], texts["short"], texts["long"]])

    def fit(self, courses: Sequence[CourseIteration]) -> "MetaFeaturizer":
        if not courses:
            raise DataError("meta statistics need at least one training course")
        raws = np.stack([self.raw(c) for c in courses])
        self.stats = MetaNormStats(raws.min(axis=0), raws.max(axis=0), self.config.layout())
        return self

    def transform(self, course: CourseIteration) -> MetaVector:
        return assemble_meta(course, self.config, self.stats, featurizer=self)


def assemble_meta(course: CourseIteration, config: MetaConfig = MetaConfig(),
                  stats: MetaNormStats | None = None, *,
                  featurizer: MetaFeaturizer | None = None) -> MetaVector:
    """Meta vector of ``course``; unscaled when ``stats`` is None."""
    featurizer = featurizer or MetaFeaturizer(config)
    values = featurizer.raw(course)
    layout = config.layout()
    if stats is not None:
        if stats.mins.shape != values.shape:
            raise ShapeError(f"meta stats have {stats.mins.size} dims, vector has {values.size}")
        span = stats.maxs - stats.mins
        scaled = np.where(span > 0, (values - stats.mins) / np.where(span > 0, span, 1.0), 0.0)
        scaled = np.clip(scaled, 0.0, 1.0)
        for name in _ONE_HOT:
            scaled[layout[name]] = values[layout[name]]
        values = scaled
    return MetaVector(values, layout)


def parse_subset(subset: Iterable[str] | str | None) -> tuple[str, ...]:
    """Normalise a subset given as names, ``F1``..``F6`` codes or a comma list."""
    if subset is None:
        return SLICE_NAMES
    if isinstance(subset, str):
        subset = [s for s in subset.split(",") if s.strip()]
    codes = {f"F{i + 1}": n for i, n in enumerate(SLICE_NAMES)}
    names = []
    for item in subset:
        item = item.strip()
        name = codes.get(item.upper(), item)
        if name not in SLICE_NAMES:
            raise ConfigError(f"unknown meta feature {item!r}; use {', '.join(SLICE_NAMES)} or F1..F6")
        names.append(name)
    return tuple(n for n in SLICE_NAMES if n in names)
