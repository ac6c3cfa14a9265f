"""BO, BTM and BSM classifiers with training, grid search and fine-tuning.

* BO: masked BiLSTM stack over weekly behavior features, sigmoid output.
* BTM: same network, the enabled meta features appended to every real week.
* BSM: behavior and meta branches, each projected to a shared latent size,
  combined through two attention layers and a dense head.

All inputs are padded with -1 to a common number of weeks; padded weeks
never influence the output.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .behavior_features import N_FEATURES, NormStats
from .datasets import Dataset, split_fraction
from .errors import ConfigError, DataError, ShapeError, TrainingError
from .meta_features import SLICE_NAMES, MetaConfig, MetaNormStats, parse_subset
from .metrics import balanced_accuracy
from .nn import autograd as ag
from .nn.layers import (
    MASK_VALUE,
    init_attention,
    init_dense,
    init_lstm,
    init_projection,
    padding_mask,
)

log = logging.getLogger(__name__)

KINDS = ("BO", "BTM", "BSM")
LATENT_DIM = 256
CHECKPOINT_VERSION = 1
THRESHOLD = 0.5
FINE_TUNE_LR = 1e-4

DEFAULT_GRIDS: dict[str, list] = {
    "bilstm_layers": [1, 2],
    "bilstm_units": [32, 64, 128],
    "head_dense": [[256, 64], [128, 32]],
    "embedding_dims": [[30, 30, 58], [60, 30, 28]],
}


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str = "BO"
    bilstm_layers: int = 1
    bilstm_units: int = 32
    head_dense: tuple[int, ...] = (256, 64)
    meta_feature_subset: tuple[str, ...] = SLICE_NAMES
    embedding_dims: tuple[int, int, int] = (30, 30, 58)
    dropout: float = 0.1
    seed: int = 0
    attention_hidden: int = 64
    truncate: int | None = None
    latent_dim: int = LATENT_DIM

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in KINDS:
            raise ConfigError(f"unknown architecture {self.kind!r}; choose from {KINDS}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "head_dense", tuple(int(x) for x in self.head_dense))
        object.__setattr__(self, "embedding_dims", tuple(int(x) for x in self.embedding_dims))
        object.__setattr__(self, "meta_feature_subset", parse_subset(self.meta_feature_subset))
        if self.bilstm_layers < 1 or self.bilstm_units < 1:
            raise ConfigError("bilstm_layers and bilstm_units must be >= 1")
        if any(w < 1 for w in self.head_dense) or self.attention_hidden < 1 or self.latent_dim < 1:
            raise ConfigError("layer widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if len(self.embedding_dims) != 3:
            raise ConfigError("embedding_dims needs three values (title, short, long)")
        if kind != "BO" and not self.meta_feature_subset:
            raise ConfigError(f"{kind} needs at least one enabled meta feature")

    @property
    def uses_meta(self) -> bool:
        return self.kind != "BO"

    @property
    def meta_config(self) -> MetaConfig:
        t, s, l = self.embedding_dims
        return MetaConfig(t, s, l, expected_total=None)

    def meta_columns(self) -> np.ndarray:
        layout = self.meta_config.layout()
        cols = [np.arange(layout[n].start, layout[n].stop) for n in SLICE_NAMES
                if n in self.meta_feature_subset]
        return np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)

    @property
    def meta_dim(self) -> int:
        return int(len(self.meta_columns())) if self.uses_meta else 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["head_dense"] = list(self.head_dense)
        d["meta_feature_subset"] = list(self.meta_feature_subset)
        d["embedding_dims"] = list(self.embedding_dims)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ArchitectureSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    target_val_bac: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")


class Model:
    """Parameters plus forward pass of one architecture."""

    def __init__(self, spec: ArchitectureSpec, max_weeks: int, meta_dim: int | None = None,
                 n_behavior: int = N_FEATURES):
        if meta_dim is None:
            meta_dim = spec.meta_dim
        if spec.uses_meta and meta_dim < 1:
            raise ShapeError(f"{spec.kind} needs a non-empty meta vector")
        if spec.uses_meta and meta_dim != spec.meta_dim:
            raise ShapeError(f"meta width {meta_dim} does not match the architecture's {spec.meta_dim}")
        self.spec = spec
        self.max_weeks = max_weeks
        self.meta_dim = meta_dim if spec.uses_meta else 0
        self.n_behavior = n_behavior
        self.store = nn.ParamStore(spec.seed)
        s = self.store
        u = spec.bilstm_units
        self.input_width = n_behavior + (self.meta_dim if spec.kind == "BTM" else 0)
        self.lstm = []
        width = self.input_width
        for layer in range(spec.bilstm_layers):
            fw = init_lstm(s, f"bilstm{layer}.fw", width, u)
            bw = init_lstm(s, f"bilstm{layer}.bw", width, u)
            self.lstm.append((fw, bw))
            width = 2 * u
        self.widths = {"input": self.input_width, "behavior": 2 * u}
        if spec.kind == "BSM":
            F = self.meta_dim
            d = spec.latent_dim
            self.meta_attn = init_attention(s, "meta_attention", 1, spec.attention_hidden)
            self.meta_proj = init_projection(s, "meta_projection", 2 * F, d)
            self.behavior_proj = init_projection(s, "behavior_projection", 2 * u, d)
            self.latent_attn = init_attention(s, "latent_attention", 1, spec.attention_hidden)
            width = 4 * d
            self.head = []
            for i, h in enumerate(spec.head_dense):
                self.head.append(init_dense(s, f"head{i}", width, h))
                width = h
            self.widths.update(meta_branch=2 * F, latent=2 * d, combined=4 * d)
        self.out = init_dense(s, "output", width, 1)

    # ------------------------------------------------------------ forward

    def _check_inputs(self, H, M):
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 3 or H.shape[2] != self.n_behavior:
            raise ShapeError(f"behavior input must be (N, weeks, {self.n_behavior}), got {H.shape}")
        if self.spec.uses_meta:
            if M is None:
                raise ShapeError(f"{self.spec.kind} needs meta features")
            M = np.asarray(M, dtype=np.float64)
            if M.ndim == 1:
                M = np.repeat(M[None, :], H.shape[0], axis=0)
            if M.shape != (H.shape[0], self.meta_dim):
                raise ShapeError(f"meta input must be ({H.shape[0]}, {self.meta_dim}), got {M.shape}")
        return H, M

    def _sequence_input(self, H, M):
        mask = padding_mask(H)
        if self.spec.kind != "BTM":
            return H, mask
        rep = np.repeat(M[:, None, :], H.shape[1], axis=1)
        X = np.concatenate([H, rep], axis=2)
        # padded weeks stay entirely at the mask value
        X[~mask] = MASK_VALUE
        return X, mask

    def forward(self, H, M=None, *, training: bool = False, rng: np.random.Generator | None = None,
                with_attention: bool = False):
        """Fail probabilities as a (N, 1) tensor (and attention weights if asked)."""
        H, M = self._check_inputs(H, M)
        spec = self.spec
        if training and spec.dropout > 0 and rng is None:
            raise ValueError("training mode with dropout needs an rng")
        X, mask = self._sequence_input(H, M)
        seq = X
        final = None
        for i, (fw, bw) in enumerate(self.lstm):
            last = i == len(self.lstm) - 1
            final, seq = nn.bilstm(seq, mask, fw, bw, truncate=spec.truncate, return_sequences=not last)
        attn = None
        if spec.kind == "BSM":
            behavior = nn.projection_block(final, self.behavior_proj, training=training, rng=rng,
                                           rate=spec.dropout)
            meta_in = ag.Tensor(M)
            alpha = nn.bahdanau_attention(meta_in, *self.meta_attn)
            meta = nn.projection_block(ag.concat([meta_in, alpha], axis=1), self.meta_proj,
                                       training=training, rng=rng, rate=spec.dropout)
            latent = ag.concat([behavior, meta], axis=1)
            beta = nn.bahdanau_attention(latent, *self.latent_attn)
            x = ag.concat([latent, beta], axis=1)
            for w, b in self.head:
                x = nn.dense(x, w, b, "gelu")
            attn = {"meta": alpha.data, "latent": beta.data}
        else:
            x = nn.dropout(final, spec.dropout, rng, training)
        p = nn.dense(x, *self.out, "sigmoid")
        return (p, attn) if with_attention else p

    def predict_proba(self, H, M=None, batch_size: int = 256) -> np.ndarray:
        H, M = self._check_inputs(H, M)
        out = np.empty(len(H))
        for start in range(0, len(H), batch_size):
            sl = slice(start, start + batch_size)
            out[sl] = self.forward(H[sl], None if M is None else M[sl]).data[:, 0]
        return out


def build_model(spec: ArchitectureSpec, max_weeks: int, meta_dim: int | None = None) -> Model:
    return Model(spec, max_weeks, meta_dim)


# ------------------------------------------------------------ trained model


@dataclass
class TrainedModel:
    spec: ArchitectureSpec
    model: Model
    history: list[dict] = field(default_factory=list)
    behavior_stats: NormStats | None = None
    meta_config: MetaConfig | None = None
    meta_stats: MetaNormStats | None = None
    level: float | None = None
    best_epoch: int = -1

    @property
    def max_weeks(self) -> int:
        return self.model.max_weeks

    def inputs(self, data: Dataset):
        if data.H.shape[2] != self.model.n_behavior:
            raise ShapeError(f"dataset has {data.H.shape[2]} behavior features, "
                             f"model expects {self.model.n_behavior}")
        if not self.spec.uses_meta:
            return data.H, None
        expected = self.spec.meta_config.total
        if data.M.shape[1] != expected:
            raise ShapeError(f"dataset meta width {data.M.shape[1]} != {expected} "
                             f"for embedding dims {self.spec.embedding_dims}")
        return data.H, data.M[:, self.spec.meta_columns()]

    def predict(self, data: Dataset) -> np.ndarray:
        return self.model.predict_proba(*self.inputs(data))

    def copy(self) -> "TrainedModel":
        return copy.deepcopy(self)

    # -------------------------------------------------------- checkpoint

    def to_json(self) -> dict:
        params = {n: {"shape": list(a.shape), "data": a.ravel().tolist()}
                  for n, a in self.model.store.state_dict().items()}
        return {
            "format": "metatransfer-checkpoint",
            "version": CHECKPOINT_VERSION,
            "spec": self.spec.to_json(),
            "max_weeks": self.model.max_weeks,
            "meta_dim": self.model.meta_dim,
            "level": self.level,
            "best_epoch": self.best_epoch,
            "behavior_stats": self.behavior_stats.to_json() if self.behavior_stats else None,
            "meta_config": self.meta_config.to_json() if self.meta_config else None,
            "meta_stats": self.meta_stats.to_json() if self.meta_stats else None,
            "history": self.history,
            "params": params,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True), encoding="utf-8")

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainedModel":
        if d.get("format") != "metatransfer-checkpoint":
            raise DataError("not a model checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {d.get('version')}")
        spec = ArchitectureSpec.from_json(d["spec"])
        model = Model(spec, d["max_weeks"], d["meta_dim"] or None)
        model.store.load_state_dict({n: np.asarray(p["data"], dtype=np.float64).reshape(p["shape"])
                                     for n, p in d["params"].items()})
        meta_config = None
        if d.get("meta_config"):
            meta_config = MetaConfig(**d["meta_config"])
        meta_stats = None
        if d.get("meta_stats") and meta_config is not None:
            meta_stats = MetaNormStats(np.asarray(d["meta_stats"]["min"], dtype=np.float64),
                                       np.asarray(d["meta_stats"]["max"], dtype=np.float64),
                                       meta_config.layout())
        stats = NormStats.from_json(d["behavior_stats"]) if d.get("behavior_stats") else None
        return cls(spec, model, list(d.get("history", [])), stats, meta_config, meta_stats,
                   d.get("level"), d.get("best_epoch", -1))

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: corrupt checkpoint ({exc})") from None
        return cls.from_json(data)


# ------------------------------------------------------------------ training


def _score(p: np.ndarray, y: np.ndarray) -> float:
    """Validation criterion: BAC at 0.5, or negative BCE when BAC is undefined."""
    if y.min() != y.max():
        return balanced_accuracy(p > THRESHOLD, y)
    pc = np.clip(p, 1e-12, 1 - 1e-12)
    return -float(np.mean(-(y * np.log(pc) + (1 - y) * np.log(1 - pc))))


def _fit(tm: TrainedModel, train: Dataset, val: Dataset | None, config: TrainConfig) -> TrainedModel:
    model = tm.model
    store = model.store
    opt = nn.Adam(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    H, M = tm.inputs(train)
    y = train.y
    if val is not None and len(val):
        Hv, Mv = tm.inputs(val)
    best_score, best_state, since = -math.inf, store.state_dict(), 0
    for epoch in range(config.max_epochs):
        perm = rng.permutation(len(y))
        losses = []
        for start in range(0, len(y), config.batch_size):
            idx = perm[start:start + config.batch_size]
            store.zero_grad()
            p = model.forward(H[idx], None if M is None else M[idx], training=True, rng=rng)
            loss = nn.bce_loss(p, y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                norms = {n: float(np.linalg.norm(store[n].data)) for n in store.names()}
                worst = max(norms, key=norms.get)
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}; "
                                    f"largest parameter norm {worst}={norms[worst]:.3g}")
            loss.backward()
            opt.step(store)
            losses.append(value * len(idx))
        entry = {"epoch": epoch, "loss": sum(losses) / len(y)}
        if val is not None and len(val):
            score = _score(model.predict_proba(Hv, Mv), val.y)
            entry["val_score"] = score
            if score > best_score:
                best_score, best_state, since = score, store.state_dict(), 0
                tm.best_epoch = epoch
            else:
                since += 1
            tm.history.append(entry)
            if config.target_val_bac is not None and score >= config.target_val_bac:
                break
            if since >= config.patience:
                break
        else:
            tm.history.append(entry)
            best_state = None
            tm.best_epoch = epoch
    if best_state is not None and val is not None and len(val):
        store.load_state_dict(best_state)
    return tm


def train(model: Model, train_data: Dataset, val_data: Dataset | None = None,
          config: TrainConfig = TrainConfig(), *, behavior_stats: NormStats | None = None,
          meta_stats: MetaNormStats | None = None, level: float | None = None) -> TrainedModel:
    """Mini-batch BCE + Adam; keeps the parameters with the best validation BAC.

    Stops after ``patience`` epochs without improvement, at ``max_epochs``,
    or once ``target_val_bac`` is reached. Without validation data every
    epoch runs and the final parameters are kept.
    """
    if not len(train_data):
        raise DataError("empty training set")
    if val_data is not None and set(train_data.keys) & set(val_data.keys):
        raise DataError("training and validation students overlap")
    tm = TrainedModel(model.spec, model, [], behavior_stats,
                      model.spec.meta_config if model.spec.uses_meta else None, meta_stats, level)
    return _fit(tm, train_data, val_data, config)


def fine_tune(tm: TrainedModel, data: Dataset, config: TrainConfig = TrainConfig(lr=FINE_TUNE_LR), *,
              val_fraction: float = 0.1) -> TrainedModel:
    """Continue training every parameter on ``data`` with fresh Adam moments.

    A stratified ``val_fraction`` slice of ``data`` drives early stopping.
    """
    tm.inputs(data)  # layout check
    out = tm.copy()
    out.model.store.reset_optimizer()
    out.history = []
    if config.max_epochs == 0 or not len(data):
        return out
    rest, held = split_fraction(data, val_fraction, config.seed, by_course=False)
    return _fit(out, rest, held, config)


def evaluate_bac(tm: TrainedModel, data: Dataset) -> float:
    return balanced_accuracy(tm.predict(data) > THRESHOLD, data.y)


# ------------------------------------------------------------------ grid search


_GRID_ORDER = ("bilstm_layers", "bilstm_units", "head_dense", "meta_feature_subset",
               "embedding_dims", "attention_hidden", "dropout")


def all_meta_subsets() -> list[tuple[str, ...]]:
    return [tuple(c) for r in range(1, len(SLICE_NAMES) + 1)
            for c in itertools.combinations(SLICE_NAMES, r)]


def expand_grid(kind: str, grids: Mapping[str, Sequence], base: ArchitectureSpec | None = None
                ) -> list[ArchitectureSpec]:
    """Cartesian product of ``grids`` in a fixed key order.

    ``meta_feature_subset`` may be the string ``"all"`` for every non-empty
    combination of the six meta slices. Meta keys are ignored for BO.
    """
    unknown = set(grids) - set(_GRID_ORDER)
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    base = replace(base or ArchitectureSpec(kind), kind=kind)
    keys, values = [], []
    for key in _GRID_ORDER:
        if key not in grids:
            continue
        if base.kind == "BO" and key in ("meta_feature_subset", "embedding_dims"):
            continue
        if base.kind != "BSM" and key in ("head_dense", "attention_hidden"):
            continue
        options = grids[key]
        if key == "meta_feature_subset" and options == "all":
            options = all_meta_subsets()
        options = list(options)
        if not options:
            raise ConfigError(f"grid for {key} is empty")
        keys.append(key)
        values.append(options)
    specs = []
    for combo in itertools.product(*values):
        specs.append(replace(base, **dict(zip(keys, combo))))
    return specs


@dataclass
class GridResult:
    best_spec: ArchitectureSpec
    best_model: TrainedModel
    table: list[dict]


def _train_candidate(args):
    spec, train_data, val_data, config, max_weeks, stats, meta_stats, level = args
    model = Model(spec, max_weeks)
    tm = train(model, train_data, val_data, config, behavior_stats=stats,
               meta_stats=meta_stats, level=level)
    return tm, _score(tm.predict(val_data), val_data.y)


def grid_search(kind: str, grids: Mapping[str, Sequence],
                data_for: Callable[[ArchitectureSpec], tuple[Dataset, Dataset]],
                config: TrainConfig = TrainConfig(), *, max_weeks: int,
                base: ArchitectureSpec | None = None, jobs: int = 1,
                stats_for: Callable[[ArchitectureSpec], tuple] | None = None,
                level: float | None = None) -> GridResult:
    """Train every grid combination; keep the one with the best validation BAC.

    ``data_for(spec)`` returns ``(train, val)`` for a candidate (embedding
    dims change the meta vector). Ties go to the earlier candidate.
    """
    specs = expand_grid(kind, grids, base)
    tasks = []
    for spec in specs:
        tr, va = data_for(spec)
        stats, meta_stats = stats_for(spec) if stats_for else (None, None)
        tasks.append((spec, tr, va, config, max_weeks, stats, meta_stats, level))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_candidate, tasks))
    else:
        results = [_train_candidate(t) for t in tasks]
    table = []
    best_i = 0
    for i, (spec, (tm, score)) in enumerate(zip(specs, results)):
        table.append({"spec": spec.to_json(), "val_score": score, "epochs": len(tm.history)})
        if score > results[best_i][1]:
            best_i = i
    return GridResult(specs[best_i], results[best_i][0], table)


# ------------------------------------------------------------------ attention


@dataclass
class AttentionSummary:
    slice_names: list[str]
    per_student_slices: np.ndarray
    behavior_mass: np.ndarray
    meta_mass: np.ndarray

    @property
    def mean_slices(self) -> dict[str, float]:
        return dict(zip(self.slice_names, self.per_student_slices.mean(axis=0).tolist()))


def extract_attention(tm: TrainedModel, data: Dataset, batch_size: int = 256) -> AttentionSummary:
    """Per-slice meta attention and behavior-vs-meta latent attention mass per student."""
    if tm.spec.kind != "BSM":
        raise ConfigError(f"attention is only defined for BSM models, not {tm.spec.kind}")
    H, M = tm.inputs(data)
    layout = tm.spec.meta_config.layout()
    names = [n for n in SLICE_NAMES if n in tm.spec.meta_feature_subset]
    # positions of each slice inside the selected meta columns
    bounds, start = [], 0
    for n in names:
        size = layout[n].stop - layout[n].start
        bounds.append((start, start + size))
        start += size
    slices, beh, met = [], [], []
    d = tm.spec.latent_dim
    for s in range(0, len(H), batch_size):
        _, attn = tm.model.forward(H[s:s + batch_size], M[s:s + batch_size], with_attention=True)
        a = attn["meta"]
        slices.append(np.stack([a[:, lo:hi].sum(axis=1) for lo, hi in bounds], axis=1))
        beh.append(attn["latent"][:, :d].sum(axis=1))
        met.append(attn["latent"][:, d:].sum(axis=1))
    return AttentionSummary(names, np.concatenate(slices), np.concatenate(beh), np.concatenate(met))
