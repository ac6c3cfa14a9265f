"""Weekly behavior features: Regularity (3), Engagement (13), Control (22), Participation (7).

Every value for week ``j`` is computed from the events visible at the end of
week ``j`` (the prefix ``t < start + (j+1) weeks``), or from the events of
week ``j`` alone for the per-week counts, so features never look ahead.

Time attribution: an event's "time" is the gap to the next event of the same
session, capped at ``session_gap``; the last event of a session gets
``terminal_credit`` seconds. Sessions break at gaps of ``session_gap`` or more.
Standard deviations are population deviations and are 0 with fewer than two
values. Every ratio with an empty denominator is 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import (
    ACTION_CODES,
    SECONDS_PER_WEEK,
    Action,
    CourseIteration,
    InteractionEvent,
    ObjectKind,
    weeks_visible,
)
from .errors import DataError, ShapeError

FEATURE_SETS: dict[str, list[str]] = {
    "Regularity": ["DelayLecture", "RegPeakTimeDayHour", "RegPeriodicityDayHour"],
    "Engagement": [
        "NumberOfSessions", "RatioClicksWeekendDay", "AvgTimeSessions", "TotalTimeSessions",
        "StdTimeSessions", "StdTimeBetweenSessions", "TotalClicks", "TotalClicksProblem",
        "TotalClicksVideo", "TotalClicksWeekday", "TotalClicksWeekend", "TotalTimeProblem",
        "TotalTimeVideo",
    ],
    "Control": [
        "TotalClicksVideoLoad", "TotalClicksVideo", "AvgWatchedWeeklyProp", "StdWatchedWeeklyProp",
        "AvgReplayedWeeklyProp", "StdReplayedWeeklyProp", "AvgInterruptedWeeklyProp",
        "StdInterruptedWeeklyProp", "FrequencyEventVideo", "FrequencyEventLoad",
        "FrequencyEventPlay", "FrequencyEventPause", "FrequencyEventStop",
        "FrequencyEventSeekBackward", "FrequencyEventSeekForward", "FrequencyEventSpeedChange",
        "AvgSeekLength", "StdSeekLength", "AvgPauseDuration", "StdPauseDuration",
        "AvgTimeSpeedingUp", "StdTimeSpeedingUp",
    ],
    "Participation": [
        "CompetencyStrength", "CompetencyAlignment", "CompetencyAnticipation", "ContentAlignment",
        "ContentAnticipation", "StudentSpeed", "StudentShape",
    ],
}
FEATURE_NAMES: list[str] = [f"{s}.{n}" for s, names in FEATURE_SETS.items() for n in names]
N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 45

MASK_VALUE = -1.0
SECONDS_PER_DAY = 86400

_LOAD = ACTION_CODES[Action.VideoLoad]
_PLAY = ACTION_CODES[Action.VideoPlay]
_PAUSE = ACTION_CODES[Action.VideoPause]
_STOP = ACTION_CODES[Action.VideoStop]
_SEEK_BACK = ACTION_CODES[Action.VideoSeekBackward]
_SEEK_FWD = ACTION_CODES[Action.VideoSeekForward]
_SPEED = ACTION_CODES[Action.VideoSpeedChange]
_QUIZ = ACTION_CODES[Action.QuizSubmit]


@dataclass(frozen=True)
class FeatureConfig:
    session_gap: int = 1800
    terminal_credit: int = 60
    pause_cap: int = 1800
    pass_threshold: float = 0.5


@dataclass(frozen=True)
class Session:
    start: int
    end: int
    n_events: int

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass
class NormStats:
    feature_names: list[str]
    mins: np.ndarray
    maxs: np.ndarray

    def to_json(self) -> dict:
        return {"feature_names": list(self.feature_names),
                "min": self.mins.tolist(), "max": self.maxs.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "NormStats":
        return cls(list(data["feature_names"]), np.asarray(data["min"], dtype=np.float64),
                   np.asarray(data["max"], dtype=np.float64))


@dataclass
class BehaviorTensor:
    values: np.ndarray
    student_ids: list[str]
    week_count: int
    feature_names: list[str] = field(default_factory=lambda: list(FEATURE_NAMES))
    mask_value: float = MASK_VALUE


def sessionize(events: Sequence[InteractionEvent] | Sequence[int],
               config: FeatureConfig = FeatureConfig()) -> list[Session]:
    """Split a time-sorted event stream into sessions."""
    ts = [e.timestamp if isinstance(e, InteractionEvent) else int(e) for e in events]
    sessions = []
    start = prev = None
    n = 0
    for t in ts:
        if start is not None and t - prev >= config.session_gap:
            sessions.append(Session(start, prev + config.terminal_credit, n))
            start, n = None, 0
        if start is None:
            start = t
        prev = t
        n += 1
    if start is not None:
        sessions.append(Session(start, prev + config.terminal_credit, n))
    return sessions


def _std(x) -> float:
    return float(np.std(x)) if len(x) >= 2 else 0.0


def _mean(x) -> float:
    return float(np.mean(x)) if len(x) else 0.0


class _StudentView:
    """Array form of one student's events plus per-course schedule lookups."""

    def __init__(self, course: CourseIteration, ctx: "_CourseContext", events, config: FeatureConfig):
        self.ctx = ctx
        self.config = config
        n = len(events)
        self.t = np.fromiter((e.timestamp for e in events), dtype=np.int64, count=n)
        self.act = np.fromiter((ACTION_CODES[e.action] for e in events), dtype=np.int64, count=n)
        self.obj = np.fromiter((ctx.index[e.object_id] for e in events), dtype=np.int64, count=n)
        self.grade = np.fromiter((np.nan if e.grade is None else e.grade for e in events),
                                 dtype=np.float64, count=n)
        self.seek = np.fromiter((np.nan if e.seek_seconds is None else e.seek_seconds for e in events),
                                dtype=np.float64, count=n)
        gaps = np.diff(self.t)
        self.session = np.concatenate([[0], np.cumsum(gaps >= config.session_gap)]).astype(np.int64) \
            if n else np.zeros(0, dtype=np.int64)
        self.is_video = self.act != _QUIZ
        self.hour = (self.t // 3600) % 24
        self.day = self.t // SECONDS_PER_DAY
        # 1970-01-01 was a Thursday: weekday index with Monday = 0
        self.weekend = ((self.day + 3) % 7) >= 5
        self.bounds = [int(np.searchsorted(self.t, course.week_start(j + 1), side="left"))
                       for j in range(ctx.weeks)]

    def event_times(self, k: int) -> np.ndarray:
        """Attributed seconds per event within the first ``k`` events."""
        cfg = self.config
        out = np.full(k, float(cfg.terminal_credit))
        if k > 1:
            same = self.session[1:k] == self.session[:k - 1]
            gap = np.minimum(np.diff(self.t[:k]), cfg.session_gap).astype(np.float64)
            out[:-1] = np.where(same, gap, float(cfg.terminal_credit))
        return out

    def sessions(self, k: int):
        """(starts, durations) of sessions among the first ``k`` events."""
        if k == 0:
            return np.zeros(0), np.zeros(0)
        s = self.session[:k]
        first = np.flatnonzero(np.concatenate([[True], s[1:] != s[:-1]]))
        last = np.concatenate([first[1:] - 1, [k - 1]])
        starts = self.t[first].astype(np.float64)
        ends = self.t[last].astype(np.float64) + self.config.terminal_credit
        return starts, ends - starts


@dataclass
class _CourseContext:
    index: dict[str, int]
    kind_video: np.ndarray
    release_week: np.ndarray
    release_time: np.ndarray
    graded: np.ndarray
    weeks: int
    start_time: int

    @classmethod
    def build(cls, course: CourseIteration, weeks: int) -> "_CourseContext":
        sched = course.schedule
        return cls(
            index={o.object_id: i for i, o in enumerate(sched)},
            kind_video=np.array([o.kind is ObjectKind.Video for o in sched], dtype=bool),
            release_week=np.array([o.release_week for o in sched], dtype=np.int64),
            release_time=np.array([o.release_time for o in sched], dtype=np.float64),
            graded=np.array([o.graded for o in sched], dtype=bool),
            weeks=weeks,
            start_time=course.start_time,
        )


# ------------------------------------------------------------ feature blocks


def _regularity(v: _StudentView) -> np.ndarray:
    W = v.ctx.weeks
    out = np.zeros((W, 3))
    views = v.is_video & ((v.act == _LOAD) | (v.act == _PLAY)) & v.ctx.kind_video[v.obj] \
        if len(v.t) else np.zeros(0, bool)
    for j in range(W):
        k = v.bounds[j]
        if k == 0:
            continue
        # DelayLecture: first view time of each viewed video minus its release
        sel = np.flatnonzero(views[:k])
        if len(sel):
            objs, first = np.unique(v.obj[sel], return_index=True)
            # a video opened ahead of its release counts as zero delay
            delays = np.maximum(v.t[sel[first]] - v.ctx.release_time[objs], 0.0) / 3600.0
            out[j, 0] = delays.mean()
        hist = np.bincount(v.hour[:k], minlength=24).astype(np.float64)
        p = hist[hist > 0] / k
        out[j, 1] = 1.0 - float(-(p * np.log(p)).sum()) / math.log(24)
        days, inv = np.unique(v.day[:k], return_inverse=True)
        if len(days) >= 2:
            prof = np.zeros((len(days), 24))
            np.add.at(prof, (inv, v.hour[:k]), 1.0)
            prof /= np.linalg.norm(prof, axis=1, keepdims=True)
            gram = prof @ prof.T
            iu = np.triu_indices(len(days), 1)
            out[j, 2] = float(gram[iu].mean())
    return out


def _engagement(v: _StudentView) -> np.ndarray:
    W = v.ctx.weeks
    out = np.zeros((W, 13))
    prev = 0
    for j in range(W):
        k = v.bounds[j]
        if k:
            starts, durations = v.sessions(k)
            times = v.event_times(k)
            weekend = int(v.weekend[:k].sum())
            weekday = k - weekend
            video = v.is_video[:k]
            ends = starts + durations
            between = starts[1:] - ends[:-1]
            out[j, 0] = len(starts)
            out[j, 1] = weekend / weekday if weekday else 0.0
            out[j, 2] = durations.mean()
            out[j, 3] = durations.sum()
            out[j, 4] = _std(durations)
            out[j, 5] = _std(between)
            out[j, 6] = k
            out[j, 9] = weekday
            out[j, 10] = weekend
            out[j, 11] = times[~video].sum()
            out[j, 12] = times[video].sum()
        week_video = v.is_video[prev:k]
        out[j, 7] = int((~week_video).sum())
        out[j, 8] = int(week_video.sum())
        prev = k
    return out


def _weekly_video_props(v: _StudentView) -> np.ndarray:
    """Per complete week: (watched, replayed, interrupted) proportions of available videos."""
    W = v.ctx.weeks
    props = np.zeros((W, 3))
    prev = 0
    for j in range(W):
        k = v.bounds[j]
        available = v.ctx.kind_video & (v.ctx.release_week <= j)
        n_avail = int(available.sum())
        if n_avail == 0 or k == prev:
            prev = k
            continue
        act, obj = v.act[prev:k], v.obj[prev:k]
        on_avail = available[obj]
        plays = obj[(act == _PLAY) & on_avail]
        play_counts = np.bincount(plays, minlength=len(available))
        watched = int(np.count_nonzero(play_counts))
        replayed = int(np.count_nonzero(play_counts >= 2))
        interrupted = 0
        stops = np.flatnonzero(((act == _PAUSE) | (act == _STOP)) & on_avail)
        if len(stops):
            # a video is interrupted when a pause/stop is not followed by a play in the week
            last_stop = {}
            for i in stops:
                last_stop[obj[i]] = i
            play_idx = np.flatnonzero(act == _PLAY)
            for o, i in last_stop.items():
                if not np.any(obj[play_idx[play_idx > i]] == o):
                    interrupted += 1
        props[j] = (watched / n_avail, replayed / n_avail, interrupted / n_avail)
        prev = k
    return props


def _control(v: _StudentView) -> np.ndarray:
    W = v.ctx.weeks
    cfg = v.config
    out = np.zeros((W, 22))
    props = _weekly_video_props(v)
    freq_codes = (_LOAD, _PLAY, _PAUSE, _STOP, _SEEK_BACK, _SEEK_FWD, _SPEED)
    for j in range(W):
        k = v.bounds[j]
        elapsed = j + 1
        seen = props[: j + 1]
        for col, c in enumerate(range(3)):
            out[j, 2 + 2 * col] = seen[:, c].mean()
            out[j, 3 + 2 * col] = _std(seen[:, c])
        if k == 0:
            continue
        act, obj = v.act[:k], v.obj[:k]
        video = v.is_video[:k]
        counts = np.bincount(act, minlength=len(ACTION_CODES))
        out[j, 0] = counts[_LOAD]
        out[j, 1] = int(video.sum())
        out[j, 8] = out[j, 1] / elapsed
        for col, c in enumerate(freq_codes):
            out[j, 9 + col] = counts[c] / elapsed
        seeks = np.abs(v.seek[:k][(act == _SEEK_BACK) | (act == _SEEK_FWD)])
        seeks = seeks[~np.isnan(seeks)]
        out[j, 16] = _mean(seeks)
        out[j, 17] = _std(seeks)
        pauses = []
        for i in np.flatnonzero(act == _PAUSE):
            later = np.flatnonzero(obj[i + 1:] == obj[i])
            if len(later):
                pauses.append(min(float(v.t[i + 1 + later[0]] - v.t[i]), cfg.pause_cap))
        out[j, 18] = _mean(pauses)
        out[j, 19] = _std(pauses)
        fwd = v.event_times(k)[act == _SEEK_FWD]
        out[j, 20] = _mean(fwd)
        out[j, 21] = _std(fwd)
    return out


def _participation(v: _StudentView) -> np.ndarray:
    W = v.ctx.weeks
    cfg = v.config
    ctx = v.ctx
    out = np.zeros((W, 7))
    for j in range(W):
        k = v.bounds[j]
        if k == 0:
            continue
        act, obj, t, grade = v.act[:k], v.obj[:k], v.t[:k], v.grade[:k]
        quiz = np.flatnonzero(act == _QUIZ)
        attempts: dict[int, list[int]] = {}
        for i in quiz:
            attempts.setdefault(int(obj[i]), []).append(i)
        strengths, passed_weeks, first_max = [], [], 0
        gaps = []
        anticipated = 0
        for o, idx in attempts.items():
            if ctx.release_week[o] > j:
                anticipated += 1
            if len(idx) >= 2:
                gaps.extend(np.diff(t[idx]).tolist())
            g = grade[idx]
            graded = g[~np.isnan(g)]
            if not len(graded):
                continue
            best = float(graded.max())
            if best >= cfg.pass_threshold:
                strengths.append(best / len(idx))
                passed_weeks.append(int(ctx.release_week[o]))
                if g[0] == 1.0:
                    first_max += 1
        plays = np.unique(obj[(act == _PLAY) & ctx.kind_video[obj]])
        play_weeks = ctx.release_week[plays]
        out[j, 0] = _mean(strengths)
        out[j, 1] = sum(1 for w in passed_weeks if w == j)
        out[j, 2] = anticipated
        out[j, 3] = int(np.count_nonzero(play_weeks == j))
        out[j, 4] = int(np.count_nonzero(play_weeks > j))
        out[j, 5] = _mean(gaps)
        out[j, 6] = first_max / len(strengths) if strengths else 0.0
    return out


_BLOCKS = {
    "Regularity": _regularity,
    "Engagement": _engagement,
    "Control": _control,
    "Participation": _participation,
}


def _views(course: CourseIteration, weeks_kept: int, config: FeatureConfig):
    if weeks_kept < 1:
        raise DataError("weeks_kept must be >= 1")
    ctx = _CourseContext.build(course, weeks_kept)
    cutoff = course.week_start(weeks_kept)
    for sid in course.students:
        events = [e for e in course.events_of(sid) if e.timestamp < cutoff]
        yield _StudentView(course, ctx, events, config)


def _compute_blocks(course, weeks_kept, config, blocks) -> np.ndarray:
    rows = []
    for view in _views(course, weeks_kept, config):
        rows.append(np.concatenate([_BLOCKS[b](view) for b in blocks], axis=1))
    width = sum(len(FEATURE_SETS[b]) for b in blocks)
    if not rows:
        return np.zeros((0, weeks_kept, width))
    return np.stack(rows)


def compute_regularity(course: CourseIteration, weeks_kept: int,
                       config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return _compute_blocks(course, weeks_kept, config, ["Regularity"])


def compute_engagement(course: CourseIteration, weeks_kept: int, sessions=None,
                       config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Engagement block. ``sessions`` (from :func:`sessionize`) is accepted for
    API symmetry; sessions are re-derived per visible prefix to stay causal."""
    return _compute_blocks(course, weeks_kept, config, ["Engagement"])


def compute_control(course: CourseIteration, weeks_kept: int,
                    config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return _compute_blocks(course, weeks_kept, config, ["Control"])


def compute_participation(course: CourseIteration, weeks_kept: int,
                          config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return _compute_blocks(course, weeks_kept, config, ["Participation"])


def compute_raw_behavior(course: CourseIteration, weeks_kept: int,
                         config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Unnormalised (|S|, weeks_kept, 45) features, students in sorted id order."""
    return _compute_blocks(course, weeks_kept, config, list(FEATURE_SETS))


def _raw_for_level(args):
    course, level, config = args
    return compute_raw_behavior(course, weeks_visible(course.duration_weeks, level), config)


def compute_raw_many(courses: Sequence[CourseIteration], level: float,
                     config: FeatureConfig = FeatureConfig(), jobs: int = 1) -> list[np.ndarray]:
    """Raw features for several courses; ``jobs > 1`` spreads courses over processes."""
    tasks = [(c, level, config) for c in courses]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_raw_for_level, tasks))
    return [_raw_for_level(t) for t in tasks]


# ------------------------------------------------------------- normalising


def fit_norm_stats(raws: Sequence[np.ndarray]) -> NormStats:
    """Per-feature min and max over every student and visible week of ``raws``."""
    flat = [r.reshape(-1, N_FEATURES) for r in raws if r.size]
    if not flat:
        raise DataError("cannot fit normalisation statistics on empty data")
    allv = np.concatenate(flat, axis=0)
    return NormStats(list(FEATURE_NAMES), allv.min(axis=0), allv.max(axis=0))


def apply_norm_stats(raw: np.ndarray, stats: NormStats) -> np.ndarray:
    """Min-max scale with ``stats`` and clamp to [0, 1]; constant features map to 0."""
    if list(stats.feature_names) != FEATURE_NAMES:
        raise ShapeError("normalisation statistics were fitted on a different feature layout")
    span = stats.maxs - stats.mins
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (raw - stats.mins) / safe, 0.0)
    return np.clip(scaled, 0.0, 1.0)


def pad_weeks(values: np.ndarray, max_weeks: int, mask_value: float = MASK_VALUE) -> np.ndarray:
    n, w, h = values.shape
    if w > max_weeks:
        raise ShapeError(f"{w} visible weeks exceed the padded length {max_weeks}")
    out = np.full((n, max_weeks, h), mask_value)
    out[:, :w, :] = values
    return out


def assemble_behavior(course: CourseIteration, level: float, stats: NormStats | None = None, *,
                      max_weeks: int | None = None,
                      config: FeatureConfig = FeatureConfig(),
                      raw: np.ndarray | None = None) -> tuple[BehaviorTensor, NormStats]:
    """Normalised, padded behavior tensor for one course.

    Without ``stats`` the statistics are fitted on this course (training);
    with ``stats`` they are applied and clamped (transfer). Weeks after the
    visible ones are filled with -1 up to ``max_weeks``.
    """
    weeks = weeks_visible(course.duration_weeks, level)
    if weeks == 0:
        raise DataError(f"early level too small for {course.course_id}")
    if raw is None:
        raw = compute_raw_behavior(course, weeks, config)
    if stats is None:
        stats = fit_norm_stats([raw])
    values = pad_weeks(apply_norm_stats(raw, stats), max_weeks or course.duration_weeks)
    return BehaviorTensor(values, course.students, weeks), stats


def week_boundaries(course: CourseIteration, weeks: int) -> list[int]:
    return [course.start_time + (j + 1) * SECONDS_PER_WEEK for j in range(weeks)]
