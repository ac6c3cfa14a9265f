import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import WEEK, ev, make_course, random_course
from metatransfer.behavior_features import (
    FEATURE_NAMES,
    FEATURE_SETS,
    N_FEATURES,
    FeatureConfig,
    NormStats,
    apply_norm_stats,
    assemble_behavior,
    compute_control,
    compute_engagement,
    compute_participation,
    compute_raw_behavior,
    compute_raw_many,
    compute_regularity,
    fit_norm_stats,
    pad_weeks,
    sessionize,
)
from metatransfer.errors import DataError, ShapeError

DAY = 86400


def feature(course, name, weeks=None, student=0):
    raw = compute_raw_behavior(course, weeks or course.duration_weeks)
    return raw[student, :, FEATURE_NAMES.index(name)]


def one(sid_events, **kw):
    return make_course({"a": sid_events}, **kw)


# ------------------------------------------------------------- sessions


def test_session_single_with_terminal_credit():
    s = sessionize([0, 600, 1200])
    assert len(s) == 1 and s[0].duration == 1260 and s[0].n_events == 3


def test_session_gap_boundary_splits():
    assert len(sessionize([0, 1800])) == 2
    assert len(sessionize([0, 1799])) == 1


def test_session_empty():
    assert sessionize([]) == []


@settings(max_examples=50)
@given(st.lists(st.integers(0, 10**6), max_size=60))
def test_sessions_disjoint_ordered_non_empty(ts):
    ts = sorted(ts)
    sessions = sessionize(ts)
    assert sum(s.n_events for s in sessions) == len(ts)
    for a, b in zip(sessions, sessions[1:]):
        assert a.end <= b.start + FeatureConfig().terminal_credit
        assert a.start < b.start
        assert b.start - (a.end - FeatureConfig().terminal_credit) >= FeatureConfig().session_gap


# ----------------------------------------------------------- regularity


def test_peak_time_single_hour_bin():
    c = one([ev("a", 3600 * 5 + i, "VideoPlay", "v00") for i in range(5)], duration=1)
    assert feature(c, "Regularity.RegPeakTimeDayHour")[0] == pytest.approx(1.0, abs=1e-15)


def test_peak_time_uniform_hours():
    c = one([ev("a", 3600 * h + 10, "VideoPlay", "v00") for h in range(24)], duration=1)
    assert feature(c, "Regularity.RegPeakTimeDayHour")[0] == pytest.approx(0.0, abs=1e-12)


def test_periodicity_identical_day_profiles():
    evs = [ev("a", d * DAY + 3600 * h, "VideoPlay", "v00") for d in (0, 2) for h in (8, 9, 9, 20)]
    c = one(evs, duration=1)
    assert feature(c, "Regularity.RegPeriodicityDayHour")[0] == pytest.approx(1.0, abs=1e-12)


def test_periodicity_needs_two_days():
    c = one([ev("a", 100, "VideoPlay", "v00")], duration=1)
    assert feature(c, "Regularity.RegPeriodicityDayHour")[0] == 0.0


def test_delay_lecture_hours_and_clamp():
    # v00 released at start; first opened 2h later. v10 (week 1) opened 1h before release.
    evs = [ev("a", 7200, "VideoLoad", "v00"), ev("a", 9000, "VideoPlay", "v00"),
           ev("a", WEEK - 3600, "VideoPlay", "v10")]
    c = one(evs, duration=2)
    assert feature(c, "Regularity.DelayLecture").tolist() == [1.0, 1.0]  # mean(2, 0)
    assert feature(one(evs[:2], duration=2), "Regularity.DelayLecture")[0] == 2.0


# ----------------------------------------------------------- engagement


def test_number_of_sessions_cumulative():
    evs = [ev("a", 0, "VideoPlay", "v00"), ev("a", 5000, "VideoPlay", "v00"), ev("a", WEEK + 10, "VideoPlay", "v10")]
    assert feature(one(evs, duration=3), "Engagement.NumberOfSessions").tolist() == [2, 3, 3]


def test_weekend_ratio_guards():
    weekday = [ev("a", 3600 + i, "VideoPlay", "v00") for i in range(10)]
    weekend = [ev("a", 5 * DAY + i, "VideoPlay", "v00") for i in range(5)]  # Saturday
    assert feature(one(weekday, duration=1), "Engagement.RatioClicksWeekendDay")[0] == 0.0
    assert feature(one(weekend, duration=1), "Engagement.RatioClicksWeekendDay")[0] == 0.0
    both = one(weekday + weekend, duration=1)
    assert feature(both, "Engagement.RatioClicksWeekendDay")[0] == 0.5
    assert feature(both, "Engagement.TotalClicksWeekend")[0] == 5


def test_time_attributed_to_video_until_next_event():
    evs = [ev("a", 0, "VideoPlay", "v00"), ev("a", 300, "QuizSubmit", "q00", grade=1.0)]
    c = one(evs, duration=1)
    assert feature(c, "Engagement.TotalTimeVideo")[0] == 300
    assert feature(c, "Engagement.TotalTimeProblem")[0] == 60  # terminal credit


def test_per_week_click_counts_reset():
    evs = [ev("a", 10, "VideoPlay", "v00"), ev("a", WEEK + 10, "QuizSubmit", "q10", grade=0.5)]
    c = one(evs, duration=2)
    assert feature(c, "Engagement.TotalClicksVideo").tolist() == [1, 0]
    assert feature(c, "Engagement.TotalClicksProblem").tolist() == [0, 1]
    assert feature(c, "Engagement.TotalClicks").tolist() == [1, 2]


# --------------------------------------------------------------- control


def test_watched_proportion_two_of_four():
    evs = [ev("a", 10, "VideoPlay", "v00"), ev("a", 20, "VideoPlay", "v01")]
    c = one(evs, duration=1, videos=4)
    assert feature(c, "Control.AvgWatchedWeeklyProp")[0] == 0.5
    assert feature(c, "Control.AvgReplayedWeeklyProp")[0] == 0.0


def test_single_pause_duration():
    evs = [ev("a", 10, "VideoPlay", "v00"), ev("a", 100, "VideoPause", "v00"), ev("a", 220, "VideoPlay", "v00")]
    c = one(evs, duration=1)
    assert feature(c, "Control.AvgPauseDuration")[0] == 120
    assert feature(c, "Control.StdPauseDuration")[0] == 0
    assert feature(c, "Control.AvgInterruptedWeeklyProp")[0] == 0.0


def test_interrupted_and_replayed():
    evs = [ev("a", 10, "VideoPlay", "v00"), ev("a", 20, "VideoPlay", "v00"), ev("a", 30, "VideoStop", "v00")]
    c = one(evs, duration=1)
    assert feature(c, "Control.AvgReplayedWeeklyProp")[0] == 0.5
    assert feature(c, "Control.AvgInterruptedWeeklyProp")[0] == 0.5


def test_seek_lengths_absolute():
    evs = [ev("a", 10, "VideoSeekBackward", "v00", seek=-30.0), ev("a", 20, "VideoSeekForward", "v00", seek=10.0)]
    c = one(evs, duration=1)
    assert feature(c, "Control.AvgSeekLength")[0] == 20
    assert feature(c, "Control.StdSeekLength")[0] == 10


# --------------------------------------------------------- participation


def test_single_perfect_attempt():
    c = one([ev("a", 10, "QuizSubmit", "q00", grade=1.0)], duration=1)
    assert feature(c, "Participation.CompetencyStrength")[0] == 1.0
    assert feature(c, "Participation.StudentShape")[0] == 1.0
    assert feature(c, "Participation.CompetencyAlignment")[0] == 1


def test_content_anticipation():
    c = one([ev("a", WEEK + 10, "VideoPlay", "v30")], duration=4)
    assert feature(c, "Participation.ContentAnticipation")[1] >= 1
    assert feature(c, "Participation.ContentAnticipation")[0] == 0


def test_student_speed_between_attempts():
    evs = [ev("a", 100, "QuizSubmit", "q00", grade=0.2), ev("a", 400, "QuizSubmit", "q00", grade=0.7)]
    c = one(evs, duration=1)
    assert feature(c, "Participation.StudentSpeed")[0] == 300
    assert feature(c, "Participation.CompetencyStrength")[0] == 0.35  # best 0.7 over 2 attempts


# ------------------------------------------------------------ layout


def test_canonical_names_and_block_shapes():
    assert N_FEATURES == 45
    assert [len(v) for v in FEATURE_SETS.values()] == [3, 13, 22, 7]
    assert len(set(FEATURE_NAMES)) == 45
    c = random_course(0, n_students=4, duration=3)
    widths = [f(c, 3).shape for f in (compute_regularity, compute_engagement, compute_control, compute_participation)]
    assert widths == [(4, 3, 3), (4, 3, 13), (4, 3, 22), (4, 3, 7)]
    assert compute_raw_behavior(c, 3).shape == (4, 3, 45)


def test_student_without_events_is_zero():
    c = make_course({"a": [ev("a", 10, "VideoPlay", "v00")]}, {"a": "pass", "ghost": "fail"})
    raw = compute_raw_behavior(c, 4)
    assert np.array_equal(raw[1], np.zeros((4, 45)))


def test_min_max_examples():
    stats = NormStats(list(FEATURE_NAMES), np.full(45, 2.0), np.full(45, 10.0))
    stats.maxs[1] = 2.0  # constant column
    raw = np.full((1, 1, 45), 6.0)
    out = apply_norm_stats(raw, stats)
    assert out[0, 0, 0] == 0.5 and out[0, 0, 1] == 0.0
    raw[0, 0, 0] = 25.0
    assert apply_norm_stats(raw, stats)[0, 0, 0] == 1.0  # clamped


def test_norm_stats_reject_other_layout():
    stats = NormStats(list(reversed(FEATURE_NAMES)), np.zeros(45), np.ones(45))
    with pytest.raises(ShapeError):
        apply_norm_stats(np.zeros((1, 1, 45)), stats)


def test_padding_to_corpus_length():
    c = random_course(1, n_students=3, duration=5)
    tensor, _ = assemble_behavior(c, 1.0, max_weeks=12)
    assert tensor.values.shape == (3, 12, 45)
    assert (tensor.values[:, 5:, :] == -1.0).all()
    real = tensor.values[:, :5, :]
    assert ((real >= 0) & (real <= 1)).all()


def test_pad_rejects_overlong():
    with pytest.raises(ShapeError):
        pad_weeks(np.zeros((1, 5, 45)), 4)


def test_stored_stats_reproduce_bit_exactly():
    c = random_course(2, n_students=8)
    raw = compute_raw_behavior(c, 4)
    stats = fit_norm_stats([raw])
    again = NormStats.from_json(json.loads(json.dumps(stats.to_json())))
    assert np.array_equal(apply_norm_stats(raw, stats), apply_norm_stats(raw, again))


def test_fit_on_empty_rejected():
    with pytest.raises(DataError):
        fit_norm_stats([np.zeros((0, 3, 45))])


def test_parallel_matches_serial():
    courses = [random_course(s, n_students=3) for s in range(3)]
    serial = compute_raw_many(courses, 0.5, jobs=1)
    parallel = compute_raw_many(courses, 0.5, jobs=2)
    assert all(np.array_equal(a, b) for a, b in zip(serial, parallel))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_future_events_do_not_leak(seed, cut):
    base = random_course(seed, n_students=3, duration=4, weeks_active=cut)
    future = random_course(seed + 1, n_students=3, duration=4)
    logs = {}
    for sid in base.students:
        late = [e for e in future.events_of(sid) if e.timestamp >= base.week_start(cut)]
        logs[sid] = list(base.events_of(sid)) + late
    injected = make_course(logs, base.labels, duration=4)
    a = compute_raw_behavior(base, 4)[:, :cut]
    b = compute_raw_behavior(injected, 4)[:, :cut]
    assert np.array_equal(a, b)
