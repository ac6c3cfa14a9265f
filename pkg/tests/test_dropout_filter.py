import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import WEEK, ev, make_course, random_course
from metatransfer.dropout_filter import (
    THRESHOLD_GRID,
    GradeMatrix,
    LogisticModel,
    build_grade_matrix,
    filter_early_dropouts,
    fit_course_filter,
    fit_logistic,
    select_threshold,
)
from metatransfer.errors import DataError
from metatransfer.metrics import balanced_accuracy


def test_unattempted_week_is_zero():
    course = make_course({"a": [ev("a", 10, "VideoPlay", "v00")]}, quizzes=2)
    assert build_grade_matrix(course, 2).values.tolist() == [[0.0, 0.0]]


def test_single_submission_passes_through():
    course = make_course({"a": [ev("a", 10, "QuizSubmit", "q00", grade=0.8)]})
    assert build_grade_matrix(course, 1).values[0, 0] == 0.8


def test_best_grade_averaged_with_unattempted():
    # week 0 has three graded quizzes: best grades 1.0 and 0.5, third never tried
    logs = {"a": [ev("a", 10, "QuizSubmit", "q00", grade=0.3), ev("a", 20, "QuizSubmit", "q00", grade=1.0),
                  ev("a", 30, "QuizSubmit", "q01", grade=0.5)]}
    course = make_course(logs, quizzes=3)
    assert build_grade_matrix(course, 1).values[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_submissions_after_cutoff_ignored():
    logs = {"a": [ev("a", 10, "QuizSubmit", "q00", grade=0.2), ev("a", 2 * WEEK + 5, "QuizSubmit", "q00", grade=1.0)]}
    assert build_grade_matrix(make_course(logs), 2).values[0, 0] == 0.2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_grade_matrix_bounded_and_matches_brute_force(seed, w_g):
    course = random_course(seed, n_students=5, duration=4)
    G = build_grade_matrix(course, w_g)
    assert ((G.values >= 0) & (G.values <= 1)).all()
    # independent re-aggregation straight from the events
    quizzes = {o.object_id: o.release_week for o in course.schedule if o.graded and o.release_week < w_g}
    for i, sid in enumerate(G.student_order):
        for week in range(w_g):
            ids = [q for q, w in quizzes.items() if w == week]
            best = []
            for q in ids:
                grades = [e.grade for e in course.events_of(sid)
                          if e.object_id == q and e.timestamp < course.week_start(w_g)]
                best.append(max(grades) if grades else 0.0)
            assert G.values[i, week] == pytest.approx(sum(best) / len(ids) if ids else 0.0, abs=1e-12)


def test_separated_toy_set_gives_confident_fail():
    G = GradeMatrix(np.array([[0.0, 0.0]] * 10 + [[1.0, 1.0]] * 10), [f"s{i}" for i in range(20)], 2)
    model = fit_logistic(G, [1] * 10 + [0] * 10)
    p0 = model.predict_proba(np.zeros((1, 2)))[0]
    assert p0 > 0.9
    # closed-form check of the fitted sigmoid
    assert p0 == pytest.approx(1 / (1 + math.exp(-model.bias)), rel=1e-12)


def test_identical_rows_recover_logit_of_fail_rate():
    G = GradeMatrix(np.full((20, 2), 0.5), [f"s{i}" for i in range(20)], 2)
    y = [1] * 6 + [0] * 14
    model = fit_logistic(G, y, tol=1e-10, max_iter=200_000)
    # w and b are confounded along the constant direction, so compare the prediction
    p = model.predict_proba(np.full((1, 2), 0.5))[0]
    assert p == pytest.approx(0.3, abs=1e-6)
    assert np.allclose(model.weights, model.weights[0])


def test_single_class_labels_rejected():
    G = GradeMatrix(np.zeros((3, 2)), ["a", "b", "c"], 2)
    with pytest.raises(DataError):
        fit_logistic(G, [0, 0, 0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_non_increasing(seed):
    rng = np.random.default_rng(seed)
    G = GradeMatrix(rng.uniform(size=(30, 2)), [str(i) for i in range(30)], 2)
    y = (rng.uniform(size=30) < 0.4).astype(float)
    y[0], y[1] = 0, 1
    losses = fit_logistic(G, y, max_iter=500).losses
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


def test_threshold_ties_pick_largest():
    model = LogisticModel(np.zeros(2), 0.0)  # p = 0.5 for everyone, every threshold identical
    G = GradeMatrix(np.zeros((4, 2)), list("abcd"), 2)
    assert select_threshold(model, G, [1, 0, 1, 0]) == 0.999


def test_threshold_planted_at_0_99():
    # dropouts at p = 0.995, failers at 0.985, passers far below
    logits = {0.995: math.log(0.995 / 0.005), 0.985: math.log(0.985 / 0.015), 0.1: math.log(0.1 / 0.9)}
    model = LogisticModel(np.array([1.0]), 0.0)
    ps = [0.995] * 5 + [0.985] * 5 + [0.1] * 10
    G = GradeMatrix(np.array([[logits[p]] for p in ps]), [str(i) for i in range(20)], 1)
    y = [1] * 5 + [0] * 15  # only the planted dropouts count as "remove"
    assert select_threshold(model, G, y) == 0.99


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.9, 1.0), min_size=4, max_size=30), st.integers(0, 2**31))
def test_threshold_matches_brute_force(probs, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=len(probs))
    y[0], y[1] = 0, 1
    probs = np.clip(np.array(probs), 1e-9, 1 - 1e-12)
    model = LogisticModel(np.array([1.0]), 0.0)
    G = GradeMatrix(np.log(probs / (1 - probs))[:, None], [str(i) for i in range(len(probs))], 1)
    chosen = select_threshold(model, G, y)
    p = model.predict_proba(G.values)
    scores = {t: balanced_accuracy(p > t, y) for t in THRESHOLD_GRID}
    best = max(scores.values())
    assert chosen in THRESHOLD_GRID
    assert scores[chosen] == best
    assert chosen == max(t for t, s in scores.items() if s == best)


def _filter_course():
    logs, labels = {}, {}
    for i in range(20):
        sid = f"s{i:02d}"
        grade = 0.0 if i < 8 else (0.3 if i < 12 else 0.9)
        evs = [ev(sid, 100, "VideoPlay", "v00")]
        if grade > 0:
            evs += [ev(sid, 200, "QuizSubmit", "q00", grade=grade), ev(sid, WEEK + 200, "QuizSubmit", "q10", grade=grade)]
        logs[sid] = evs
        labels[sid] = "fail" if i < 12 else "pass"
    return make_course(logs, labels)


def test_threshold_one_removes_nothing_and_equality_is_kept():
    course = _filter_course()
    model = LogisticModel(np.zeros(2), 0.0)
    assert filter_early_dropouts(course, model, 1.0).removed == set()
    res = filter_early_dropouts(course, model, 0.5)  # every p is exactly 0.5
    assert res.removed == set() and len(res.kept) == 20


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 1.0), st.floats(0.5, 1.0))
def test_removal_monotone_in_threshold(t1, t2):
    t1, t2 = sorted((t1, t2))
    course = _filter_course()
    G = build_grade_matrix(course, 2)
    model = fit_logistic(G, course.labels)
    assert filter_early_dropouts(course, model, t2).removed <= filter_early_dropouts(course, model, t1).removed


def test_fit_course_filter_partitions_students():
    course = _filter_course()
    _, res = fit_course_filter(course, seed=0)
    assert res.kept | res.removed == set(course.students)
    assert not res.kept & res.removed
    assert res.threshold in THRESHOLD_GRID


def test_single_class_course_skips_filter():
    course = make_course({"a": [ev("a", 1, "VideoPlay", "v00")], "b": [ev("b", 1, "VideoPlay", "v00")]})
    _, res = fit_course_filter(course)
    assert res.removed == set()
