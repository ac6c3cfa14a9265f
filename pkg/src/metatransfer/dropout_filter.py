"""Early-dropout detection from first-weeks assignment grades.

Per course, a logistic regression maps each student's weekly average grade
over the first ``w_g`` weeks to a probability of failing. Students whose
probability exceeds a threshold picked by balanced accuracy are removed
before feature extraction and training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .datamodel import Action, CourseIteration, Label, ObjectKind
from .errors import DataError
from .metrics import balanced_accuracy, stratified_split

log = logging.getLogger(__name__)

DEFAULT_GRADE_WEEKS = 2
DEFAULT_THRESHOLD = 0.99
THRESHOLD_GRID = (0.96, 0.97, 0.98, 0.99, 0.999)
L2_STRENGTH = 1e-4


@dataclass
class GradeMatrix:
    values: np.ndarray
    student_order: list[str]
    w_g: int = DEFAULT_GRADE_WEEKS


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    n_iter: int = 0
    losses: list[float] = field(default_factory=list, repr=False, compare=False)

    def predict_proba(self, values: np.ndarray) -> np.ndarray:
        return expit(np.asarray(values, dtype=np.float64) @ self.weights + self.bias)

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias, "n_iter": self.n_iter}


@dataclass
class FilterResult:
    kept: set[str]
    removed: set[str]
    threshold: float
    per_student_fail_prob: dict[str, float]


def build_grade_matrix(course: CourseIteration, w_g: int = DEFAULT_GRADE_WEEKS) -> GradeMatrix:
    """Average best grade per week over graded quizzes released that week.

    Unattempted quizzes count as 0; weeks without graded quizzes are 0.
    Only submissions before the end of week ``w_g`` are considered.
    """
    if w_g < 1:
        raise DataError("w_g must be >= 1")
    graded = {o.object_id: o.release_week for o in course.schedule
              if o.kind is ObjectKind.Quiz and o.graded and o.release_week < w_g}
    per_week = np.zeros(w_g)
    for week in graded.values():
        per_week[week] += 1
    cutoff = course.week_start(w_g)
    students = course.students
    values = np.zeros((len(students), w_g))
    for i, sid in enumerate(students):
        best: dict[str, float] = {}
        for ev in course.events_of(sid):
            if ev.timestamp >= cutoff:
                break
            if ev.action is Action.QuizSubmit and ev.grade is not None and ev.object_id in graded:
                best[ev.object_id] = max(best.get(ev.object_id, 0.0), ev.grade)
        for qid, g in best.items():
            values[i, graded[qid]] += g
    nonzero = per_week > 0
    values[:, nonzero] /= per_week[nonzero]
    return GradeMatrix(values, students, w_g)


def _fail_vector(G: GradeMatrix, labels) -> np.ndarray:
    if isinstance(labels, Mapping):
        return np.array([labels[s] is Label.Fail for s in G.student_order], dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (len(G.student_order),):
        raise DataError("labels do not match grade matrix rows")
    return y


def _objective(X, y, w, b, lam):
    z = X @ w + b
    # log(1 + e^z) - y z, written stably
    ll = np.logaddexp(0.0, z) - y * z
    return float(ll.mean() + 0.5 * lam * w @ w)


def fit_logistic(G: GradeMatrix, labels, *, l2: float = L2_STRENGTH,
                 tol: float = 1e-6, max_iter: int = 10000) -> LogisticModel:
    """L2-regularised logistic regression of P(fail) by full-batch gradient descent.

    Starts from zero; the step size ``1/L`` (L a Lipschitz bound of the
    gradient) makes the objective non-increasing. Stops when the largest
    gradient component drops below ``tol``.
    """
    X = np.asarray(G.values, dtype=np.float64)
    y = _fail_vector(G, labels)
    if len(y) < 2 or y.min() == y.max():
        raise DataError("degenerate labels: logistic fit needs both pass and fail students")
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    lipschitz = 0.25 * (np.max(np.sum(X * X, axis=1)) + 1.0) + l2
    lr = 1.0 / lipschitz
    losses = [_objective(X, y, w, b, l2)]
    steps = 0
    while steps < max_iter:
        r = expit(X @ w + b) - y
        gw = X.T @ r / n + l2 * w
        gb = r.mean()
        if max(np.max(np.abs(gw), initial=0.0), abs(gb)) < tol:
            break
        w = w - lr * gw
        b = b - lr * gb
        steps += 1
        losses.append(_objective(X, y, w, b, l2))
    return LogisticModel(w, float(b), steps, losses)


def select_threshold(model: LogisticModel, G_val: GradeMatrix, labels_val,
                     grid: Sequence[float] = THRESHOLD_GRID) -> float:
    """Grid value maximising balanced accuracy of "remove iff p > t"; ties go to the largest.

    Falls back to ``DEFAULT_THRESHOLD`` when the validation students are all
    of one class (BAC is undefined there).
    """
    y = _fail_vector(G_val, labels_val)
    if len(y) == 0:
        raise DataError("empty validation set for threshold selection")
    if y.min() == y.max():
        log.warning("single-class validation set; using default threshold %s", DEFAULT_THRESHOLD)
        return DEFAULT_THRESHOLD
    p = model.predict_proba(G_val.values)
    best_t, best_bac = None, -1.0
    for t in sorted(grid):
        bac = balanced_accuracy(p > t, y)
        if bac >= best_bac:
            best_t, best_bac = t, bac
    return float(best_t)


def filter_early_dropouts(course: CourseIteration, model: LogisticModel, threshold: float,
                          w_g: int | None = None) -> FilterResult:
    G = build_grade_matrix(course, w_g or len(model.weights))
    p = model.predict_proba(G.values)
    probs = {s: float(v) for s, v in zip(G.student_order, p)}
    removed = {s for s, v in probs.items() if v > threshold}
    return FilterResult(set(G.student_order) - removed, removed, threshold, probs)


def fit_course_filter(course: CourseIteration, *, w_g: int = DEFAULT_GRADE_WEEKS,
                      grid: Sequence[float] = THRESHOLD_GRID, seed: int = 0):
    """Fit the per-course filter on 90% of students, tune the threshold on the other 10%.

    Returns ``(model, FilterResult)``. Courses whose students are all of one
    class cannot be fitted; nobody is removed from them.
    """
    students = course.students
    fails = [course.labels[s] is Label.Fail for s in students]
    if len(set(fails)) < 2:
        log.warning("%s: single-class course, early-dropout filter skipped", course.course_id)
        model = LogisticModel(np.zeros(w_g), 0.0)
        return model, FilterResult(set(students), set(), max(grid), {s: 0.5 for s in students})
    try:
        fit_ids, val_ids = stratified_split(students, fails, (0.9, 0.1), seed=seed)
    except DataError:
        fit_ids, val_ids = students, students
    G = build_grade_matrix(course, w_g)
    row = {s: i for i, s in enumerate(G.student_order)}

    def rows(ids):
        idx = [row[s] for s in ids]
        return GradeMatrix(G.values[idx], list(ids), w_g)

    model = fit_logistic(rows(fit_ids), course.labels)
    threshold = select_threshold(model, rows(val_ids), course.labels, grid)
    return model, filter_early_dropouts(course, model, threshold, w_g)
