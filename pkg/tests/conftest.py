from __future__ import annotations

import numpy as np
import pytest

from metatransfer.datamodel import (
    SECONDS_PER_WEEK,
    Action,
    CourseIteration,
    CourseMetaRaw,
    InteractionEvent,
    Label,
    Language,
    LearningObject,
    Level,
    ObjectKind,
)

START = 1_568_592_000  # a Monday, 00:00 UTC
WEEK = SECONDS_PER_WEEK


def schedule(duration: int, videos: int = 2, quizzes: int = 1, start: int = START):
    objs = []
    for w in range(duration):
        for k in range(videos):
            objs.append(LearningObject(f"v{w}{k}", ObjectKind.Video, w, start + w * WEEK, False, 600.0))
        for k in range(quizzes):
            objs.append(LearningObject(f"q{w}{k}", ObjectKind.Quiz, w, start + w * WEEK, True, None))
    return tuple(objs)


def ev(sid, t, action, obj, grade=None, seek=None, start=START):
    """Event at ``t`` seconds after course start; ``action`` may be the short enum name."""
    if isinstance(action, str):
        action = Action[action]
    return InteractionEvent(sid, start + int(t), action, obj, grade, seek)


def make_course(logs: dict | None = None, labels: dict | None = None, *, duration: int = 4,
                videos: int = 2, quizzes: int = 1, set_id: str = "TST", iteration: int = 1,
                level: Level = Level.Bachelor, language: Language = Language.English,
                title: str = "Intro to testing", start: int = START) -> CourseIteration:
    logs = {s: tuple(sorted(e, key=lambda x: x.timestamp)) for s, e in (logs or {}).items()}
    if labels is None:
        labels = {s: Label.Pass for s in logs}
    labels = {s: (Label(l) if isinstance(l, str) else l) for s, l in labels.items()}
    meta = CourseMetaRaw(duration, level, language, title, "A short description.",
                         "A longer description of the course. It has two sentences.")
    course = CourseIteration(set_id, iteration, duration, start, schedule(duration, videos, quizzes, start),
                             meta, logs, labels)
    course.validate()
    return course


def random_course(seed: int, n_students: int = 6, duration: int = 4, n_events: int = 40,
                  weeks_active: int | None = None) -> CourseIteration:
    """Random but valid clickstream touching every action type."""
    rng = np.random.default_rng(seed)
    sched = schedule(duration, videos=2, quizzes=1)
    videos = [o for o in sched if o.kind is ObjectKind.Video]
    quizzes = [o for o in sched if o.kind is ObjectKind.Quiz]
    horizon = (weeks_active or duration) * WEEK
    logs, labels = {}, {}
    actions = list(Action)
    for i in range(n_students):
        sid = f"s{i:02d}"
        times = np.sort(rng.integers(0, horizon, size=rng.integers(0, n_events + 1)))
        evs = []
        for t in times:
            a = actions[rng.integers(len(actions))]
            if a is Action.QuizSubmit:
                evs.append(ev(sid, t, a, quizzes[rng.integers(len(quizzes))].object_id,
                              grade=float(rng.integers(0, 11)) / 10))
            elif a.is_seek:
                evs.append(ev(sid, t, a, videos[rng.integers(len(videos))].object_id,
                              seek=float(rng.integers(1, 120))))
            else:
                evs.append(ev(sid, t, a, videos[rng.integers(len(videos))].object_id))
        logs[sid] = evs
        labels[sid] = Label.Fail if rng.random() < 0.5 else Label.Pass
    return make_course(logs, labels, duration=duration)


@pytest.fixture(scope="session")
def small_corpus():
    from metatransfer.synthgen import generate_corpus, load_scenario

    return generate_corpus(load_scenario("small"))


@pytest.fixture(scope="session")
def medium_corpus():
    from metatransfer.synthgen import generate_corpus, load_scenario

    return generate_corpus(load_scenario("medium"))
