"""Seeded synthetic MOOC corpora with known ground truth.

Students are drawn from four archetypes (engaged, disengaged, early dropout,
erratic). A coupling strength ties course level to behavior: the level scales
activity, shifts quiz grades and shifts the archetype mixture, so the same
behavior means different outcomes in courses of different levels. With
coupling 0 all levels behave alike.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .datamodel import (
    SECONDS_PER_WEEK,
    Action,
    CourseIteration,
    CourseMetaRaw,
    Corpus,
    InteractionEvent,
    Label,
    Language,
    LearningObject,
    Level,
    ObjectKind,
    save_corpus,
)
from .errors import ConfigError

ARCHETYPES = ("engaged", "disengaged", "early_dropout", "erratic")
BASE_TIME = 1568592000  # a Monday, 00:00 UTC
DROPOUT_ACTIVE_WEEKS = 2
SESSION_SPACING = 1800


@dataclass(frozen=True)
class ArchetypeProfile:
    sessions_per_week: float
    events_per_session: float
    hour_sigma: float
    attempt_prob: float
    grade_mean: float
    retry_prob: float
    anticipation: float
    early_attempt_prob: float

    @classmethod
    def from_json(cls, d: Mapping) -> "ArchetypeProfile":
        return cls(**_checked(cls, d, "archetype profile"))


DEFAULT_PROFILES = {
    "engaged": ArchetypeProfile(3.0, 7.0, 2.5, 0.95, 0.78, 0.5, 0.15, 0.99),
    "disengaged": ArchetypeProfile(1.0, 4.0, 4.5, 0.45, 0.2, 0.15, 0.0, 0.9),
    "early_dropout": ArchetypeProfile(1.4, 4.0, 4.5, 0.0, 0.0, 0.0, 0.0, 0.0),
    "erratic": ArchetypeProfile(1.8, 5.0, 5.5, 0.7, 0.55, 0.3, 0.05, 0.9),
}
DEFAULT_PASS_RATES = {"engaged": 0.94, "disengaged": 0.05, "early_dropout": 0.0, "erratic": 0.5}
DEFAULT_MIXTURE = {"engaged": 0.37, "disengaged": 0.2, "early_dropout": 0.3, "erratic": 0.13}

# per-level effects at coupling strength 1
LEVEL_ACTIVITY = {"Bachelor": 1.0, "Master": 2.2, "Propedeutic": 0.45}
LEVEL_GRADE_SHIFT = {"Bachelor": 0.0, "Master": 0.7, "Propedeutic": -0.7}
LEVEL_MIXTURE_SHIFT = {
    "Bachelor": {},
    "Master": {"engaged": 0.08, "disengaged": -0.04, "early_dropout": -0.04},
    "Propedeutic": {"engaged": -0.08, "disengaged": 0.04, "early_dropout": 0.04},
}
LEVEL_WORDS = {
    "Bachelor": ("Principles of", "Applied", "Fundamentals of"),
    "Master": ("Advanced", "Topics in", "Graduate"),
    "Propedeutic": ("Introduction to", "Basics of", "Preparatory"),
}
LEVEL_PHRASES = {
    "Bachelor": ("core undergraduate methods", "standard tools and worked problems"),
    "Master": ("research-level techniques", "recent results and open problems"),
    "Propedeutic": ("first steps for newcomers", "the prerequisites needed later"),
}


def _checked(cls, d: Mapping, what: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return dict(d)


@dataclass(frozen=True)
class CourseSetConfig:
    id: str
    level: str
    language: str
    topic: str
    iterations: int = 1
    transfer: bool = False
    duration: int | None = None
    activity_shift: float = 1.0
    grade_shift: float = 0.0
    prior_shift: str = "none"
    students: int | None = None

    def __post_init__(self):
        if self.students is not None and self.students < 4:
            raise ConfigError(f"course set {self.id}: students must be >= 4")
        if self.level not in LEVEL_ACTIVITY:
            raise ConfigError(f"course set {self.id}: unknown level {self.level!r}")
        if self.language not in ("French", "English"):
            raise ConfigError(f"course set {self.id}: unknown language {self.language!r}")
        if self.iterations < 1:
            raise ConfigError(f"course set {self.id}: iterations must be >= 1")
        if self.prior_shift not in ("none", "label_flip"):
            raise ConfigError(f"course set {self.id}: prior_shift must be 'none' or 'label_flip'")
        if self.activity_shift <= 0:
            raise ConfigError(f"course set {self.id}: activity_shift must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    course_sets: tuple[CourseSetConfig, ...]
    students_per_course: int = 200
    duration_range: tuple[int, int] = (8, 12)
    videos_per_week: int = 3
    mixture: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MIXTURE))
    pass_rates: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_PASS_RATES))
    profiles: Mapping[str, ArchetypeProfile] = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    coupling: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.course_sets:
            raise ConfigError("scenario needs at least one course set")
        ids = [c.id for c in self.course_sets]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate course set ids")
        lo, hi = self.duration_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad duration range {self.duration_range}")
        if self.students_per_course < 4:
            raise ConfigError("students_per_course must be >= 4")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("coupling must lie in [0, 1]")
        for key in ("mixture", "pass_rates", "profiles"):
            missing = set(ARCHETYPES) ^ set(getattr(self, key))
            if missing:
                raise ConfigError(f"{key} must list exactly the archetypes {ARCHETYPES}")
        for a, p in self.pass_rates.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"pass rate of {a} outside [0, 1]")
        for cs in self.course_sets:
            mix = self.level_mixture(cs.level)
            rate = sum(mix[a] * self.pass_rates[a] for a in ARCHETYPES)
            if not 0.0 < rate < 1.0:
                raise ConfigError(f"course set {cs.id}: expected pass rate {rate:.3f} not in (0, 1)")

    @property
    def n_courses(self) -> int:
        return sum(c.iterations for c in self.course_sets)

    @property
    def n_students(self) -> int:
        return sum(c.iterations * (c.students or self.students_per_course) for c in self.course_sets)

    def level_mixture(self, level: str) -> dict[str, float]:
        """Archetype mixture for ``level`` after the coupling shift; raises if infeasible."""
        base = dict(self.mixture)
        if any(v < 0 for v in base.values()) or abs(sum(base.values()) - 1.0) > 1e-9:
            raise ConfigError("infeasible mixture: weights must be non-negative and sum to 1")
        for a, delta in LEVEL_MIXTURE_SHIFT[level].items():
            base[a] += self.coupling * delta
        if any(v < -1e-12 for v in base.values()):
            raise ConfigError(f"infeasible mixture for level {level}: {base}")
        return {a: max(v, 0.0) for a, v in base.items()}

    @classmethod
    def from_json(cls, d: Mapping) -> "ScenarioConfig":
        d = _checked(cls, d, "scenario")
        if "course_sets" not in d or "name" not in d:
            raise ConfigError("scenario needs 'name' and 'course_sets'")
        d["course_sets"] = tuple(CourseSetConfig(**_checked(CourseSetConfig, c, "course set"))
                                 for c in d["course_sets"])
        if "duration_range" in d:
            d["duration_range"] = tuple(d["duration_range"])
        if "profiles" in d:
            profiles = dict(DEFAULT_PROFILES)
            for a, p in d["profiles"].items():
                profiles[a] = ArchetypeProfile.from_json(p)
            d["profiles"] = profiles
        return cls(**d)

    def with_overrides(self, **kw) -> "ScenarioConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(kw)
        return ScenarioConfig(**data)


def load_scenario(name_or_path: str | Path) -> ScenarioConfig:
    """A bundled scenario by name (``small``, ``medium``, ``finetune``) or a JSON file."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        text = p.read_text(encoding="utf-8")
    else:
        try:
            text = resources.files("metatransfer.scenarios").joinpath(f"{name_or_path}.json").read_text(
                encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"unknown scenario {name_or_path!r}") from None
    return ScenarioConfig.from_json(json.loads(text))


@dataclass(frozen=True)
class StudentTruth:
    archetype: str
    label: Label
    is_early_dropout: bool


@dataclass
class GroundTruth:
    students: dict[str, dict[str, StudentTruth]]
    courses: dict[str, dict]

    def to_json(self) -> dict:
        return {
            "courses": self.courses,
            "students": {cid: {sid: {"archetype": t.archetype, "label": t.label.value,
                                     "early_dropout": t.is_early_dropout}
                               for sid, t in sorted(studs.items())}
                         for cid, studs in sorted(self.students.items())},
        }


# ---------------------------------------------------------------- generation


@dataclass
class _CourseContext:
    start: int
    duration: int
    videos: list[list[str]]
    quizzes: list[str]
    activity: float
    grade_shift: float


def _schedule(rng, set_id: str, iteration: int, duration: int, n_videos: int, start: int):
    objects, videos, quizzes = [], [], []
    for w in range(duration):
        week_start = start + w * SECONDS_PER_WEEK
        week_videos = []
        for k in range(n_videos):
            vid = f"{set_id}-v{w:02d}{k}"
            objects.append(LearningObject(vid, ObjectKind.Video, w, week_start + 3600 * (8 + k),
                                          video_duration=float(rng.integers(300, 1200))))
            week_videos.append(vid)
        qid = f"{set_id}-q{w:02d}"
        objects.append(LearningObject(qid, ObjectKind.Quiz, w, week_start + 3600 * 12, graded=True))
        videos.append(week_videos)
        quizzes.append(qid)
    return tuple(objects), videos, quizzes


def _meta_text(rng, cs: CourseSetConfig, duration: int) -> CourseMetaRaw:
    words = LEVEL_WORDS[cs.level]
    phrases = LEVEL_PHRASES[cs.level]
    title = f"{words[int(rng.integers(len(words)))]} {cs.topic.title()}"
    short = f"A {duration}-week course on {cs.topic} covering {phrases[0]}."
    n_sent = int(rng.integers(2, 6))
    pool = [
        f"Lectures introduce {cs.topic} through {phrases[0]}.",
        f"Weekly graded quizzes check understanding of {phrases[1]}.",
        f"Students work through {cs.topic} exercises every week.",
        f"The course emphasises {phrases[1]} in {cs.topic}.",
        f"Videos are released each week together with a quiz on {cs.topic}.",
    ]
    long = " ".join(pool[:n_sent])
    return CourseMetaRaw(duration, Level(cs.level), Language(cs.language), title, short, long)


def _beta_grade(rng, mean: float) -> float:
    mean = min(max(mean, 0.02), 0.98)
    conc = 8.0
    return round(float(rng.beta(mean * conc, (1.0 - mean) * conc)), 2)


def _student_events(rng, sid: str, ctx: _CourseContext, arche: str,
                    profile: ArchetypeProfile) -> list[InteractionEvent]:
    events: list[tuple[int, Action, str, float | None, float | None]] = []
    pref_hour = float(rng.uniform(7, 23))
    last_end = ctx.start
    weeks = DROPOUT_ACTIVE_WEEKS if arche == "early_dropout" else ctx.duration
    weeks = min(weeks, ctx.duration)
    # split the activity factor between session count and session length
    lam = profile.sessions_per_week * ctx.activity ** 0.6
    mu = max(profile.events_per_session * ctx.activity ** 0.4, 1.0)
    grade_logit_shift = ctx.grade_shift
    for w in range(weeks):
        week_start = ctx.start + w * SECONDS_PER_WEEK
        rate = lam
        if arche == "erratic":
            rate = float(rng.gamma(0.8, lam / 0.8))
        n_sessions = int(rng.poisson(rate))
        p_attempt = profile.early_attempt_prob if w < DROPOUT_ACTIVE_WEEKS else profile.attempt_prob
        attempt = p_attempt > 0 and rng.random() < p_attempt
        if attempt and n_sessions == 0:
            n_sessions = 1
        starts = []
        for _ in range(n_sessions):
            day = int(rng.integers(7))
            hour = (pref_hour + rng.normal(0.0, profile.hour_sigma)) % 24.0
            starts.append(week_start + day * 86400 + int(hour * 3600))
        starts.sort()
        quiz_session = int(rng.integers(n_sessions)) if attempt else -1
        for s_idx, t0 in enumerate(starts):
            t = max(t0, last_end + SESSION_SPACING)
            if t >= week_start + SECONDS_PER_WEEK - 4 * 3600:
                continue
            n_ev = 1 + int(rng.poisson(mu - 1.0))
            pool = [v for wk in range(w + 1) for v in ctx.videos[wk]]
            current = ctx.videos[w]
            ahead = ctx.videos[w + 1] if w + 1 < ctx.duration else []
            video = None
            for _ in range(n_ev):
                if video is None or rng.random() < 0.12:
                    r = rng.random()
                    if ahead and r < profile.anticipation:
                        video = ahead[int(rng.integers(len(ahead)))]
                    elif r < 0.75:
                        video = current[int(rng.integers(len(current)))]
                    else:
                        video = pool[int(rng.integers(len(pool)))]
                    events.append((t, Action.VideoLoad, video, None, None))
                else:
                    r = rng.random()
                    if r < 0.45:
                        act = Action.VideoPlay
                    elif r < 0.65:
                        act = Action.VideoPause
                    elif r < 0.75:
                        act = Action.VideoSeekForward
                    elif r < 0.85:
                        act = Action.VideoSeekBackward
                    elif r < 0.92:
                        act = Action.VideoSpeedChange
                    else:
                        act = Action.VideoStop
                    seek = float(rng.integers(5, 240)) if act in (Action.VideoSeekForward,
                                                                   Action.VideoSeekBackward) else None
                    events.append((t, act, video, None, seek))
                t += 5 + int(rng.exponential(90.0))
            if s_idx == quiz_session:
                quiz = ctx.quizzes[w]
                mean = 1.0 / (1.0 + math.exp(-(math.log(profile.grade_mean / (1 - profile.grade_mean))
                                              + grade_logit_shift)))
                grade = _beta_grade(rng, mean)
                events.append((t, Action.QuizSubmit, quiz, grade, None))
                while grade < 0.8 and rng.random() < profile.retry_prob:
                    t += 60 + int(rng.exponential(300.0))
                    grade = min(1.0, round(grade + abs(float(rng.normal(0.1, 0.08))), 2))
                    events.append((t, Action.QuizSubmit, quiz, grade, None))
                t += 5
            last_end = t
    events.sort(key=lambda e: e[0])
    return [InteractionEvent(sid, t, a, o, grade=g, seek_seconds=s) for t, a, o, g, s in events]


def _course_seed(seed: int, set_index: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, set_index, iteration])


def generate_course(config: ScenarioConfig, set_index: int, iteration: int):
    """One course iteration plus its per-student ground truth."""
    cs = config.course_sets[set_index]
    set_rng = np.random.default_rng([config.seed, set_index])
    lo, hi = config.duration_range
    duration = cs.duration or int(set_rng.integers(lo, hi + 1))
    meta = _meta_text(set_rng, cs, duration)
    rng = _course_seed(config.seed, set_index, iteration)
    start = BASE_TIME + (iteration - 1) * 52 * SECONDS_PER_WEEK
    schedule, videos, quizzes = _schedule(rng, cs.id, iteration, duration, config.videos_per_week, start)
    k = config.coupling
    activity = LEVEL_ACTIVITY[cs.level] ** k * cs.activity_shift
    grade_shift = k * LEVEL_GRADE_SHIFT[cs.level] + cs.grade_shift
    ctx = _CourseContext(start, duration, videos, quizzes, activity, grade_shift)
    mix = config.level_mixture(cs.level)
    probs = np.array([mix[a] for a in ARCHETYPES])
    probs = probs / probs.sum()
    flip = cs.prior_shift == "label_flip" and iteration < cs.iterations
    logs, labels, truth = {}, {}, {}
    n_students = cs.students or config.students_per_course
    width = len(str(n_students))
    for i in range(n_students):
        sid = f"{cs.id}{iteration}-s{i:0{width}d}"
        arche = ARCHETYPES[int(rng.choice(len(ARCHETYPES), p=probs))]
        passed = rng.random() < config.pass_rates[arche]
        if flip:
            passed = not passed
        label = Label.Pass if passed else Label.Fail
        logs[sid] = tuple(_student_events(rng, sid, ctx, arche, config.profiles[arche]))
        labels[sid] = label
        truth[sid] = StudentTruth(arche, label, arche == "early_dropout")
    course = CourseIteration(cs.id, iteration, duration, start, schedule, meta, logs, labels)
    course.validate()
    descriptor = {"level": cs.level, "coupling": k, "activity_factor": activity,
                  "grade_shift": grade_shift, "mixture": mix, "label_flip": flip}
    return course, truth, descriptor


def generate_corpus(config: ScenarioConfig) -> tuple[Corpus, GroundTruth]:
    courses, train, transfer = [], [], []
    students, descriptors = {}, {}
    for si, cs in enumerate(config.course_sets):
        for it in range(1, cs.iterations + 1):
            course, truth, desc = generate_course(config, si, it)
            courses.append(course)
            students[course.course_id] = truth
            descriptors[course.course_id] = desc
            (transfer if cs.transfer and it == cs.iterations else train).append(course.course_id)
    return Corpus(courses, train, transfer), GroundTruth(students, descriptors)


def export_corpus(corpus: Corpus, directory: str | Path, truth: GroundTruth | None = None) -> Path:
    d = save_corpus(corpus, directory)
    if truth is not None:
        (d / "ground_truth.json").write_text(json.dumps(truth.to_json(), indent=1, sort_keys=True) + "\n",
                                             encoding="utf-8")
    return d
