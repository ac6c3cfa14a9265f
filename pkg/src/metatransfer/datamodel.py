"""Domain types and on-disk formats for course iterations.

A course directory holds four files:

* ``events.jsonl`` - one interaction per line:
  ``{"student", "t", "action", "object", "grade"?, "seek_seconds"?}``
* ``schedule.json`` - list of ``{"object", "kind", "release_week", "release_time",
  "graded"?, "video_duration"?}``
* ``meta.json`` - ``{"course_set", "iteration", "duration_weeks", "start_time", "level",
  "language", "title", "short_description", "long_description"}``
* ``labels.csv`` - header ``student_id,label`` with ``pass``/``fail`` values.

A corpus directory contains one sub-directory per course plus ``corpus.json``
listing the training and transfer course ids.
"""

from __future__ import annotations

import bisect
import csv
import enum
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DataError

SECONDS_PER_WEEK = 604800


class Action(enum.Enum):
    VideoLoad = "Video.Load"
    VideoPlay = "Video.Play"
    VideoPause = "Video.Pause"
    VideoStop = "Video.Stop"
    VideoSeekBackward = "Video.SeekBackward"
    VideoSeekForward = "Video.SeekForward"
    VideoSpeedChange = "Video.SpeedChange"
    QuizSubmit = "Quiz.Submit"

    @property
    def is_video(self) -> bool:
        return self is not Action.QuizSubmit

    @property
    def is_seek(self) -> bool:
        return self in (Action.VideoSeekBackward, Action.VideoSeekForward)


# stable small-integer codes used by the vectorised feature code
ACTION_CODES = {a: i for i, a in enumerate(Action)}


class ObjectKind(enum.Enum):
    Video = "video"
    Quiz = "quiz"


class Level(enum.Enum):
    Bachelor = "Bachelor"
    Master = "Master"
    Propedeutic = "Propedeutic"


class Language(enum.Enum):
    French = "French"
    English = "English"


class Label(enum.Enum):
    Pass = "pass"
    Fail = "fail"

    @property
    def is_fail(self) -> bool:
        return self is Label.Fail


@dataclass(frozen=True, slots=True)
class InteractionEvent:
    student_id: str
    timestamp: int
    action: Action
    object_id: str
    grade: float | None = None
    seek_seconds: float | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")
        if self.grade is not None:
            if self.action is not Action.QuizSubmit:
                raise DataError(f"grade on non-quiz action {self.action.value}")
            if not 0.0 <= self.grade <= 1.0:
                raise DataError(f"grade out of range: {self.grade}")
        if self.seek_seconds is not None and not self.action.is_seek:
            raise DataError(f"seek_seconds on non-seek action {self.action.value}")


@dataclass(frozen=True, slots=True)
class LearningObject:
    object_id: str
    kind: ObjectKind
    release_week: int
    release_time: int
    graded: bool = False
    video_duration: float | None = None

    def __post_init__(self):
        if self.release_week < 0:
            raise DataError(f"{self.object_id}: negative release_week")
        if (self.kind is ObjectKind.Video) != (self.video_duration is not None):
            raise DataError(f"{self.object_id}: video_duration must be set iff kind is video")
        if self.graded and self.kind is not ObjectKind.Quiz:
            raise DataError(f"{self.object_id}: only quizzes can be graded")


@dataclass(frozen=True, slots=True)
class CourseMetaRaw:
    duration_weeks: int
    level: Level
    language: Language
    title: str
    short_description: str
    long_description: str

    def __post_init__(self):
        for name in ("title", "short_description", "long_description"):
            if not getattr(self, name).strip():
                raise DataError(f"meta field {name} is empty")
        if self.duration_weeks < 1:
            raise DataError("duration_weeks must be positive")


@dataclass(frozen=True)
class CourseIteration:
    """One run of a course. Treated as immutable once constructed."""

    course_set_id: str
    iteration_index: int
    duration_weeks: int
    start_time: int
    schedule: tuple[LearningObject, ...]
    meta: CourseMetaRaw
    logs: Mapping[str, tuple[InteractionEvent, ...]]
    labels: Mapping[str, Label]

    def __post_init__(self):
        # a student without events is represented by absence from ``logs``
        if any(not e for e in self.logs.values()):
            object.__setattr__(self, "logs", {s: e for s, e in self.logs.items() if e})

    @property
    def course_id(self) -> str:
        return f"{self.course_set_id}_{self.iteration_index}"

    @property
    def students(self) -> list[str]:
        """Student ids in canonical (sorted) order."""
        return sorted(self.labels)

    def week_start(self, week: int) -> int:
        return self.start_time + week * SECONDS_PER_WEEK

    def objects(self) -> dict[str, LearningObject]:
        return {o.object_id: o for o in self.schedule}

    def validate(self) -> None:
        if self.meta.duration_weeks != self.duration_weeks:
            raise DataError(
                f"{self.course_id}: meta duration {self.meta.duration_weeks} != {self.duration_weeks}"
            )
        if self.iteration_index < 1:
            raise DataError(f"{self.course_id}: iteration index must be >= 1")
        known = set()
        for obj in self.schedule:
            if obj.object_id in known:
                raise DataError(f"{self.course_id}: duplicate object {obj.object_id}")
            if obj.release_week >= self.duration_weeks:
                raise DataError(
                    f"{self.course_id}: object {obj.object_id} released in week "
                    f"{obj.release_week} of a {self.duration_weeks}-week course"
                )
            known.add(obj.object_id)
        unlabeled = sorted(set(self.logs) - set(self.labels))
        if unlabeled:
            raise DataError(f"{self.course_id}: students without label: {unlabeled[:10]}")
        for sid, events in self.logs.items():
            prev = -1
            for ev in events:
                if ev.student_id != sid:
                    raise DataError(f"{self.course_id}: event of {ev.student_id} filed under {sid}")
                if ev.object_id not in known:
                    raise DataError(f"{self.course_id}: unknown object {ev.object_id!r} (student {sid})")
                if ev.timestamp < prev:
                    raise DataError(f"{self.course_id}: events of {sid} are not time-sorted")
                prev = ev.timestamp

    def events_of(self, student_id: str) -> tuple[InteractionEvent, ...]:
        return self.logs.get(student_id, ())

    def subset(self, students: Iterable[str]) -> "CourseIteration":
        keep = set(students)
        return replace(
            self,
            logs={s: e for s, e in self.logs.items() if s in keep},
            labels={s: l for s, l in self.labels.items() if s in keep},
        )


@dataclass
class Corpus:
    courses: list[CourseIteration]
    train_ids: list[str] = field(default_factory=list)
    transfer_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [c.course_id for c in self.courses]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate course ids in corpus")
        train, transfer = set(self.train_ids), set(self.transfer_ids)
        if train & transfer:
            raise DataError(f"courses in both train and transfer: {sorted(train & transfer)}")
        if train | transfer != set(ids):
            raise DataError("train and transfer ids must cover the corpus exactly")

    def __getitem__(self, course_id: str) -> CourseIteration:
        for c in self.courses:
            if c.course_id == course_id:
                return c
        raise KeyError(course_id)

    @property
    def ids(self) -> list[str]:
        return [c.course_id for c in self.courses]

    @property
    def max_weeks(self) -> int:
        return max(c.duration_weeks for c in self.courses)

    def iterations_of(self, course_set_id: str) -> list[CourseIteration]:
        return sorted(
            (c for c in self.courses if c.course_set_id == course_set_id),
            key=lambda c: c.iteration_index,
        )


# ---------------------------------------------------------------- parsing


def _parse_event(record: dict, lineno: int) -> InteractionEvent:
    try:
        token = record["action"]
        try:
            action = Action(token)
        except ValueError:
            raise DataError(f"line {lineno}: unknown action {token!r}") from None
        t = record["t"]
        if isinstance(t, bool) or not isinstance(t, (int, float)) or t != int(t):
            raise DataError(f"line {lineno}: timestamp must be an integer, got {t!r}")
        grade = record.get("grade")
        seek = record.get("seek_seconds")
        return InteractionEvent(
            student_id=str(record["student"]),
            timestamp=int(t),
            action=action,
            object_id=str(record["object"]),
            grade=None if grade is None else float(grade),
            seek_seconds=None if seek is None else float(seek),
        )
    except KeyError as exc:
        raise DataError(f"line {lineno}: missing field {exc.args[0]!r}") from None
    except DataError as exc:
        msg = str(exc)
        raise DataError(msg if msg.startswith("line ") else f"line {lineno}: {msg}") from None


def parse_event_log(path: str | os.PathLike, format: str = "jsonl") -> list[InteractionEvent]:
    """Read and validate an event log, sorted by (student_id, timestamp).

    Events with equal keys keep their input order.
    """
    if format != "jsonl":
        raise DataError(f"unsupported event log format {format!r}")
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise DataError(f"line {lineno}: expected a JSON object")
            events.append(_parse_event(record, lineno))
    events.sort(key=lambda e: (e.student_id, e.timestamp))
    return events


def _parse_schedule(path: Path) -> tuple[LearningObject, ...]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    objects = []
    for i, rec in enumerate(raw):
        try:
            duration = rec.get("video_duration")
            objects.append(
                LearningObject(
                    object_id=str(rec["object"]),
                    kind=ObjectKind(rec["kind"]),
                    release_week=int(rec["release_week"]),
                    release_time=int(rec["release_time"]),
                    graded=bool(rec.get("graded", False)),
                    video_duration=None if duration is None else float(duration),
                )
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: schedule entry {i}: {exc}") from None
    return tuple(objects)


def _parse_meta(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        meta = CourseMetaRaw(
            duration_weeks=int(raw["duration_weeks"]),
            level=Level(raw["level"]),
            language=Language(raw["language"]),
            title=raw["title"],
            short_description=raw["short_description"],
            long_description=raw["long_description"],
        )
        return {
            "course_set_id": str(raw["course_set"]),
            "iteration_index": int(raw["iteration"]),
            "duration_weeks": int(raw["duration_weeks"]),
            "start_time": int(raw["start_time"]),
            "meta": meta,
        }
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _parse_labels(path: Path) -> dict[str, Label]:
    labels = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["student_id", "label"]:
            raise DataError(f"{path}: expected header 'student_id,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}: line {lineno}: expected 2 columns")
            sid, value = row
            try:
                label = Label(value.strip().lower())
            except ValueError:
                raise DataError(f"{path}: line {lineno}: bad label {value!r}") from None
            if sid in labels:
                raise DataError(f"{path}: duplicate student {sid}")
            labels[sid] = label
    return labels


def load_course(directory: str | os.PathLike) -> CourseIteration:
    """Load and cross-validate one course directory."""
    d = Path(directory)
    for name in ("events.jsonl", "schedule.json", "meta.json", "labels.csv"):
        if not (d / name).is_file():
            raise DataError(f"{d}: missing {name}")
    events = parse_event_log(d / "events.jsonl")
    header = _parse_meta(d / "meta.json")
    labels = _parse_labels(d / "labels.csv")
    grouped: dict[str, list[InteractionEvent]] = {}
    for ev in events:
        grouped.setdefault(ev.student_id, []).append(ev)
    course = CourseIteration(
        schedule=_parse_schedule(d / "schedule.json"),
        logs={s: tuple(evs) for s, evs in grouped.items()},
        labels=labels,
        **header,
    )
    course.validate()
    return course


# ------------------------------------------------------------- serializing


def _event_record(ev: InteractionEvent) -> dict:
    rec = {"student": ev.student_id, "t": ev.timestamp, "action": ev.action.value, "object": ev.object_id}
    if ev.grade is not None:
        rec["grade"] = ev.grade
    if ev.seek_seconds is not None:
        rec["seek_seconds"] = ev.seek_seconds
    return rec


def save_course(course: CourseIteration, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "events.jsonl", "w", encoding="utf-8") as fh:
        for sid in sorted(course.logs):
            for ev in course.logs[sid]:
                fh.write(json.dumps(_event_record(ev), separators=(",", ":")))
                fh.write("\n")
    schedule = []
    for o in course.schedule:
        rec = {"object": o.object_id, "kind": o.kind.value, "release_week": o.release_week,
               "release_time": o.release_time}
        if o.kind is ObjectKind.Quiz:
            rec["graded"] = o.graded
        if o.video_duration is not None:
            rec["video_duration"] = o.video_duration
        schedule.append(rec)
    with open(d / "schedule.json", "w", encoding="utf-8") as fh:
        json.dump(schedule, fh, indent=1)
        fh.write("\n")
    m = course.meta
    meta = {
        "course_set": course.course_set_id,
        "iteration": course.iteration_index,
        "duration_weeks": course.duration_weeks,
        "start_time": course.start_time,
        "level": m.level.value,
        "language": m.language.value,
        "title": m.title,
        "short_description": m.short_description,
        "long_description": m.long_description,
    }
    with open(d / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, ensure_ascii=False)
        fh.write("\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["student_id", "label"])
    for sid in sorted(course.labels):
        writer.writerow([sid, course.labels[sid].value])
    (d / "labels.csv").write_text(buf.getvalue(), encoding="utf-8")
    return d


def save_corpus(corpus: Corpus, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for course in corpus.courses:
        save_course(course, d / course.course_id)
    manifest = {"train": list(corpus.train_ids), "transfer": list(corpus.transfer_ids)}
    (d / "corpus.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return d


def load_corpus(directory: str | os.PathLike) -> Corpus:
    d = Path(directory)
    if not (d / "corpus.json").is_file():
        raise DataError(f"{d}: missing corpus.json")
    manifest = json.loads((d / "corpus.json").read_text(encoding="utf-8"))
    ids = list(manifest.get("train", [])) + list(manifest.get("transfer", []))
    courses = []
    for cid in ids:
        course = load_course(d / cid)
        if course.course_id != cid:
            raise DataError(f"{d / cid}: directory name does not match course id {course.course_id}")
        courses.append(course)
    return Corpus(courses, train_ids=list(manifest.get("train", [])),
                  transfer_ids=list(manifest.get("transfer", [])))


# -------------------------------------------------------------- truncation


def weeks_visible(duration_weeks: int, level: float) -> int:
    """Whole weeks kept at an early-prediction level (floor; 10 weeks at 0.4 -> 4)."""
    if not 0.0 < level <= 1.0:
        raise DataError(f"early level must be in (0, 1], got {level}")
    # the epsilon absorbs float noise such as 0.29 * 100 = 28.999999999999996
    return int(math.floor(level * duration_weeks + 1e-9))


def _timestamp(ev: InteractionEvent) -> int:
    return ev.timestamp


def truncate_to_level(course: CourseIteration, level: float) -> CourseIteration:
    """Drop every event at or after the end of the visible weeks."""
    kept = weeks_visible(course.duration_weeks, level)
    if kept == 0:
        raise DataError(f"early level too small: {level} of {course.duration_weeks} weeks keeps no week")
    cutoff = course.week_start(kept)
    logs = {}
    for sid, events in course.logs.items():
        # events are time-sorted, so the visible part is a prefix
        n = bisect.bisect_left(events, cutoff, key=_timestamp)
        logs[sid] = events if n == len(events) else events[:n]
    return replace(course, logs=logs)
