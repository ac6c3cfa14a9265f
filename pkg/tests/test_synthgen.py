import csv
import json
from dataclasses import replace

import pytest

from metatransfer.datamodel import Action, Label, load_corpus
from metatransfer.errors import ConfigError
from metatransfer.synthgen import (
    ARCHETYPES,
    DEFAULT_MIXTURE,
    CourseSetConfig,
    ScenarioConfig,
    export_corpus,
    generate_corpus,
    load_scenario,
)


SETS = (
    CourseSetConfig("AAA", "Bachelor", "English", "physics", iterations=3, transfer=True),
    CourseSetConfig("BBB", "Master", "French", "statistics", students=12),
)


def tiny(**kw):
    return ScenarioConfig("tiny", **{"course_sets": SETS, "students_per_course": 30, "duration_range": (4, 6),
                                     "seed": 3, **kw})


def tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_same_seed_same_corpus():
    a, ta = generate_corpus(tiny())
    b, tb = generate_corpus(tiny())
    assert [c == d for c, d in zip(a.courses, b.courses)] == [True] * 4
    assert ta.to_json() == tb.to_json()


def test_other_seed_other_corpus():
    a, _ = generate_corpus(tiny())
    b, _ = generate_corpus(tiny(seed=4))
    assert a.courses[0].logs != b.courses[0].logs


def test_split_and_sizes():
    corpus, truth = generate_corpus(tiny())
    assert corpus.transfer_ids == ["AAA_3"]
    assert corpus.train_ids == ["AAA_1", "AAA_2", "BBB_1"]
    assert len(corpus["BBB_1"].students) == 12
    assert sum(len(v) for v in truth.students.values()) == tiny().n_students == 102


def test_early_dropouts_silent_after_two_weeks():
    corpus, truth = generate_corpus(tiny())
    n = 0
    for course in corpus.courses:
        cutoff = course.week_start(2)
        for sid, t in truth.students[course.course_id].items():
            if t.is_early_dropout:
                n += 1
                assert all(e.timestamp < cutoff for e in course.events_of(sid))
                assert t.label is Label.Fail
    assert n > 0


def test_schedule_within_duration_and_grades_valid():
    corpus, _ = generate_corpus(tiny())
    for course in corpus.courses:
        assert 4 <= course.duration_weeks <= 6
        assert all(0 <= o.release_week < course.duration_weeks for o in course.schedule)
        end = course.week_start(course.duration_weeks)
        for sid in course.students:
            for e in course.events_of(sid):
                assert course.start_time <= e.timestamp < end
                if e.action is Action.QuizSubmit:
                    assert 0.0 <= e.grade <= 1.0


def test_export_load_export_byte_identical(tmp_path):
    corpus, truth = generate_corpus(tiny())
    first = export_corpus(corpus, tmp_path / "a", truth)
    export_corpus(load_corpus(first), tmp_path / "b")
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    a.pop("ground_truth.json")
    assert a == b


def test_labels_csv_has_one_row_per_student(tmp_path):
    corpus, _ = generate_corpus(tiny())
    d = export_corpus(corpus, tmp_path / "c")
    for course in corpus.courses:
        with open(d / course.course_id / "labels.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        assert len(rows) == len(course.students)


def test_label_flip_inverts_only_earlier_iterations():
    plain, _ = generate_corpus(tiny())
    flipped_cfg = tiny(course_sets=(replace(SETS[0], prior_shift="label_flip"), SETS[1]))
    flipped, truth = generate_corpus(flipped_cfg)
    for cid in ("AAA_1", "AAA_2"):
        a, b = plain[cid], flipped[cid]
        assert a.logs == b.logs
        assert all(a.labels[s] is not b.labels[s] for s in a.students)
        assert truth.courses[cid]["label_flip"] is True
    assert plain["AAA_3"].labels == flipped["AAA_3"].labels
    assert plain["BBB_1"].labels == flipped["BBB_1"].labels


def test_coupling_zero_keeps_base_mixture():
    cfg = tiny(coupling=0.0)
    for level in ("Bachelor", "Master", "Propedeutic"):
        assert cfg.level_mixture(level) == pytest.approx(DEFAULT_MIXTURE)


def test_infeasible_mixture_rejected():
    with pytest.raises(ConfigError, match="infeasible"):
        tiny(mixture={"engaged": 0.5, "disengaged": 0.5, "early_dropout": 0.5, "erratic": 0.0})
    with pytest.raises(ConfigError, match="infeasible"):
        tiny(mixture={"engaged": 1.0, "disengaged": 0.0, "early_dropout": 0.0, "erratic": 0.0})


def test_pass_rate_must_be_strictly_between():
    rates = {a: 0.0 for a in ARCHETYPES}
    with pytest.raises(ConfigError, match="pass rate"):
        tiny(pass_rates=rates)


@pytest.mark.parametrize("patch, message", [
    ({"colour": 1}, "unknown scenario keys"),
    ({"course_sets": []}, "at least one"),
    ({"coupling": 1.5}, "coupling"),
    ({"duration_range": [5, 3]}, "duration"),
])
def test_scenario_json_validation(tmp_path, patch, message):
    d = {"name": "x", "course_sets": [{"id": "A", "level": "Bachelor", "language": "English", "topic": "t"}]}
    d.update(patch)
    p = tmp_path / "s.json"
    p.write_text(json.dumps(d))
    with pytest.raises(ConfigError, match=message):
        load_scenario(p)


def test_bad_course_set_fields():
    with pytest.raises(ConfigError, match="prior_shift"):
        CourseSetConfig("A", "Bachelor", "English", "t", prior_shift="rotate")
    with pytest.raises(ConfigError, match="level"):
        CourseSetConfig("A", "PhD", "English", "t")


@pytest.mark.parametrize("name", ["small", "medium", "finetune"])
def test_bundled_scenarios_load(name):
    cfg = load_scenario(name)
    assert cfg.name == name and cfg.n_courses >= 3
    with pytest.raises(ConfigError, match="unknown scenario"):
        load_scenario("nope")


def test_small_corpus_validates(small_corpus):
    corpus, truth = small_corpus
    for course in corpus.courses:
        course.validate()
        assert set(truth.students[course.course_id]) == set(course.students)
    assert corpus.transfer_ids == ["ALG_2"]
