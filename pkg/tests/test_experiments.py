import hashlib
from dataclasses import replace

import numpy as np
import pytest

from metatransfer.datasets import FeatureBuilder
from metatransfer.errors import ConfigError, DataError, InapplicableSettingError
from metatransfer.experiments import (
    ExperimentConfig,
    ExperimentReport,
    ResultRow,
    _evaluate,
    attention_report,
    derive_seed,
    fit_on_courses,
    render_table,
    rows_to_csv,
    run_ablation,
    run_transfer,
)
from metatransfer.metrics import balanced_accuracy, confusion_counts
from metatransfer.models import ArchitectureSpec, TrainConfig
from metatransfer.synthgen import CourseSetConfig, ScenarioConfig, generate_corpus

LEVEL = 0.5


@pytest.fixture(scope="module")
def corpus():
    scenario = ScenarioConfig(
        "tiny", (
            CourseSetConfig("AAA", "Bachelor", "English", "physics", iterations=2, transfer=True),
            CourseSetConfig("BBB", "Master", "French", "statistics"),
            CourseSetConfig("CCC", "Propedeutic", "English", "calculus", iterations=2, transfer=True),
        ),
        students_per_course=40, duration_range=(4, 5), seed=5)
    return generate_corpus(scenario)[0]


def cfg(kind="BO", **kw):
    arch = ArchitectureSpec(kind, bilstm_units=4, head_dense=(8,), attention_hidden=4, latent_dim=8)
    return ExperimentConfig(arch=arch, train=TrainConfig(max_epochs=2, batch_size=32),
                            fine_tune=TrainConfig(max_epochs=2, lr=1e-3), folds=4, **kw)


def test_derive_seed_oracle():
    digest = hashlib.blake2b(b"7|NCDiff|AAA", digest_size=4).digest()
    assert derive_seed(7, "NCDiff", "AAA") == int.from_bytes(digest, "little") & 0x7FFFFFFF
    seeds = {derive_seed(0, "x", i) for i in range(200)}
    assert len(seeds) == 200 and all(0 <= s < 2 ** 31 for s in seeds)


def test_corpus_shape(corpus):
    assert corpus.transfer_ids == ["AAA_2", "CCC_2"]
    assert corpus.train_ids == ["AAA_1", "BBB_1", "CCC_1"]


def check_row(row, course):
    """Recompute the stored metrics from the row's own predictions."""
    preds = row.predictions
    if row.setting == "OneOneDiff":
        for src, bac in row.source_bacs.items():
            mine = [p[1:] for p in preds if p[0] == src]
            y = [t for _, _, t in mine]
            assert balanced_accuracy([q > 0.5 for _, q, _ in mine], y) == bac
        assert row.bac == pytest.approx(np.mean(list(row.source_bacs.values())), abs=1e-15)
        return
    sids = [s for s, _, _ in preds]
    assert len(set(sids)) == len(sids) == row.n
    y = [t for _, _, t in preds]
    assert y == [int(course.labels[s].is_fail) for s in sids]
    pred = [q > 0.5 for _, q, _ in preds]
    assert confusion_counts(pred, y) == row.confusion
    if row.setting == "OneOneSame":
        assert row.bac == pytest.approx(np.mean(row.fold_bacs), abs=1e-15)
    else:
        assert balanced_accuracy(pred, y) == row.bac


@pytest.fixture(scope="module")
def all_rows(corpus):
    fb = FeatureBuilder(corpus, LEVEL)
    rows = []
    for setting in ("OneOneSame", "NOneSame", "OneOneDiff", "NOneDiff", "NCDiff", "NCDiffFT"):
        rows += run_transfer(setting, corpus, LEVEL, cfg(), builder=fb)
    return fb, rows


def test_every_bac_recomputes_from_predictions(corpus, all_rows):
    _, rows = all_rows
    ok = [r for r in rows if r.status == "ok"]
    assert {r.setting for r in ok} == {"OneOneSame", "NOneSame", "OneOneDiff", "NOneDiff", "NCDiff", "NCDiffFT"}
    for r in ok:
        check_row(r, corpus[r.course_id])


def test_filtered_population_excludes_removed(corpus, all_rows):
    fb, rows = all_rows
    for r in rows:
        if r.status != "ok" or r.setting == "OneOneDiff":
            continue
        sids = {p[0] for p in r.predictions}
        removed = fb.filter_result(r.course_id).removed
        if r.population == "filtered":
            assert not sids & removed
        else:
            assert sids == set(corpus[r.course_id].students)


def test_one_one_same_folds_cover_course_once(corpus, all_rows):
    _, rows = all_rows
    full = [r for r in rows if r.setting == "OneOneSame" and r.population == "full"]
    assert len(full) == 2
    for r in full:
        assert sorted(p[0] for p in r.predictions) == sorted(corpus[r.course_id].students)
        assert len(r.fold_bacs) <= 4


def test_evaluation_guard_detects_leakage(corpus):
    fb = FeatureBuilder(corpus, LEVEL)
    tm, stats, feat = fit_on_courses(fb, ["AAA_1"], cfg(), seed=1)
    leaked = {("AAA_2", corpus["AAA_2"].students[0])}
    with pytest.raises(DataError, match="seen in training"):
        _evaluate(tm, fb, "AAA_2", stats, feat, "NOneSame", leaked)


@pytest.mark.parametrize("setting, cid", [("NOneSame", "BBB_1"), ("NCDiff", "AAA_1"), ("NCDiffFT", "BBB_1")])
def test_explicit_inapplicable_request_raises(corpus, setting, cid):
    with pytest.raises(InapplicableSettingError, match="inapplicable"):
        run_transfer(setting, corpus, LEVEL, cfg(), course_ids=[cid])


def test_unknown_setting(corpus):
    with pytest.raises(ConfigError):
        run_transfer("AllAll", corpus, LEVEL, cfg())


def test_reports_are_deterministic(corpus):
    def once():
        rows = run_transfer("NCDiffFT", corpus, LEVEL, cfg("BTM"), course_ids=["CCC_2"])
        return ExperimentReport(rows, config={"seed": 0}).dumps()
    assert once() == once()


def test_report_round_trip(tmp_path, all_rows):
    _, rows = all_rows
    rep = ExperimentReport(rows[:4], [{"feature": "level", "bac": 0.5}], [], {"seed": 0})
    rep.save(tmp_path / "r.json")
    assert ExperimentReport.load(tmp_path / "r.json").dumps() == rep.dumps()
    (tmp_path / "bad.json").write_text('{"schema": "other", "version": 1, "rows": []}')
    with pytest.raises(DataError):
        ExperimentReport.load(tmp_path / "bad.json")


def test_ablation_rows_and_widths(corpus):
    rows = run_ablation(corpus, LEVEL, cfg())
    assert [r["feature"] for r in rows] == ["duration", "level", "language", "title", "short", "long", "baseline"]
    assert [r["input_width"] for r in rows] == [46, 48, 47, 75, 75, 103, 45]
    assert [r["arch"] for r in rows] == ["BTM"] * 6 + ["BO"]
    assert len({r["n_test"] for r in rows}) == 1


def test_attention_report_rows(corpus):
    fb = FeatureBuilder(corpus, LEVEL)
    c = cfg("BSM")
    tm, stats, feat = fit_on_courses(fb, corpus.train_ids, c, seed=3)
    rows = attention_report(tm, fb, corpus.transfer_ids, stats, feat)
    names = [r["weight"] for r in rows]
    assert names[:6] == ["meta:duration", "meta:level", "meta:language", "meta:title", "meta:short", "meta:long"]
    assert names[6:] == ["latent:behavior", "latent:meta"]
    assert sum(r["mean"] for r in rows[:6]) == pytest.approx(1.0)
    assert rows[6]["mean"] + rows[7]["mean"] == pytest.approx(1.0)
    for r in rows:
        assert r["q1"] <= r["q2"] <= r["q3"]
    bo, _, _ = fit_on_courses(fb, corpus.train_ids, cfg(), seed=3)
    with pytest.raises(ConfigError):
        attention_report(bo, fb, corpus.transfer_ids, stats, feat)


def test_render_table_layout():
    rows = [
        ResultRow("NCDiff", "BO", "X_2", 0.4, "filtered", bac=0.71234),
        ResultRow("NCDiff", "BO", "X_2", 0.4, "full", bac=0.6),
        ResultRow("NOneSame", "BO", "X_2", 0.4, "filtered", status="inapplicable"),
        ResultRow("NCDiff", "BSM", "A_1", 0.4, "filtered", bac=0.5),
    ]
    table = render_table(ExperimentReport(rows), "filtered")
    assert table.splitlines() == [
        "course,level,NCDiff:BO,NOneSame:BO,NCDiff:BSM",
        "A_1,0.4,,,0.5000",
        "X_2,0.4,0.7123,-,",
    ]
    assert "0.6000" in render_table(ExperimentReport(rows), "full")


def test_rows_to_csv_formats_floats():
    assert rows_to_csv([{"a": 1, "b": 0.5}]) == "a,b\n1,0.500000\n"
    assert rows_to_csv([]) == ""
