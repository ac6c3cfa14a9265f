import json

import numpy as np
import pytest

from metatransfer.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from metatransfer.errors import ConfigError, DataError
from metatransfer.pipeline import (
    STAGES,
    Pipeline,
    PipelineConfig,
    StageError,
    load_config,
    parse_config_text,
)

TINY = {
    "name": "tiny", "seed": 9, "students_per_course": 24, "duration_range": [4, 5],
    "course_sets": [
        {"id": "AAA", "level": "Bachelor", "language": "English", "topic": "physics", "iterations": 2, "transfer": True},
        {"id": "BBB", "level": "Master", "language": "French", "topic": "statistics"},
    ],
}

FAST = """\
# quick settings for tests
levels = [0.5]
bilstm_units = 4
head_dense = [8]
attention_hidden = 4
max_epochs = 2
batch_size = 32
folds = 3
"""


@pytest.fixture
def setup(tmp_path):
    scen = tmp_path / "tiny.json"
    scen.write_text(json.dumps(TINY))
    conf = tmp_path / "fast.conf"
    conf.write_text(FAST + f'scenario = "{scen}"\n')
    return tmp_path, conf


# ------------------------------------------------------------ config


def test_parse_config_values():
    vals = parse_config_text('a = 1\n# c\n\nb = [1, "x"]\nc = null\nd = true\n')
    assert vals == {"a": 1, "b": [1, "x"], "c": None, "d": True}


@pytest.mark.parametrize("text, message", [
    ("a = 1\na = 2\n", "duplicate key"),
    ("a = [1,\n", "not valid JSON"),
    ("just words\n", "expected 'key = value'"),
    ("a = bare\n", "not valid JSON"),
])
def test_parse_config_errors_name_the_line(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config_text(text, "x.conf")


def test_unknown_and_invalid_keys(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("colour = 3\n")
    with pytest.raises(ConfigError, match="unknown config keys: colour"):
        load_config(p)
    with pytest.raises(ConfigError, match="levels"):
        PipelineConfig(levels=(0.0,))
    with pytest.raises(ConfigError, match="architectures"):
        PipelineConfig(archs=("CNN",))
    with pytest.raises(ConfigError, match="settings"):
        PipelineConfig(settings=("Everything",))


def test_hash_ignores_output_location_and_jobs():
    base = PipelineConfig()
    assert base.hash() == base.with_values(out="elsewhere", jobs=3).hash()
    assert base.hash() != base.with_values(seed=1).hash()
    assert base.hash() != base.with_values(session_gap=900.0).hash()


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("seed = 4\n")
    assert load_config(p).seed == 4
    assert load_config(p, seed=7).seed == 7


# ---------------------------------------------------------- pipeline


def test_pipeline_resume_and_corruption(setup):
    tmp, conf = setup
    cfg = load_config(conf, out=str(tmp / "run"))
    statuses = Pipeline(cfg).run()
    assert [s.stage for s in statuses] == list(STAGES) and not any(s.skipped for s in statuses)
    report = (tmp / "run" / "evaluate" / "report.json").read_bytes()

    again = Pipeline(cfg).run()
    assert all(s.skipped for s in again)

    # every artifact carries the config hash
    h = cfg.hash()
    run = tmp / "run"
    assert json.loads((run / "filter" / "L0.5" / "AAA_1.filter.json").read_text())["config_hash"] == h
    assert json.loads((run / "features" / "L0.5" / "features.json").read_text())["config_hash"] == h
    assert str(np.load(run / "features" / "L0.5" / "AAA_1.npz")["config_hash"]) == h
    for kind in ("BO", "BTM", "BSM"):
        assert json.loads((run / "train" / "L0.5" / f"{kind}.json").read_text())["config_hash"] == h
    for name in ("table_filtered.csv", "table_full.csv", "ablation.csv", "attention.csv"):
        assert (run / "evaluate" / name).read_text().startswith(f"# config_hash={h}\n")
    assert json.loads(report)["config"]["config_hash"] == h
    for stage in STAGES:
        assert json.loads((run / stage / "manifest.json").read_text())["config_hash"] == h

    ckpt = run / "train" / "L0.5" / "BO.json"
    ckpt.write_text(ckpt.read_text().replace('"level": 0.5', '"level": 0.25'))
    with pytest.raises(StageError, match="train") as exc:
        Pipeline(cfg).run()
    assert exc.value.stage == "train"
    assert isinstance(exc.value.cause, DataError) and "corrupted" in str(exc.value.cause)

    # forcing regenerates and reproduces the report byte for byte
    Pipeline(cfg).run(force=True)
    assert (run / "evaluate" / "report.json").read_bytes() == report


def test_changed_config_reruns_downstream_only(setup):
    tmp, conf = setup
    cfg = load_config(conf, out=str(tmp / "run"), settings=["NOneDiff"], ablation=False, attention=False)
    Pipeline(cfg).run(["features"])
    st = Pipeline(cfg).run(["features"])
    assert [s.skipped for s in st] == [True, True, True]
    st = Pipeline(cfg.with_values(seed=5)).run(["filter"])
    assert [s.skipped for s in st] == [False, False]


def test_missing_corpus_is_a_data_error(tmp_path):
    cfg = PipelineConfig(scenario=None, corpus=str(tmp_path / "nope"), out=str(tmp_path / "o"))
    with pytest.raises(StageError) as exc:
        Pipeline(cfg).run(["ingest"])
    assert exc.value.stage == "ingest" and isinstance(exc.value.cause, DataError)


# --------------------------------------------------------------- cli


def test_cli_end_to_end(setup, capsys):
    tmp, conf = setup
    corpus = tmp / "corpus"
    assert main(["synth", "--scenario", str(tmp / "tiny.json"), "--out", str(corpus)]) == EXIT_OK
    assert main(["ingest", "--corpus", str(corpus), "--out", str(tmp / "summary.json")]) == EXIT_OK
    assert json.loads((tmp / "summary.json").read_text())["transfer"] == ["AAA_2"]
    assert main(["filter", "--corpus", str(corpus), "--level", "0.5", "--out", str(tmp / "f"),
                 "--config", str(conf)]) == EXIT_OK
    assert (tmp / "f" / "AAA_2.kept.csv").exists()
    assert main(["--config", str(conf), "train", "--corpus", str(corpus), "--arch", "bsm",
                 "--level", "0.5", "--out", str(tmp / "m.json")]) == EXIT_OK
    assert main(["predict", "--checkpoint", str(tmp / "m.json"), "--course", str(corpus / "AAA_2"),
                 "--out", str(tmp / "p.csv")]) == EXIT_OK
    lines = (tmp / "p.csv").read_text().splitlines()
    assert lines[0] == "student_id,p_fail,predicted_label" and len(lines) == 25
    assert all(l.rsplit(",", 1)[1] in ("Pass", "Fail") for l in lines[1:])
    assert main(["experiment", "run", "--setting", "NCDiff", "--arch", "bo", "--level", "0.5",
                 "--corpus", str(corpus), "--out", str(tmp / "r.json"), "--config", str(conf)]) == EXIT_OK
    capsys.readouterr()
    assert main(["experiment", "table", "--report", str(tmp / "r.json")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("course,level,NCDiff:BO\nAAA_2,0.5,")


def test_cli_exit_codes(setup, capsys):
    tmp, conf = setup
    bad = tmp / "bad.conf"
    bad.write_text("nonsense = 1\n")
    assert main(["pipeline", "--config", str(bad), "--out", str(tmp / "o")]) == EXIT_CONFIG
    assert main(["ingest", "--corpus", str(tmp / "missing")]) == EXIT_DATA
    corpus = tmp / "corpus"
    main(["synth", "--scenario", str(tmp / "tiny.json"), "--out", str(corpus)])
    code = main(["experiment", "run", "--setting", "NOneSame", "--arch", "bo", "--corpus", str(corpus),
                 "--course", "BBB_1", "--out", str(tmp / "r.json"), "--config", str(conf)])
    assert code == EXIT_DATA
    assert "inapplicable" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["train", "--corpus", str(corpus), "--arch", "cnn", "--out", "x"])
    assert exc.value.code == 2


def test_cli_pipeline_resume_output(setup, capsys):
    tmp, conf = setup
    args = ["pipeline", "--config", str(conf), "--out", str(tmp / "p"), "--stages", "filter"]
    assert main(args) == EXIT_OK
    assert main(args) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("ingest: done") == 1 and out.count("filter: skipped") == 1
