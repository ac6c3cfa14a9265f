"""Command-line entry point: ``metatransfer <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .datamodel import load_corpus, load_course
from .datasets import FeatureBuilder
from .errors import ConfigError, DataError, MetaTransferError, ShapeError, TrainingError
from .experiments import (
    ExperimentReport,
    fit_on_courses,
    n_one_diff_seed,
    render_table,
    rows_to_csv,
    run_ablation,
    run_transfer,
)
from .meta_features import load_external_embeddings
from .models import KINDS, TrainedModel
from .pipeline import (
    STAGES,
    PipelineConfig,
    StageError,
    load_config,
    predict_course,
    write_csv,
    write_feature_outputs,
    write_filter_outputs,
)
from .synthgen import export_corpus, generate_corpus, load_scenario

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4

log = logging.getLogger("metatransfer")


def _arch(value: str) -> str:
    kind = value.upper()
    if kind not in KINDS:
        raise argparse.ArgumentTypeError(f"architecture must be one of {', '.join(k.lower() for k in KINDS)}")
    return kind


def _config(args) -> PipelineConfig:
    overrides = {"seed": args.seed, "jobs": args.jobs}
    corpus = getattr(args, "corpus", None)
    if corpus is not None:
        overrides["corpus"] = str(corpus)
    return load_config(args.config, **overrides)


def _builder(args, cfg: PipelineConfig, level: float) -> FeatureBuilder:
    corpus = load_corpus(args.corpus)
    external = load_external_embeddings(cfg.external_embeddings) if cfg.external_embeddings else None
    return FeatureBuilder(corpus, level, feature_config=cfg.feature_config(), external=external,
                          w_g=cfg.w_g, seed=cfg.seed, jobs=cfg.jobs)


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


# ------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_overrides(seed=args.seed)
    corpus, truth = generate_corpus(scenario)
    export_corpus(corpus, args.out, truth)
    print(f"wrote {len(corpus.courses)} courses, "
          f"{sum(len(c.students) for c in corpus.courses)} students to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    corpus = load_corpus(args.corpus)
    for course in corpus.courses:
        course.validate()
    summary = {
        "courses": {c.course_id: {"set": c.course_set_id, "iteration": c.iteration_index,
                                  "weeks": c.duration_weeks, "students": len(c.students),
                                  "events": sum(len(e) for e in c.logs.values()),
                                  "fail_rate": sum(c.labels[s].is_fail for s in c.students) / len(c.students)}
                    for c in corpus.courses},
        "train": list(corpus.train_ids),
        "transfer": list(corpus.transfer_ids),
    }
    _emit(json.dumps(summary, indent=1, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = _config(args)
    fb = _builder(args, cfg, args.level)
    write_filter_outputs(fb, fb.corpus.ids, args.out, cfg.hash())
    for cid in fb.corpus.ids:
        res = fb.filter_result(cid)
        print(f"{cid}: removed {len(res.removed)} / {len(res.removed) + len(res.kept)} (threshold {res.threshold})")
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = _config(args)
    fb = _builder(args, cfg, args.level)
    write_feature_outputs(fb, args.out, cfg.hash())
    print(f"wrote features for {len(fb.corpus.ids)} courses to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.grid is not None:
        cfg = cfg.with_values(grids=str(args.grid))
    fb = _builder(args, cfg, args.level)
    ecfg = cfg.experiment_config(args.arch)
    tm, _, _ = fit_on_courses(fb, fb.corpus.train_ids, ecfg, n_one_diff_seed(ecfg.seed))
    payload = tm.to_json()
    payload["config_hash"] = cfg.hash()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    best = tm.history[tm.best_epoch] if 0 <= tm.best_epoch < len(tm.history) else {}
    print(f"trained {args.arch} on {len(fb.corpus.train_ids)} courses; best epoch {tm.best_epoch} {best}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    tm = TrainedModel.load(args.checkpoint)
    course = load_course(args.course)
    external = load_external_embeddings(cfg.external_embeddings) if cfg.external_embeddings else None
    rows = [[s, f"{p:.17g}", label] for s, p, label in predict_course(tm, course, cfg.feature_config(), external)]
    if args.out is None:
        print("student_id,p_fail,predicted_label")
        for r in rows:
            print(",".join(r))
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(args.out, ["student_id", "p_fail", "predicted_label"], rows)
    return EXIT_OK


def cmd_experiment_run(args) -> int:
    cfg = _config(args)
    fb = _builder(args, cfg, args.level)
    report = ExperimentReport(config={"config_hash": cfg.hash(), "setting": args.setting,
                                      "arch": args.arch, "level": args.level, "seed": cfg.seed})
    report.rows = run_transfer(args.setting, fb.corpus, args.level, cfg.experiment_config(args.arch),
                               course_ids=args.course or None, builder=fb)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.save(args.out)
    for r in report.rows:
        bac = "-" if r.bac is None else f"{r.bac:.4f}"
        print(f"{r.setting} {r.arch} {r.course_id} {r.population}: {bac} ({r.status})")
    return EXIT_OK


def cmd_experiment_table(args) -> int:
    reports = [ExperimentReport.load(p) for p in args.report]
    merged = ExperimentReport(rows=[r for rep in reports for r in rep.rows])
    _emit(render_table(merged, args.population), args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    fb = _builder(args, cfg, args.level)
    rows = run_ablation(fb.corpus, args.level, cfg.experiment_config("BTM"), builder=fb)
    _emit(rows_to_csv(rows), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    report = ExperimentReport.load(args.report)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for pop in ("filtered", "full"):
        (out / f"table_{pop}.csv").write_text(render_table(report, pop), encoding="utf-8")
    if report.attention:
        (out / "attention.csv").write_text(rows_to_csv(report.attention), encoding="utf-8")
    if report.ablation:
        (out / "ablation.csv").write_text(rows_to_csv(report.ablation), encoding="utf-8")
    ok = [r for r in report.rows if r.bac is not None]
    print(f"{len(report.rows)} rows ({len(ok)} with a BAC) -> {out}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    if args.out is not None:
        cfg = cfg.with_values(out=str(args.out))
    from .pipeline import Pipeline

    stages = args.stages or list(STAGES)
    statuses = Pipeline(cfg).run(stages, force=args.force,
                                 progress=lambda s, skipped: print(f"{s}: {'skipped' if skipped else 'done'}",
                                                                   flush=True))
    print(f"pipeline finished ({len(statuses)} stages) -> {Path(cfg.out) / 'evaluate' / 'report.json'}")
    return EXIT_OK


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    g.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="key = JSON-value config file")
    g.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes")
    g.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="metatransfer", parents=[common],
                                     description="Early success prediction with behavior and course-meta transfer.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, parent=sub):
        p = parent.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    def level(p):
        p.add_argument("--level", type=float, default=0.4, help="fraction of the course visible (default 0.4)")

    p = add("synth", cmd_synth, "generate a synthetic corpus")
    p.add_argument("--scenario", default="small", help="bundled name (small, medium, finetune) or JSON file")
    p.add_argument("--out", type=Path, required=True)

    p = add("ingest", cmd_ingest, "load and validate a corpus, print a summary")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = add("filter", cmd_filter, "fit per-course early-dropout filters")
    p.add_argument("--corpus", type=Path, required=True)
    level(p)
    p.add_argument("--out", type=Path, required=True)

    p = add("features", cmd_features, "compute behavior feature tensors")
    p.add_argument("--corpus", type=Path, required=True)
    level(p)
    p.add_argument("--out", type=Path, required=True)

    p = add("train", cmd_train, "train a model on the corpus's training courses")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--arch", type=_arch, required=True, help="bo, btm or bsm")
    level(p)
    p.add_argument("--grid", type=Path, help="JSON grid file for hyperparameter search")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")

    p = add("predict", cmd_predict, "predict pass/fail for every student of a course")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--course", type=Path, required=True, help="course iteration directory")
    p.add_argument("--out", type=Path, help="CSV path (default stdout)")

    exp = sub.add_parser("experiment", help="transfer experiments")
    esub = exp.add_subparsers(dest="action", required=True)
    p = add("run", cmd_experiment_run, "run one transfer setting", esub)
    p.add_argument("--setting", required=True)
    p.add_argument("--arch", type=_arch, required=True)
    level(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--course", action="append", help="target course id (repeatable; default all transfer courses)")
    p.add_argument("--out", type=Path, required=True)
    p = add("table", cmd_experiment_table, "render reports as a course x setting CSV", esub)
    p.add_argument("--report", type=Path, action="append", required=True)
    p.add_argument("--population", choices=("filtered", "full"), default="filtered")
    p.add_argument("--out", type=Path)

    p = add("ablate", cmd_ablate, "single meta-feature ablation with BTM")
    p.add_argument("--corpus", type=Path, required=True)
    level(p)
    p.add_argument("--out", type=Path)

    p = add("report", cmd_report, "write CSV tables from a report.json")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("pipeline", cmd_pipeline, "run every stage with resume")
    p.add_argument("--out", type=Path)
    p.add_argument("--stages", nargs="+", choices=STAGES)
    p.add_argument("--force", action="store_true", help="rerun stages even when inputs are unchanged")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    if isinstance(exc, (DataError, ShapeError, OSError, KeyError, ValueError)):
        return EXIT_DATA
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("jobs", None), ("verbose", 0)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MetaTransferError, OSError, KeyError, ValueError) as exc:
        message = str(exc) if not isinstance(exc, KeyError) else f"unknown id {exc}"
        print(f"error: {message}", file=sys.stderr)
        if args.verbose:
            raise
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
