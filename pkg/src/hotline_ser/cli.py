"""Command-line entry point: ``hotline-ser <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 non-finite loss.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio_io import IngestError, read_manifest
from .config import RunConfig, dump_config, from_plain, load_config
from .encoders import ConfigError
from .fusion_model import ATTENTION_ROWS, FEATURE_ROWS, FusionModel, ModelConfig
from .numerics import CheckpointError, describe_checkpoint, load_checkpoint
from .synth_corpus import gen_corpus
from .training import (
    DataError, EvalReport, NumericalError, evaluate, load_dataset, make_split, predict_proba, save_feature_cache,
    segment_features, train,
)
from .trend_analysis import (
    build_report, read_timelines, timelines_from_scores, write_session_csv, write_table_csv, write_timelines,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_SCHEMA_VERSION = 1
METRIC_COLUMNS = ("accuracy", "precision", "recall", "f1", "weighted_f1", "ua", "wa")

log = logging.getLogger("hotline_ser")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- helpers ----------------------------------------------------------------------
def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _resolve(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _report(cfg: RunConfig, kind: str, **body) -> dict:
    return {"schema_version": REPORT_SCHEMA_VERSION, "kind": kind, "config_hash": cfg.hash(),
            "seed": cfg.seed, **body}


def _split(cfg: RunConfig, data):
    plan = make_split(data.subjects, cfg.split.ratio, cfg.seed, cfg.split.n_folds, cfg.split.val_subjects)
    if set(plan.train_subjects) & set(plan.test_subjects):
        raise DataError("subject leakage between train and test")
    return plan


def _load_data(cfg: RunConfig, args):
    return load_dataset(args.manifest, getattr(args, "cache", None), cfg.mfcc, cfg.pitch)


def _model_from_checkpoint(path) -> tuple[FusionModel, dict]:
    arrays, meta = load_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no model config")
    model = FusionModel(from_plain(ModelConfig, meta["model"]), seed=meta.get("seed", 0))
    try:
        model.load_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.eval()
    return model, meta


def _eval_body(rep: EvalReport) -> dict:
    return {"metrics": {k: getattr(rep, k) for k in METRIC_COLUMNS + ("weighted_precision", "weighted_recall")},
            "confusion": rep.confusion, "class_names": list(rep.class_names), "n": rep.n}


def _write_metric_csv(path, rows: list[dict], lead: tuple[str, ...]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(lead + METRIC_COLUMNS + ("confusion",))
        for r in rows:
            w.writerow([r[k] for k in lead] + [repr(r["metrics"][k]) for k in METRIC_COLUMNS]
                       + [json.dumps(r["confusion"])])


def _fit(cfg: RunConfig, model_cfg: ModelConfig, data, plan, out: Path | None, tag: str = ""):
    model = FusionModel(model_cfg, seed=cfg.seed)
    meta = {"model": dataclasses.asdict(model_cfg), "seed": cfg.seed, "config_hash": cfg.hash(),
            "split": plan.to_json()}
    res = train(model, data.for_subjects(plan.train_subjects), cfg.train,
                val=data.for_subjects(plan.val_subjects) if plan.val_subjects else None,
                log_path=out / f"train_log{tag}.csv" if out else None,
                checkpoint_path=out / f"checkpoint{tag}.bin" if out else None, meta=meta)
    return res


# -- commands -------------------------------------------------------------------
def cmd_synth(args, cfg: RunConfig) -> None:
    out = _out_dir(args.out)
    summary = gen_corpus(cfg.corpus, out)
    dump_config(cfg, out / "config.yaml")
    write_json(out / "synth_report.json", _report(
        cfg, "synth", n_segments=summary["n_segments"], n_sessions=summary["n_sessions"],
        manifest="manifest.jsonl", timelines="timelines.jsonl"))
    print(f"wrote {summary['n_segments']} segments and {summary['n_sessions']} sessions to {out}")


def cmd_extract(args, cfg: RunConfig) -> None:
    from .audio_io import load_segment
    rows = read_manifest(args.manifest)
    if not rows:
        raise DataError(f"{args.manifest}: empty manifest")
    feats = [segment_features(load_segment(r), cfg.mfcc, cfg.pitch) for r in rows]
    mfcc = np.stack([f[0] for f in feats])
    pitch = np.stack([f[1] for f in feats])
    save_feature_cache(args.out, [r["path"] for r in rows], mfcc, pitch)
    voiced = float(np.mean(pitch != 0))
    print(f"cached MFCC {mfcc.shape} and pitch {pitch.shape} for {len(rows)} segments "
          f"(voiced share {voiced:.3f}) in {args.out}")


def cmd_train(args, cfg: RunConfig) -> None:
    from .plotting import plot_loss_curve
    out = _out_dir(args.out_dir)
    data = _load_data(cfg, args)
    plan = _split(cfg, data)
    dump_config(cfg, out / "config.yaml")
    write_json(out / "split.json", {"schema_version": REPORT_SCHEMA_VERSION, "config_hash": cfg.hash(),
                                    **plan.to_json()})
    res = _fit(cfg, cfg.model, data, plan, out)
    plot_loss_curve(res.history, out / "loss_curve.png")
    rep = evaluate(res.model, data.for_subjects(plan.test_subjects), batch_size=cfg.train.batch_size)
    body = _eval_body(rep)
    write_json(out / "eval_report.json", _report(
        cfg, "evaluate", subset="test", selection="fixed_validation" if plan.val_subjects else "last_epoch",
        best_epoch=res.best_epoch, best_val_f1=res.best_val_f1, epochs_run=len(res.history), **body))
    _write_metric_csv(out / "eval_report.csv", [{"subset": "test", **body}], ("subset",))
    if args.cv:
        from .training import cross_validate
        reports = cross_validate(lambda: FusionModel(cfg.model, seed=cfg.seed), data, plan, cfg.train)
        folds = [{"fold": i, **_eval_body(r)} for i, r in enumerate(reports)]
        write_json(out / "cv_report.json", _report(cfg, "cross_validation", selection="cv_folds", folds=folds))
        _write_metric_csv(out / "cv_report.csv", folds, ("fold",))
    print(f"test accuracy {rep.accuracy:.4f} f1 {rep.f1:.4f} (best epoch {res.best_epoch}); reports in {out}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    out = _out_dir(args.out_dir)
    model, meta = _model_from_checkpoint(args.checkpoint)
    data = _load_data(cfg, args)
    if args.subset == "test":
        test = meta.get("split", {}).get("test")
        if not test:
            raise DataError("checkpoint has no stored test split; use --subset all")
        data = data.for_subjects(test)
        if len(data) == 0:
            raise DataError("no manifest segments belong to the checkpoint's test subjects")
    probs = predict_proba(model, data, cfg.train.batch_size)
    rep = evaluate(model, data, batch_size=cfg.train.batch_size)
    body = _eval_body(rep)
    write_json(out / "eval_report.json", _report(cfg, "evaluate", subset=args.subset,
                                                 checkpoint_config_hash=meta.get("config_hash"), **body))
    _write_metric_csv(out / "eval_report.csv", [{"subset": args.subset, **body}], ("subset",))
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "subject", "label", "prob_negative"])
        for seg, subj, lab, p in zip(data.ids, data.subjects, data.labels, probs):
            w.writerow([Path(seg).name, subj, int(lab), repr(float(p))])
    print(f"{args.subset} accuracy {rep.accuracy:.4f} recall {rep.recall:.4f} f1 {rep.f1:.4f}")


def ablation_grid(cfg: RunConfig) -> list[tuple[str, str, ModelConfig]]:
    """(table, row, model config) for the feature rows then the attention rows."""
    base = cfg.model
    grid = []
    for row, feats in FEATURE_ROWS.items():
        fusion = dataclasses.replace(base.fusion, feature_set=feats, ablation="both")
        grid.append(("feature", row, dataclasses.replace(base, fusion=fusion)))
    for row, abl in ATTENTION_ROWS.items():
        fusion = dataclasses.replace(base.fusion, feature_set=("deep", "pitch", "mfcc"), ablation=abl)
        grid.append(("attention", row, dataclasses.replace(base, fusion=fusion)))
    return grid


def cmd_ablate(args, cfg: RunConfig) -> None:
    from .plotting import plot_ablation
    out = _out_dir(args.out_dir)
    data = _load_data(cfg, args)
    plan = _split(cfg, data)
    test = data.for_subjects(plan.test_subjects)
    dump_config(cfg, out / "config.yaml")
    done: dict[str, dict] = {}
    rows = []
    for table, row, mcfg in ablation_grid(cfg):
        key = json.dumps(dataclasses.asdict(mcfg), sort_keys=True)
        if key not in done:
            res = _fit(cfg, mcfg, data, plan, None)
            rep = evaluate(res.model, test, batch_size=cfg.train.batch_size)
            done[key] = {"best_epoch": res.best_epoch, **_eval_body(rep)}
            log.info("%s / %s: f1 %.4f", table, row, rep.f1)
        fusion = mcfg.fusion
        rows.append({"table": table, "row": row, "feature_set": list(fusion.feature_set),
                     "ablation": fusion.ablation, **done[key]})
    write_json(out / "ablation.json", _report(cfg, "ablation", subset="test", rows=rows))
    flat = [{**r, "feature_set": "+".join(r["feature_set"])} for r in rows]
    _write_metric_csv(out / "ablation.csv", flat, ("table", "row", "feature_set", "ablation"))
    plot_ablation([{**r, **r["metrics"]} for r in rows], out / "ablation.png")
    for r in rows:
        print(f"{r['table']:<9} {r['row']:<16} f1 {r['metrics']['f1']:.4f} acc {r['metrics']['accuracy']:.4f}")


def cmd_analyze_trends(args, cfg: RunConfig) -> None:
    from .plotting import plot_trend_summary, plot_trends
    out = _out_dir(args.out_dir)
    if args.timelines:
        timelines = read_timelines(args.timelines)
        source = "timelines"
    else:
        if not (args.manifest and args.checkpoint):
            raise UsageError("give --timelines, or --manifest together with --checkpoint")
        model, _ = _model_from_checkpoint(args.checkpoint)
        rows = read_manifest(args.manifest)
        data = load_dataset(args.manifest, args.cache, cfg.mfcc, cfg.pitch) if all(
            r.get("label") for r in rows) else None
        if data is None:
            raise DataError("scoring currently needs a labeled manifest")
        groups = json.loads(Path(args.groups).read_text()) if args.groups else {
            r["session_id"]: r["group"] for r in rows if r.get("group")}
        timelines = timelines_from_scores(rows, predict_proba(model, data, cfg.train.batch_size), groups)
        write_timelines(out / "scored_timelines.jsonl", timelines)
        source = "model"
    if not timelines:
        raise DataError("no sessions to analyze")
    report = build_report(timelines, cfg.trend, config_hash=cfg.hash())
    body = report.to_json()
    body.update(kind="trend_report", seed=cfg.seed, source=source, table=report.table_rows())
    write_json(out / "trend_report.json", body)
    write_table_csv(out / "trend_table.csv", report)
    write_session_csv(out / "sessions.csv", timelines, cfg.trend.smoothing_window)
    plot_trends(timelines, out / "trends.png", cfg.trend.smoothing_window)
    plot_trend_summary(report, out / "trend_summary.png")
    for r in report.table_rows():
        print(f"{r['Group']:<12} {r['Stage']:<11} NSS {r['NSS (95% BCI)']:<16} ECR {r['ECR (95% BCI)']}")
    if report.p_values:
        for s, p in report.p_values.items():
            print(f"{s}: p_nss={p['p_nss']} p_ecr={p['p_ecr']}")


def cmd_inspect(args, cfg: RunConfig) -> None:
    entries = describe_checkpoint(args.checkpoint)
    _, meta = load_checkpoint(args.checkpoint)
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "kind": "checkpoint_inventory",
           "checkpoint_config_hash": meta.get("config_hash"), "n_tensors": len(entries),
           "n_values": int(sum(int(np.prod(e["shape"])) for e in entries)), "params": entries}
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "synth": cmd_synth, "extract": cmd_extract, "train": cmd_train, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "analyze-trends": cmd_analyze_trends, "inspect-checkpoint": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config (defaults apply to omitted keys)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key, e.g. train.epochs=3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="hotline-ser", description="Speech emotion recognition with attention fusion.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic labeled corpus")
    s.add_argument("--out", required=True)

    s = sub.add_parser("extract", parents=[common], help="cache MFCC and pitch features")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="feature cache file")

    for name, text in (("train", "train on the 4:1 subject split and evaluate on test subjects"),
                       ("ablate", "train/evaluate the feature and attention ablation rows")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--manifest", required=True)
        s.add_argument("--out-dir", required=True)
        s.add_argument("--cache", help="feature cache file (read if present, else written)")
        if name == "train":
            s.add_argument("--cv", action="store_true", help="also run cross-validation over the training folds")

    s = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--cache")
    s.add_argument("--subset", choices=("test", "all"), default="test")

    s = sub.add_parser("analyze-trends", parents=[common], help="NSS/ECR trend report per group and stage")
    s.add_argument("--timelines", help="scored timelines JSON Lines")
    s.add_argument("--manifest", help="segments to score with --checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--groups", help="JSON object mapping session_id to group")
    s.add_argument("--cache")
    s.add_argument("--out-dir", required=True)

    s = sub.add_parser("inspect-checkpoint", parents=[common], help="list checkpoint tensors and checksums")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestError, DataError, CheckpointError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
