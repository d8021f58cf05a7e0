"""Batch experiment front-end: gen, run, search, sweep, eval, report.

One JSON experiment file drives everything; every run directory gets a
frozen copy of its resolved configuration plus the tool version, so reports
are reproducible from the run directory alone. Exit codes: 0 success,
1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, autosearch, metrics, pipeline, segnet
from .errors import ConfigurationError, ContractViolation, LoadError
from .phantom import (PhantomConfig, cohort_seeds, config_from_dict,
                      default_phantom_config, generate_case, load_case, save_case)
from .seeds import mix

DETERMINISTIC_ENV = "STATIONING_DETERMINISTIC"


@dataclass
class ExperimentConfig:
    phantom: PhantomConfig
    cohort_count: int = 24
    fold_count: int = 4
    arms: list[str] = field(default_factory=lambda: list(pipeline.ARM_NAMES))
    schedules: pipeline.StageSchedules = field(default_factory=pipeline.StageSchedules)
    include_joint: bool = False
    include_margin_baseline: bool = False
    margin_perturbation: float = 0.25
    top_n_values: list[int] = field(default_factory=lambda: [1, 3, 6, 9])
    master_seed: int = 17

    def validate(self) -> None:
        self.phantom.validate()
        for arm in self.arms:
            if arm not in pipeline.ARM_NAMES:
                raise ConfigurationError(f"unknown arm {arm!r}")
        if self.cohort_count < 1:
            raise ConfigurationError("empty cohort")

    def to_dict(self) -> dict:
        s = self.schedules
        return {
            "phantom": self.phantom.to_dict(),
            "cohort_count": self.cohort_count,
            "fold_count": self.fold_count,
            "arms": list(self.arms),
            "schedules": {
                "anchor_epochs": s.anchor_epochs,
                "nonanchor_epochs": s.nonanchor_epochs,
                "joint_epochs": s.joint_epochs,
                "lns_epochs": s.lns_epochs,
                "lr": s.lr,
                "net_depth": s.net_depth,
                "net_width": s.net_width,
                "search_total": s.search.total_epochs,
                "search_freeze": s.search.freeze_epochs,
                "alpha_lr_scale": s.search.alpha_lr_scale,
                "searched_n": s.searched_n,
                "searched_weighted": s.searched_weighted,
                "soft_context": s.soft_context,
            },
            "include_joint": self.include_joint,
            "include_margin_baseline": self.include_margin_baseline,
            "margin_perturbation": self.margin_perturbation,
            "top_n_values": list(self.top_n_values),
            "master_seed": self.master_seed,
        }


def experiment_from_dict(data: dict) -> ExperimentConfig:
    phantom_data = data.get("phantom", "default")
    phantom = (default_phantom_config() if phantom_data in (None, "default")
               else config_from_dict(phantom_data))
    sdata = data.get("schedules", {})
    sched = pipeline.StageSchedules(
        anchor_epochs=int(sdata.get("anchor_epochs", 60)),
        nonanchor_epochs=int(sdata.get("nonanchor_epochs", 60)),
        joint_epochs=int(sdata.get("joint_epochs", 60)),
        lns_epochs=int(sdata.get("lns_epochs", 80)),
        lr=float(sdata.get("lr", 1e-3)),
        net_depth=int(sdata.get("net_depth", 3)),
        net_width=int(sdata.get("net_width", 8)),
        search=autosearch.SearchSchedule(
            total_epochs=int(sdata.get("search_total", 100)),
            freeze_epochs=int(sdata.get("search_freeze", 20)),
            alpha_lr_scale=float(sdata.get("alpha_lr_scale", 10.0))),
        searched_n=sdata.get("searched_n"),
        searched_weighted=bool(sdata.get("searched_weighted", False)),
        soft_context=bool(sdata.get("soft_context", True)),
    )
    cfg = ExperimentConfig(
        phantom=phantom,
        cohort_count=int(data.get("cohort_count", 24)),
        fold_count=int(data.get("fold_count", 4)),
        arms=list(data.get("arms", pipeline.ARM_NAMES)),
        schedules=sched,
        include_joint=bool(data.get("include_joint", False)),
        include_margin_baseline=bool(data.get("include_margin_baseline", False)),
        margin_perturbation=float(data.get("margin_perturbation", 0.25)),
        top_n_values=[int(n) for n in data.get("top_n_values", [1, 3, 6, 9])],
        master_seed=int(data.get("master_seed", 17)),
    )
    cfg.validate()
    return cfg


def load_experiment(path: str | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig(phantom=default_phantom_config())
        cfg.validate()
        return cfg
    return experiment_from_dict(json.loads(Path(path).read_text()))


def deterministic_mode() -> bool:
    """Deterministic reductions are the default; 0 permits relaxations.

    All built-in reductions currently use fixed orders regardless, so the
    flag is recorded in run metadata rather than changing behaviour.
    """
    return os.environ.get(DETERMINISTIC_ENV, "1") != "0"


# ---------------------------------------------------------------- cohort io

def write_cohort(exp: ExperimentConfig, out_dir: Path, count: int, seed: int) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = cohort_seeds(seed, count)
    entries = []
    for i, case_seed in enumerate(seeds):
        case_id = f"case_{i:03d}"
        case = generate_case(exp.phantom, case_seed, case_id=case_id)
        save_case(case, out_dir / case_id)
        entries.append({"id": case_id, "seed": case_seed, "dir": case_id})
    manifest = {
        "cases": entries,
        "count": count,
        "master_seed": seed,
        "config_hash": exp.phantom.hash(),
        "phantom": exp.phantom.to_dict(),
        "zones": dict(exp.phantom.zones),
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out_dir / "zones.json").write_text(json.dumps(
        {name: zone for name, zone in exp.phantom.zones.items()}, indent=2,
        sort_keys=True))
    return manifest


def read_cohort(cohort_dir: Path):
    manifest_path = cohort_dir / "manifest.json"
    if not manifest_path.exists():
        raise LoadError(f"{manifest_path}: missing cohort manifest")
    manifest = json.loads(manifest_path.read_text())
    cases = [load_case(cohort_dir / entry["dir"],
                       expected_config_hash=manifest.get("config_hash"))
             for entry in manifest["cases"]]
    phantom = config_from_dict(manifest["phantom"])
    return cases, phantom, manifest


# ---------------------------------------------------------------- reporting

_BLOCKS = (("DSC", "dice", True), ("HD", "hd", False), ("ASD", "asd", False))


def render_report_csv(report: dict, arms: list[str], station_names: list[str],
                      path: Path) -> None:
    """Table-style CSV: one block per metric, classes as rows, arms as columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "class"] + arms)
        for block, key, percent in _BLOCKS:
            for cls in station_names + ["Average"]:
                row = [block, cls]
                for arm in arms:
                    stats = report["arms"][arm]["summary"].get(cls, {}).get(key)
                    if stats is None:
                        row.append("absent")
                    else:
                        row.append(metrics.format_mean_std(stats["mean"], stats["std"],
                                                           percent=percent))
                writer.writerow(row)
        zone_row = ["ZoneAcc", "all"]
        for arm in arms:
            acc = report["arms"][arm].get("zone_accuracy")
            zone_row.append("absent" if acc is None else f"{100 * acc:.1f}")
        writer.writerow(zone_row)


def write_per_case_csv(report: dict, arms: list[str], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "fold", "case", "class", "dice", "hd_mm", "asd_mm"])
        for arm in arms:
            for fold in report["arms"][arm]["per_fold"]:
                for case_id in sorted(fold["cases"]):
                    for cls, row in fold["cases"][case_id].items():
                        writer.writerow([arm, fold["fold"], case_id, cls,
                                         f"{row['dice']:.6f}",
                                         f"{row['hd']:.6f}", f"{row['asd']:.6f}"])


# ---------------------------------------------------------------- commands

def _freeze_run_config(exp: ExperimentConfig, out_dir: Path, extra: dict) -> None:
    payload = {"experiment": exp.to_dict(), "version": __version__,
               "deterministic": deterministic_mode(), **extra}
    (out_dir / "resolved_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True))


def cmd_gen(args) -> int:
    exp = load_experiment(args.config)
    count = args.count if args.count is not None else exp.cohort_count
    if count < 1:
        raise ConfigurationError("empty cohort")
    seed = args.seed if args.seed is not None else exp.master_seed
    out_dir = Path(args.out)
    if (out_dir / "manifest.json").exists() and not args.force:
        raise ConfigurationError(
            f"{out_dir} already holds a cohort; pass --force to overwrite")
    manifest = write_cohort(exp, out_dir, count, seed)
    print(f"wrote {manifest['count']} cases to {out_dir}")
    return 0


def _fold_worker(task) -> dict:
    (cohort_dir, exp_dict, fold_index, arms, out_dir) = task
    cases, phantom, _ = read_cohort(Path(cohort_dir))
    exp = experiment_from_dict(exp_dict)
    exp.phantom = phantom
    manifest = pipeline.FoldManifest.make([c.case_id for c in cases], exp.fold_count)
    result = pipeline.run_fold(
        cases, phantom, manifest, fold_index, arms, exp.schedules, exp.master_seed,
        include_joint=exp.include_joint,
        include_margin_baseline=exp.include_margin_baseline,
        margin_perturbation=exp.margin_perturbation,
        store_dir=Path(out_dir) / "folds" / f"fold_{fold_index}")
    return result.to_json_dict()


def cmd_run(args) -> int:
    exp = load_experiment(args.config)
    arms = args.arms.split(",") if args.arms else list(exp.arms)
    for arm in arms:
        if arm not in pipeline.ARM_NAMES:
            raise ConfigurationError(f"unknown arm {arm!r}")
    if args.folds is not None:
        exp.fold_count = args.folds
    out_dir = Path(args.out)
    if (out_dir / "report.json").exists():
        if not args.force:
            raise ConfigurationError(
                f"{out_dir} already holds a completed run; pass --force to redo")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cohort_dir = Path(args.cohort)
    cases, phantom, cohort_manifest = read_cohort(cohort_dir)
    exp.phantom = phantom
    _freeze_run_config(exp, out_dir, {"cohort": str(cohort_dir),
                                      "cohort_hash": cohort_manifest.get("config_hash"),
                                      "arms": arms})
    manifest = pipeline.FoldManifest.make([c.case_id for c in cases], exp.fold_count)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True))

    tasks = [(str(cohort_dir), exp.to_dict(), k, arms, str(out_dir))
             for k in range(exp.fold_count)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            payloads = list(pool.map(_fold_worker, tasks))
    else:
        payloads = [_fold_worker(t) for t in tasks]
    results = [pipeline.FoldResult.from_json_dict(p) for p in payloads]
    station_names = [r.station for r in phantom.stations]
    report = pipeline.merge_fold_results(results, arms, station_names)
    report["folds"] = manifest.to_dict()
    report["version"] = __version__
    report["master_seed"] = exp.master_seed
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    render_report_csv(report, arms, station_names, out_dir / "report.csv")
    write_per_case_csv(report, arms, out_dir / "per_case.csv")
    for arm in arms:
        summary = report["arms"][arm]["summary"]["Average"]["dice"]
        print(f"{arm}: mean station Dice "
              f"{metrics.format_mean_std(summary['mean'], summary['std'], percent=True)}")
    return 0


def _search_cases(cases, phantom, exp, organ_source: str):
    sched = exp.schedules
    if organ_source == "gt":
        return [(c.case_id, pipeline.normalize_image(c.image),
                 pipeline.gt_organ_channels(c, phantom),
                 c.station_labels.astype(np.int64)) for c in cases]
    if organ_source != "pred":
        raise ConfigurationError(f"unknown organ source {organ_source!r}")
    seed = mix(exp.master_seed, "searchprep")
    anchor_model = pipeline.train_anchor(cases, phantom, sched, seed)
    nonanchor_model = pipeline.train_nonanchor(cases, anchor_model, phantom, sched, seed)
    out = []
    for c in cases:
        img = pipeline.normalize_image(c.image)
        a_probs = pipeline.predict_probs(anchor_model, img)
        b_probs = pipeline.predict_probs(
            nonanchor_model, np.concatenate([img, a_probs[1:]], axis=0))
        out.append((c.case_id, img,
                    pipeline.fuse_organ_predictions(a_probs, b_probs),
                    c.station_labels.astype(np.int64)))
    return out


def cmd_search(args) -> int:
    exp = load_experiment(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases, phantom, _ = read_cohort(Path(args.cohort))
    exp.phantom = phantom
    organ_names = pipeline.context_organ_names(phantom)
    if args.top is not None and not 1 <= args.top <= len(organ_names):
        raise ConfigurationError(
            f"--top {args.top} outside [1, {len(organ_names)}]")
    engine_cases = _search_cases(cases, phantom, exp, args.organ_source)
    result, _ = autosearch.search(
        engine_cases, exp.schedules.search, seed=mix(exp.master_seed, "search"),
        lr=exp.schedules.lr, organ_names=organ_names,
        station_classes=1 + len(phantom.stations),
        net_depth=exp.schedules.net_depth, net_width=exp.schedules.net_width)
    n = args.top or exp.schedules.searched_n or len(phantom.key_organs)
    selected = autosearch.select_top_n(result, n)
    (out_dir / "search.json").write_text(json.dumps(result.to_dict(), indent=1,
                                                    sort_keys=True))
    with open(out_dir / "ranking.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "channel", "organ", "phi"])
        for rank, channel in enumerate(result.ranking):
            writer.writerow([rank + 1, channel, organ_names[channel],
                             f"{result.phi[channel]:.6f}"])
    with open(out_dir / "alpha_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + organ_names)
        for epoch, alpha in enumerate(result.alpha_history):
            writer.writerow([epoch] + [f"{v:.6f}" for v in alpha])
    picked = [organ_names[i] for i in selected]
    print(f"top-{n} organs: {', '.join(picked)}")
    return 0


def cmd_sweep(args) -> int:
    exp = load_experiment(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases, phantom, _ = read_cohort(Path(args.cohort))
    exp.phantom = phantom
    n_values = [int(n) for n in args.n_values] or exp.top_n_values
    sweep = autosearch.topn_sweep(cases, phantom, n_values, exp.schedules,
                                  exp.master_seed, fold_count=exp.fold_count)
    (out_dir / "sweep.json").write_text(json.dumps(sweep, indent=1, sort_keys=True))
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "mean_dice"] +
                        [f"fold{k}" for k in range(exp.fold_count)])
        for n in n_values:
            entry = sweep["per_n"][str(n)]
            writer.writerow([n, f"{entry['mean_dice']:.6f}"] +
                            [f"{v:.6f}" for v in entry["fold_mean_dice"]])
    for n in n_values:
        print(f"n={n}: mean station Dice {sweep['per_n'][str(n)]['mean_dice']:.4f}")
    return 0


def cmd_eval(args) -> int:
    gt_dir = Path(args.gt)
    pred_dir = Path(args.pred)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    gt_manifest = json.loads((gt_dir / "manifest.json").read_text())
    zones = None
    if args.zones:
        zones = json.loads(Path(args.zones).read_text())
    per_case_rows = []
    pooled = []
    zone_scores = []
    for entry in gt_manifest["cases"]:
        gt_case = load_case(gt_dir / entry["dir"])
        pred_path = pred_dir / entry["dir"]
        if not pred_path.exists():
            raise LoadError(f"{pred_path}: missing prediction for case {entry['id']}")
        pred_case = load_case(pred_path)
        gt_legend = gt_case.meta.get("station_legend", {})
        pred_legend = pred_case.meta.get("station_legend", gt_legend)
        if pred_legend and gt_legend and pred_legend != gt_legend:
            missing = set(gt_legend) ^ set(pred_legend)
            raise ConfigurationError(
                f"legend mismatch between prediction and ground truth: {sorted(missing)}")
        class_count = len(gt_legend) or int(gt_case.station_labels.max())
        rows = pipeline.station_metrics(pred_case.station_labels,
                                        gt_case.station_labels,
                                        gt_case.spacing, class_count)
        id_to_name = {v: k for k, v in gt_legend.items()}
        named = {id_to_name.get(cls, str(cls)): row for cls, row in rows.items()}
        pooled.append(named)
        for cls_name, row in named.items():
            per_case_rows.append([entry["id"], cls_name, f"{row['dice']:.6f}",
                                  f"{row['hd']:.6f}", f"{row['asd']:.6f}"])
        if gt_case.ln_instances:
            zone_map = zones or gt_case.meta.get("zones", {})
            zones_by_id = {gt_legend[name]: z for name, z in zone_map.items()
                           if name in gt_legend}
            if zones_by_id:
                zone_scores.append(metrics.zone_accuracy(
                    gt_case.ln_instances, pred_case.station_labels, zones_by_id))
    with open(out_dir / "per_case.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "class", "dice", "hd_mm", "asd_mm"])
        writer.writerows(per_case_rows)
    summary = metrics.summarize(pooled)
    payload = {
        "summary": {key: {m: (None if s is None else
                              {"mean": s.mean, "std": s.std, "count": s.count})
                          for m, s in row.items()}
                    for key, row in summary.items()},
        "zone_accuracy": (float(np.mean(zone_scores)) if zone_scores else None),
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "dice", "hd_mm", "asd_mm"])
        for key, row in summary.items():
            writer.writerow([key] + [
                ("absent" if row[m] is None else
                 metrics.format_mean_std(row[m].mean, row[m].std, percent=(m == "dice")))
                for m in ("dice", "hd", "asd")])
    avg = summary["Average"]["dice"]
    if avg is not None:
        print(f"mean Dice {metrics.format_mean_std(avg.mean, avg.std, percent=True)}")
    if payload["zone_accuracy"] is not None:
        print(f"zone accuracy {100 * payload['zone_accuracy']:.1f}%")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    report_path = run_dir / "report.json"
    if not report_path.exists():
        raise LoadError(f"{report_path}: no report to render")
    report = json.loads(report_path.read_text())
    arms = sorted(report["arms"])
    frozen = json.loads((run_dir / "resolved_config.json").read_text())
    station_names = [r["station"] for r in frozen["experiment"]["phantom"]["stations"]]
    render_report_csv(report, arms, station_names, run_dir / "report.csv")
    print(f"re-rendered {run_dir / 'report.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stationlab",
        description="Synthetic-anatomy station parsing experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic cohort")
    p.add_argument("--config", help="experiment JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("run", help="train and evaluate experiment arms")
    p.add_argument("--config", help="experiment JSON")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arms", help="comma-separated subset of arms")
    p.add_argument("--folds", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("search", help="rank organ channels by learned weight")
    p.add_argument("--config", help="experiment JSON")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top", type=int)
    p.add_argument("--organ-source", choices=("gt", "pred"), default="gt")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("sweep", help="cross-validated top-n sweep")
    p.add_argument("--config", help="experiment JSON")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-values", nargs="+", type=int, required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--zones", help="JSON station->zone map")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="re-render report.csv from report.json")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except (ConfigurationError, ContractViolation, LoadError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
