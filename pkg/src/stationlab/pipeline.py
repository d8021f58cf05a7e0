"""Stratified cascade and the cross-validation experiment driver.

Stage A segments anchor organs from the image alone; stage B segments
non-anchor organs with stage A's predicted foreground channels as extra
input; both prediction maps fuse (backgrounds dropped, anchors first) into
the organ context consumed by the station parser. Four parser arms mirror
the experimental design: image only, ground-truth organ channels, fused
predicted channels, and the searched top-n subset of predicted channels.

Case-level folds are leakage-checked: every training loop records the case
ids it touched and the driver asserts they stay inside the fold's train set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autosearch, metrics, segnet
from .errors import ConfigurationError, ContractViolation, LeakageError
from .phantom import CaseRecord, PhantomConfig, margin_infer_baseline, perturb_rules
from .seeds import mix

ARM_NAMES = ("ct_only", "organs_gt", "organs_pred", "organs_searched")


@dataclass
class FoldManifest:
    fold_count: int
    folds: list[dict]   # {"train": [ids], "test": [ids]}

    @staticmethod
    def make(case_ids, fold_count: int) -> "FoldManifest":
        ids = sorted(case_ids)
        if fold_count < 2 or fold_count > len(ids):
            raise ConfigurationError(
                f"fold count {fold_count} invalid for {len(ids)} cases")
        folds = []
        for k in range(fold_count):
            test = ids[k::fold_count]
            train = [i for i in ids if i not in test]
            folds.append({"train": train, "test": test})
        manifest = FoldManifest(fold_count, folds)
        manifest.validate(ids)
        return manifest

    def validate(self, all_ids) -> None:
        ids = sorted(all_ids)
        seen_test: list = []
        for k, fold in enumerate(self.folds):
            train, test = set(fold["train"]), set(fold["test"])
            if train & test:
                raise LeakageError(f"fold {k}: train and test overlap: {train & test}")
            if sorted(train | test) != ids:
                raise LeakageError(f"fold {k}: train+test do not cover the cohort")
            seen_test.extend(fold["test"])
        if sorted(seen_test) != ids:
            raise LeakageError("test folds do not partition the cohort")

    def to_dict(self) -> dict:
        return {"fold_count": self.fold_count, "folds": self.folds}


@dataclass
class StageSchedules:
    """Desk-scale stand-ins for full-length training, all configurable."""

    anchor_epochs: int = 60
    nonanchor_epochs: int = 60
    joint_epochs: int = 60
    lns_epochs: int = 80
    lr: float = 1e-3
    net_depth: int = 3
    net_width: int = 8
    search: autosearch.SearchSchedule = field(
        default_factory=lambda: autosearch.SearchSchedule(total_epochs=100,
                                                          freeze_epochs=20))
    searched_n: int | None = None     # None: use the number of true key organs
    searched_weighted: bool = False   # feed phi-scaled channels to the retrain
    soft_context: bool = True         # soft probabilities vs hard one-hot context


def normalize_image(volume: np.ndarray) -> np.ndarray:
    """Per-case standardization to zero mean, unit variance, as (1,D,H,W)."""
    v = np.asarray(volume, dtype=np.float32)
    std = float(v.std())
    if std == 0.0:
        std = 1.0
    return ((v - v.mean()) / std)[None].astype(np.float32)


def context_organ_names(config: PhantomConfig) -> list[str]:
    """Organ channel order used everywhere: anchors first, then non-anchors."""
    return config.anchor_names() + config.nonanchor_names()


def remap_labels(organ_labels: np.ndarray, legend: dict[str, int],
                 names: list[str]) -> np.ndarray:
    """Labels for one stage: listed organs 1..n in order, all else background."""
    out = np.zeros_like(organ_labels, dtype=np.int64)
    for new_id, name in enumerate(names, start=1):
        out[organ_labels == legend[name]] = new_id
    return out


def gt_organ_channels(case: CaseRecord, config: PhantomConfig) -> np.ndarray:
    legend = case.meta["organ_legend"]
    names = context_organ_names(config)
    channels = np.zeros((len(names),) + case.organ_labels.shape, dtype=np.float32)
    for i, name in enumerate(names):
        channels[i] = case.organ_labels == legend[name]
    return channels


def predict_probs(model: segnet.Model, x: np.ndarray) -> np.ndarray:
    return segnet.forward(model, x, graph=None).data


def fuse_organ_predictions(anchor_probs: np.ndarray,
                           nonanchor_probs: np.ndarray) -> np.ndarray:
    """Drop both background channels, concatenate anchor foregrounds first."""
    if anchor_probs.shape[1:] != nonanchor_probs.shape[1:]:
        raise ContractViolation(
            f"extent mismatch: {anchor_probs.shape[1:]} vs {nonanchor_probs.shape[1:]}")
    return np.concatenate([anchor_probs[1:], nonanchor_probs[1:]], axis=0)


def _station_count(config: PhantomConfig) -> int:
    return len(config.stations)


def train_anchor(cases: list[CaseRecord], config: PhantomConfig,
                 sched: StageSchedules, seed: int,
                 access_log: set | None = None) -> segnet.Model:
    names = config.anchor_names()
    legend = config.organ_legend()
    dataset = [(c.case_id, normalize_image(c.image),
                remap_labels(c.organ_labels, legend, names)) for c in cases]
    cfg = segnet.NetConfig(in_channels=1, class_count=1 + len(names),
                           depth=sched.net_depth, base_width=sched.net_width,
                           seed=mix(seed, "anchor"))
    model = segnet.build_model(cfg)
    return segnet.train(model, dataset, sched.anchor_epochs, lr=sched.lr,
                        seed=mix(seed, "anchor", "train"), access_log=access_log)


def anchor_context(anchor_model: segnet.Model, case: CaseRecord) -> np.ndarray:
    """Stage A foreground probabilities for one case (inference only)."""
    return predict_probs(anchor_model, normalize_image(case.image))[1:]


def train_nonanchor(cases: list[CaseRecord], anchor_model: segnet.Model,
                    config: PhantomConfig, sched: StageSchedules, seed: int,
                    access_log: set | None = None) -> segnet.Model:
    names = config.nonanchor_names()
    anchor_count = len(config.anchor_names())
    if anchor_model.config.class_count != 1 + anchor_count:
        raise ConfigurationError(
            f"anchor model has {anchor_model.config.class_count} classes, "
            f"cohort expects {1 + anchor_count}")
    legend = config.organ_legend()
    dataset = []
    for c in cases:
        inp = np.concatenate([normalize_image(c.image),
                              anchor_context(anchor_model, c)], axis=0)
        dataset.append((c.case_id, inp, remap_labels(c.organ_labels, legend, names)))
    cfg = segnet.NetConfig(in_channels=1 + anchor_count, class_count=1 + len(names),
                           depth=sched.net_depth, base_width=sched.net_width,
                           seed=mix(seed, "nonanchor"))
    model = segnet.build_model(cfg)
    return segnet.train(model, dataset, sched.nonanchor_epochs, lr=sched.lr,
                        seed=mix(seed, "nonanchor", "train"), access_log=access_log)


def train_joint(cases: list[CaseRecord], config: PhantomConfig,
                sched: StageSchedules, seed: int,
                access_log: set | None = None) -> segnet.Model:
    """All organs in one CT-only model; the stratification comparison point."""
    names = context_organ_names(config)
    legend = config.organ_legend()
    dataset = [(c.case_id, normalize_image(c.image),
                remap_labels(c.organ_labels, legend, names)) for c in cases]
    cfg = segnet.NetConfig(in_channels=1, class_count=1 + len(names),
                           depth=sched.net_depth, base_width=sched.net_width,
                           seed=mix(seed, "joint"))
    model = segnet.build_model(cfg)
    return segnet.train(model, dataset, sched.joint_epochs, lr=sched.lr,
                        seed=mix(seed, "joint", "train"), access_log=access_log)


def organ_context(case: CaseRecord, config: PhantomConfig, source: str,
                  fused: dict[str, np.ndarray] | None,
                  soft: bool = True) -> np.ndarray | None:
    if source == "none":
        return None
    if source == "gt":
        return gt_organ_channels(case, config)
    if source == "pred":
        if fused is None or case.case_id not in fused:
            raise ConfigurationError(f"no fused prediction for case {case.case_id!r}")
        channels = fused[case.case_id]
        if soft:
            return channels
        hard = np.zeros_like(channels)
        hard[channels > 0.5] = 1.0
        return hard
    raise ConfigurationError(f"unknown organ source {source!r}")


def train_lns(cases: list[CaseRecord], config: PhantomConfig, sched: StageSchedules,
              seed: int, organ_source: str = "none",
              fused: dict[str, np.ndarray] | None = None,
              weights: autosearch.ChannelWeights | None = None,
              channel_subset: list[int] | None = None,
              access_log: set | None = None) -> segnet.Model:
    """Station parser training for one arm.

    organ_source selects the context: "none" (image only), "gt" (one-hot
    ground truth), or "pred" (fused stage A/B probabilities). A channel
    subset restricts the context to selected organ channels; weights switch
    to the softmax-scaled input of the search formulation.
    """
    classes = 1 + _station_count(config)
    contexts = {c.case_id: organ_context(c, config, organ_source, fused,
                                         sched.soft_context) for c in cases}
    if organ_source == "none":
        dataset = [(c.case_id, normalize_image(c.image),
                    c.station_labels.astype(np.int64)) for c in cases]
        cfg = segnet.NetConfig(in_channels=1, class_count=classes,
                               depth=sched.net_depth, base_width=sched.net_width,
                               seed=mix(seed, "lns", organ_source))
        model = segnet.build_model(cfg)
        return segnet.train(model, dataset, sched.lns_epochs, lr=sched.lr,
                            seed=mix(seed, "lns", organ_source, "train"),
                            access_log=access_log)
    if weights is not None:
        if channel_subset is not None:
            raise ConfigurationError("weights and channel subset are exclusive")
        engine_cases = [(c.case_id, normalize_image(c.image),
                         contexts[c.case_id], c.station_labels.astype(np.int64))
                        for c in cases]
        schedule = autosearch.SearchSchedule(
            total_epochs=sched.lns_epochs, freeze_epochs=sched.lns_epochs,
            alpha_lr_scale=sched.search.alpha_lr_scale)
        model, _, _ = autosearch.fit_station_model(
            engine_cases, classes, schedule, seed=mix(seed, "lns", organ_source),
            lr=sched.lr, alpha_init=np.asarray(weights.alpha, dtype=np.float32),
            update_alpha=False, net_depth=sched.net_depth,
            net_width=sched.net_width, access_log=access_log)
        return model
    dataset = []
    for c in cases:
        ctx = contexts[c.case_id]
        if channel_subset is not None:
            ctx = ctx[channel_subset]
        dataset.append((c.case_id,
                        np.concatenate([normalize_image(c.image), ctx], axis=0),
                        c.station_labels.astype(np.int64)))
    in_ch = dataset[0][1].shape[0]
    tag = f"{organ_source}" if channel_subset is None else f"{organ_source}_subset"
    cfg = segnet.NetConfig(in_channels=in_ch, class_count=classes,
                           depth=sched.net_depth, base_width=sched.net_width,
                           seed=mix(seed, "lns", tag))
    model = segnet.build_model(cfg)
    return segnet.train(model, dataset, sched.lns_epochs, lr=sched.lr,
                        seed=mix(seed, "lns", tag, "train"), access_log=access_log)


def lns_input(case: CaseRecord, config: PhantomConfig, source: str,
              fused: dict[str, np.ndarray] | None, soft: bool = True,
              channel_subset: list[int] | None = None) -> np.ndarray:
    img = normalize_image(case.image)
    ctx = organ_context(case, config, source, fused, soft)
    if ctx is None:
        return img
    if channel_subset is not None:
        ctx = ctx[channel_subset]
    return np.concatenate([img, ctx], axis=0)


def station_metrics(pred: np.ndarray, truth: np.ndarray, spacing,
                    class_count: int) -> dict[int, dict[str, float]]:
    """Per-class dice/hd/asd, NaN where a surface metric is undefined."""
    out = {}
    for cls in range(1, class_count + 1):
        p = pred == cls
        t = truth == cls
        row = {"dice": metrics.dice(p, t)}
        try:
            row["hd"] = metrics.hausdorff(p, t, spacing)
            row["asd"] = metrics.asd(p, t, spacing)
        except Exception:
            row["hd"] = float("nan")
            row["asd"] = float("nan")
        out[cls] = row
    return out


def combined_organ_prediction(anchor_model: segnet.Model,
                              nonanchor_model: segnet.Model,
                              case: CaseRecord, config: PhantomConfig) -> np.ndarray:
    """Hard organ-label map from the cascade, anchors taking precedence."""
    legend = case.meta["organ_legend"]
    img = normalize_image(case.image)
    anchor_probs = predict_probs(anchor_model, img)
    anchor_hard = np.argmax(anchor_probs, axis=0)
    stage_b_input = np.concatenate([img, anchor_probs[1:]], axis=0)
    nonanchor_hard = np.argmax(predict_probs(nonanchor_model, stage_b_input), axis=0)
    out = np.zeros(case.organ_labels.shape, dtype=np.uint8)
    for i, name in enumerate(config.nonanchor_names(), start=1):
        out[nonanchor_hard == i] = legend[name]
    for i, name in enumerate(config.anchor_names(), start=1):
        out[anchor_hard == i] = legend[name]
    return out


@dataclass
class FoldResult:
    fold_index: int
    arm_cases: dict            # arm -> {case_id: {class: {metric: value}}}
    arm_zone_accuracy: dict    # arm -> {case_id: fraction}
    organ_cases: dict          # stage -> {case_id: {class: {...}}}
    search: dict | None
    margin_cases: dict | None
    margin_zone_accuracy: dict | None
    timings: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "fold_index": self.fold_index,
            "arm_cases": self.arm_cases,
            "arm_zone_accuracy": self.arm_zone_accuracy,
            "organ_cases": self.organ_cases,
            "search": self.search,
            "margin_cases": self.margin_cases,
            "margin_zone_accuracy": self.margin_zone_accuracy,
            "timings": self.timings,
        }

    @staticmethod
    def from_json_dict(data: dict) -> "FoldResult":
        def intkeys(tree):
            return {cid: {int(cls): dict(rows) for cls, rows in classes.items()}
                    for cid, classes in tree.items()}

        return FoldResult(
            fold_index=int(data["fold_index"]),
            arm_cases={arm: intkeys(v) for arm, v in data["arm_cases"].items()},
            arm_zone_accuracy=data["arm_zone_accuracy"],
            organ_cases={stage: intkeys(v) for stage, v in data["organ_cases"].items()},
            search=data.get("search"),
            margin_cases=(None if data.get("margin_cases") is None
                          else intkeys(data["margin_cases"])),
            margin_zone_accuracy=data.get("margin_zone_accuracy"),
            timings=data.get("timings", {}),
        )


def run_fold(cohort: list[CaseRecord], config: PhantomConfig, manifest: FoldManifest,
             fold_index: int, arms: list[str], sched: StageSchedules, master_seed: int,
             include_joint: bool = False, include_margin_baseline: bool = False,
             margin_perturbation: float = 0.25, store_dir=None) -> FoldResult:
    """Train and evaluate one fold; `store_dir` enables checkpoint resume."""
    from pathlib import Path

    by_id = {c.case_id: c for c in cohort}
    fold = manifest.folds[fold_index]
    train_cases = [by_id[i] for i in fold["train"]]
    test_cases = [by_id[i] for i in fold["test"]]
    train_ids = set(fold["train"])
    seed = mix(master_seed, "fold", fold_index)
    stations = _station_count(config)
    zones_by_id = {config.station_legend()[name]: zone
                   for name, zone in config.zones.items()}
    store = Path(store_dir) if store_dir is not None else None
    if store is not None:
        store.mkdir(parents=True, exist_ok=True)
        marker = store / "result.json"
        if marker.exists():
            import json as _json
            return FoldResult.from_json_dict(_json.loads(marker.read_text()))

    test_ids = set(fold["test"])

    def check_log(log: set, stage: str) -> None:
        leaked = log & test_ids
        if leaked:
            raise LeakageError(
                f"fold {fold_index} {stage}: trained on test cases {sorted(leaked)}")
        unknown = log - train_ids
        if unknown:
            raise LeakageError(
                f"fold {fold_index} {stage}: trained on cases outside the fold "
                f"{sorted(unknown)}")

    timings: dict = {}

    def cached_stage(name: str, trainer) -> segnet.Model:
        """Train a stage, or reload its checkpoint when resuming."""
        import time as _time

        path = None if store is None else store / f"{name}.ckpt"
        if path is not None and path.exists():
            return segnet.load_model(path)
        log: set = set()
        t0 = _time.perf_counter()
        model = trainer(log)
        timings[name] = timings.get(name, 0.0) + _time.perf_counter() - t0
        check_log(log, name)
        if path is not None:
            segnet.save_model(model, path)
        return model

    needs_cascade = bool({"organs_pred", "organs_searched"} & set(arms)) \
        or include_joint or include_margin_baseline
    anchor_model = nonanchor_model = None
    fused: dict[str, np.ndarray] = {}
    organ_cases: dict = {}
    if needs_cascade:
        anchor_model = cached_stage(
            "anchor", lambda log: train_anchor(train_cases, config, sched, seed,
                                               access_log=log))
        nonanchor_model = cached_stage(
            "nonanchor", lambda log: train_nonanchor(train_cases, anchor_model,
                                                     config, sched, seed,
                                                     access_log=log))
        for case in cohort:
            if case.case_id in train_ids or case.case_id in {c.case_id for c in test_cases}:
                img = normalize_image(case.image)
                a_probs = predict_probs(anchor_model, img)
                b_input = np.concatenate([img, a_probs[1:]], axis=0)
                b_probs = predict_probs(nonanchor_model, b_input)
                fused[case.case_id] = fuse_organ_predictions(a_probs, b_probs)
        legend = config.organ_legend()
        anchor_names = config.anchor_names()
        nonanchor_names = config.nonanchor_names()
        organ_cases["anchor"] = {}
        organ_cases["nonanchor_cascade"] = {}
        for case in test_cases:
            img = normalize_image(case.image)
            a_probs = predict_probs(anchor_model, img)
            a_hard = np.argmax(a_probs, axis=0)
            truth_a = remap_labels(case.organ_labels, legend, anchor_names)
            organ_cases["anchor"][case.case_id] = station_metrics(
                a_hard, truth_a, case.spacing, len(anchor_names))
            b_input = np.concatenate([img, a_probs[1:]], axis=0)
            b_hard = np.argmax(predict_probs(nonanchor_model, b_input), axis=0)
            truth_b = remap_labels(case.organ_labels, legend, nonanchor_names)
            organ_cases["nonanchor_cascade"][case.case_id] = station_metrics(
                b_hard, truth_b, case.spacing, len(nonanchor_names))

    if include_joint:
        joint_model = cached_stage(
            "joint", lambda log: train_joint(train_cases, config, sched, seed,
                                             access_log=log))
        legend = config.organ_legend()
        all_names = context_organ_names(config)
        anchor_count = len(config.anchor_names())
        organ_cases["joint_anchor"] = {}
        organ_cases["nonanchor_joint"] = {}
        for case in test_cases:
            hard = np.argmax(predict_probs(joint_model, normalize_image(case.image)),
                             axis=0)
            truth = remap_labels(case.organ_labels, legend, all_names)
            rows = station_metrics(hard, truth, case.spacing, len(all_names))
            organ_cases["joint_anchor"][case.case_id] = {
                k: v for k, v in rows.items() if k <= anchor_count}
            organ_cases["nonanchor_joint"][case.case_id] = {
                k - anchor_count: v for k, v in rows.items() if k > anchor_count}

    search_info = None
    arm_cases: dict = {}
    arm_zone: dict = {}
    for arm in arms:
        if arm not in ARM_NAMES:
            raise ConfigurationError(f"unknown arm {arm!r}")
        subset = None
        if arm == "ct_only":
            source = "none"
            model = cached_stage(
                "lns_ct_only", lambda log: train_lns(
                    train_cases, config, sched, seed, organ_source="none",
                    access_log=log))
        elif arm == "organs_gt":
            source = "gt"
            model = cached_stage(
                "lns_organs_gt", lambda log: train_lns(
                    train_cases, config, sched, seed, organ_source="gt",
                    access_log=log))
        elif arm == "organs_pred":
            source = "pred"
            model = cached_stage(
                "lns_organs_pred", lambda log: train_lns(
                    train_cases, config, sched, seed, organ_source="pred",
                    fused=fused, access_log=log))
        else:  # organs_searched
            source = "pred"
            search_path = None if store is None else store / "search.json"
            if search_path is not None and search_path.exists():
                import json as _json
                payload = _json.loads(search_path.read_text())
                result = autosearch.SearchResult(
                    phi=np.asarray(payload["phi"], dtype=np.float32),
                    alpha_history=[np.asarray(r, dtype=np.float32)
                                   for r in payload["alpha_history"]],
                    ranking=[int(i) for i in payload["ranking"]],
                    organ_names=payload.get("organ_names", []),
                    selected=payload.get("selected"))
            else:
                engine_cases = [(c.case_id, normalize_image(c.image),
                                 fused[c.case_id], c.station_labels.astype(np.int64))
                                for c in train_cases]
                log = set()
                result, _ = autosearch.search(
                    engine_cases, sched.search, seed=mix(seed, "search"), lr=sched.lr,
                    organ_names=context_organ_names(config),
                    station_classes=1 + stations,
                    net_depth=sched.net_depth, net_width=sched.net_width,
                    access_log=log)
                check_log(log, "search")
            n = sched.searched_n or len(config.key_organs)
            subset = autosearch.select_top_n(result, n)
            search_info = result.to_dict()
            if search_path is not None:
                import json as _json
                search_path.write_text(_json.dumps(search_info, sort_keys=True))
            chosen = list(subset)
            model = cached_stage(
                "lns_organs_searched", lambda log: train_lns(
                    train_cases, config, sched, seed, organ_source="pred",
                    fused=fused, channel_subset=chosen, access_log=log))
        arm_cases[arm] = {}
        arm_zone[arm] = {}
        import time as _time
        t0 = _time.perf_counter()
        for case in test_cases:
            x = lns_input(case, config, source, fused, sched.soft_context, subset)
            pred = segnet.predict_labels(model, x)
            arm_cases[arm][case.case_id] = station_metrics(
                pred, case.station_labels, case.spacing, stations)
            if case.ln_instances:
                arm_zone[arm][case.case_id] = metrics.zone_accuracy(
                    case.ln_instances, pred, zones_by_id)
        timings[f"eval_{arm}"] = _time.perf_counter() - t0

    margin_cases = margin_zone = None
    if include_margin_baseline:
        margin_cases = {}
        margin_zone = {}
        rules = perturb_rules(config.stations, margin_perturbation,
                              mix(master_seed, "margin", fold_index))
        legend = config.organ_legend()
        for case in test_cases:
            pred_organs = combined_organ_prediction(anchor_model, nonanchor_model,
                                                    case, config)
            pred = margin_infer_baseline(pred_organs, legend, rules, case.spacing)
            margin_cases[case.case_id] = station_metrics(
                pred, case.station_labels, case.spacing, stations)
            if case.ln_instances:
                margin_zone[case.case_id] = metrics.zone_accuracy(
                    case.ln_instances, pred, zones_by_id)

    result = FoldResult(fold_index, arm_cases, arm_zone, organ_cases,
                        search_info, margin_cases, margin_zone, timings=timings)
    if store is not None:
        import json as _json
        (store / "result.json").write_text(
            _json.dumps(result.to_json_dict(), sort_keys=True))
    return result


def fold_mean_dice(fold_result: FoldResult, arm: str) -> float:
    """Mean over test cases of the per-case mean station Dice."""
    per_case = fold_result.arm_cases[arm]
    case_means = [np.mean([row["dice"] for row in rows.values()])
                  for rows in per_case.values()]
    return float(np.mean(case_means))


def merge_fold_results(fold_results: list[FoldResult], arms: list[str],
                       station_names: list[str]) -> dict:
    """Deterministic keyed merge of per-fold outputs into one report dict."""
    fold_results = sorted(fold_results, key=lambda r: r.fold_index)
    report: dict = {"arms": {}, "organs": {}, "folds": {}, "search": {},
                    "margin_baseline": None}
    for arm in arms:
        pooled: list[dict] = []
        per_fold = []
        zone_values = []
        for fr in fold_results:
            named = {}
            for case_id in sorted(fr.arm_cases[arm]):
                rows = fr.arm_cases[arm][case_id]
                named[case_id] = {station_names[cls - 1]: rows[cls] for cls in rows}
            pooled.extend(named.values())
            per_fold.append({
                "fold": fr.fold_index,
                "mean_dice": fold_mean_dice(fr, arm),
                "cases": named,
            })
            zone_values.extend(fr.arm_zone_accuracy[arm].values())
        summary = metrics.summarize(pooled)
        report["arms"][arm] = {
            "per_fold": per_fold,
            "summary": {key: {m: (None if stats is None else
                                  {"mean": stats.mean, "std": stats.std,
                                   "count": stats.count})
                              for m, stats in row.items()}
                        for key, row in summary.items()},
            "mean_dice": float(np.mean([f["mean_dice"] for f in per_fold])),
            "zone_accuracy": (float(np.mean(zone_values)) if zone_values else None),
        }
    stage_names = sorted({stage for fr in fold_results for stage in fr.organ_cases})
    for stage in stage_names:
        pooled = []
        for fr in fold_results:
            for case_id in sorted(fr.organ_cases.get(stage, {})):
                pooled.append(fr.organ_cases[stage][case_id])
        if pooled:
            dice_values = [np.mean([row["dice"] for row in case.values()])
                           for case in pooled]
            report["organs"][stage] = {"mean_dice": float(np.mean(dice_values)),
                                       "cases": len(pooled)}
    for fr in fold_results:
        if fr.search is not None:
            report["search"][str(fr.fold_index)] = fr.search
    margin_pooled: list[dict] = []
    margin_zone: list[float] = []
    margin_fold_means = []
    for fr in fold_results:
        if fr.margin_cases is not None:
            case_means = [np.mean([row["dice"] for row in rows.values()])
                          for rows in fr.margin_cases.values()]
            margin_fold_means.append(float(np.mean(case_means)))
            margin_pooled.extend(fr.margin_cases.values())
            margin_zone.extend(fr.margin_zone_accuracy.values())
    if margin_pooled:
        report["margin_baseline"] = {
            "mean_dice": float(np.mean(margin_fold_means)),
            "zone_accuracy": (float(np.mean(margin_zone)) if margin_zone else None),
        }
    return report


def run_cv(cohort: list[CaseRecord], config: PhantomConfig, fold_count: int,
           arms: list[str], sched: StageSchedules, master_seed: int,
           include_joint: bool = False, include_margin_baseline: bool = False,
           margin_perturbation: float = 0.25, store_dir=None) -> dict:
    """Cross-validated experiment over the requested arms, single process."""
    from pathlib import Path

    if len(cohort) < fold_count:
        raise ConfigurationError(
            f"cohort of {len(cohort)} cannot support {fold_count} folds")
    manifest = FoldManifest.make([c.case_id for c in cohort], fold_count)
    results = [run_fold(cohort, config, manifest, k, arms, sched, master_seed,
                        include_joint, include_margin_baseline, margin_perturbation,
                        store_dir=(None if store_dir is None
                                   else Path(store_dir) / f"fold_{k}"))
               for k in range(fold_count)]
    station_names = [r.station for r in config.stations]
    report = merge_fold_results(results, arms, station_names)
    report["folds"] = manifest.to_dict()
    report["schedules"] = {
        "anchor_epochs": sched.anchor_epochs,
        "nonanchor_epochs": sched.nonanchor_epochs,
        "joint_epochs": sched.joint_epochs,
        "lns_epochs": sched.lns_epochs,
        "lr": sched.lr,
        "search_total": sched.search.total_epochs,
        "search_freeze": sched.search.freeze_epochs,
    }
    return report
