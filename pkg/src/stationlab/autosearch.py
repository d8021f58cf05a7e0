"""Differentiable key-organ selection over organ input channels.

A learnable logit per organ channel is softmax-normalized into channel
weights; the weighted organ channels join the image as parser input. After a
freeze prefix that trains only network weights, mini-batches alternate
strictly between a network step (even batches) and a logit step (odd
batches), both on the same Dice+CE loss. Organs are then ranked by final
weight and the top-n kept.

The same engine with logits frozen for the whole schedule implements
weighted station training, which makes the frozen-search/uniform-weights
equivalence exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import segnet
from .errors import ContractViolation, TrainingDiverged
from .seeds import rng_for


@dataclass
class ChannelWeights:
    """Learnable logits (one per organ channel) and their softmax weights."""

    alpha: np.ndarray

    @property
    def phi(self) -> np.ndarray:
        return channel_weights_array(self.alpha)

    @classmethod
    def uniform(cls, count: int) -> "ChannelWeights":
        return cls(alpha=np.zeros(count, dtype=np.float32))


@dataclass
class SearchSchedule:
    total_epochs: int = 100
    freeze_epochs: int = 20
    alpha_lr_scale: float = 10.0   # logit lr relative to the network lr

    def validate(self) -> None:
        if not 0 <= self.freeze_epochs <= self.total_epochs:
            raise ContractViolation(
                f"freeze epochs {self.freeze_epochs} must lie within "
                f"[0, {self.total_epochs}]")


@dataclass
class SearchResult:
    phi: np.ndarray
    alpha_history: list[np.ndarray]
    ranking: list[int]              # organ channel indices, best first
    organ_names: list[str] = field(default_factory=list)
    selected: list[int] | None = None

    def to_dict(self) -> dict:
        return {
            "phi": [float(v) for v in self.phi],
            "alpha_history": [[float(v) for v in row] for row in self.alpha_history],
            "ranking": [int(i) for i in self.ranking],
            "organ_names": list(self.organ_names),
            "selected": None if self.selected is None else [int(i) for i in self.selected],
        }


def channel_weights_array(alpha: np.ndarray) -> np.ndarray:
    if np.asarray(alpha).size < 1:
        raise ContractViolation("channel weights need at least one logit")
    t = nm.softmax(nm.Tensor(np.asarray(alpha, dtype=np.float32)), axis=0)
    return t.data


def channel_weights(alpha) -> np.ndarray:
    """Softmax of the logits: positive weights summing to one."""
    data = alpha.alpha if isinstance(alpha, ChannelWeights) else alpha
    return channel_weights_array(np.asarray(data))


def apply_weights(organ_map: nm.Tensor, phi: nm.Tensor,
                  graph: nm.Graph | None = None) -> nm.Tensor:
    """Channel-wise multiplication of every organ channel by its weight."""
    if phi.size != organ_map.shape[0]:
        raise ContractViolation(
            f"{phi.size} weights for {organ_map.shape[0]} organ channels")
    out = organ_map
    for c in range(organ_map.shape[0]):
        out = nm.scale_channel(out, c, nm.take_scalar(phi, c, graph=graph), graph=graph)
    return out


def rank_channels(phi: np.ndarray) -> list[int]:
    """Descending weight; exact ties resolve to the lower channel index."""
    return [int(i) for i in np.argsort(-np.asarray(phi), kind="stable")]


def select_top_n(result: SearchResult, n: int) -> list[int]:
    count = len(result.phi)
    if not 1 <= n <= count:
        raise ContractViolation(f"top-n must be in [1, {count}], got {n}")
    result.selected = list(result.ranking[:n])
    return list(result.selected)


def fit_station_model(cases, station_classes: int, schedule: SearchSchedule,
                      seed: int, lr: float = 1e-3,
                      alpha_init: np.ndarray | None = None,
                      update_alpha: bool = True,
                      net_depth: int = 3, net_width: int = 8,
                      access_log: set | None = None):
    """Shared trainer for weighted station parsing and channel search.

    `cases` is a sequence of (case_id, image (1,D,H,W), organs (Co,D,H,W),
    target); every case must supply the same organ channel count. Returns
    (model, alpha tensor, per-epoch alpha history).
    """
    schedule.validate()
    if not cases:
        raise ContractViolation("training needs a non-empty dataset")
    organ_count = cases[0][2].shape[0]
    for case_id, image, organs, _ in cases:
        if organs.shape[0] != organ_count:
            raise ContractViolation(
                f"case {case_id!r} has {organs.shape[0]} organ channels, "
                f"expected {organ_count}")
    if alpha_init is None:
        alpha_init = np.zeros(organ_count, dtype=np.float32)
    if alpha_init.shape != (organ_count,):
        raise ContractViolation(
            f"got {alpha_init.shape[0] if alpha_init.ndim else 0} logits for "
            f"{organ_count} organ channels")

    cfg = segnet.NetConfig(in_channels=1 + organ_count, class_count=station_classes,
                           depth=net_depth, base_width=net_width, seed=seed)
    model = segnet.build_model(cfg)
    alpha = nm.Tensor(alpha_init.astype(np.float32), requires_grad=True)
    w_state = nm.OptimizerState(learning_rate=lr)
    a_state = nm.OptimizerState(learning_rate=lr * schedule.alpha_lr_scale)
    alpha_history: list[np.ndarray] = []
    alternation = 0
    for epoch in range(schedule.total_epochs):
        epoch_lr = segnet.lr_at_epoch(lr, epoch, schedule.total_epochs)
        w_state.learning_rate = epoch_lr
        a_state.learning_rate = epoch_lr * schedule.alpha_lr_scale
        order = rng_for(seed, "shuffle", epoch).permutation(len(cases))
        losses = []
        for data_index in order:
            case_id, image, organs, target = cases[int(data_index)]
            if access_log is not None:
                access_log.add(case_id)
            graph = nm.Graph()
            for p in model.params:
                graph.watch(p)
            graph.watch(alpha)
            phi = nm.softmax(alpha, axis=0, graph=graph)
            weighted = apply_weights(nm.Tensor(organs), phi, graph=graph)
            x = nm.concat_channels([nm.Tensor(image), weighted], graph=graph)
            probs = segnet.forward(model, x, graph=graph)
            loss = nm.dice_ce_loss(probs, target, station_classes, graph=graph)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(epoch, case_id, loss_val)
            nm.zero_grads(model.params)
            alpha.zero_grad()
            nm.backward(loss, graph)
            in_freeze = epoch < schedule.freeze_epochs
            if in_freeze or not update_alpha:
                nm.optimizer_step(w_state, model.params)
            elif alternation % 2 == 0:
                nm.optimizer_step(w_state, model.params)
                alternation += 1
            else:
                if not np.all(np.isfinite(alpha.grad)):
                    raise TrainingDiverged(epoch, case_id, float("nan"))
                nm.optimizer_step(a_state, [alpha])
                alternation += 1
            losses.append(loss_val)
        model.loss_log.append(float(np.mean(losses)))
        alpha_history.append(alpha.data.copy())
    return model, alpha, alpha_history


def search(cases, schedule: SearchSchedule, seed: int, lr: float = 1e-3,
           organ_names: list[str] | None = None, station_classes: int | None = None,
           net_depth: int = 3, net_width: int = 8,
           access_log: set | None = None) -> tuple[SearchResult, segnet.Model]:
    """Run the alternating search and rank organ channels by final weight."""
    if station_classes is None:
        station_classes = int(max(np.max(target) for _, _, _, target in cases)) + 1
    model, alpha, history = fit_station_model(
        cases, station_classes, schedule, seed, lr=lr, update_alpha=True,
        net_depth=net_depth, net_width=net_width, access_log=access_log)
    phi = channel_weights_array(alpha.data)
    result = SearchResult(
        phi=phi,
        alpha_history=history,
        ranking=rank_channels(phi),
        organ_names=list(organ_names or []),
    )
    return result, model


def topn_sweep(cohort, config, n_values, sched, master_seed: int,
               fold_count: int = 4) -> dict:
    """Cross-validated station metrics for each candidate top-n cut.

    Per fold: train the cascade and run the search once, then for every n
    retrain the parser on the top-n predicted organ channels (unweighted)
    and evaluate on the fold's test cases.
    """
    from . import pipeline as pl
    from .seeds import mix

    n_values = list(n_values)
    organ_total = len(pl.context_organ_names(config))
    for n in n_values:
        if not 1 <= n <= organ_total:
            raise ContractViolation(f"top-n value {n} outside [1, {organ_total}]")
    by_id = {c.case_id: c for c in cohort}
    manifest = pl.FoldManifest.make(list(by_id), fold_count)
    stations = len(config.stations)
    per_n: dict[int, list[float]] = {n: [] for n in n_values}
    rankings = {}
    for k in range(fold_count):
        fold = manifest.folds[k]
        train_cases = [by_id[i] for i in fold["train"]]
        test_cases = [by_id[i] for i in fold["test"]]
        seed = mix(master_seed, "fold", k)
        anchor_model = pl.train_anchor(train_cases, config, sched, seed)
        nonanchor_model = pl.train_nonanchor(train_cases, anchor_model, config,
                                             sched, seed)
        fused = {}
        for case in train_cases + test_cases:
            img = pl.normalize_image(case.image)
            a_probs = pl.predict_probs(anchor_model, img)
            b_probs = pl.predict_probs(
                nonanchor_model, np.concatenate([img, a_probs[1:]], axis=0))
            fused[case.case_id] = pl.fuse_organ_predictions(a_probs, b_probs)
        engine_cases = [(c.case_id, pl.normalize_image(c.image), fused[c.case_id],
                         c.station_labels.astype(np.int64)) for c in train_cases]
        result, _ = search(engine_cases, sched.search, seed=mix(seed, "search"),
                           lr=sched.lr, organ_names=pl.context_organ_names(config),
                           station_classes=1 + stations,
                           net_depth=sched.net_depth, net_width=sched.net_width)
        rankings[str(k)] = result.to_dict()
        for n in n_values:
            subset = list(result.ranking[:n])
            model = pl.train_lns(train_cases, config, sched, mix(seed, "sweep", n),
                                 organ_source="pred", fused=fused,
                                 channel_subset=subset)
            dice_values = []
            for case in test_cases:
                x = pl.lns_input(case, config, "pred", fused, sched.soft_context,
                                 subset)
                pred = segnet.predict_labels(model, x)
                rows = pl.station_metrics(pred, case.station_labels, case.spacing,
                                          stations)
                dice_values.append(float(np.mean([r["dice"] for r in rows.values()])))
            per_n[n].append(float(np.mean(dice_values)))
    return {
        "n_values": n_values,
        "per_n": {str(n): {"fold_mean_dice": per_n[n],
                           "mean_dice": float(np.mean(per_n[n]))}
                  for n in n_values},
        "rankings": rankings,
        "folds": manifest.to_dict(),
    }
