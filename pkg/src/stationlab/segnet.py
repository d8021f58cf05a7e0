"""Compact 3D encoder-decoder producing per-voxel class probabilities.

Layer schema (all convs cubic, bias always present, norm = per-channel
spatial normalization, activation = leaky 0.01):

    enc[0]:   conv k3 s1 p1  (Cin -> w0), norm, leaky
    level i (1..depth-1):
        down: avgpool 2x2x2, then conv k3 s1 p1 (w[i-1] -> w[i]), norm, leaky
        enc:  conv k3 s1 p1  (w[i] -> w[i]), norm, leaky
    decoder i (depth-2 .. 0):
        upsample x2, concat enc[i] skip  (w[i] + w[i+1] channels)
        fuse:   conv k1 s1 p0 (w[i]+w[i+1] -> w[i]), norm, leaky
        refine: conv k3 s1 p1 (w[i] -> w[i]), norm, leaky
    head:     conv k1 s1 p0  (w0 -> C), softmax over channels

with w[i] = base_width * 2**i. Parameters are initialized fan-in scaled from
the config seed, so identical configs give bitwise-identical models.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError, ContractViolation, TrainingDiverged
from .seeds import mix, rng_for

LEAKY_SLOPE = 0.01


@dataclass
class NetConfig:
    in_channels: int
    class_count: int
    depth: int = 3
    base_width: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.class_count < 2:
            raise ConfigurationError(
                "class_count must cover background plus at least one class")
        if self.depth < 2:
            raise ConfigurationError("depth must be at least 2")
        if self.in_channels < 1 or self.base_width < 1:
            raise ConfigurationError("in_channels and base_width must be positive")

    def widths(self) -> list[int]:
        return [self.base_width * (2 ** i) for i in range(self.depth)]

    def layer_specs(self) -> list[tuple[str, int, int, int, int, int]]:
        """(name, cin, cout, k, stride, pad) per conv, in parameter order."""
        w = self.widths()
        specs = [("enc0", self.in_channels, w[0], 3, 1, 1)]
        for i in range(1, self.depth):
            specs.append((f"down{i}", w[i - 1], w[i], 3, 1, 1))
            specs.append((f"enc{i}", w[i], w[i], 3, 1, 1))
        for i in range(self.depth - 2, -1, -1):
            specs.append((f"dec{i}_fuse", w[i] + w[i + 1], w[i], 1, 1, 0))
            specs.append((f"dec{i}_refine", w[i], w[i], 3, 1, 1))
        specs.append(("head", w[0], self.class_count, 1, 1, 0))
        return specs

    def parameter_count(self) -> int:
        return sum(cout * cin * k ** 3 + cout
                   for _, cin, cout, k, _, _ in self.layer_specs())


@dataclass
class Model:
    config: NetConfig
    params: list[nm.Tensor]
    loss_log: list[float] = field(default_factory=list)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def conv_params(self, index: int) -> tuple[nm.Tensor, nm.Tensor]:
        return self.params[2 * index], self.params[2 * index + 1]


def build_model(cfg: NetConfig) -> Model:
    """Fan-in-scaled random initialization, deterministic in cfg.seed."""
    cfg.validate()
    params: list[nm.Tensor] = []
    for idx, (_, cin, cout, k, _, _) in enumerate(cfg.layer_specs()):
        rng = rng_for(cfg.seed, "param", idx)
        fan_in = cin * k ** 3
        std = np.sqrt(2.0 / fan_in)
        w = rng.standard_normal((cout, cin, k, k, k)) * std
        params.append(nm.Tensor(w.astype(np.float32), requires_grad=True))
        params.append(nm.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True))
    return Model(config=cfg, params=params)


def _check_input(cfg: NetConfig, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ContractViolation(
            f"input must be ({cfg.in_channels},D,H,W), got {x.shape}")
    divisor = 2 ** (cfg.depth - 1)
    for n in x.shape[1:]:
        if n % divisor:
            raise ConfigurationError(
                f"grid extents must be divisible by {divisor}, got {x.shape[1:]}")


def forward(model: Model, x, graph: nm.Graph | None = None) -> nm.Tensor:
    """Class pseudo-probabilities (C,D,H,W); channel sums are 1 per voxel."""
    cfg = model.config
    data = x.data if isinstance(x, nm.Tensor) else np.asarray(x)
    _check_input(cfg, data)
    t = x if isinstance(x, nm.Tensor) else nm.Tensor(data.astype(np.float32))

    def block(h, idx):
        w, b = model.conv_params(idx)
        _, _, _, _, stride, pad = cfg.layer_specs()[idx]
        h = nm.conv3d(h, w, b, stride=stride, padding=pad, graph=graph)
        h = nm.spatial_norm(h, graph=graph)
        return nm.leaky_relu(h, LEAKY_SLOPE, graph=graph)

    idx = 0
    h = block(t, idx)
    idx += 1
    skips = [h]
    for _ in range(1, cfg.depth):
        h = nm.avgpool2(h, graph=graph)
        h = block(h, idx)      # down
        idx += 1
        h = block(h, idx)      # enc refine
        idx += 1
        skips.append(h)
    h = skips[-1]
    for level in range(cfg.depth - 2, -1, -1):
        up = nm.upsample_nearest(h, graph=graph)
        h = nm.concat_channels([skips[level], up], graph=graph)
        h = block(h, idx)      # fuse 1x1
        idx += 1
        h = block(h, idx)      # refine 3x3
        idx += 1
    w, b = model.conv_params(idx)
    logits = nm.conv3d(h, w, b, stride=1, padding=0, graph=graph)
    return nm.softmax(logits, axis=0, graph=graph)


def labels_from_probs(probs: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over channels; ties break toward the lowest class."""
    return np.argmax(np.asarray(probs), axis=0).astype(np.uint8)


def predict_labels(model: Model, x) -> np.ndarray:
    """Hard labels for one input volume."""
    return labels_from_probs(forward(model, x, graph=None).data)


def lr_at_epoch(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Base rate with a x0.1 step at 75% of the schedule."""
    if total_epochs > 0 and epoch >= int(0.75 * total_epochs):
        return base_lr * 0.1
    return base_lr


def train(model: Model, dataset, epochs: int, lr: float = 1e-3, seed: int = 0,
          access_log: set | None = None) -> Model:
    """Full-volume batch-of-1 training with fixed shuffling from `seed`.

    `dataset` is a sequence of (case_id, input (C,D,H,W) float32,
    target (D,H,W) int).
    """
    if not dataset:
        raise ContractViolation("training needs a non-empty dataset")
    cfg = model.config
    for case_id, inp, target in dataset:
        _check_input(cfg, np.asarray(inp))
        t = np.asarray(target)
        if t.min() < 0 or t.max() >= cfg.class_count:
            raise ContractViolation(
                f"case {case_id!r}: target labels outside [0, {cfg.class_count})")
    state = nm.OptimizerState(learning_rate=lr)
    for epoch in range(epochs):
        order = rng_for(seed, "shuffle", epoch).permutation(len(dataset))
        state.learning_rate = lr_at_epoch(lr, epoch, epochs)
        epoch_losses = []
        for data_index in order:
            case_id, inp, target = dataset[int(data_index)]
            if access_log is not None:
                access_log.add(case_id)
            graph = nm.Graph()
            for p in model.params:
                graph.watch(p)
            probs = forward(model, nm.Tensor(inp), graph=graph)
            loss = nm.dice_ce_loss(probs, target, cfg.class_count, graph=graph)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(epoch, case_id, loss_val)
            nm.zero_grads(model.params)
            nm.backward(loss, graph)
            nm.optimizer_step(state, model.params)
            epoch_losses.append(loss_val)
        model.loss_log.append(float(np.mean(epoch_losses)))
    return model


def save_model(model: Model, path) -> None:
    header = {
        "kind": "segnet",
        "net_config": asdict(model.config),
        "layers": [list(spec) for spec in model.config.layer_specs()],
        "seed": model.config.seed,
        "loss_log": model.loss_log,
    }
    nm.save_params(path, header, model.params)


def load_model(path) -> Model:
    header, arrays = nm.load_params(path)
    cfg = NetConfig(**header["net_config"])
    model = build_model(cfg)
    if len(arrays) != len(model.params):
        raise ConfigurationError(
            f"checkpoint has {len(arrays)} parameters, expected {len(model.params)}")
    for p, a in zip(model.params, arrays):
        if p.shape != a.shape:
            raise ConfigurationError(
                f"checkpoint parameter shape {a.shape} does not match {p.shape}")
        p.data = a.astype(np.float32)
    model.loss_log = list(header.get("loss_log", []))
    return model


def mixed_seed(master: int, *tags) -> int:
    return mix(master, *tags)
