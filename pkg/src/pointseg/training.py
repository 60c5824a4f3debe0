"""Loss, optimizers, segmentation metrics, the training loop, and the
ablation / robustness harnesses.

Everything downstream of a seed is deterministic: block sampling, weight
init, shuffling, and the arithmetic itself (see tensor.py), so repeated
runs produce bit-identical checkpoints in 64-bit mode.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .attention import predict_labels
from .backbone import (NetworkConfig, apply_ablations, build_plan, forward,
                       init_model_params, quantize_params)
from .cloud import (PointCloud, partition_blocks, perturb_rotate_z,
                    perturb_scale)
from .errors import ContractViolation, DegenerateInput, TrainingDiverged
from .spatial import knn
from .tensor import Graph, Tensor

LOSS_WINDOW = 10  # epochs per moving-average window for regression flags


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    precision: str | None = None         # overrides the network precision
    disable_cr: bool = False
    concat_cr: bool = False
    disable_gpm: bool = False
    disable_attention: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractViolation(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ContractViolation(
                f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.disable_cr and self.concat_cr:
            raise ContractViolation("disable_cr and concat_cr are mutually exclusive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def effective_config(net_config: NetworkConfig, train_config: TrainConfig) -> NetworkConfig:
    """Network architecture after applying ablation flags and precision."""
    cfg = apply_ablations(net_config,
                          disable_cr=train_config.disable_cr,
                          concat_cr=train_config.concat_cr,
                          disable_gpm=train_config.disable_gpm,
                          disable_attention=train_config.disable_attention)
    if train_config.precision is not None:
        cfg = replace(cfg, precision=train_config.precision)
    return cfg


# ---------------------------------------------------------------------------
# dataset preparation


class TrainingBlock(NamedTuple):
    xyz: np.ndarray          # (n, 3) raw coordinates, used for geometry
    features: np.ndarray     # (n, F) block-origin-relative coords + attrs
    labels: np.ndarray       # (n,) int32, or None for inference-only blocks
    indices: np.ndarray      # (n,) positions in the parent cloud


def cloud_blocks(cloud: PointCloud, config: NetworkConfig,
                 seed: int = 0) -> list:
    """Partition a cloud into fixed-size network-ready blocks."""
    if cloud.feature_width != config.feature_width:
        raise ContractViolation(
            f"cloud provides {cloud.feature_width} feature columns, network "
            f"expects {config.feature_width}")
    blocks = partition_blocks(cloud, config.cube_size, config.block_points,
                              seed, config.partition_mode)
    out = []
    for b in blocks:
        xyz = cloud.xyz[b.indices]
        feats = xyz - b.origin
        if cloud.attrs is not None:
            feats = np.hstack([feats, cloud.attrs[b.indices]])
        labels = None if cloud.labels is None else cloud.labels[b.indices]
        out.append(TrainingBlock(xyz, feats, labels, b.indices))
    return out


def training_blocks(cloud: PointCloud, config: NetworkConfig,
                    seed: int = 0) -> list:
    """cloud_blocks for training: the cloud must carry labels."""
    if cloud.labels is None:
        raise ContractViolation("cloud has no labels")
    return cloud_blocks(cloud, config, seed)


# ---------------------------------------------------------------------------
# loss


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over points of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ContractViolation(
            f"labels shape {labels.shape} does not match {n} logits rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ContractViolation(f"label {bad} outside [0, {c})")
    onehot = np.zeros((n, c), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = T.elementwise_mul(T.log_softmax_rows(logits), Tensor(onehot))
    return T.scale(T.reduce_sum(picked), -1.0 / n)


# ---------------------------------------------------------------------------
# optimizers


def _check_grads(params: dict, grads: dict):
    for name in params:
        if grads.get(name) is None:
            raise ContractViolation(f"no gradient for parameter {name!r}")


def sgd_step(params: dict, grads: dict, lr: float):
    """In-place p <- p - lr * g."""
    _check_grads(params, grads)
    for name, p in params.items():
        p.data[...] = p.data - lr * grads[name]


def adam_init(params: dict) -> dict:
    return {"t": 0,
            "m": {n: np.zeros_like(p.data) for n, p in params.items()},
            "v": {n: np.zeros_like(p.data) for n, p in params.items()}}


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    _check_grads(params, grads)
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m[...] = beta1 * m + (1 - beta1) * g
        v[...] = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data[...] = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    confusion: np.ndarray        # rows = ground truth, cols = prediction
    oa: float
    per_class_iou: list          # None for classes with an empty union
    miou: float

    def to_dict(self) -> dict:
        return {"confusion": self.confusion.tolist(), "oa": self.oa,
                "per_class_iou": self.per_class_iou, "miou": self.miou}


def evaluate(pred_labels, true_labels, num_classes: int) -> MetricsReport:
    pred = np.asarray(pred_labels).ravel()
    true = np.asarray(true_labels).ravel()
    if pred.shape != true.shape:
        raise ContractViolation(
            f"{pred.shape[0]} predictions vs {true.shape[0]} ground-truth labels")
    if pred.size == 0:
        raise DegenerateInput("nothing to evaluate")
    for name, arr in (("prediction", pred), ("ground-truth", true)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ContractViolation(
                f"{name} label outside [0, {num_classes})")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    oa = float(np.trace(confusion)) / pred.size
    ious = []
    present = []
    for c in range(num_classes):
        tp = confusion[c, c]
        union = confusion[c, :].sum() + confusion[:, c].sum() - tp
        if union == 0:
            ious.append(None)
        else:
            iou = float(tp) / float(union)
            ious.append(iou)
            present.append(iou)
    return MetricsReport(confusion, oa, ious, float(np.mean(present)))


def predict_block(params: dict, config: NetworkConfig, block: TrainingBlock,
                  plan=None) -> np.ndarray:
    if plan is None:
        plan = build_plan(config, block.xyz)
    return predict_labels(forward(params, config, plan, block.features).data)


def evaluate_params(params: dict, config: NetworkConfig, dataset: list,
                    plans: list | None = None) -> MetricsReport:
    """Whole-dataset metrics for a fixed parameter set."""
    preds, truths = [], []
    for i, block in enumerate(dataset):
        plan = plans[i] if plans is not None else None
        preds.append(predict_block(params, config, block, plan))
        truths.append(block.labels)
    return evaluate(np.concatenate(preds), np.concatenate(truths),
                    config.num_classes)


def predict_cloud(params: dict, config: NetworkConfig, cloud: PointCloud,
                  seed: int = 0) -> np.ndarray:
    """A label for every point of the cloud.

    Blocks are predicted in partition order; points sampled into several
    blocks keep the last write, and points never sampled take the label of
    their nearest predicted neighbor.
    """
    pred = np.full(cloud.n, -1, dtype=np.int32)
    for block in cloud_blocks(cloud, config, seed):
        pred[block.indices] = predict_block(params, config, block)
    missing = np.flatnonzero(pred < 0)
    if missing.size:
        covered = np.flatnonzero(pred >= 0)
        nearest = knn(cloud.xyz[covered], cloud.xyz[missing], 1).indices[:, 0]
        pred[missing] = pred[covered[nearest]]
    return pred


# ---------------------------------------------------------------------------
# training loop


def batch_stream(n_blocks: int, epochs: int, batch_size: int, seed: int) -> list:
    """Per-epoch lists of batches of block indices. Depends only on the
    counts and seed, so every ablation variant sees the same order."""
    rng = np.random.default_rng(seed)
    stream = []
    for _ in range(epochs):
        order = rng.permutation(n_blocks)
        stream.append([order[i:i + batch_size].tolist()
                       for i in range(0, n_blocks, batch_size)])
    return stream


def loss_regressions(losses, window: int = LOSS_WINDOW) -> list:
    """1-based epochs whose moving-average window rose above the previous
    window; empty for non-increasing training curves."""
    flagged = []
    means = [float(np.mean(losses[k:k + window]))
             for k in range(0, len(losses) - window + 1, window)]
    for k in range(1, len(means)):
        if means[k] > means[k - 1] + 1e-12:
            flagged.append((k + 1) * window)
    return flagged


def train(dataset: list, net_config: NetworkConfig, train_config: TrainConfig,
          log_path=None, initial_params: dict | None = None):
    """Fit the configured network to the blocks; returns (params, history).

    History holds one record per epoch with streaming loss/OA/mIoU (computed
    from the logits of each training forward pass). Final parameters pass
    through f32 so a saved checkpoint reproduces them bit-exactly.
    """
    if not dataset:
        raise ContractViolation("training dataset is empty")
    config = effective_config(net_config, train_config)
    for i, block in enumerate(dataset):
        if block.labels is None:
            raise ContractViolation(f"block {i} has no labels")
        if block.features.shape[1] != config.feature_width:
            raise ContractViolation(
                f"block {i} has {block.features.shape[1]} feature columns, "
                f"network expects {config.feature_width}")

    if initial_params is None:
        initial_params = init_model_params(config, train_config.seed)
    params = quantize_params(initial_params)
    plans = [build_plan(config, block.xyz) for block in dataset]
    stream = batch_stream(len(dataset), train_config.epochs,
                          train_config.batch_size, train_config.seed)
    state = adam_init(params) if train_config.optimizer == "adam" else None

    history = []
    log_fh = open(log_path, "w") if log_path is not None else None
    epoch_losses = []
    try:
        for epoch, batches in enumerate(stream, start=1):
            started = time.perf_counter()
            loss_sum = 0.0
            preds, truths = [], []
            for batch in batches:
                for p in params.values():
                    p.grad = None
                with Graph() as graph:
                    total = None
                    for bi in batch:
                        block = dataset[bi]
                        logits = forward(params, config, plans[bi], block.features)
                        preds.append(predict_labels(logits.data))
                        truths.append(block.labels)
                        loss = cross_entropy_loss(logits, block.labels)
                        total = loss if total is None else T.add(total, loss)
                    total = T.scale(total, 1.0 / len(batch))
                    if not np.isfinite(total.item()):
                        where = graph.first_nonfinite()
                        label = where[2] if where else "loss"
                        raise TrainingDiverged(
                            f"non-finite loss in epoch {epoch}; first bad value "
                            f"from {label}")
                    graph.backward(total)
                loss_sum += total.item() * len(batch)
                grads = {name: p.grad for name, p in params.items()}
                if train_config.optimizer == "adam":
                    adam_step(params, grads, state, train_config.learning_rate)
                else:
                    sgd_step(params, grads, train_config.learning_rate)

            epoch_loss = loss_sum / len(dataset)
            epoch_losses.append(epoch_loss)
            report = evaluate(np.concatenate(preds), np.concatenate(truths),
                              config.num_classes)
            record = {"epoch": epoch, "loss": epoch_loss, "oa": report.oa,
                      "miou": report.miou, "per_class_iou": report.per_class_iou,
                      "wall_ms": (time.perf_counter() - started) * 1e3}
            if epoch % LOSS_WINDOW == 0 and loss_regressions(
                    epoch_losses[-2 * LOSS_WINDOW:], LOSS_WINDOW):
                record["flag"] = "loss_regression"
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    return quantize_params(params), history


# ---------------------------------------------------------------------------
# ablation and robustness harnesses


ABLATION_VARIANTS = {
    "full": {},
    "no_cr": {"disable_cr": True},
    "concat_cr": {"concat_cr": True},
    "no_gpm": {"disable_gpm": True},
    "no_am": {"disable_attention": True},
}


def run_ablation(dataset: list, net_config: NetworkConfig,
                 train_config: TrainConfig,
                 variants=("full", "no_cr", "no_gpm", "no_am"),
                 log_dir=None) -> dict:
    """Train each variant on identically ordered data; returns
    variant -> {oa, miou, per_class_iou} measured on the training blocks."""
    results = {}
    for name in variants:
        if name not in ABLATION_VARIANTS:
            raise ContractViolation(
                f"unknown ablation variant {name!r}; expected one of "
                f"{sorted(ABLATION_VARIANTS)}")
        tc = replace(train_config, **ABLATION_VARIANTS[name])
        log_path = None if log_dir is None else f"{log_dir}/train_{name}.jsonl"
        params, _ = train(dataset, net_config, tc, log_path=log_path)
        report = evaluate_params(params, effective_config(net_config, tc), dataset)
        results[name] = {"oa": report.oa, "miou": report.miou,
                         "per_class_iou": report.per_class_iou}
    return results


def run_robustness(params: dict, config: NetworkConfig, cloud: PointCloud,
                   seed: int = 0, scales=(1.0, 0.5),
                   angles=(0.0, math.pi / 10, 2 * math.pi)) -> dict:
    """OA deltas under global scaling and z-rotation of the evaluation cloud.

    Each perturbed cloud is re-partitioned with the same seed, so the
    identity perturbations reproduce the baseline blocks exactly.
    """
    baseline = evaluate_params(params, config,
                               training_blocks(cloud, config, seed))
    rows = []
    for ratio in scales:
        perturbed = perturb_scale(cloud, ratio)
        report = evaluate_params(params, config,
                                 training_blocks(perturbed, config, seed))
        rows.append({"kind": "scale", "value": ratio, "oa": report.oa,
                     "delta": report.oa - baseline.oa})
    for angle in angles:
        perturbed = perturb_rotate_z(cloud, angle)
        report = evaluate_params(params, config,
                                 training_blocks(perturbed, config, seed))
        rows.append({"kind": "rotation", "value": angle, "oa": report.oa,
                     "delta": report.oa - baseline.oa})
    return {"baseline_oa": baseline.oa, "perturbations": rows}
