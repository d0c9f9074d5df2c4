"""Optimisation loop for the four training schemes, metrics, and the optimiser."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .model import (EarlyFusionModel, LateFusionModel, ModelDims, ModelParams, fuse_windows,
                    init_classifier)
from .objectives import ContrastiveConfig, ProjectionHead, combined_loss

logger = logging.getLogger(__name__)

SCHEMES = ("supervised-early-fusion", "supervised-late-fusion", "pretrain-finetune", "regularized")
CLASS_NAMES = ("non-stressed", "stressed")


class NumericalError(RuntimeError):
    """NaN or infinite values during optimisation."""


class TrainingDataError(ValueError):
    pass


@dataclass
class TrainConfig:
    scheme: str = "regularized"
    epochs: int = 60
    pretrain_epochs: int = 30
    finetune_epochs: int = 30
    batch_size: int = 16
    steps_per_epoch: Optional[int] = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_chunk: int = 256
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; valid schemes: {', '.join(SCHEMES)}")
        if min(self.epochs, self.pretrain_epochs, self.finetune_epochs) < 1:
            raise ValueError("epoch counts must be at least 1")
        if self.batch_size < 2 and self.scheme in ("pretrain-finetune", "regularized"):
            raise ValueError("contrastive schemes need batch_size >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive or null")


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls({n: np.zeros_like(p.value) for n, p in params.items()},
                   {n: np.zeros_like(p.value) for n, p in params.items()})


def step(params: ModelParams, grads: dict, state: AdamState, lr: float = 1e-3,
         beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ModelParams:
    """One bias-corrected adaptive-moment update, applied in place.

    ``grads`` maps parameter names to arrays.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    precision: list
    recall: list
    confusion: list
    n_episodes: int
    majority_baseline: Optional[float] = None
    loss_curve: list = field(default_factory=list)
    attention_means: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": dict(zip(CLASS_NAMES, self.precision)),
            "recall": dict(zip(CLASS_NAMES, self.recall)),
            "confusion": self.confusion,
            "n_episodes": self.n_episodes,
            "majority_baseline": self.majority_baseline,
            "loss_curve": self.loss_curve,
            "attention_means": self.attention_means,
        }


def metrics_from_predictions(labels, predicted, n_classes: int = 2) -> MetricsReport:
    labels = np.asarray(labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot compute metrics on an empty episode set")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    tp = np.diag(confusion).astype(np.float64)
    col = confusion.sum(axis=0)
    row = confusion.sum(axis=1)
    precision = np.divide(tp, col, out=np.zeros(n_classes), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros(n_classes), where=row > 0)
    return MetricsReport(
        accuracy=float(tp.sum() / len(labels)),
        precision=[float(x) for x in precision],
        recall=[float(x) for x in recall],
        confusion=confusion.tolist(),
        n_episodes=int(len(labels)),
    )


def evaluate(model, windows: dict, labels, chunk: int = 256) -> MetricsReport:
    """Accuracy, per-class precision/recall, confusion; attention means for late fusion."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty episode set")
    probs, alpha = model.predict(windows, chunk=chunk)
    report = metrics_from_predictions(labels, probs.argmax(axis=1), model.dims.n_classes)
    if alpha is not None:
        report.attention_means = {m: float(v) for m, v in zip(model.modalities, alpha.mean(axis=0))}
    return report


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    history: list
    steps: int


def _stages(config: TrainConfig) -> list:
    if config.scheme == "pretrain-finetune":
        return [("contrastive-only", config.pretrain_epochs), ("supervised", config.finetune_epochs)]
    if config.scheme == "regularized":
        return [("regularized", config.epochs)]
    return [("supervised", config.epochs)]


def build_model(schema, dims: ModelDims, config: TrainConfig):
    if config.scheme == "supervised-early-fusion":
        return EarlyFusionModel(schema, dims, seed=config.seed)
    return LateFusionModel(schema, dims, seed=config.seed)


def _batches(rng: np.random.Generator, n: int, config: TrainConfig) -> list:
    perm = rng.permutation(n)
    out = [perm[lo: lo + config.batch_size] for lo in range(0, n, config.batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    if config.steps_per_epoch is not None:
        out = out[: config.steps_per_epoch]
    return out


def train(schema, windows: dict, labels, config: TrainConfig, dims: ModelDims = ModelDims(),
          on_step: Optional[Callable] = None) -> TrainResult:
    """Fit a model on ``windows`` (``{modality: [N, L_m, w_m]}``) and 0/1 ``labels``.

    ``on_step`` is called before every parameter update with a dict holding the
    step index, stage, batch indices, loss parts and the model.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise TrainingDataError("training split is empty")
    if n < 2:
        raise TrainingDataError("training split needs at least two episodes")
    if len(np.unique(labels)) < 2:
        raise TrainingDataError(
            f"training labels are all class {int(labels[0])}; adjust the event rate, "
            "window placement or split so both classes appear")

    model = build_model(schema, dims, config)
    params = model.params
    shuffle_rng = np.random.default_rng([config.seed, 1])
    head = ProjectionHead(params) if "proj.l1.w" in params else None
    if model.kind == "early":
        inputs = fuse_windows(windows, model.schema)
    else:
        inputs = windows

    history = []
    global_step = 0
    epoch_index = 0
    for stage_no, (objective, epochs) in enumerate(_stages(config)):
        if stage_no > 0:
            # fine-tuning starts from a freshly initialised classifier
            init_classifier(params, dims, np.random.default_rng([config.seed, 2]))
        state = AdamState.zeros(params)
        for _ in range(epochs):
            epoch_index += 1
            totals, parts_acc = [], {}
            for idx in _batches(shuffle_rng, n, config):
                if model.kind == "early":
                    probs = model.forward_fused(inputs[idx])
                    latent = None
                else:
                    latent, probs = model.forward({k: v[idx] for k, v in inputs.items()})
                total, parts = combined_loss(latent, probs, labels[idx], config.contrastive,
                                             objective, head)
                value = float(total.value)
                if not np.isfinite(value):
                    raise NumericalError(f"loss became {value} at step {global_step} ({objective})")
                tensors = list(params.tensors.values())
                grad_map = ad.backward(total, tensors)
                grads = {name: grad_map[t.node_id] for name, t in params.items()}
                if on_step is not None:
                    on_step({"step": global_step, "epoch": epoch_index, "stage": objective,
                             "batch": idx, "total": value, "parts": parts, "model": model})
                step(params, grads, state, config.learning_rate, config.beta1, config.beta2,
                     config.adam_eps)
                global_step += 1
                totals.append(value)
                for k, v in parts.items():
                    parts_acc.setdefault(k, []).append(v)
            entry = {"epoch": epoch_index, "stage": objective,
                     "train_loss": float(np.mean(totals)) if totals else float("nan")}
            for k, v in parts_acc.items():
                entry[k] = float(np.mean(v))
            history.append(entry)
            logger.debug("epoch %d %s loss %.5f", epoch_index, objective, entry["train_loss"])
    return TrainResult(model, history, global_step)
