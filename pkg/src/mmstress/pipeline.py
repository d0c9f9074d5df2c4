"""End-to-end experiment harness: cohort on disk -> labelled, normalised episode
arrays -> trained model -> metrics and artifacts."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .labeling import build_signal, label_episodes
from .model import ModelDims, save_checkpoint
from .timeline import (Cohort, CohortError, Episode, Normalizer, apply_normalizer, assign_split,
                       extract_episodes, fit_normalizer, load_cohort, stack_windows)
from .training import (SCHEMES, MetricsReport, TrainConfig, TrainingDataError, evaluate, train)

logger = logging.getLogger(__name__)


@dataclass
class WindowConfig:
    length_s: float = 3600.0
    stride_s: float = 1800.0
    test_fraction: float = 0.3

    def __post_init__(self):
        if not self.length_s > 0 or not self.stride_s > 0:
            raise ValueError("window length and stride must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")


@dataclass
class PreparedData:
    schema: tuple
    split: dict
    normalizer: Normalizer
    train_episodes: list
    test_episodes: list
    train_windows: dict
    train_labels: np.ndarray
    test_windows: dict
    test_labels: np.ndarray
    signal_values: dict

    @property
    def majority_class(self) -> int:
        return int(np.mean(self.train_labels) > 0.5)

    def majority_baseline(self) -> float:
        if not len(self.test_labels):
            return float("nan")
        return float(np.mean(self.test_labels == self.majority_class))


def labelled_episodes(cohort: Cohort, window: WindowConfig) -> tuple:
    """Extract episodes for every participant and label them; returns ``(episodes, signal values)``."""
    episodes = extract_episodes(cohort, window.length_s, window.stride_s)
    signals = {pid: build_signal(pid, p.reports) for pid, p in cohort.participants.items()}
    values = label_episodes(signals, episodes)
    return episodes, values


def prepare(cohort: Cohort, window: WindowConfig, split_seed: int,
            split: Optional[dict] = None, normalizer: Optional[Normalizer] = None) -> PreparedData:
    """Label, split and normalise a cohort.

    A saved ``split`` and ``normalizer`` (from a checkpoint) replace the
    seeded split and the train-fitted statistics.
    """
    if split is None:
        cohort = assign_split(cohort, window.test_fraction, split_seed)
    else:
        missing = sorted(set(cohort.participants) - set(split))
        if missing:
            raise CohortError(f"participants {missing} are not in the saved split")
        cohort = replace(cohort, split={pid: split[pid] for pid in cohort.participants})
    episodes, values = labelled_episodes(cohort, window)
    train_eps = [e for e in episodes if cohort.split[e.participant_id] == "train"]
    test_eps = [e for e in episodes if cohort.split[e.participant_id] == "test"]
    if normalizer is None:
        normalizer = fit_normalizer(train_eps, cohort.schema)
    train_n = apply_normalizer(train_eps, normalizer)
    test_n = apply_normalizer(test_eps, normalizer)
    sig = {(e.participant_id, e.t_start): v for e, v in zip(episodes, values)}
    return PreparedData(
        schema=cohort.schema,
        split=dict(cohort.split),
        normalizer=normalizer,
        train_episodes=train_n,
        test_episodes=test_n,
        train_windows=stack_windows(train_n, cohort.schema),
        train_labels=np.array([int(e.label) for e in train_n], dtype=np.int64),
        test_windows=stack_windows(test_n, cohort.schema),
        test_labels=np.array([int(e.label) for e in test_n], dtype=np.int64),
        signal_values=sig,
    )


@dataclass
class RunResult:
    model: object
    metrics: MetricsReport
    history: list
    data: PreparedData
    config: TrainConfig


def run(data: PreparedData, config: TrainConfig, dims: ModelDims = ModelDims(),
        on_step: Optional[Callable] = None) -> RunResult:
    if not len(data.test_labels):
        raise TrainingDataError("test split is empty")
    result = train(data.schema, data.train_windows, data.train_labels, config, dims, on_step)
    metrics = evaluate(result.model, data.test_windows, data.test_labels, config.eval_chunk)
    metrics.majority_baseline = data.majority_baseline()
    metrics.loss_curve = [h["train_loss"] for h in result.history]
    return RunResult(result.model, metrics, result.history, data, config)


def run_from_disk(cohort_dir, schema, window: WindowConfig, config: TrainConfig,
                  dims: ModelDims = ModelDims()) -> RunResult:
    cohort = load_cohort(cohort_dir, schema)
    return run(prepare(cohort, window, config.seed), config, dims)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def metrics_document(result: RunResult) -> dict:
    doc = {"scheme": result.config.scheme}
    doc.update(result.metrics.to_dict())
    return doc


def write_artifacts(result: RunResult, out_dir, meta: Optional[dict] = None) -> dict:
    """Write metrics.json, loss_curve.csv, attention_means.csv and checkpoint.json.

    ``meta`` entries are stored in the checkpoint next to scheme, seed and split.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.json",
        "loss_curve": out / "loss_curve.csv",
        "attention_means": out / "attention_means.csv",
        "checkpoint": out / "checkpoint.json",
    }
    paths["metrics"].write_text(json.dumps(metrics_document(result), indent=2, sort_keys=True) + "\n",
                                encoding="utf-8")
    components = sorted({k for h in result.history for k in h} - {"epoch", "stage", "train_loss"})
    with open(paths["loss_curve"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "stage", "train_loss", *components])
        for h in result.history:
            w.writerow([h["epoch"], h["stage"], repr(h["train_loss"]),
                        *[repr(h[c]) if c in h else "" for c in components]])
    write_attention_means(result.metrics.attention_means, paths["attention_means"])
    save_checkpoint(paths["checkpoint"], result.model, result.data.normalizer,
                    meta={**(meta or {}), "scheme": result.config.scheme, "seed": result.config.seed,
                          "split": result.data.split, "loss_curve": result.metrics.loss_curve})
    return paths


def write_attention_means(means: Optional[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modality", "mean_alpha"])
        for name, value in (means or {}).items():
            w.writerow([name, repr(value)])


def write_labels(episodes: Sequence[Episode], values: Sequence[float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "t_start", "t_end", "signal_at_end", "label"])
        for e, v in zip(episodes, values):
            w.writerow([e.participant_id, repr(e.t_start), repr(e.t_end), repr(float(v)),
                        "True" if e.label else "False"])


def scheme_config(base: TrainConfig, scheme: str, **overrides) -> TrainConfig:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    return replace(base, scheme=scheme, **overrides)
