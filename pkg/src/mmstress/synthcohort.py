"""Synthetic multi-modal cohorts with planted stress signatures.

Each participant gets Poisson-distributed stress events.  Every modality is
AR(1) noise around its base mean; inside an event span the modality is shifted
by ``effect`` standard deviations.  Self-reports are derived from the events
with a small timing jitter, so labels built from them line up with the planted
signal.  Nothing here is physiologically realistic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .labeling import Intensity, SelfReport, build_signal, evaluate_signal, LABEL_THRESHOLD
from .timeline import (DEFAULT_SCHEMA, Cohort, ModalitySchema, ModalityStream, Participant,
                       load_cohort, write_cohort)

logger = logging.getLogger(__name__)

DAY_S = 86400.0
GROUND_TRUTH_FILE = "ground_truth.json"
BALANCE_RANGE = (0.2, 0.6)


@dataclass
class ModalitySynth:
    name: str
    mean: list
    std: list
    period_s: float
    effect: float = 0.0

    def __post_init__(self):
        if not self.period_s > 0:
            raise ValueError(f"{self.name}: sampling period must be positive")
        if len(self.mean) != len(self.std):
            raise ValueError(f"{self.name}: mean and std must have the same length")
        if not np.isfinite(self.effect):
            raise ValueError(f"{self.name}: effect must be finite")


def default_modalities() -> list:
    return [
        ModalitySynth("daily", [72.0, 0.4, 1.2, 45.0, 1.5, 48.0],
                      [8.0, 0.6, 0.15, 30.0, 0.8, 12.0], 60.0, 1.0),
        ModalitySynth("pulse_ox", [96.5], [1.2], 120.0, 0.25),
        ModalitySynth("respiration", [15.0], [2.0], 120.0, 0.5),
        ModalitySynth("stress", [32.0], [12.0], 120.0, 0.5),
    ]


@dataclass
class SynthConfig:
    participants: int = 14
    days: float = 14.0
    start_time: float = 1_600_000_000.0
    modalities: list = field(default_factory=default_modalities)
    event_rate_per_day: float = 5.0
    event_minutes: list = field(default_factory=lambda: [20.0, 90.0])
    intensity_probs: list = field(default_factory=lambda: [0.3, 0.4, 0.3])
    span_report_fraction: float = 0.5
    report_jitter_s: float = 300.0
    noise_modalities: list = field(default_factory=list)
    ar_coefficient: float = 0.9
    dropout: float = 0.05
    scale_by_intensity: bool = False
    artifact_rate_per_day: float = 0.0
    artifact_minutes: list = field(default_factory=lambda: [30.0, 180.0])
    artifact_scale: float = 4.0
    check_balance: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.participants < 1 or not self.days > 0:
            raise ValueError("participants and days must be positive")
        if not self.event_rate_per_day >= 0:
            raise ValueError("event rate must be non-negative")
        lo, hi = self.event_minutes
        if not 0 < lo <= hi:
            raise ValueError("event_minutes must be [min, max] with 0 < min <= max")
        probs = np.asarray(self.intensity_probs, dtype=np.float64)
        if probs.shape != (3,) or (probs < 0).any() or not np.isclose(probs.sum(), 1.0):
            raise ValueError("intensity_probs must be three non-negative weights summing to 1")
        if not self.artifact_rate_per_day >= 0 or not self.artifact_scale >= 0:
            raise ValueError("artifact rate and scale must be non-negative")
        if not 0 < self.artifact_minutes[0] <= self.artifact_minutes[1]:
            raise ValueError("artifact_minutes must be [min, max] with 0 < min <= max")
        if not 0 <= self.ar_coefficient < 1 or not 0 <= self.dropout < 1:
            raise ValueError("ar_coefficient and dropout must lie in [0, 1)")
        names = [m.name for m in self.modalities]
        unknown = set(self.noise_modalities) - set(names)
        if unknown:
            raise ValueError(f"noise_modalities {sorted(unknown)} not among {names}")

    def with_effects(self, effects: dict) -> "SynthConfig":
        """Copy with per-modality effects replaced (modalities not named get 0)."""
        mods = [replace(m, effect=float(effects.get(m.name, 0.0))) for m in self.modalities]
        return replace(self, modalities=mods)


@dataclass
class StressEvent:
    start: float
    end: float
    intensity: Intensity


@dataclass
class GroundTruth:
    events: dict
    stressed_fraction: float

    def to_dict(self) -> dict:
        return {
            "stressed_fraction": self.stressed_fraction,
            "participants": {
                pid: [{"start": e.start, "end": e.end, "intensity": e.intensity.name.lower()}
                      for e in evs]
                for pid, evs in sorted(self.events.items())
            },
        }


def schema_for(config: SynthConfig, base: Sequence[ModalitySchema] = DEFAULT_SCHEMA) -> tuple:
    """Schema matching the generator's modalities (feature names from ``base`` when known)."""
    by_name = {m.name: m for m in base}
    out = []
    for m in config.modalities:
        if m.name in by_name and len(by_name[m.name].features) == len(m.mean):
            out.append(by_name[m.name])
        else:
            feats = tuple(f"{m.name}_{k}" for k in range(len(m.mean)))
            out.append(ModalitySchema(m.name, feats, m.period_s, max(1, int(round(3600 / m.period_s)))))
    return tuple(out)


def _draw_events(rng: np.random.Generator, config: SynthConfig, t0: float, t1: float) -> list:
    events = []
    if config.event_rate_per_day <= 0:
        return events
    mean_gap = DAY_S / config.event_rate_per_day
    lo, hi = config.event_minutes
    t = t0
    while True:
        t += rng.exponential(mean_gap)
        duration = rng.uniform(lo, hi) * 60.0
        level = Intensity(1 + int(rng.choice(3, p=config.intensity_probs)))
        if t + duration > t1:
            break
        events.append(StressEvent(float(np.round(t)), float(np.round(t + duration)), level))
    return events


def _reports(rng: np.random.Generator, config: SynthConfig, events: list) -> list:
    reports = []
    for e in events:
        jitter = float(np.round(rng.uniform(-config.report_jitter_s, config.report_jitter_s)))
        if rng.random() < config.span_report_fraction:
            reports.append(SelfReport(e.start + jitter, e.end + jitter, e.intensity))
        else:
            reports.append(SelfReport((e.start + e.end) / 2.0 + jitter, None, e.intensity))
    return reports


def _artifact_spans(rng: np.random.Generator, config: SynthConfig, t0: float, t1: float) -> list:
    lo, hi = config.artifact_minutes
    count = rng.poisson(config.artifact_rate_per_day * (t1 - t0) / DAY_S)
    starts = rng.uniform(t0, t1, size=count)
    ends = starts + rng.uniform(lo, hi, size=count) * 60.0
    return list(zip(starts, ends))


def _in_spans(ts: np.ndarray, spans) -> np.ndarray:
    mask = np.zeros(len(ts), dtype=bool)
    for start, end in spans:
        lo, hi = np.searchsorted(ts, [start, end], side="left")
        mask[lo:hi] = True
    return mask


def _stream(rng: np.random.Generator, config: SynthConfig, synth: ModalitySynth,
            features: tuple, pid: str, t0: float, t1: float, events: list) -> ModalityStream:
    n = int((t1 - t0) // synth.period_s)
    ts = t0 + synth.period_s * np.arange(n)
    ts = ts + np.round(rng.uniform(-0.1, 0.1, size=n) * synth.period_s)
    keep = rng.random(n) >= config.dropout
    pure_noise = synth.name in config.noise_modalities
    a = config.ar_coefficient
    burn = 50
    cols = []
    for mu, sd in zip(synth.mean, synth.std):
        white = rng.standard_normal(n + burn)
        if pure_noise or a == 0:
            base = white[burn:]
        else:
            base = lfilter([np.sqrt(1.0 - a * a)], [1.0, -a], white)[burn:]
        cols.append(mu + sd * base)
    values = np.stack(cols, axis=1)
    if not pure_noise and synth.effect != 0.0:
        shift = synth.effect * np.asarray(synth.std)
        for e in events:
            # Medium is the nominal effect when scaling by intensity
            gain = int(e.intensity) / 2.0 if config.scale_by_intensity else 1.0
            values[_in_spans(ts, [(e.start, e.end)])] += gain * shift
    if config.artifact_rate_per_day > 0:
        # sensor artifacts: stretches where this modality reads high-variance junk
        hit = _in_spans(ts, _artifact_spans(rng, config, t0, t1))
        junk = np.asarray(synth.mean) + config.artifact_scale * np.asarray(synth.std) \
            * rng.standard_normal((int(hit.sum()), len(synth.mean)))
        values[hit] = junk
    values = np.round(values, 4)
    return ModalityStream(pid, synth.name, features, ts[keep], values[keep])


def generate_cohort(config: SynthConfig, schema: Optional[Sequence[ModalitySchema]] = None) -> tuple:
    """Build the cohort in memory; returns ``(Cohort, GroundTruth)``."""
    schema = tuple(schema) if schema is not None else schema_for(config)
    feats = {m.name: m.features for m in schema}
    t0 = float(config.start_time)
    t1 = t0 + config.days * DAY_S
    participants, events_by = {}, {}
    ends, labels = [], []
    for k in range(config.participants):
        pid = f"P{k + 1:02d}"
        # per-participant sub-seed: output does not depend on generation order
        rng = np.random.default_rng([config.seed, k])
        events = _draw_events(rng, config, t0, t1)
        reports = _reports(rng, config, events)
        streams = {synth.name: _stream(rng, config, synth, feats[synth.name], pid, t0, t1, events)
                   for synth in config.modalities}
        participants[pid] = Participant(pid, streams, reports)
        events_by[pid] = events
        # episode end points under the default 60 min window / 30 min stride
        grid = np.arange(t0 + 3600.0, t1 + 1e-9, 1800.0)
        vals = np.atleast_1d(evaluate_signal(build_signal(pid, reports), grid))
        labels.append(vals > LABEL_THRESHOLD)
        ends.append(grid)
    frac = float(np.concatenate(labels).mean()) if labels else 0.0
    lo, hi = BALANCE_RANGE
    if config.check_balance and config.event_rate_per_day > 0 and not lo <= frac <= hi:
        raise ValueError(
            f"stressed-episode fraction {frac:.3f} outside [{lo}, {hi}]; adjust event_rate_per_day")
    return Cohort(participants, schema), GroundTruth(events_by, frac)


def generate(config: SynthConfig, out_dir, schema: Optional[Sequence[ModalitySchema]] = None) -> GroundTruth:
    """Write a synthetic cohort under ``out_dir`` plus ``ground_truth.json``."""
    cohort, truth = generate_cohort(config, schema)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_cohort(cohort, out)
        (out / GROUND_TRUTH_FILE).write_text(json.dumps(truth.to_dict(), indent=1) + "\n",
                                            encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write cohort to {out}: {exc}") from exc
    return truth


def corrupt_modality(cohort_path, modality: str, mode: str, fraction: float,
                     seed: int = 0, schema: Sequence[ModalitySchema] = DEFAULT_SCHEMA,
                     noise_scale: float = 5.0) -> Cohort:
    """Damage one modality of an on-disk cohort in place and return the result.

    ``drop`` deletes a random ``fraction`` of the samples; ``noise`` replaces
    that fraction of values with Gaussian noise ``noise_scale`` times the
    feature's standard deviation.
    """
    if mode not in ("drop", "noise"):
        raise ValueError(f"unknown corruption mode {mode!r}; expected 'drop' or 'noise'")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    cohort = load_cohort(cohort_path, schema)
    if modality not in {m.name for m in cohort.schema}:
        raise ValueError(f"unknown modality {modality!r}")
    if fraction == 0.0:
        return cohort
    for k, pid in enumerate(sorted(cohort.participants)):
        part = cohort.participants[pid]
        stream = part.streams.get(modality)
        if stream is None or not len(stream):
            continue
        rng = np.random.default_rng([seed, k, 7])
        n = len(stream)
        hit = rng.random(n) < fraction if fraction < 1.0 else np.ones(n, dtype=bool)
        if mode == "drop":
            part.streams[modality] = ModalityStream(pid, modality, stream.feature_names,
                                                    stream.timestamps[~hit], stream.values[~hit])
        else:
            values = stream.values.copy()
            mu = values.mean(axis=0)
            sd = np.maximum(values.std(axis=0), 1e-6)
            noise = mu + noise_scale * sd * rng.standard_normal(values.shape)
            values[hit] = np.round(noise[hit], 4)
            part.streams[modality] = ModalityStream(pid, modality, stream.feature_names,
                                                    stream.timestamps, values)
    for pdir in Path(cohort_path).iterdir():
        if pdir.is_dir() and pdir.name in cohort.participants:
            target = pdir / f"{modality}.csv"
            if target.exists():
                target.unlink()
    write_cohort(cohort, cohort_path)
    return cohort


def config_to_dict(config: SynthConfig) -> dict:
    return asdict(config)
