"""Per-participant sensor timelines: ingestion, episode extraction, resampling.

On-disk layout::

    <root>/<participant-id>/<modality-id>.csv   timestamp,<feature names...>
    <root>/<participant-id>/reports.csv         t_start,t_end,intensity

Every episode window is a matrix ``[L_m, d_m + 1]``: the modality's features
resampled onto an even grid plus a trailing missingness column (1 where no raw
sample was close enough to the grid point).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .labeling import Intensity, SelfReport

logger = logging.getLogger(__name__)

REPORTS_FILE = "reports.csv"


class CohortError(ValueError):
    """Malformed or inconsistent cohort data on disk."""


@dataclass(frozen=True)
class ModalitySchema:
    name: str
    features: tuple
    resample_step: float
    window_steps: int

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.resample_step > 0:
            raise ValueError(f"{self.name}: resample_step must be positive")
        if self.window_steps < 1:
            raise ValueError(f"{self.name}: window_steps must be at least 1")

    @property
    def width(self) -> int:
        """Input width including the missingness column."""
        return len(self.features) + 1


DEFAULT_SCHEMA = (
    ModalitySchema(
        "daily",
        ("heart_rate", "floors_climbed", "bmr_kcal", "distance_m", "activity_level", "hrv_aggregate"),
        60.0, 60),
    ModalitySchema("pulse_ox", ("spo2",), 120.0, 30),
    ModalitySchema("respiration", ("respiration_rate",), 120.0, 30),
    ModalitySchema("stress", ("hrv_stress",), 120.0, 30),
)


@dataclass
class ModalityStream:
    participant_id: str
    modality: str
    feature_names: tuple
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.feature_names = tuple(self.feature_names)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(
            len(self.timestamps), len(self.feature_names))
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise CohortError(f"{self.participant_id}/{self.modality}: timestamps not strictly increasing")

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def empty(cls, participant_id: str, schema: ModalitySchema) -> "ModalityStream":
        return cls(participant_id, schema.name, schema.features, np.zeros(0),
                   np.zeros((0, len(schema.features))))


@dataclass
class Participant:
    participant_id: str
    streams: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)

    def time_range(self) -> Optional[tuple]:
        starts = [s.timestamps[0] for s in self.streams.values() if len(s)]
        ends = [s.timestamps[-1] for s in self.streams.values() if len(s)]
        if not starts:
            return None
        return float(min(starts)), float(max(ends))


@dataclass
class Cohort:
    participants: dict
    schema: tuple = DEFAULT_SCHEMA
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        names = {m.name for m in self.schema}
        for p in self.participants.values():
            unknown = set(p.streams) - names
            if unknown:
                raise CohortError(f"{p.participant_id}: modalities {sorted(unknown)} not in schema")
        for pid in self.participants:
            self.split.setdefault(pid, "train")
        if set(self.split) != set(self.participants) or not set(self.split.values()) <= {"train", "test"}:
            raise CohortError("split must assign every participant to train or test")

    def ids(self, split: Optional[str] = None) -> list:
        return [pid for pid in sorted(self.participants) if split is None or self.split[pid] == split]


@dataclass
class Episode:
    participant_id: str
    t_start: float
    t_end: float
    windows: dict
    label: Optional[bool] = None

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"episode must have t_start < t_end, got {self.t_start}, {self.t_end}")


def schema_by_name(schema: Sequence[ModalitySchema]) -> dict:
    return {m.name: m for m in schema}


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def _parse_stream_slow(path: Path, participant_id: str, modality: ModalitySchema) -> tuple:
    """Line-by-line parser used to pinpoint the offending row."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                continue
            if len(row) != len(modality.features) + 1:
                raise CohortError(
                    f"{path}:{lineno}: expected {len(modality.features) + 1} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise CohortError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise CohortError(f"{path}:{lineno}: non-finite value in {row!r}")
            rows.append((lineno, vals))
    return rows


def load_stream(path, participant_id: str, modality: ModalitySchema) -> ModalityStream:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split(",")
    expected = ["timestamp", *modality.features]
    if header != expected:
        raise CohortError(f"{path}:1: header {header} does not match expected {expected}")
    try:
        frame = pd.read_csv(path, dtype=np.float64, float_precision="round_trip")
        data = frame.to_numpy(dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != len(expected) or not np.isfinite(data).all():
            raise ValueError("irregular rows")
        linenos = np.arange(2, len(data) + 2)
    except (ValueError, pd.errors.ParserError):
        rows = _parse_stream_slow(path, participant_id, modality)
        data = np.array([r[1] for r in rows], dtype=np.float64).reshape(-1, len(expected))
        linenos = np.array([r[0] for r in rows])

    order = np.argsort(data[:, 0], kind="stable")
    if len(order) and np.any(order != np.arange(len(order))):
        logger.info("%s: timestamps out of order; sorting %d rows", path, len(order))
    data, linenos = data[order], linenos[order]
    dup = np.flatnonzero(np.diff(data[:, 0]) == 0)
    if dup.size:
        k = dup[0]
        raise CohortError(
            f"{path}:{linenos[k + 1]}: duplicate timestamp {data[k, 0]!r} (also on line {linenos[k]})")
    return ModalityStream(participant_id, modality.name, modality.features, data[:, 0], data[:, 1:])


def load_reports(path) -> list:
    path = Path(path)
    reports = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                if row != ["t_start", "t_end", "intensity"]:
                    raise CohortError(f"{path}:1: unexpected header {row}")
                continue
            if len(row) != 3:
                raise CohortError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                start = float(row[0])
                end = float(row[1]) if row[1].strip() else None
                reports.append(SelfReport(start, end, Intensity.parse(row[2])))
            except ValueError as exc:
                raise CohortError(f"{path}:{lineno}: {exc}") from None
    return reports


def load_cohort(root, schema: Sequence[ModalitySchema] = DEFAULT_SCHEMA) -> Cohort:
    root = Path(root)
    if not root.is_dir():
        raise CohortError(f"cohort directory {root} does not exist")
    by_name = schema_by_name(schema)
    participants = {}
    for pdir in sorted(p for p in root.iterdir() if p.is_dir()):
        pid = pdir.name
        part = Participant(pid)
        for f in sorted(pdir.glob("*.csv")):
            if f.name == REPORTS_FILE:
                part.reports = load_reports(f)
                continue
            if f.stem not in by_name:
                raise CohortError(f"{f}: unknown modality {f.stem!r}; schema has {sorted(by_name)}")
            part.streams[f.stem] = load_stream(f, pid, by_name[f.stem])
        if not part.streams:
            logger.warning("participant %s has no sensor streams", pid)
        participants[pid] = part
    return Cohort(participants, tuple(schema))


def _fmt(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def write_cohort(cohort: Cohort, root) -> None:
    """Write ``cohort`` in the on-disk layout read by :func:`load_cohort`."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for pid in sorted(cohort.participants):
        part = cohort.participants[pid]
        pdir = root / pid
        pdir.mkdir(exist_ok=True)
        for name in sorted(part.streams):
            stream = part.streams[name]
            frame = pd.DataFrame(stream.values, columns=list(stream.feature_names))
            ts = stream.timestamps
            integral = np.all(ts == np.round(ts))
            frame.insert(0, "timestamp", ts.astype(np.int64) if integral else ts)
            frame.to_csv(pdir / f"{name}.csv", index=False, lineterminator="\n")
        with open(pdir / REPORTS_FILE, "w", encoding="utf-8", newline="") as fh:
            fh.write("t_start,t_end,intensity\n")
            for r in part.reports:
                end = "" if r.t_end is None else _fmt(r.t_end)
                fh.write(f"{_fmt(r.t_start)},{end},{r.intensity.name.lower()}\n")


def assign_split(cohort: Cohort, test_fraction: float, seed: int) -> Cohort:
    """Participant-level train/test split from a seeded permutation."""
    ids = sorted(cohort.participants)
    n_test = int(round(test_fraction * len(ids)))
    if len(ids) >= 2:
        n_test = min(max(n_test, 1), len(ids) - 1)
    perm = np.random.default_rng(seed).permutation(len(ids))
    test = {ids[i] for i in perm[:n_test]}
    split = {pid: ("test" if pid in test else "train") for pid in ids}
    return replace(cohort, split=split)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


def resample_window(stream: ModalityStream, t_start: float, t_end: float,
                    schema: ModalitySchema) -> np.ndarray:
    """Resample ``stream`` restricted to ``[t_start, t_end)`` onto ``L_m`` grid points.

    A grid point takes the nearest in-window sample within half a resample
    step (indicator 0); otherwise it carries the last earlier in-window sample
    forward (indicator 1), or is zero-filled (indicator 1) if there is none.
    """
    if not t_start < t_end:
        raise ValueError("resample_window needs t_start < t_end")
    L, d = schema.window_steps, len(schema.features)
    out = np.zeros((L, d + 1))
    out[:, d] = 1.0
    ts = stream.timestamps
    lo, hi = np.searchsorted(ts, [t_start, t_end], side="left")
    if hi <= lo:
        return out
    ts, vals = ts[lo:hi], stream.values[lo:hi]
    grid = t_start + np.arange(L) * ((t_end - t_start) / L)
    right = np.searchsorted(ts, grid, side="left")
    left = right - 1
    r_ok = right < len(ts)
    l_ok = left >= 0
    d_right = np.where(r_ok, ts[np.minimum(right, len(ts) - 1)] - grid, np.inf)
    d_left = np.where(l_ok, grid - ts[np.maximum(left, 0)], np.inf)
    nearest = np.where(d_left <= d_right, left, right)
    found = np.minimum(d_left, d_right) <= schema.resample_step / 2.0
    # last sample at or before the grid point
    prior = np.searchsorted(ts, grid, side="right") - 1
    carry = ~found & (prior >= 0)
    out[found, :d] = vals[nearest[found]]
    out[found, d] = 0.0
    out[carry, :d] = vals[prior[carry]]
    return out


def _episode_starts(t0: float, t1: float, window: float, stride: float) -> np.ndarray:
    if t1 - t0 < window:
        return np.zeros(0)
    n = int(math.floor((t1 - t0 - window) / stride + 1e-9)) + 1
    return t0 + stride * np.arange(n)


def extract_episodes(cohort: Cohort, window_length: float = 3600.0, stride: float = 1800.0,
                     participants: Optional[Iterable[str]] = None) -> list:
    """Slide a window over each participant's covered range and resample every modality.

    A window is kept only when some modality has a raw sample inside it.
    """
    if not window_length > 0 or not stride > 0:
        raise ValueError("window_length and stride must be positive")
    episodes = []
    ids = sorted(cohort.participants) if participants is None else list(participants)
    for pid in ids:
        part = cohort.participants[pid]
        span = part.time_range()
        if span is None:
            continue
        starts = _episode_starts(span[0], span[1], window_length, stride)
        if not len(starts):
            continue
        ends = starts + window_length
        streams = {m.name: part.streams.get(m.name) or ModalityStream.empty(pid, m)
                   for m in cohort.schema}
        occupied = np.zeros(len(starts), dtype=bool)
        for s in streams.values():
            if len(s):
                lo = np.searchsorted(s.timestamps, starts, side="left")
                hi = np.searchsorted(s.timestamps, ends, side="left")
                occupied |= hi > lo
        for t0, t1 in zip(starts[occupied], ends[occupied]):
            windows = {m.name: resample_window(streams[m.name], float(t0), float(t1), m)
                       for m in cohort.schema}
            episodes.append(Episode(pid, float(t0), float(t1), windows))
    return episodes


def stack_windows(episodes: Sequence[Episode], schema: Sequence[ModalitySchema]) -> dict:
    """``{modality: array [N, L_m, d_m + 1]}`` for a list of episodes."""
    out = {}
    for m in schema:
        if episodes:
            out[m.name] = np.stack([ep.windows[m.name] for ep in episodes])
        else:
            out[m.name] = np.zeros((0, m.window_steps, m.width))
    return out


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

_MIN_STD = 1e-8


@dataclass
class Normalizer:
    """Per-modality, per-feature z-scoring statistics (missingness column excluded)."""

    mean: dict
    std: dict

    def to_dict(self) -> dict:
        return {name: {"mean": self.mean[name].tolist(), "std": self.std[name].tolist()}
                for name in self.mean}

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls({k: np.array(v["mean"], dtype=np.float64) for k, v in data.items()},
                   {k: np.array(v["std"], dtype=np.float64) for k, v in data.items()})

    def apply_array(self, name: str, windows: np.ndarray) -> np.ndarray:
        out = np.array(windows, dtype=np.float64, copy=True)
        mu, sd = self.mean[name], self.std[name]
        scale = np.where(sd < _MIN_STD, 1.0, sd)
        out[..., :-1] = (out[..., :-1] - mu) / scale
        return out


def fit_normalizer(train_episodes: Sequence[Episode], schema: Sequence[ModalitySchema]) -> Normalizer:
    """Feature statistics over every grid row of the training episodes."""
    mean, std = {}, {}
    for m in schema:
        if train_episodes:
            rows = np.concatenate([ep.windows[m.name][:, :-1] for ep in train_episodes], axis=0)
            mean[m.name] = rows.mean(axis=0)
            std[m.name] = rows.std(axis=0)
        else:
            mean[m.name] = np.zeros(len(m.features))
            std[m.name] = np.ones(len(m.features))
    return Normalizer(mean, std)


def apply_normalizer(episodes: Sequence[Episode], normalizer: Normalizer) -> list:
    return [replace(ep, windows={name: normalizer.apply_array(name, w)
                                 for name, w in ep.windows.items()})
            for ep in episodes]
