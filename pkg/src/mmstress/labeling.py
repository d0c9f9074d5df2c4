"""Self-report supervision: summed-Gaussian stress signal and episode labels.

Each self-report becomes one Gaussian bump centred on the report time (or on
the midpoint of a reported span), 30 minutes wide, with peak height equal to
the reported intensity.  The bumps are summed into a continuous signal that is
kept in closed form and evaluated exactly at each episode's end point.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

BASE_SIGMA_S = 1800.0
SPAN_REFERENCE_S = 3600.0
LABEL_THRESHOLD = 0.5


class Intensity(enum.IntEnum):
    NONE = 0
    LOW = 1
    MEDIUM = 2
    HIGH = 3

    @classmethod
    def parse(cls, text: str) -> "Intensity":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            valid = ", ".join(m.name.lower() for m in cls)
            raise ValueError(f"unknown intensity {text!r}; expected one of {valid}") from None


@dataclass(frozen=True)
class SelfReport:
    t_start: float
    t_end: Optional[float]
    intensity: Intensity

    def __post_init__(self):
        if self.t_end is not None and self.t_end < self.t_start:
            raise ValueError(f"report ends before it starts: {self.t_start} > {self.t_end}")
        object.__setattr__(self, "intensity", Intensity(self.intensity))


@dataclass(frozen=True)
class GaussianComponent:
    mu: float
    sigma: float
    amplitude: float


@dataclass
class SupervisionSignal:
    participant_id: str
    components: list = field(default_factory=list)

    def __post_init__(self):
        for comp in self.components:
            if not comp.sigma > 0:
                raise ValueError(f"component sigma must be positive, got {comp.sigma}")

    def __call__(self, t):
        return evaluate_signal(self, t)


def report_to_gaussian(report: SelfReport) -> GaussianComponent:
    """Map one self-report to ``(mu, sigma, amplitude)``.

    Spans longer than an hour widen sigma in proportion to their duration:
    ``sigma = 1800 s * max(1, duration / 3600 s)``.
    """
    if report.t_end is None:
        mu, duration = float(report.t_start), 0.0
    else:
        mu = (report.t_start + report.t_end) / 2.0
        duration = float(report.t_end - report.t_start)
    sigma = BASE_SIGMA_S * max(1.0, duration / SPAN_REFERENCE_S)
    return GaussianComponent(mu, sigma, float(int(report.intensity)))


def build_signal(participant_id: str, reports: Iterable[SelfReport]) -> SupervisionSignal:
    return SupervisionSignal(participant_id, [report_to_gaussian(r) for r in reports])


def evaluate_signal(signal: SupervisionSignal, t):
    """Exact value of the summed-Gaussian signal at ``t`` (scalar or array)."""
    t_arr = np.asarray(t, dtype=np.float64)
    total = np.zeros_like(t_arr)
    for comp in signal.components:
        d = (t_arr - comp.mu) / comp.sigma
        total = total + comp.amplitude * np.exp(-0.5 * d * d)
    if total.ndim == 0:
        return float(total)
    return total


def label_episode(signal: SupervisionSignal, episode) -> bool:
    """True iff the signal at the episode end point is strictly above 0.5."""
    return bool(evaluate_signal(signal, episode.t_end) > LABEL_THRESHOLD)


def label_episodes(signals: dict, episodes: Sequence) -> list:
    """Label ``episodes`` in place using ``{participant_id: SupervisionSignal}``.

    Returns the list of signal values at each episode end.
    """
    by_participant: dict = {}
    for idx, ep in enumerate(episodes):
        by_participant.setdefault(ep.participant_id, []).append(idx)
    out = [0.0] * len(episodes)
    for pid, idxs in by_participant.items():
        signal = signals.get(pid) or SupervisionSignal(pid)
        ends = np.array([episodes[i].t_end for i in idxs], dtype=np.float64)
        vals = np.atleast_1d(evaluate_signal(signal, ends))
        for i, v in zip(idxs, vals):
            out[i] = float(v)
            episodes[i].label = bool(v > LABEL_THRESHOLD)
    return out

