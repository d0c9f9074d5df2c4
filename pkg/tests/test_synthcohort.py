import json
import filecmp

import numpy as np
import pytest

from mmstress.labeling import Intensity
from mmstress.pipeline import WindowConfig, labelled_episodes
from mmstress.synthcohort import (GROUND_TRUTH_FILE, SynthConfig, corrupt_modality, generate,
                                  generate_cohort, schema_for)
from mmstress.timeline import DEFAULT_SCHEMA, extract_episodes, load_cohort

SMALL = dict(participants=3, days=2.0, check_balance=False)


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)

    def walk(c):
        if c.left_only or c.right_only or c.diff_files or c.funny_files:
            return False
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        return not mismatch and not errors and all(walk(s) for s in c.subdirs.values())
    return walk(cmp)


class TestDeterminism:
    def test_same_seed_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            generate(SynthConfig(seed=7, **SMALL), tmp_path / d)
        assert tree_equal(tmp_path / "a", tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        generate(SynthConfig(seed=1, **SMALL), tmp_path / "a")
        generate(SynthConfig(seed=2, **SMALL), tmp_path / "b")
        assert not tree_equal(tmp_path / "a", tmp_path / "b")

    def test_participant_streams_independent_of_count(self):
        few, _ = generate_cohort(SynthConfig(seed=3, **SMALL))
        more, _ = generate_cohort(SynthConfig(seed=3, participants=5, days=2.0, check_balance=False))
        a, b = few.participants["P02"].streams["daily"], more.participants["P02"].streams["daily"]
        assert np.array_equal(a.values, b.values) and np.array_equal(a.timestamps, b.timestamps)


class TestContent:
    def test_layout_and_schema(self, tmp_path):
        generate(SynthConfig(**SMALL), tmp_path)
        dirs = sorted(p.name for p in tmp_path.iterdir() if p.is_dir())
        assert dirs == ["P01", "P02", "P03"]
        cohort = load_cohort(tmp_path, DEFAULT_SCHEMA)
        assert set(cohort.participants["P01"].streams) == {m.name for m in DEFAULT_SCHEMA}
        assert schema_for(SynthConfig()) == DEFAULT_SCHEMA

    def test_default_cohort_size(self):
        cohort, truth = generate_cohort(SynthConfig())
        assert len(cohort.participants) == 14
        assert 0.2 <= truth.stressed_fraction <= 0.6

    def test_no_events_no_stress(self):
        cohort, truth = generate_cohort(SynthConfig(event_rate_per_day=0.0, **SMALL))
        episodes, values = labelled_episodes(cohort, WindowConfig())
        assert episodes and not any(e.label for e in episodes)
        assert truth.stressed_fraction == 0.0 and max(values) == 0.0

    def test_reports_follow_events(self):
        cfg = SynthConfig(seed=4, **SMALL)
        cohort, truth = generate_cohort(cfg)
        for pid, events in truth.events.items():
            reports = cohort.participants[pid].reports
            assert len(reports) == len(events) > 0
            for r, e in zip(reports, events):
                mid = r.t_start if r.t_end is None else 0.5 * (r.t_start + r.t_end)
                assert e.start - cfg.report_jitter_s <= mid <= e.end + cfg.report_jitter_s
                assert r.intensity == e.intensity and r.intensity != Intensity.NONE

    def test_effect_shifts_event_samples(self):
        cfg = SynthConfig(seed=5, participants=4, days=4.0, check_balance=False, dropout=0.0)
        cfg = cfg.with_effects({"respiration": 2.0})
        cohort, truth = generate_cohort(cfg)
        inside, outside = [], []
        for pid, events in truth.events.items():
            s = cohort.participants[pid].streams["respiration"]
            mask = np.zeros(len(s), dtype=bool)
            for e in events:
                mask |= (s.timestamps >= e.start) & (s.timestamps < e.end)
            inside.append(s.values[mask, 0])
            outside.append(s.values[~mask, 0])
        gap = np.concatenate(inside).mean() - np.concatenate(outside).mean()
        # planted shift is 2 std of 2.0
        assert 3.0 < gap < 5.0

    def test_noise_modality_carries_no_effect(self):
        cfg = SynthConfig(seed=5, noise_modalities=["daily"], **SMALL)
        cohort, _ = generate_cohort(cfg)
        v = np.concatenate([p.streams["daily"].values[:, 0] for p in cohort.participants.values()])
        assert abs(v.mean() - 72.0) < 1.0

    def test_ground_truth_file(self, tmp_path):
        truth = generate(SynthConfig(**SMALL), tmp_path)
        doc = json.loads((tmp_path / GROUND_TRUTH_FILE).read_text())
        assert doc == truth.to_dict()
        assert set(doc["participants"]) == {"P01", "P02", "P03"}
        first = doc["participants"]["P01"][0]
        assert set(first) == {"start", "end", "intensity"} and first["end"] > first["start"]

    def test_artifacts_add_variance(self):
        clean, _ = generate_cohort(SynthConfig(seed=2, **SMALL))
        noisy, _ = generate_cohort(SynthConfig(seed=2, artifact_rate_per_day=4.0, **SMALL))
        sd = lambda c: np.concatenate([p.streams["pulse_ox"].values[:, 0] for p in c.participants.values()]).std()
        assert sd(noisy) > sd(clean)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(participants=0), dict(days=0.0), dict(event_rate_per_day=-1.0),
        dict(event_minutes=[0.0, 10.0]), dict(intensity_probs=[0.5, 0.5, 0.5]),
        dict(ar_coefficient=1.0), dict(dropout=1.0), dict(noise_modalities=["ecg"]),
        dict(artifact_minutes=[10.0, 5.0]),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)

    def test_balance_guard(self):
        with pytest.raises(ValueError, match="stressed-episode fraction"):
            generate_cohort(SynthConfig(participants=2, days=2.0, event_rate_per_day=40.0))

    def test_with_effects_zeroes_unnamed(self):
        cfg = SynthConfig().with_effects({"stress": 1.5})
        assert {m.name: m.effect for m in cfg.modalities} == {
            "daily": 0.0, "pulse_ox": 0.0, "respiration": 0.0, "stress": 1.5}


class TestCorrupt:
    @pytest.fixture
    def cohort_dir(self, tmp_path):
        generate(SynthConfig(seed=9, **SMALL), tmp_path / "c")
        return tmp_path / "c"

    def test_zero_fraction_is_identity(self, cohort_dir, tmp_path):
        generate(SynthConfig(seed=9, **SMALL), tmp_path / "ref")
        corrupt_modality(cohort_dir, "daily", "noise", 0.0)
        assert tree_equal(cohort_dir, tmp_path / "ref")

    def test_full_drop_marks_every_step_missing(self, cohort_dir):
        cohort = corrupt_modality(cohort_dir, "stress", "drop", 1.0)
        reloaded = load_cohort(cohort_dir, DEFAULT_SCHEMA)
        assert all(len(p.streams["stress"]) == 0 for p in reloaded.participants.values())
        episodes = extract_episodes(cohort)
        assert episodes
        for ep in episodes:
            assert np.all(ep.windows["stress"][:, -1] == 1.0)
            assert np.any(ep.windows["daily"][:, -1] == 0.0)

    def test_noise_keeps_timestamps(self, cohort_dir):
        before = load_cohort(cohort_dir, DEFAULT_SCHEMA)
        after = corrupt_modality(cohort_dir, "daily", "noise", 1.0, seed=1)
        for pid, p in before.participants.items():
            a, b = p.streams["daily"], after.participants[pid].streams["daily"]
            assert np.array_equal(a.timestamps, b.timestamps)
            assert not np.array_equal(a.values, b.values)
            assert np.array_equal(p.streams["stress"].values, after.participants[pid].streams["stress"].values)

    def test_errors(self, cohort_dir):
        with pytest.raises(ValueError, match="unknown modality"):
            corrupt_modality(cohort_dir, "ecg", "drop", 0.5)
        with pytest.raises(ValueError, match="unknown corruption mode"):
            corrupt_modality(cohort_dir, "daily", "blur", 0.5)
        with pytest.raises(ValueError):
            corrupt_modality(cohort_dir, "daily", "drop", 1.5)
