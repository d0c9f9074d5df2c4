import json
import re

import numpy as np
import pytest

from mmstress import autodiff as ad
from mmstress import cli
from mmstress.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, RunConfig, build_parser, main
from mmstress.model import SMALL_DIMS

from test_synthcohort import tree_equal


def small_config(tmp_path, **train):
    doc = RunConfig().to_dict()
    doc["cohort"] = str(tmp_path / "cohort")
    doc["out"] = str(tmp_path / "run")
    doc["synth"].update(participants=4, days=2.0, check_balance=False, seed=3)
    doc["train"].update(epochs=2, pretrain_epochs=1, finetune_epochs=1, steps_per_epoch=3, **train)
    doc["model"] = dict(SMALL_DIMS.__dict__)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def workspace(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == EXIT_OK
    return tmp_path, cfg


class TestConfig:
    def test_print_defaults_round_trip(self, tmp_path, capsys):
        assert main(["--print-defaults"]) == EXIT_OK
        text = capsys.readouterr().out
        path = tmp_path / "defaults.json"
        path.write_text(text)
        assert main(["config", "--config", str(path)]) == EXIT_OK
        assert capsys.readouterr().out == text
        assert json.loads(text)["contrastive"] == {"temperature": 0.1, "lambda_reg": 0.1}

    @pytest.mark.parametrize("patch", [
        {"bogus": 1},
        {"train": {"learning_rat": 0.1}},
        {"synth": {"modalities": [{"name": "daily", "mean": [0.0], "std": [1.0], "period_s": 60.0,
                                   "colour": "red"}]}},
        {"train": {"contrastive": {"temperature": 0.5}}},
    ])
    def test_unknown_keys_rejected(self, tmp_path, capsys, patch):
        doc = RunConfig().to_dict()
        for key, value in patch.items():
            if isinstance(value, dict) and isinstance(doc.get(key), dict):
                doc[key].update(value)
            else:
                doc[key] = value
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        assert main(["config", "--config", str(path)]) == EXIT_USAGE
        assert "error" in capsys.readouterr().err

    def test_bad_value_type(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"epochs": "many"}}))
        assert main(["config", "--config", str(path)]) == EXIT_USAGE

    def test_missing_config_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert main(["train", "--config", str(missing)]) == EXIT_USAGE
        assert str(missing) in capsys.readouterr().err

    def test_invalid_scheme(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--scheme", "fancy"])
        assert exc.value.code == EXIT_USAGE

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_help_lists_every_flag(self):
        parser = build_parser()
        subs = parser._subparsers._group_actions[0].choices
        for name, sub in subs.items():
            text = sub.format_help()
            for action in sub._actions:
                for flag in action.option_strings:
                    assert flag in text, (name, flag)
        top = parser.format_help()
        for name in subs:
            assert name in top


class TestSynth:
    def test_writes_participants(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "c")]) == EXIT_OK
        dirs = [p for p in (tmp_path / "c").iterdir() if p.is_dir()]
        assert len(dirs) == 14
        assert "14 participants" in capsys.readouterr().out

    def test_seed_flag_deterministic(self, tmp_path):
        cfg = small_config(tmp_path)
        for d in ("a", "b"):
            assert main(["synth", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / d)]) == EXIT_OK
        assert main(["synth", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "c")]) == EXIT_OK
        assert tree_equal(tmp_path / "a", tmp_path / "b")
        assert not tree_equal(tmp_path / "a", tmp_path / "c")


class TestPipelineCommands:
    def test_labels(self, workspace):
        tmp, cfg = workspace
        assert main(["labels", "--config", str(cfg)]) == EXIT_OK
        lines = (tmp / "run" / "labels.csv").read_text().splitlines()
        assert len(lines) > 4 * 80

    def test_train_eval_attention(self, workspace, capsys):
        tmp, cfg = workspace
        assert main(["train", "--config", str(cfg), "--scheme", "regularized"]) == EXIT_OK
        out = capsys.readouterr().out
        assert re.search(r"accuracy \d\.\d{4}", out) and "mean attention" in out
        run = tmp / "run"
        metrics = json.loads((run / "metrics.json").read_text())
        assert metrics["scheme"] == "regularized" and len(metrics["loss_curve"]) == 2

        assert main(["eval", "--config", str(cfg), "--checkpoint", str(run / "checkpoint.json")]) == EXIT_OK
        assert (run / "eval_metrics.json").read_bytes() == (run / "metrics.json").read_bytes()

        assert main(["attention", "--config", str(cfg), "--checkpoint", str(run / "checkpoint.json")]) == EXIT_OK
        rows = (run / "attention_means.csv").read_text().splitlines()[1:]
        assert len(rows) == 4
        assert abs(sum(float(r.split(",")[1]) for r in rows) - 1.0) < 1e-9
        inst = (run / "attention_instances.csv").read_text().splitlines()
        assert inst[0] == "participant_id,t_start,t_end,daily,pulse_ox,respiration,stress"
        assert len(inst) - 1 == metrics["n_episodes"]

    def test_attention_rejects_early_fusion(self, workspace):
        tmp, cfg = workspace
        assert main(["train", "--config", str(cfg), "--scheme", "supervised-early-fusion"]) == EXIT_OK
        ck = tmp / "run" / "checkpoint.json"
        assert main(["attention", "--config", str(cfg), "--checkpoint", str(ck)]) == EXIT_USAGE

    def test_zero_lambda_matches_late_fusion(self, workspace):
        tmp, cfg = workspace
        docs = {}
        for scheme, extra in (("supervised-late-fusion", []), ("regularized", ["--lambda-reg", "0"])):
            out = tmp / scheme
            assert main(["train", "--config", str(cfg), "--scheme", scheme, "--out", str(out), *extra]) == EXIT_OK
            docs[scheme] = json.loads((out / "metrics.json").read_text())
        a, b = docs["supervised-late-fusion"], docs["regularized"]
        assert a.pop("scheme") != b.pop("scheme")
        assert a == b

    def test_missing_cohort_is_data_error(self, tmp_path, capsys):
        cfg = small_config(tmp_path)
        assert main(["train", "--config", str(cfg)]) == EXIT_DATA
        assert "data error" in capsys.readouterr().err

    def test_malformed_csv_is_data_error(self, workspace):
        tmp, cfg = workspace
        (tmp / "cohort" / "P01" / "stress.csv").write_text("timestamp,hrv_stress\n1,abc\n")
        assert main(["train", "--config", str(cfg)]) == EXIT_DATA


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--size", "small"]) == EXIT_OK
        assert "gradcheck PASS" in capsys.readouterr().out

    def test_sabotaged_backward_fails(self, monkeypatch, capsys):
        def problem(seed=0, batch=2):
            x = ad.parameter(np.random.default_rng(seed).normal(size=4))

            def loss():
                y = ad.reduce(ad.tanh(x) * ad.tanh(x), "sum")
                return ad._node(y.value.copy(), (y,), lambda g: (g * 1.05,))
            return loss, {"x": x}

        monkeypatch.setattr(cli, "gradcheck_problem", problem)
        assert main(["gradcheck"]) == EXIT_NUMERICAL
        assert "FAIL" in capsys.readouterr().out
