"""Command-line entry point: ``mmstress <command> [options]``.

Commands map one-to-one onto pipeline stages (synth, labels, train, eval,
attention, gradcheck) plus ``config`` for printing the effective settings.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .model import SMALL_DIMS, LateFusionModel, ModelDims, attention_report, load_checkpoint
from .objectives import ContrastiveConfig, ProjectionHead, combined_loss
from .pipeline import (WindowConfig, labelled_episodes, prepare, run,
                       write_artifacts, write_attention_means, write_labels)
from .synthcohort import ModalitySynth, SynthConfig, generate, schema_for
from .timeline import DEFAULT_SCHEMA, CohortError, ModalitySchema, load_cohort
from .training import SCHEMES, NumericalError, TrainConfig, TrainingDataError, evaluate

logger = logging.getLogger("mmstress")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    cohort: str = "cohort"
    out: str = "runs/latest"
    schema: list = field(default_factory=lambda: list(DEFAULT_SCHEMA))
    window: WindowConfig = field(default_factory=WindowConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelDims = field(default_factory=ModelDims)

    def __post_init__(self):
        if not self.schema:
            raise ConfigError("schema must list at least one modality")
        names = [m.name for m in self.schema]
        if len(set(names)) != len(names):
            raise ConfigError(f"schema has duplicate modality names: {names}")
        by_name = {m.name: m for m in self.schema}
        for m in self.synth.modalities:
            if m.name not in by_name:
                raise ConfigError(f"synth modality {m.name!r} is not in the schema {names}")
            if len(m.mean) != len(by_name[m.name].features):
                raise ConfigError(f"synth modality {m.name!r} has {len(m.mean)} features, "
                                  f"schema expects {len(by_name[m.name].features)}")

    @property
    def schema_tuple(self) -> tuple:
        return tuple(self.schema)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        contrastive = train.pop("contrastive")
        return {
            "cohort": self.cohort,
            "out": self.out,
            "schema": [{"name": m.name, "features": list(m.features),
                        "resample_step": m.resample_step, "window_steps": m.window_steps}
                       for m in self.schema],
            "window": asdict(self.window),
            "synth": asdict(self.synth),
            "train": train,
            "contrastive": contrastive,
            "model": asdict(self.model),
        }

    @classmethod
    def from_dict(cls, data) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object at top level")
        known = {"cohort", "out", "schema", "window", "synth", "train", "contrastive", "model"}
        _reject_unknown(data, known, "config")
        kwargs = {}
        for key in ("cohort", "out"):
            if key in data:
                kwargs[key] = _coerce(data[key], str, key)
        if "schema" in data:
            kwargs["schema"] = _parse_list(data["schema"], "schema",
                                           lambda v, w: _parse_dataclass(ModalitySchema, v, w))
        if "window" in data:
            kwargs["window"] = _parse_dataclass(WindowConfig, data["window"], "window")
        if "synth" in data:
            kwargs["synth"] = _parse_dataclass(SynthConfig, data["synth"], "synth", nested={
                "modalities": lambda v, w: _parse_list(
                    v, w, lambda item, ww: _parse_dataclass(ModalitySynth, item, ww))})
        contrastive = ContrastiveConfig()
        if "contrastive" in data:
            contrastive = _parse_dataclass(ContrastiveConfig, data["contrastive"], "contrastive")
        train = data.get("train", {})
        if isinstance(train, dict) and "contrastive" in train:
            raise ConfigError("train.contrastive: set contrastive options in the top-level "
                              "'contrastive' section")
        kwargs["train"] = _parse_dataclass(TrainConfig, train, "train",
                                           extra={"contrastive": contrastive})
        if "model" in data:
            kwargs["model"] = _parse_dataclass(ModelDims, data["model"], "model")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config: {exc}") from exc


def _reject_unknown(data: dict, known, where: str) -> None:
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(repr, unknown))}; "
                          f"allowed: {', '.join(sorted(known))}")


def _coerce(value, hint, where: str):
    """Check a JSON scalar or list against a field annotation."""
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        if value is None:
            return None
        options = [a for a in typing.get_args(hint) if a is not type(None)]
        return _coerce(value, options[0], where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if hint in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return hint(value)
    raise ConfigError(f"{where}: unsupported field type {hint!r}")


def _parse_list(value, where: str, parse_item) -> list:
    if not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list")
    return [parse_item(item, f"{where}[{k}]") for k, item in enumerate(value)]


def _parse_dataclass(cls, data, where: str, nested: Optional[dict] = None,
                     extra: Optional[dict] = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    nested = nested or {}
    extra = extra or {}
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls) if f.init and f.name not in extra]
    _reject_unknown(data, names, where)
    kwargs = dict(extra)
    for key, value in data.items():
        if key in nested:
            kwargs[key] = nested[key](value, f"{where}.{key}")
        else:
            kwargs[key] = _coerce(value, hints[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)


def dump_config(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2) + "\n"


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Fold command-line flags into the configuration."""
    train = config.train
    contrastive = train.contrastive
    synth = config.synth
    if getattr(args, "lambda_reg", None) is not None:
        contrastive = replace(contrastive, lambda_reg=args.lambda_reg)
    if getattr(args, "temperature", None) is not None:
        contrastive = replace(contrastive, temperature=args.temperature)
    changes = {"contrastive": contrastive}
    if getattr(args, "scheme", None) is not None:
        changes["scheme"] = args.scheme
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
        synth = replace(synth, seed=args.seed)
    try:
        train = replace(train, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    config = replace(config, train=train, synth=synth)
    if getattr(args, "cohort", None) is not None:
        config = replace(config, cohort=args.cohort)
    if getattr(args, "out", None) is not None:
        config = replace(config, out=args.out)
    return config


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_config(args, config: RunConfig) -> int:
    sys.stdout.write(dump_config(RunConfig() if args.print_defaults else config))
    return EXIT_OK


def cmd_synth(args, config: RunConfig) -> int:
    out = args.out if args.out is not None else config.cohort
    schema = schema_for(config.synth, config.schema_tuple)
    truth = generate(config.synth, out, schema)
    n_events = sum(len(v) for v in truth.events.values())
    print(f"wrote {config.synth.participants} participants to {out} "
          f"({n_events} stress events, stressed-episode fraction {truth.stressed_fraction:.3f})")
    return EXIT_OK


def cmd_labels(args, config: RunConfig) -> int:
    cohort = load_cohort(config.cohort, config.schema_tuple)
    episodes, values = labelled_episodes(cohort, config.window)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(episodes, values, out / "labels.csv")
    stressed = sum(bool(e.label) for e in episodes)
    print(f"labelled {len(episodes)} episodes ({stressed} stressed) -> {out / 'labels.csv'}")
    return EXIT_OK


def _print_metrics(metrics) -> None:
    baseline = metrics.majority_baseline
    extra = f" (majority baseline {baseline:.4f})" if baseline is not None else ""
    print(f"accuracy {metrics.accuracy:.4f}{extra} on {metrics.n_episodes} test episodes")
    if metrics.attention_means:
        parts = " ".join(f"{m}={v:.3f}" for m, v in metrics.attention_means.items())
        print(f"mean attention: {parts}")


def cmd_train(args, config: RunConfig) -> int:
    cohort = load_cohort(config.cohort, config.schema_tuple)
    data = prepare(cohort, config.window, config.train.seed)
    result = run(data, config.train, config.model)
    paths = write_artifacts(result, config.out, meta={"window": asdict(config.window)})
    print(f"scheme {config.train.scheme} seed {config.train.seed}")
    _print_metrics(result.metrics)
    print(f"artifacts written to {Path(paths['metrics']).parent}")
    return EXIT_OK


def _checkpoint_data(args, config: RunConfig):
    model, normalizer, meta = load_checkpoint(args.checkpoint)
    window = WindowConfig(**meta["window"]) if "window" in meta else config.window
    cohort = load_cohort(config.cohort, model.schema)
    data = prepare(cohort, window, int(meta.get("seed", config.train.seed)),
                   split=meta.get("split"), normalizer=normalizer)
    return model, data, meta


def cmd_eval(args, config: RunConfig) -> int:
    model, data, meta = _checkpoint_data(args, config)
    if not len(data.test_labels):
        raise TrainingDataError("test split is empty")
    metrics = evaluate(model, data.test_windows, data.test_labels, config.train.eval_chunk)
    metrics.majority_baseline = data.majority_baseline()
    metrics.loss_curve = list(meta.get("loss_curve", []))
    doc = {"scheme": meta.get("scheme")}
    doc.update(metrics.to_dict())
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    _print_metrics(metrics)
    return EXIT_OK


def cmd_attention(args, config: RunConfig) -> int:
    model, data, _ = _checkpoint_data(args, config)
    if not isinstance(model, LateFusionModel):
        raise ConfigError("attention needs a late-fusion checkpoint; early fusion has no attention")
    episodes = {"test": data.test_episodes, "train": data.train_episodes,
                "all": data.train_episodes + data.test_episodes}[args.split]
    report = attention_report(model, episodes, config.train.eval_chunk)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_attention_means(report.as_dict(), out / "attention_means.csv")
    with open(out / "attention_instances.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(["participant_id", "t_start", "t_end", *report.modalities]) + "\n")
        for e, row in zip(episodes, report.alpha):
            fh.write(",".join([e.participant_id, repr(e.t_start), repr(e.t_end),
                               *(repr(float(a)) for a in row)]) + "\n")
    for name, value in report.as_dict().items():
        print(f"{name:12s} {value:.4f}")
    return EXIT_OK


GRADCHECK_SCHEMA = (
    ModalitySchema("m0", ("a", "b"), 60.0, 8),
    ModalitySchema("m1", ("c",), 60.0, 8),
)


def gradcheck_problem(seed: int = 0, batch: int = 2):
    """Reduced model and regularized loss used by ``gradcheck``.

    Returns ``(loss_fn, params)``; ``loss_fn`` reads the current parameter values.
    """
    rng = np.random.default_rng([seed, 11])
    model = LateFusionModel(GRADCHECK_SCHEMA, SMALL_DIMS, seed=seed)
    windows = {}
    for m in GRADCHECK_SCHEMA:
        w = rng.standard_normal((batch, m.window_steps, m.width))
        w[..., -1] = (rng.random((batch, m.window_steps)) < 0.2).astype(np.float64)
        windows[m.name] = w
    labels = np.arange(batch) % 2
    head = ProjectionHead(model.params)
    config = ContrastiveConfig(temperature=0.5, lambda_reg=0.5)

    def loss_fn():
        latent, probs = model.forward(windows)
        return combined_loss(latent, probs, labels, config, "regularized", head)[0]

    return loss_fn, dict(model.params.items())


def run_gradcheck(seed: int = 0, tol: float = 1e-4, step: float = 1e-5) -> ad.GradCheckReport:
    loss_fn, params = gradcheck_problem(seed)
    return ad.grad_check(loss_fn, params, step=step, tol=tol)


def cmd_gradcheck(args, config: RunConfig) -> int:
    t0 = time.perf_counter()
    report = run_gradcheck(args.seed if args.seed is not None else 0, args.tol)
    for line in report.lines():
        print(line)
    verdict = "PASS" if report.passed else f"FAIL ({len(report.failures)} parameter(s))"
    print(f"gradcheck {verdict}: {len(report.checked)} parameters, "
          f"{sum(report.checked.values())} entries, tol {report.tol:g}, "
          f"{time.perf_counter() - t0:.1f} s")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmstress",
        description="Multi-modal stress detection: synthetic cohorts, labeling, training and "
                    "attention reports.")
    parser.add_argument("--print-defaults", action="store_true",
                        help="print the default configuration as JSON and exit")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging (repeat for debug output)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, out_help="output directory (overrides config 'out')"):
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--out", metavar="DIR", help=out_help)

    p = sub.add_parser("config", help="print the effective configuration")
    common(p)
    p.add_argument("--print-defaults", action="store_true",
                   help="print built-in defaults instead of the effective configuration")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    common(p, "cohort directory to write (overrides config 'cohort')")
    p.add_argument("--seed", type=int, help="generator seed (overrides synth.seed)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("labels", help="extract and label episodes, writing labels.csv")
    common(p)
    p.add_argument("--cohort", metavar="DIR", help="cohort directory")
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("train", help="train one scheme and write metrics and a checkpoint")
    common(p)
    p.add_argument("--cohort", metavar="DIR", help="cohort directory")
    p.add_argument("--scheme", choices=SCHEMES, help="training scheme")
    p.add_argument("--seed", type=int, help="seed for split, initialisation and shuffling")
    p.add_argument("--lambda-reg", type=float, help="contrastive weight for 'regularized'")
    p.add_argument("--temperature", type=float, help="contrastive temperature")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    common(p)
    p.add_argument("--cohort", metavar="DIR", help="cohort directory")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention", help="per-modality attention of a late-fusion checkpoint")
    common(p)
    p.add_argument("--cohort", metavar="DIR", help="cohort directory")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint.json")
    p.add_argument("--split", choices=("test", "train", "all"), default="test",
                   help="episodes to report on (default: test)")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("gradcheck", help="finite-difference check of every model gradient")
    p.add_argument("--config", metavar="PATH", help="JSON run configuration (unused)")
    p.add_argument("--size", choices=("small",), default="small",
                   help="model size to check (only 'small': 2 modalities, 8 steps, hidden 8)")
    p.add_argument("--seed", type=int, help="seed for weights and inputs (default 0)")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults and args.command in (None, "config"):
        sys.stdout.write(dump_config(RunConfig()))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("mmstress: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = apply_overrides(load_config(args.config), args)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"mmstress: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"mmstress: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CohortError, TrainingDataError, OSError) as exc:
        print(f"mmstress: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"mmstress: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
