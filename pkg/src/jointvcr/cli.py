"""Experiment runner: ``jointvcr {gen-data,train,eval,ablate}``.

Runs are configured by an INI file with up to five sections::

    [run]        seed, data_dir
    [data]       GenSpec fields (n_train, n_val, noise_prob, ...)
    [model]      ModelConfig fields (embed_dim, hidden_dim, ...)
    [train]      TrainConfig fields (lr, epochs, loss_ratio = 1,4, ...)
    [estimator]  variant plus GumbelConfig / ScoreFunctionConfig fields

Every key is optional; unknown sections or keys are rejected. One seed in
``[run]`` (or ``--seed``) drives data generation, initialization and
training noise.

Exit codes: 0 success, 2 configuration error, 3 I/O error (including
unreadable datasets and mismatched checkpoints), 4 numerical abort.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from . import relax
from .data import DataError, GenSpec, generate, load_jsonl, save_jsonl
from .model import CheckpointError, ModelConfig, atomic_write_bytes, load_checkpoint, save_checkpoint
from .plot import line_chart
from .train import (
    ABLATION_RATIOS,
    NumericalError,
    RunResult,
    TrainConfig,
    effective_model_config,
    evaluate,
    metrics_csv,
    train_run,
)

log = logging.getLogger("jointvcr")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(ValueError):
    """Bad configuration file or value."""


@dataclass
class RunConfig:
    data: GenSpec = field(default_factory=GenSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimator: relax.EstimatorConfig = field(default_factory=relax.Softmax)
    seed: int = 0
    data_dir: str | None = None

    def to_dict(self) -> dict[str, Any]:
        est = {"variant": self.estimator.name}
        if hasattr(self.estimator, "config"):
            est.update(dataclasses.asdict(self.estimator.config))
        return {
            "run": {"seed": self.seed, "data_dir": self.data_dir},
            "data": dataclasses.asdict(self.data),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "estimator": est,
        }


# -- config parsing ----------------------------------------------------------

_SECTIONS = {"data": GenSpec, "model": ModelConfig, "train": TrainConfig}
_ESTIMATOR_KEYS = {f.name: (relax.GumbelConfig, f) for f in fields(relax.GumbelConfig)}
_ESTIMATOR_KEYS.update({f.name: (relax.ScoreFunctionConfig, f) for f in fields(relax.ScoreFunctionConfig)})


def _coerce(section: str, key: str, raw: str, default: Any) -> Any:
    where = f"[{section}] {key}"
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated values")
            return tuple(type(d)(p) for d, p in zip(default, parts))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from exc


def _build(section: str, cls, values: dict[str, str], extra: dict[str, Any]):
    defaults = cls()
    known = {f.name for f in fields(cls)} - {"seed"}
    kwargs = dict(extra)
    for key, raw in values.items():
        if key not in known:
            hint = " (set seeds in [run])" if key == "seed" else ""
            raise ConfigError(f"unknown key {key!r} in [{section}]{hint}")
        kwargs[key] = _coerce(section, key, raw, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str, seed: int | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep keys case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    allowed = {"run", "estimator", *_SECTIONS}
    for name in parser.sections():
        if name not in allowed:
            raise ConfigError(f"unknown section [{name}]")
    sec = {name: dict(parser[name]) if parser.has_section(name) else {} for name in allowed}

    run = sec["run"]
    for key in run:
        if key not in ("seed", "data_dir"):
            raise ConfigError(f"unknown key {key!r} in [run]")
    run_seed = _coerce("run", "seed", run["seed"], 0) if "seed" in run else 0
    if seed is not None:
        run_seed = seed

    built = {name: _build(name, cls, sec[name], {"seed": run_seed}) for name, cls in _SECTIONS.items()}
    return RunConfig(
        data=built["data"],
        model=built["model"],
        train=built["train"],
        estimator=_build_estimator(sec["estimator"]),
        seed=run_seed,
        data_dir=run.get("data_dir"),
    )


def _build_estimator(values: dict[str, str]) -> relax.EstimatorConfig:
    values = dict(values)
    variant = values.pop("variant", "softmax").strip()
    if variant not in relax.VARIANTS:
        raise ConfigError(f"[estimator] variant {variant!r} is not one of {sorted(relax.VARIANTS)}")
    accepts = {"gumbel": relax.GumbelConfig, "score_function": relax.ScoreFunctionConfig}.get(variant)
    kwargs = {}
    for key, raw in values.items():
        if key not in _ESTIMATOR_KEYS:
            raise ConfigError(f"unknown key {key!r} in [estimator]")
        owner, f = _ESTIMATOR_KEYS[key]
        if owner is not accepts:
            raise ConfigError(f"[estimator] {key} does not apply to variant {variant!r}")
        kwargs[key] = _coerce("estimator", key, raw, getattr(owner(), key))
    try:
        if accepts is None:
            return relax.VARIANTS[variant]()
        return relax.VARIANTS[variant](accepts(**kwargs))
    except ValueError as exc:
        raise ConfigError(f"[estimator] {exc}") from exc


def load_config(path: str | None, seed: int | None = None) -> RunConfig:
    if path is None:
        return parse_config("", seed)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, seed)


# -- artifacts ---------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        doc.update(extra)
    _write_text(out / "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def loss_curves_svg(res: RunResult, title: str) -> str:
    return line_chart(
        {
            "answer_loss": [(r.epoch, r.answer_loss) for r in res.rows],
            "rationale_loss": [(r.epoch, r.rationale_loss) for r in res.rows],
        },
        title=title,
        y_label="validation loss",
    )


def _read_dataset(cfg: RunConfig, out: Path):
    data_dir = Path(cfg.data_dir) if cfg.data_dir else out
    paths = [data_dir / "train.jsonl", data_dir / "val.jsonl"]
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"dataset file {p} not found (run gen-data first or set [run] data_dir)")
    return [load_jsonl(p, cfg.data.vocab_size) for p in paths]


def _train_into(out: Path, cfg: RunConfig, train, val, command: str) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)
    res = train_run(cfg.model, cfg.estimator, cfg.train, train, val)
    _write_text(out / "metrics.csv", metrics_csv(res.rows))
    save_checkpoint(res.params, out / "model.ckpt", effective_model_config(cfg.model, cfg.train))
    _write_text(out / "curves.svg", loss_curves_svg(res, f"{cfg.estimator.name} loss ratio {_ratio_tag(cfg.train.loss_ratio, ':')}"))
    write_manifest(out, command, cfg, {"final": dataclasses.asdict(res.rows[-1])})
    return res


def _ratio_tag(ratio, sep="_") -> str:
    return sep.join(f"{w:g}" for w in ratio)


# -- commands ----------------------------------------------------------------


def cmd_gen(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    train, val = generate(cfg.data)
    save_jsonl(train, out / "train.jsonl")
    save_jsonl(val, out / "val.jsonl")
    write_manifest(out, "gen-data", cfg)
    print(f"wrote {len(train)} train / {len(val)} val instances to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    train, val = _read_dataset(cfg, out)
    res = _train_into(out, cfg, train, val, "train")
    last = res.rows[-1]
    print(f"Q->A {last.q_a_acc:.4f}  QA->R {last.qa_r_acc:.4f}  Q->AR {last.q_ar_acc:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path | None, checkpoint: str, dataset: str, epoch: int, baseline: bool) -> int:
    params, stored = load_checkpoint(checkpoint, None)
    model_cfg = stored or cfg.model
    load_checkpoint(checkpoint, model_cfg)  # validates every tensor shape
    instances = load_jsonl(dataset, model_cfg.vocab_size)
    if not instances:
        raise DataError(f"{dataset}: no instances")
    row = evaluate(params, instances, cfg.estimator, epoch=epoch, baseline=baseline)
    text = metrics_csv([row])
    sys.stdout.write(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "eval.csv", text)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    train, val = _read_dataset(cfg, out)
    results = {}
    for ratio in ABLATION_RATIOS:
        sub = replace(cfg, train=replace(cfg.train, loss_ratio=ratio))
        results[ratio] = _train_into(out / f"ratio_{_ratio_tag(ratio)}", sub, train, val, "ablate")
    series = {}
    for ratio, res in results.items():
        tag = _ratio_tag(ratio, ":")
        series[f"answer_loss {tag}"] = [(r.epoch, r.answer_loss) for r in res.rows]
        series[f"rationale_loss {tag}"] = [(r.epoch, r.rationale_loss) for r in res.rows]
    _write_text(out / "overlay.svg", line_chart(series, title="loss ratio ablation", y_label="validation loss"))
    for ratio, res in results.items():
        last = res.rows[-1]
        print(f"ratio {_ratio_tag(ratio, ':')}: Q->A {last.q_a_acc:.4f}  QA->R {last.qa_r_acc:.4f}  Q->AR {last.q_ar_acc:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointvcr", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="overrides [run] seed")

    common(sub.add_parser("gen-data", help="generate train.jsonl / val.jsonl"))
    common(sub.add_parser("train", help="train one run; writes metrics.csv, model.ckpt, curves.svg"))
    p_eval = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(p_eval, out_required=False)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="JSONL dataset")
    p_eval.add_argument("--variant", choices=sorted(relax.VARIANTS), help="overrides [estimator] variant")
    p_eval.add_argument("--epoch", type=int, default=20, help="epoch used for the Gumbel temperature (default 20)")
    p_eval.add_argument("--baseline", action="store_true", help="score as a conditioned-baseline model")
    common(sub.add_parser("ablate", help="train loss ratios 1:1 and 1:4 from one seed"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out) if args.out else None
        if args.command == "gen-data":
            return cmd_gen(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "ablate":
            return cmd_ablate(cfg, out)
        if args.variant is not None:
            cfg = replace(cfg, estimator=relax.VARIANTS[args.variant]())
        return cmd_eval(cfg, out, args.checkpoint, args.data, args.epoch, args.baseline)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, DataError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
