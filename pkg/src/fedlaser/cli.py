"""``fedlaser`` command line: gen, train, eval, sweep.

Configuration is one JSON document with four sections::

    {"generator": {...}, "model": {...}, "federation": {...},
     "data": {"train_fraction": 0.9, "split_seed": 0}}

Missing keys take the library defaults. ``--config`` accepts a path or the
name of a packaged preset (``paper``, ``ci``); ``--set section.key=value``
overrides single keys, with ``value`` parsed as JSON when possible.

Exit codes: 0 ok, 2 config, 3 data, 4 numeric abort, 5 integrity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple


from fedlaser import evaluation as ev
from fedlaser import kernels
from fedlaser.features import (FeatureError, NormStats, build_samples, normalize_apply,
                               normalize_fit, read_samples_csv, split_train_test,
                               write_samples_csv, write_traces_jsonl)
from fedlaser.federation import FedConfig, evaluate
from fedlaser.metrics import Metrics
from fedlaser.model import ModelConfig
from fedlaser.synth import ConfigError, CorpusStats, GeneratorConfig, generate_corpus
from fedlaser.tensor import NumericError
from fedlaser.wire import WireFormatError, load_params, save_params

log = logging.getLogger("fedlaser")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 2, 3, 4, 5
OUT_ENV = "FEDLASER_OUT"
PRESETS = ("paper", "ci")
SECTIONS = ("generator", "model", "federation", "data")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class DataConfig:
    train_fraction: float = 0.9
    split_seed: int = 0


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FedConfig = field(default_factory=FedConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> Dict:
        return {
            "generator": self.generator.to_dict(),
            "model": self.model.to_dict(),
            "federation": self.federation.to_dict(),
            "data": {"train_fraction": self.data.train_fraction, "split_seed": self.data.split_seed},
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise CliError(EXIT_CONFIG, "config: top level must be a JSON object")
        for key in d:
            if key not in SECTIONS:
                raise CliError(EXIT_CONFIG, f"{key}: unknown config section")
        sec = {k: d.get(k, {}) or {} for k in SECTIONS}
        try:
            gen = GeneratorConfig.from_dict(sec["generator"])
            model = ModelConfig.from_dict(sec["model"])
            fed = FedConfig.from_dict(sec["federation"])
        except ConfigError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
        except (TypeError, ValueError) as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
        data = dict(sec["data"])
        unknown = set(data) - {"train_fraction", "split_seed"}
        if unknown:
            raise CliError(EXIT_CONFIG, f"data.{sorted(unknown)[0]}: unknown key")
        dc = DataConfig(**data)
        if not 0.0 < dc.train_fraction < 1.0:
            raise CliError(EXIT_CONFIG, f"data.train_fraction: must be in (0, 1), got {dc.train_fraction}")
        return cls(gen, model, fed, dc)


def load_preset(name: str) -> Dict:
    return json.loads(resources.files("fedlaser").joinpath("presets", f"{name}.json").read_text())


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: Dict, assignment: str) -> None:
    """Set ``section.key=value`` in the raw config document."""
    if "=" not in assignment:
        raise CliError(EXIT_CONFIG, f"--set {assignment!r}: expected key=value")
    path, value = assignment.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS or not parts[1]:
        raise CliError(EXIT_CONFIG, f"{path}: override keys look like section.key with section in {SECTIONS}")
    doc.setdefault(parts[0], {})[parts[1]] = _parse_value(value)


def resolve_config(config: Optional[str], overrides: Sequence[str]) -> RunConfig:
    doc: Dict = {}
    if config:
        path = Path(config)
        if path.is_file():
            try:
                doc = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise CliError(EXIT_CONFIG, f"{config}: invalid JSON ({exc})") from None
        elif config in PRESETS:
            doc = load_preset(config)
        else:
            raise CliError(EXIT_CONFIG, f"{config}: config file not found")
    for item in overrides:
        apply_override(doc, item)
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# file helpers


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo_config(out: Path, cfg: RunConfig) -> None:
    _dump_json(out / "config.json", cfg.to_dict())


def _load_corpus(data_dir: Path) -> ev.Corpus:
    """Rebuild the normalized split written by ``gen``."""
    try:
        samples = read_samples_csv(data_dir / "samples.csv")
        split = json.loads((data_dir / "split.json").read_text())
        norm = NormStats.from_dict(json.loads((data_dir / "norm_stats.json").read_text()))
        train_raw = [samples[i] for i in split["train"]]
        test_raw = [samples[i] for i in split["test"]]
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, f"missing data file {exc.filename}; run `fedlaser gen` first") from None
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"{data_dir}: malformed data files ({exc})") from None
    if not train_raw or not test_raw:
        raise CliError(EXIT_DATA, f"{data_dir}: empty train or test split")
    return ev.Corpus(normalize_apply(train_raw, norm), normalize_apply(test_raw, norm),
                     norm, train_raw, test_raw)


def _metrics_dict(m: Metrics) -> Dict:
    return {"rmse": m.rmse, "sdev": m.sdev, "mae": m.mae, "n": m.n}


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, out: Path) -> None:
    stats = CorpusStats()
    traces = generate_corpus(cfg.generator, stats)
    samples, report = build_samples(traces)
    if len(samples) < 2:
        raise CliError(EXIT_DATA, "corpus produced fewer than two usable samples")
    index = list(range(len(samples)))
    train_idx, test_idx = split_train_test(index, cfg.data.train_fraction, cfg.data.split_seed)
    norm = normalize_fit([samples[i] for i in train_idx])

    write_traces_jsonl(out / "traces.jsonl", traces,
                       header={"generator": cfg.generator.to_dict(), "count": len(traces)})
    write_samples_csv(out / "samples.csv", samples)
    _dump_json(out / "norm_stats.json", norm.to_dict())
    _dump_json(out / "split.json", {"train_fraction": cfg.data.train_fraction,
                                     "split_seed": cfg.data.split_seed,
                                     "train": train_idx, "test": test_idx})
    rejected = dict(stats.rejected)
    rejected.update(report.rejected)
    _dump_json(out / "rejections.json", {"attempts": stats.attempts, "usable": len(samples),
                                         "rejected": rejected})
    _echo_config(out, cfg)
    print(f"gen: {len(samples)} samples ({len(train_idx)} train / {len(test_idx)} test) -> {out}")


def cmd_train(cfg: RunConfig, mode: str, data_dir: Path, out: Path) -> None:
    corpus = _load_corpus(data_dir)
    fed, mc = cfg.federation, cfg.model
    if mode == "fed":
        res = ev.run_federated(corpus, fed, mc)
        ev.write_convergence_csv(out / "convergence.csv", res.reports)
        params, final = res.params, res.metrics
    elif mode == "central":
        res = ev.run_centralized(corpus.train, corpus.test_batch, fed, mc, corpus.norm)
        ev.write_convergence_csv(out / "convergence.csv", res.reports)
        params, final = res.params, res.metrics
    else:
        loc = ev.run_localized(corpus.clients(fed.n_clients), corpus.test_batch, fed, mc, corpus.norm)
        ev.write_localized_csv(out / "localized.csv", loc)
        params, final = loc.best_params, loc.best
    save_params(out / "model.fllp", params)
    if final is None:
        final = evaluate(params, corpus.test_batch, corpus.norm)
    _dump_json(out / "train_metrics.json", {"mode": mode, **_metrics_dict(final)})
    _echo_config(out, cfg)
    print(f"train[{mode}]: MAE {final.mae:.9g} years -> {out / 'model.fllp'}")


def _parse_models(specs: Sequence[str], default: Path) -> List[Tuple[str, Path]]:
    if not specs:
        return [("model", default)]
    out = []
    for i, spec in enumerate(specs):
        label, sep, path = spec.partition("=")
        out.append((label, Path(path)) if sep else (f"model{i + 1}" if len(specs) > 1 else "model",
                                                     Path(spec)))
    return out


def cmd_eval(cfg: RunConfig, models: Sequence[str], reference: Optional[str],
             data_dir: Path, out: Path) -> None:
    corpus = _load_corpus(data_dir)
    test = corpus.test_batch
    regimes: Dict[str, Metrics] = {}
    scatter = None
    for label, path in _parse_models(models, out / "model.fllp"):
        try:
            params = load_params(path)
        except FileNotFoundError:
            raise CliError(EXIT_DATA, f"{path}: model file not found") from None
        regimes[label] = evaluate(params, test, corpus.norm)
        if scatter is None:
            scatter = ev.scatter_data(params, test, corpus.norm)
    if reference is not None and reference not in regimes:
        raise CliError(EXIT_CONFIG, f"--reference {reference!r} is not one of {list(regimes)}")
    ev.write_comparison_csv(out / "comparison.csv", regimes, reference)
    ev.write_scatter_csv(out / "scatter.csv", *scatter)
    _echo_config(out, cfg)
    for label, m in regimes.items():
        print(f"eval[{label}]: RMSE {m.rmse:.6g}  SDEV {m.sdev:.6g}  MAE {m.mae:.6g} years")


def cmd_sweep(cfg: RunConfig, counts: Sequence[int], data_dir: Path, out: Path) -> None:
    corpus = _load_corpus(data_dir)
    try:
        maes = ev.sweep_clients(corpus, counts, cfg.federation, cfg.model)
    except FeatureError as exc:
        raise CliError(EXIT_CONFIG, f"--clients: {exc}") from None
    ev.write_sweep_csv(out / "sweep.csv", maes)
    _echo_config(out, cfg)
    for k, m in sorted(maes.items()):
        print(f"sweep: {k:3d} clients  MAE {m:.6g} years")


# ---------------------------------------------------------------------------
# entry point


def _parse_counts(text: str) -> List[int]:
    try:
        counts = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"--clients {text!r}: expected comma-separated integers") from None
    if not counts or min(counts) < 1:
        raise CliError(EXIT_CONFIG, f"--clients {text!r}: counts must be >= 1")
    return counts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedlaser", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config path or preset name (paper, ci)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./fedlaser-out)")
        sp.add_argument("--seed", type=int, help="generator seed for gen, training seed otherwise")
        sp.add_argument("--threads", type=int, help="worker threads for client training")
        return sp

    common(sub.add_parser("gen", help="generate the synthetic corpus"))
    t = common(sub.add_parser("train", help="train in one regime"))
    t.add_argument("--mode", choices=("fed", "central", "local"), default="fed")
    t.add_argument("--data", help="directory written by gen (default: --out)")
    t.add_argument("--clients", type=int, help="number of federation clients")
    e = common(sub.add_parser("eval", help="score model files on the held-out split"))
    e.add_argument("--data", help="directory written by gen (default: --out)")
    e.add_argument("--model", action="append", default=[], metavar="[LABEL=]PATH",
                   help="model file; repeat to compare several")
    e.add_argument("--reference", help="label whose metrics the deltas are relative to")
    s = common(sub.add_parser("sweep", help="federated MAE per client count"))
    s.add_argument("--data", help="directory written by gen (default: --out)")
    s.add_argument("--clients", default="2,4,8,16", help="comma-separated client counts")
    return p


def _run(args) -> None:
    overrides = list(args.set)
    if args.seed is not None:
        if args.command == "gen":
            overrides.append(f"generator.seed={args.seed}")
        else:
            overrides += [f"federation.seed={args.seed}", f"model.seed={args.seed}"]
    if args.threads is not None:
        overrides.append(f"federation.threads={args.threads}")
    if args.command == "train" and args.clients is not None:
        overrides.append(f"federation.n_clients={args.clients}")
    cfg = resolve_config(args.config, overrides)

    out = Path(args.out or os.environ.get(OUT_ENV) or "fedlaser-out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"{out}: cannot create output directory ({exc})") from None
    data_dir = Path(getattr(args, "data", None) or out)
    log.info("kernel backend: %s", kernels.BACKEND)

    if args.command == "gen":
        cmd_gen(cfg, out)
    elif args.command == "train":
        cmd_train(cfg, args.mode, data_dir, out)
    elif args.command == "eval":
        cmd_eval(cfg, args.model, args.reference, data_dir, out)
    else:
        cmd_sweep(cfg, _parse_counts(args.clients), data_dir, out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except CliError as exc:
        print(f"fedlaser: error: {exc}", file=sys.stderr)
        return exc.code
    except WireFormatError as exc:
        print(f"fedlaser: integrity error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NumericError as exc:
        print(f"fedlaser: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FeatureError as exc:
        print(f"fedlaser: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
