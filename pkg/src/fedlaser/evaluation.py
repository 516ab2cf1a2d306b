"""Federated vs. centralized vs. localized experiments and their CSV outputs.

Every regime gets the same gradient budget: ``n_rounds * local_epochs``
epochs over its data, with the Adam state reset on the same cadence as a
federation round. Metrics are reported in years.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fedlaser.features import (ClientDataset, NormStats, Sample, normalize_apply,
                               normalize_fit, partition_clients, split_train_test)
from fedlaser.federation import (FedConfig, RoundReport, evaluate, round_rng,
                                 run_federation, run_local_epochs)
from fedlaser.metrics import Metrics, compute_metrics, improvement_delta
from fedlaser.model import Batch, ModelConfig, ParamSet, init_params, predict, to_batch

__all__ = [
    "ComparisonReport", "Corpus", "LocalizedResult", "Metrics", "TrainResult",
    "compare", "compute_metrics", "improvement_delta", "prepare_corpus",
    "run_centralized", "run_federated", "run_localized", "scatter_data", "sweep_clients",
    "train_single",
]


@dataclass
class Corpus:
    """Normalized train/test split plus the statistics used to scale it."""

    train: List[Sample]
    test: List[Sample]
    norm: NormStats
    raw_train: List[Sample]
    raw_test: List[Sample]

    @property
    def test_batch(self) -> Batch:
        return to_batch(self.test)

    def clients(self, n_clients: int) -> List[ClientDataset]:
        # scaling is monotone, so bands over scaled temperatures match the raw ones
        return partition_clients(self.train, n_clients)


def prepare_corpus(samples: Sequence[Sample], train_fraction: float = 0.9,
                   split_seed: int = 0) -> Corpus:
    """Split, fit min-max statistics on the pooled training part, scale both."""
    raw_train, raw_test = split_train_test(list(samples), train_fraction, split_seed)
    norm = normalize_fit(raw_train)
    return Corpus(normalize_apply(raw_train, norm), normalize_apply(raw_test, norm),
                  norm, raw_train, raw_test)


@dataclass
class TrainResult:
    params: ParamSet
    reports: List[RoundReport]

    @property
    def metrics(self) -> Optional[Metrics]:
        for r in reversed(self.reports):
            if r.metrics is not None:
                return r.metrics
        return None


def train_single(samples: Sequence[Sample], cfg: FedConfig, model_cfg: ModelConfig,
                 test: Optional[Batch] = None, norm: Optional[NormStats] = None,
                 stream_id: int = 1, init: Optional[ParamSet] = None) -> TrainResult:
    """Train one model on one data set with the federation's schedule.

    Segment ``t`` (one round's worth of ``local_epochs``) draws its RNG
    from ``(seed, t, stream_id)`` and starts a fresh Adam unless
    ``cfg.persistent_adam``; with ``stream_id`` equal to the client id this
    is exactly what a one-client federation computes.
    """
    data = to_batch(samples)
    params = init if init is not None else init_params(
        model_cfg, np.random.default_rng(model_cfg.seed))
    optimizer = cfg.make_optimizer()
    reports: List[RoundReport] = []
    for t in range(1, cfg.n_rounds + 1):
        if cfg.persistent_adam:
            optimizer.lr = cfg.round_lr(t)
        else:
            optimizer = cfg.make_optimizer(t)
        params, loss = run_local_epochs(data, params, cfg, optimizer,
                                        round_rng(cfg.seed, t, stream_id), model_cfg.dropout_rate)
        report = RoundReport(t, loss, {stream_id: loss})
        if test is not None and (t % cfg.eval_every == 0 or t == cfg.n_rounds):
            report.metrics = evaluate(params, test, norm)
        reports.append(report)
    return TrainResult(params, reports)


def run_federated(corpus: Corpus, cfg: FedConfig, model_cfg: ModelConfig) -> TrainResult:
    res = run_federation(corpus.clients(cfg.n_clients), cfg, model_cfg,
                         corpus.test_batch, corpus.norm)
    return TrainResult(res.params, res.reports)


def run_centralized(all_train: Sequence[Sample], test: Batch, cfg: FedConfig,
                    model_cfg: ModelConfig, norm: Optional[NormStats] = None) -> TrainResult:
    """One model on the pooled training data of every client."""
    return train_single(all_train, cfg, model_cfg, test, norm, stream_id=1)


@dataclass
class LocalizedResult:
    per_client: Dict[int, Metrics]
    sizes: Dict[int, int]
    best_client: int
    best_params: ParamSet
    summary: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def best(self) -> Metrics:
        return self.per_client[self.best_client]


def run_localized(clients: Sequence[ClientDataset], test: Batch, cfg: FedConfig,
                  model_cfg: ModelConfig, norm: Optional[NormStats] = None) -> LocalizedResult:
    """One model per client on its own data, all scored on the shared test set.

    The reference "best localized" model is the one from the largest client.
    """
    per_client: Dict[int, Metrics] = {}
    sizes: Dict[int, int] = {}
    models: Dict[int, ParamSet] = {}
    for c in sorted(clients, key=lambda c: c.client_id):
        res = train_single(c.samples, cfg, model_cfg, test, norm, stream_id=c.client_id)
        per_client[c.client_id] = res.metrics
        sizes[c.client_id] = c.n_i
        models[c.client_id] = res.params
    best = max(sizes, key=lambda cid: (sizes[cid], cid))
    summary = {}
    for name in ("rmse", "sdev", "mae"):
        vals = np.array([getattr(m, name) for m in per_client.values()])
        summary[name] = {"mean": float(vals.mean()), "min": float(vals.min()),
                         "max": float(vals.max())}
    return LocalizedResult(per_client, sizes, best, models[best], summary)


@dataclass
class ComparisonReport:
    federated: Metrics
    centralized: Optional[Metrics]
    localized: Optional[Metrics]
    delta: Dict[str, float]
    localized_table: Optional[LocalizedResult] = None


def compare(federated: Metrics, centralized: Optional[Metrics] = None,
            localized: Optional[LocalizedResult] = None) -> ComparisonReport:
    """Improvement of the federated model over the best localized one, per metric."""
    ref = localized.best if localized is not None else None
    delta = {}
    if ref is not None:
        for name in ("rmse", "sdev", "mae"):
            delta[name] = improvement_delta(getattr(federated, name), getattr(ref, name))
    return ComparisonReport(federated, centralized, ref, delta, localized)


def sweep_clients(corpus: Corpus, client_counts: Sequence[int], cfg: FedConfig,
                  model_cfg: ModelConfig) -> Dict[int, float]:
    """Final held-out MAE (years) of a federation per client count."""
    out = {}
    test = corpus.test_batch
    for k in client_counts:
        clients = corpus.clients(k)
        sub_cfg = FedConfig(**{**cfg.to_dict(), "n_clients": k})
        res = run_federation(clients, sub_cfg, model_cfg, test, corpus.norm)
        final = next(r.metrics for r in reversed(res.reports) if r.metrics is not None) \
            if res.reports else evaluate(res.params, test, corpus.norm)
        out[k] = final.mae
    return out


def scatter_data(params: ParamSet, test: Batch, norm: NormStats) -> Tuple[np.ndarray, np.ndarray]:
    """(true, predicted) TTF pairs in years."""
    pred = norm.unscale("ttf_years", predict(params, test))
    true = norm.unscale("ttf_years", test.target)
    return true, pred


# ---------------------------------------------------------------------------
# CSV outputs (9 significant digits)


def fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".9g")


def _write(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_convergence_csv(path, reports: Sequence[RoundReport]) -> None:
    first = next((r.metrics.mae for r in reports if r.metrics is not None), None)
    rows = []
    for r in reports:
        mae = r.metrics.mae if r.metrics is not None else None
        norm_mae = mae / first if mae is not None and first else None
        rows.append([r.round, r.global_loss, mae, norm_mae])
    _write(path, ["round", "global_loss", "mae_years", "mae_normalized"], rows)


def write_localized_csv(path, res: LocalizedResult) -> None:
    rows = [[cid, res.sizes[cid], m.rmse, m.sdev, m.mae] for cid, m in sorted(res.per_client.items())]
    _write(path, ["client_id", "n_i", "rmse", "sdev", "mae"], rows)


def write_comparison_csv(path, regimes: Dict[str, Metrics], reference: Optional[str] = None) -> None:
    """One row per regime; deltas are relative to ``reference`` when given."""
    ref = regimes.get(reference) if reference else None
    rows = []
    for name, m in regimes.items():
        d = [improvement_delta(getattr(m, k), getattr(ref, k)) if ref is not None else None
             for k in ("rmse", "sdev", "mae")]
        rows.append([name, m.n, m.rmse, m.sdev, m.mae, *d])
    _write(path, ["regime", "n", "rmse", "sdev", "mae",
                  "delta_rmse_pct", "delta_sdev_pct", "delta_mae_pct"], rows)


def write_sweep_csv(path, maes: Dict[int, float]) -> None:
    _write(path, ["n_clients", "mae_years"], sorted(maes.items()))


def write_scatter_csv(path, true, pred) -> None:
    _write(path, ["true_years", "pred_years"], zip(true, pred))


def read_scatter_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        vals = np.array([[float(a), float(b)] for a, b in r]).reshape(-1, 2)
    return vals[:, 0], vals[:, 1]
