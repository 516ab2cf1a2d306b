import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlaser.evaluation import (compare, prepare_corpus, read_scatter_csv, run_centralized,
                                 run_localized, scatter_data, sweep_clients, write_comparison_csv,
                                 write_convergence_csv, write_localized_csv, write_scatter_csv,
                                 write_sweep_csv)
from fedlaser.features import build_samples
from fedlaser.federation import FedConfig, RoundReport
from fedlaser.metrics import Metrics, compute_metrics, improvement_delta
from fedlaser.model import ModelConfig
from fedlaser.synth import GeneratorConfig, generate_corpus

SMALL = ModelConfig(gru1=4, gru2=3, attention=3, stat_dense=4, head1=4, head2=3)
QUICK = FedConfig(n_rounds=2, local_epochs=1, batch_size=16)


@pytest.fixture(scope="module")
def corpus():
    samples, _ = build_samples(generate_corpus(GeneratorConfig(device_count=160)))
    return prepare_corpus(samples, 0.9, split_seed=0)


class TestMetrics:
    def test_perfect(self):
        m = compute_metrics([1.0, 2.0], [1.0, 2.0])
        assert (m.rmse, m.sdev, m.mae, m.n) == (0.0, 0.0, 0.0, 2)

    def test_symmetric_errors(self):
        m = compute_metrics([1.0, -1.0], [0.0, 0.0])
        assert (m.mae, m.rmse, m.sdev) == (1.0, 1.0, 1.0)

    def test_constant_bias(self):
        m = compute_metrics([2.5, 3.5, 0.5], [2.0, 3.0, 0.0])
        assert m.mae == 0.5 and m.rmse == 0.5 and m.sdev < 1e-15

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_metrics([], [])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40))
    def test_mae_bounded_by_rmse(self, es):
        m = compute_metrics(np.array(es), np.zeros(len(es)))
        assert 0 <= m.mae <= m.rmse * (1 + 1e-12) + 1e-300


class TestDelta:
    def test_examples(self):
        assert improvement_delta(1.0, 1.0) == 0.0
        assert improvement_delta(0.5, 1.0) == 50.0
        assert improvement_delta(2.0, 1.0) == -100.0

    def test_zero_reference(self):
        with pytest.raises(ZeroDivisionError):
            improvement_delta(0.5, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 10))
    def test_strictly_decreasing(self, a, b, ref):
        if a < b:
            assert improvement_delta(a, ref) > improvement_delta(b, ref)


def test_compare_consistent():
    fl = Metrics(0.3, 0.2, 0.2, 10)
    loc = Metrics(0.6, 0.4, 0.5, 10)

    class L:
        best = loc

    rep = compare(fl, None, L())
    assert rep.delta == {"rmse": 50.0, "sdev": 50.0, "mae": 60.0}


class TestRegimes:
    def test_split_and_scaling(self, corpus):
        assert len(corpus.train) == 144 and len(corpus.test) == 16
        ys = np.array([s.ttf_years for s in corpus.train])
        assert ys.min() == 0.0 and ys.max() == 1.0

    def test_sweep_one_equals_centralized(self, corpus):
        central = run_centralized(corpus.train, corpus.test_batch, QUICK, SMALL, corpus.norm)
        sweep = sweep_clients(corpus, [1], QUICK, SMALL)
        assert sweep[1] == central.metrics.mae

    def test_localized_single_client_is_centralized(self, corpus):
        central = run_centralized(corpus.train, corpus.test_batch, QUICK, SMALL, corpus.norm)
        loc = run_localized(corpus.clients(1), corpus.test_batch, QUICK, SMALL, corpus.norm)
        assert loc.per_client[1] == central.metrics

    def test_localized_reference_is_largest(self, corpus):
        loc = run_localized(corpus.clients(3), corpus.test_batch, QUICK, SMALL, corpus.norm)
        assert loc.best_client == max(loc.sizes, key=loc.sizes.get)
        assert loc.summary["mae"]["min"] <= loc.summary["mae"]["mean"] <= loc.summary["mae"]["max"]
        again = run_localized(corpus.clients(3), corpus.test_batch, QUICK, SMALL, corpus.norm)
        assert again.per_client == loc.per_client

    def test_scatter_reproduces_mae(self, corpus, tmp_path):
        central = run_centralized(corpus.train, corpus.test_batch, QUICK, SMALL, corpus.norm)
        true, pred = scatter_data(central.params, corpus.test_batch, corpus.norm)
        assert len(true) == len(corpus.test)
        path = tmp_path / "scatter.csv"
        write_scatter_csv(path, true, pred)
        t2, p2 = read_scatter_csv(path)
        # 9 significant digits on disk
        assert abs(compute_metrics(p2, t2).mae - central.metrics.mae) < 1e-8 * max(1.0, central.metrics.mae)

    def test_perfect_model_on_diagonal(self, corpus):
        true = np.array([s.ttf_years for s in corpus.raw_test])
        assert np.allclose(corpus.norm.unscale("ttf_years", corpus.test_batch.target), true,
                           rtol=1e-12)


class TestCSV:
    def test_convergence(self, tmp_path):
        reps = [RoundReport(1, 0.5, {}, Metrics(2.0, 1.0, 1.0, 4)),
                RoundReport(2, 0.25, {}, Metrics(1.0, 0.5, 0.5, 4))]
        path = tmp_path / "c.csv"
        write_convergence_csv(path, reps)
        rows = list(csv.reader(open(path)))
        assert rows == [["round", "global_loss", "mae_years", "mae_normalized"],
                        ["1", "0.5", "1", "1"], ["2", "0.25", "0.5", "0.5"]]

    def test_nine_significant_digits(self, tmp_path):
        path = tmp_path / "s.csv"
        write_sweep_csv(path, {8: 1 / 3, 2: 2 / 3})
        assert open(path).read() == "n_clients,mae_years\n2,0.666666667\n8,0.333333333\n"

    def test_comparison_and_localized(self, tmp_path, corpus):
        loc = run_localized(corpus.clients(2), corpus.test_batch, QUICK, SMALL, corpus.norm)
        write_localized_csv(tmp_path / "l.csv", loc)
        rows = list(csv.reader(open(tmp_path / "l.csv")))
        assert rows[0] == ["client_id", "n_i", "rmse", "sdev", "mae"] and len(rows) == 3
        write_comparison_csv(tmp_path / "cmp.csv", {"federated": loc.per_client[1],
                                                    "localized": loc.best}, reference="localized")
        rows = list(csv.reader(open(tmp_path / "cmp.csv")))
        assert rows[2][-3:] == ["0", "0", "0"]
