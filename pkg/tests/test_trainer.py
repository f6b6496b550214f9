import math

import numpy as np
import pytest

from homm import network as N
from homm.data import LabeledDataset, ShiftSpec, gen_gaussian_mixture_pair
from homm.discrepancy import ClassCenters
from homm.trainer import (
    ConfigError,
    TrainConfig,
    TrainingAborted,
    default_lambda_d,
    evaluate,
    heldout_discrepancy,
    pseudo_label,
    run_experiment,
    train_step,
)


@pytest.fixture(scope="module")
def shifted():
    return gen_gaussian_mixture_pair(ShiftSpec(rotation=math.radians(40), samples_per_class=100,
                                               seed=1))


def small(**kw):
    base = dict(adapted_width=8, hidden_sizes=(8,), batch_size=16, total_steps=20,
                eval_every=5, lambda_d=100.0)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("field,value", [
        ("eta", 1.5), ("eta", 0.0), ("batch_size", 1), ("loss_variant", "cmd"),
        ("lambda_dc", -1.0), ("gamma", 0.0), ("kernel_exponent", 3), ("alpha", 2.0),
    ])
    def test_invalid_field_named(self, field, value):
        with pytest.raises(ConfigError) as err:
            TrainConfig(**{field: value})
        assert err.value.field == field

    def test_warmup_beyond_total(self):
        with pytest.raises(ConfigError, match="warmup_steps"):
            TrainConfig(total_steps=10, warmup_steps=11)

    def test_documented_defaults(self):
        cfg = TrainConfig()
        assert cfg.effective_lambda_d == 1e4 and cfg.gamma == 1e-4 and cfg.alpha == 0.5
        assert cfg.eta == 0.8
        assert default_lambda_d(4) == 1e7


class TestPseudoLabel:
    def test_confident(self):
        a = pseudo_label([[0.9, 0.1]], 0.8)
        assert a.sample_indices.tolist() == [0] and a.labels.tolist() == [0]
        assert a.confidences.tolist() == [0.9]

    def test_unconfident(self):
        assert len(pseudo_label([[0.6, 0.4]], 0.8)) == 0

    def test_tie_lowest_index(self):
        assert pseudo_label([[0.5, 0.5]], 0.4).labels.tolist() == [0]

    def test_strictly_above_threshold(self):
        assert len(pseudo_label([[0.8, 0.2]], 0.8)) == 0

    def test_count_monotone_in_eta(self):
        P = np.random.default_rng(0).dirichlet(np.ones(4) * 0.5, size=200)
        counts = [len(pseudo_label(P, eta)) for eta in np.linspace(0.05, 0.95, 19)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        for eta in (0.3, 0.6, 0.9):
            assert np.all(pseudo_label(P, eta).confidences > eta)


class TestTrainStep:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.xs = rng.normal(size=(8, 2))
        self.ys = rng.integers(0, 3, 8)
        self.xt = rng.normal(size=(8, 2)) + 1.0
        self.net = N.init_network([2, 8, 8, 3], seed=0)
        self.state = N.OptimizerState.for_params(self.net.params())
        self.centers = ClassCenters.zeros(3, 8)

    def step(self, cfg, k=0):
        return train_step(self.net, self.state, self.centers, (self.xs, self.ys), self.xt,
                          cfg, k)

    def test_warmup_freezes_clustering(self):
        cfg = small(lambda_dc=1.0, eta=0.1, warmup_steps=5)
        _, _, centers, rec = self.step(cfg, 4)
        assert rec["L_dc"] == 0.0 and rec["n_pseudo"] == 0
        np.testing.assert_array_equal(centers.centers, self.centers.centers)

    def test_after_warmup_updates_centers(self):
        cfg = small(lambda_dc=1.0, eta=0.1, warmup_steps=5)
        _, _, centers, rec = self.step(cfg, 5)
        assert rec["n_pseudo"] == 8
        assert rec["L_dc"] > 0
        assert centers.centers.any()

    def test_deterministic(self):
        cfg = small(loss_variant="kernelized", p=3, N=50, gamma=1.0, lambda_dc=0.5, eta=0.2)
        a = self.step(cfg, 3)
        b = self.step(cfg, 3)
        assert a[3] == b[3]
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a[0].params(), b[0].params()))

    def test_sampled_indices_change_per_step(self):
        cfg = small(loss_variant="sampled", p=3, N=20)
        assert self.step(cfg, 0)[3]["L_d"] != self.step(cfg, 1)[3]["L_d"]

    def test_step_past_total(self):
        with pytest.raises(ValueError):
            self.step(small(total_steps=3), 3)

    def test_abort_names_term(self):
        cfg = small(lambda_d=1e308, loss_variant="mmd")
        with pytest.raises(TrainingAborted, match="step 0"):
            self.step(cfg, 0)


class TestEvaluate:
    def test_perfect(self):
        net = N.init_network([2, 4, 3], seed=0)
        X = np.random.default_rng(1).normal(size=(30, 2))
        pred = N.forward(net, X)[1].argmax(1)
        assert evaluate(net, LabeledDataset(X, pred)).accuracy == 1.0

    def test_absent_class(self):
        net = N.zero_network([2, 4, 3])
        res = evaluate(net, LabeledDataset(np.zeros((4, 2)), np.array([0, 0, 1, 1])))
        assert res.per_class[2] is None
        assert res.per_class[0] == 1.0 and res.per_class[1] == 0.0

    def test_chance_level(self):
        rng = np.random.default_rng(2)
        net = N.init_network([2, 8, 4], seed=3)
        ds = LabeledDataset(rng.normal(size=(4000, 2)), rng.permutation(np.arange(4000) % 4))
        assert abs(evaluate(net, ds).accuracy - 0.25) < 0.03

    def test_needs_labels(self):
        with pytest.raises(ValueError, match="labelled"):
            evaluate(N.zero_network([2, 2, 2]), LabeledDataset(np.zeros((2, 2))))


class TestRunExperiment:
    def test_zero_steps(self, shifted):
        res = run_experiment(small(total_steps=0), *shifted)
        assert len(res.metrics) == 0
        assert all(a.tobytes() == b.tobytes()
                   for a, b in zip(res.network.params(), res.initial_network.params()))

    def test_repeatable(self, shifted):
        cfg = small(loss_variant="sampled", p=3, N=30, lambda_dc=0.3, warmup_steps=10)
        a = run_experiment(cfg, *shifted)
        b = run_experiment(cfg, *shifted)
        assert a.metrics.to_jsonl() == b.metrics.to_jsonl()

    def test_target_labels_never_used_for_training(self, shifted):
        source, target = shifted
        scrambled = LabeledDataset(target.features, np.zeros(len(target), dtype=int), "target")
        cfg = small(lambda_dc=0.3, eta=0.3, eval_every=0)
        a = run_experiment(cfg, source, target)
        b = run_experiment(cfg, source, scrambled)
        assert all(x.tobytes() == y.tobytes()
                   for x, y in zip(a.network.params(), b.network.params()))

    def test_records_have_accuracy(self, shifted):
        res = run_experiment(small(total_steps=11, eval_every=5), *shifted)
        accs = [r["step"] for r in res.metrics.records if "target_acc" in r]
        assert accs == [0, 5, 10]
        assert len(res.metrics) == 11

    def test_supervised_sanity(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(200, 2))
        y = (X[:, 0] + X[:, 1] > 0).astype(int)
        X += np.where(y[:, None] == 1, 1.0, -1.0)
        ds = LabeledDataset(X, y)
        cfg = TrainConfig(lambda_d=0.0, adapted_width=8, hidden_sizes=(8,), batch_size=32,
                          total_steps=600, learning_rate=1e-2, eval_every=0, log_every=50)
        res = run_experiment(cfg, ds, ds)
        assert res.metrics.records[-1]["L_s"] < 0.05

    def test_zero_shift_accuracy_gap(self):
        source, target = gen_gaussian_mixture_pair(ShiftSpec(seed=0, noise_std=0.5))
        cfg = TrainConfig(p=3, lambda_d=1e3, adapted_width=16, total_steps=1000, eval_every=0,
                          log_every=100)
        res = run_experiment(cfg, source, target)
        assert abs(res.target_accuracy - res.source_accuracy) <= 0.02

    def test_alignment_reduces_discrepancy(self, shifted):
        source, target = shifted
        common = dict(adapted_width=16, total_steps=400, eval_every=0, log_every=100, p=3,
                      batch_size=32)
        tuned = TrainConfig(lambda_d=1e3, **common)
        plain = TrainConfig(lambda_d=0.0, **common)
        d_tuned = heldout_discrepancy(run_experiment(tuned, source, target).network,
                                      source, target, tuned)
        d_plain = heldout_discrepancy(run_experiment(plain, source, target).network,
                                      source, target, tuned)
        assert d_plain > d_tuned
