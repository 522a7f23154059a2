import numpy as np
import pytest

from streamasr.gradcheck import grad_check, grad_check_all
from streamasr.model import ModelSpec, RecurrentSpec, build_model
from streamasr.synthetic import dataset_grams, gen_synthetic_dataset
from streamasr.trainer import TrainConfig, Trainer, paper_train_config, sgd_nesterov_step, sortagrad_order


def small_spec(ds, hidden=12, recurrent=None, grams=None):
    return ModelSpec(
        alphabet=ds.alphabet,
        frontend="log",
        sample_rate=ds.sample_rate,
        conv=[],
        recurrent=recurrent or [RecurrentSpec("fwd")],
        hidden=hidden,
        grams=grams,
    )


class TestSortagrad:
    def test_epoch_zero_sorted(self):
        batches = sortagrad_order([3.0, 1.0, 2.0], epoch=0, batch_size=2, seed=0)
        assert [i for b in batches for i in b] == [1, 2, 0]

    def test_shuffle_deterministic(self):
        a = sortagrad_order([1.0] * 20, epoch=1, batch_size=4, seed=5)
        b = sortagrad_order([1.0] * 20, epoch=1, batch_size=4, seed=5)
        assert a == b
        c = sortagrad_order([1.0] * 20, epoch=2, batch_size=4, seed=5)
        assert a != c

    def test_epoch_zero_invariant_to_permutation(self):
        rng = np.random.default_rng(0)
        durations = list(rng.uniform(0.5, 3.0, 30))
        perm = rng.permutation(30)
        base = sortagrad_order(durations, 0, 4, 0)
        base_durs = [durations[i] for b in base for i in b]
        shuffled = sortagrad_order([durations[p] for p in perm], 0, 4, 0)
        shuf_durs = [[durations[p] for p in perm][i] for b in shuffled for i in b]
        assert base_durs == shuf_durs

    def test_epoch_zero_batches_nondecreasing(self):
        rng = np.random.default_rng(1)
        durations = list(rng.uniform(0.2, 5.0, 50))
        batches = sortagrad_order(durations, 0, 8, 3)
        maxes = [max(durations[i] for i in b) for b in batches]
        assert maxes == sorted(maxes)


class TestNesterovStep:
    def test_hand_computed_step(self):
        p = {"w": np.zeros(1)}
        v = {}
        g = {"w": np.ones(1)}
        p2, v2 = sgd_nesterov_step(p, v, g, lr=0.1, mu=0.9, clip_norm=0.0)
        np.testing.assert_allclose(v2["w"], 1.0)
        np.testing.assert_allclose(p2["w"], -0.19)

    def test_clipping_scale(self):
        g = {"w": np.full(4, 400.0)}  # norm 800
        p = {"w": np.zeros(4)}
        p2, v2 = sgd_nesterov_step(p, {}, g, lr=1.0, mu=0.0, clip_norm=400.0)
        np.testing.assert_allclose(v2["w"], 200.0)  # scaled by 0.5

    def test_clipping_preserves_direction(self):
        rng = np.random.default_rng(2)
        g = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=5)}
        p = {"a": np.zeros((3, 3)), "b": np.zeros(5)}
        _, v = sgd_nesterov_step(p, {}, g, lr=1.0, mu=0.0, clip_norm=1e-3)
        ratio = v["a"] / g["a"]
        np.testing.assert_allclose(ratio, ratio.flat[0])
        assert ratio.flat[0] > 0

    def test_zero_momentum_is_plain_sgd(self):
        p = {"w": np.array([2.0])}
        g = {"w": np.array([0.5])}
        p2, _ = sgd_nesterov_step(p, {}, g, lr=0.2, mu=0.0, clip_norm=0.0)
        np.testing.assert_allclose(p2["w"], 2.0 - 0.2 * 0.5)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError, match="divergence detected"):
            sgd_nesterov_step({"w": np.zeros(1)}, {}, {"w": np.array([np.nan])}, 0.1, 0.9, 400.0)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(loss="nope")

    def test_paper_preset_values(self):
        cfg = paper_train_config(epochs=1)
        assert (cfg.batch_size, cfg.lr, cfg.momentum) == (512, 7e-4, 0.99)


@pytest.fixture(scope="module")
def tiny_dataset():
    return gen_synthetic_dataset(seed=11, n=20, alphabet="abcd", min_label_len=4, max_label_len=8)


class TestTraining:
    def test_zero_epochs_returns_initial_model(self, tiny_dataset):
        cfg = TrainConfig(epochs=0, batch_size=4, noise_prob=0.0, rir_prob=0.0, seed=3)
        spec = small_spec(tiny_dataset)
        trainer = Trainer(cfg, spec, tiny_dataset)
        init = build_model(spec, seed=3)
        trainer.train()
        for k in init.params:
            np.testing.assert_array_equal(trainer.model.params[k], init.params[k])

    def test_bit_deterministic(self, tiny_dataset):
        cfg = TrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=7)
        spec = small_spec(tiny_dataset)
        models = []
        for _ in range(2):
            t = Trainer(cfg, spec, tiny_dataset)
            t.train()
            models.append(t.model)
        for k in models[0].params:
            assert np.array_equal(models[0].params[k], models[1].params[k]), k

    def test_loss_decreases(self, tiny_dataset):
        cfg = TrainConfig(epochs=4, batch_size=4, lr=3e-3, noise_prob=0.0, rir_prob=0.0, seed=1)
        trainer = Trainer(cfg, small_spec(tiny_dataset, hidden=16), tiny_dataset)
        log = trainer.train()
        losses = [r["loss"] for r in log.records]
        assert losses[-1] < losses[0]

    def test_ce_schedule_requires_reference(self, tiny_dataset):
        cfg = TrainConfig(epochs=1, loss="joint", ce_weight=0.5)
        with pytest.raises(ValueError, match="reference checkpoint"):
            Trainer(cfg, small_spec(tiny_dataset), tiny_dataset)

    def test_gram_schedule_requires_inventory(self, tiny_dataset):
        cfg = TrainConfig(epochs=1, loss="gramctc")
        with pytest.raises(ValueError, match="gram inventory"):
            Trainer(cfg, small_spec(tiny_dataset), tiny_dataset)

    def test_runlog_records(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=8, noise_prob=0.0, rir_prob=0.0, seed=2)
        trainer = Trainer(cfg, small_spec(tiny_dataset), tiny_dataset)
        log = trainer.train()
        assert [r["epoch"] for r in log.records] == [0, 1]
        for r in log.records:
            assert set(r) >= {"epoch", "loss", "cer", "wer", "seconds"}
        path = tmp_path / "run.jsonl"
        log.write(path)
        assert len(path.read_text().splitlines()) == 2


class TestGradCheckHarness:
    def test_linear_near_machine_precision(self):
        report = grad_check("linear", seed=0)
        assert report.max_rel_err < 1e-8

    def test_all_components_pass(self):
        reports = grad_check_all(seed=0)
        by_name = {r.component: r for r in reports}
        for name in (
            "pcen",
            "conv2d",
            "batchnorm",
            "gru",
            "bgru",
            "lc_bgru",
            "la_conv",
            "softmax",
            "ctc",
            "gramctc",
            "ce",
        ):
            assert by_name[name].max_rel_err < 1e-4, name

    def test_selftest_detects_injected_fault(self):
        report = grad_check("selftest", seed=0)
        assert report.max_rel_err > 1e-3
        assert report.passed  # failing to pass is this component's success

    def test_unknown_component(self):
        with pytest.raises(KeyError):
            grad_check("nope")
