import io
import math

import numpy as np
import pytest
from conftest import FIXTURES

from grn.corpus import PAD, build_vocab, read_conll
from grn.model import ModelConfig, param_shapes
from grn.numcore import Node
from grn.trainer import (
    LOG_HEADER, CheckpointError, SGD, TrainConfig, VocabMismatchError, init_params, load_checkpoint,
    load_config, lr_schedule, predict, save_checkpoint, sgd_momentum_step, summarize, train, train_runs,
)

SMALL = ModelConfig(word_dim=8, char_dim=6, char_channels=6, context_channels=12)


@pytest.fixture(scope="module")
def corpus():
    train_set = read_conll(FIXTURES / "synthetic_train.conll")
    return train_set, build_vocab(train_set, min_freq=1)


class TestLrSchedule:
    @pytest.mark.parametrize("t, want", [(0, 0.02), (1, 0.02 / 1.02), (199, 0.02 / 4.98)])
    def test_values(self, t, want):
        assert abs(lr_schedule(t) - want) < 1e-12

    def test_monotone_and_bounded(self):
        vals = [lr_schedule(t) for t in range(300)]
        assert all(a > b for a, b in zip(vals, vals[1:])) and max(vals) <= 0.02

    def test_negative(self):
        with pytest.raises(ValueError):
            lr_schedule(-1)


class TestSgd:
    def test_plain_sgd(self):
        theta, g = {"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -1.0])}
        sgd_momentum_step(theta, g, {}, lr=0.1, momentum=0.0)
        np.testing.assert_allclose(theta["w"], [0.95, 2.1], rtol=1e-15)

    def test_two_steps_constant_gradient(self):
        theta, g, v = {"w": np.array([0.0])}, {"w": np.array([1.0])}, {}
        for _ in range(2):
            sgd_momentum_step(theta, g, v, lr=1.0, momentum=0.9)
        np.testing.assert_allclose(theta["w"], [-2.9], rtol=1e-15)

    def test_zero_gradient_keeps_params(self):
        theta, v = {"w": np.array([3.0])}, {}
        for _ in range(5):
            sgd_momentum_step(theta, {"w": np.zeros(1)}, v, lr=1.0)
        assert theta["w"][0] == 3.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_momentum_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, lr=1.0)

    def test_clipping_bounds_update(self):
        theta, g = {"a": np.zeros(2)}, {"a": np.array([30.0, 40.0])}
        sgd_momentum_step(theta, g, {}, lr=1.0, momentum=0.0, clip=5.0)
        assert abs(np.linalg.norm(theta["a"]) - 5.0) < 1e-9
        np.testing.assert_array_equal(g["a"], [30.0, 40.0])  # caller's gradient untouched

    def test_sgd_wrapper_updates(self):
        p = {"w": Node(np.ones(2), requires_grad=True)}
        p["w"].accumulate(np.array([1.0, -1.0]))
        opt = SGD(p, momentum=0.0)
        opt.step(0.5)
        np.testing.assert_array_equal(p["w"].data, [0.5, 1.5])
        opt.zero_grad()
        assert p["w"].grad is None


class TestInit:
    def test_bounds_and_zero_biases(self):
        params = init_params(ModelConfig(), 100, 50, 9, np.random.default_rng(0), np.float64)
        shapes = param_shapes(ModelConfig(), 100, 50, 9)
        for name, (shape, fan_in) in shapes.items():
            data = params[name].data
            assert data.shape == shape
            if fan_in is None:
                assert (data == 0).all(), name
            else:
                bound = math.sqrt(6 / fan_in)
                assert np.abs(data).max() <= bound, name
        big = params["context.conv5.weight"].data
        assert big.size >= 10 ** 4 and np.abs(big).max() > 0.99 * math.sqrt(6 / (5 * 130))
        assert (params["word_embedding"].data[PAD] == 0).all() and (params["char_embedding"].data[PAD] == 0).all()

    def test_deterministic(self):
        a = init_params(SMALL, 10, 10, 3, np.random.default_rng(5))
        b = init_params(SMALL, 10, 10, 3, np.random.default_rng(5))
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.momentum, c.lr0, c.rho, c.epochs, c.runs, c.model.dropout) == \
            (10, 0.9, 0.02, 0.02, 200, 5, 0.5)

    def test_round_trip(self):
        c = TrainConfig(model=SMALL, seed=3)
        assert TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    def test_yaml_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("epochs: 3\nfusion: dfn\ncontext_kernels: [1, 3]\n")
        c = load_config(p)
        assert c.epochs == 3 and c.model.fusion == "dfn" and c.model.context_kernels == (1, 3)


class TestTrain:
    def test_loss_decreases_and_log(self, corpus):
        train_set, vocab = corpus
        log = io.StringIO()
        cfg = TrainConfig(model=SMALL, epochs=3, seed=1)
        res = train(cfg, train_set, vocab, dev_set=train_set, log=log)
        lines = log.getvalue().splitlines()
        assert lines[0] == LOG_HEADER and len(lines) == 4
        assert all(len(ln.split(",")) == 7 for ln in lines[1:])
        assert res.history[1].train_loss < res.history[0].train_loss
        assert res.checkpoint.dev_f1 == max(h.dev_f1 for h in res.history)

    def test_deterministic(self, corpus):
        train_set, vocab = corpus
        cfg = TrainConfig(model=SMALL, epochs=2, seed=4)
        a = [h.train_loss for h in train(cfg, train_set, vocab).history]
        b = [h.train_loss for h in train(cfg, train_set, vocab).history]
        assert a == b

    def test_empty_corpus(self, corpus):
        with pytest.raises(ValueError):
            train(TrainConfig(model=SMALL, epochs=1), [], corpus[1])

    def test_runs_summary(self, corpus):
        train_set, vocab = corpus
        results, summary = train_runs(TrainConfig(model=SMALL, epochs=1), train_set, vocab,
                                      test_set=train_set, runs=2)
        assert [r["seed"] for r in summary["runs"]] == [0, 1]
        assert set(summary["test_f1"]) == {"mean", "std"}
        assert summary == summarize(results)


class TestCheckpoint:
    @pytest.fixture
    def trained(self, corpus):
        train_set, vocab = corpus
        return train(TrainConfig(model=SMALL, epochs=1), train_set, vocab).checkpoint

    def test_round_trip_bit_exact(self, trained, corpus, tmp_path):
        train_set, vocab = corpus
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained, path)
        back = load_checkpoint(path, vocab)
        assert back.config == trained.config and back.labels == trained.labels
        for k, v in trained.params.items():
            assert back.params[k].dtype == v.dtype and np.array_equal(back.params[k], v)
        assert predict(back.model(), train_set, vocab) == predict(trained.model(), train_set, vocab)

    def test_f64(self, corpus, tmp_path):
        train_set, vocab = corpus
        ckpt = train(TrainConfig(model=SMALL, epochs=1, precision="f64"), train_set, vocab).checkpoint
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        assert load_checkpoint(tmp_path / "m.ckpt").params["crf.transitions"].dtype == np.float64

    def test_truncated(self, trained, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained, path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_vocab_mismatch(self, trained, corpus, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained, path)
        other = build_vocab(corpus[0][:3], min_freq=1)
        with pytest.raises(VocabMismatchError):
            load_checkpoint(path, other)
