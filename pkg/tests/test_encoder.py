"""Encoder initialization, forward contract, and the learnable temperature."""

import math

import numpy as np
import pytest

from msdcl import tensor as tc
from msdcl.encoder import (
    bind,
    encode,
    encode_arrays,
    init_params,
    init_temperature,
    temperature,
)
from msdcl.errors import ConfigError, ShapeError
from msdcl.tensor import Tape, Tensor, finite_diff_grad

rs = np.random.default_rng(3)


class TestInit:
    def test_deterministic(self):
        a = init_params(11, [8, 16], 4)
        b = init_params(11, [8, 16], 4)
        assert all(
            np.array_equal(x, y)
            for (x, _), (y, _) in zip(a.layers, b.layers)
        )
        assert np.array_equal(a.proj[0], b.proj[0])

    def test_shapes(self):
        p = init_params(0, [8, 16], 4)
        assert p.layers[0][0].shape == (8, 16)
        assert p.proj[0].shape == (16, 4)
        assert p.input_dim == 8 and p.embed_dim == 4

    def test_uniform_moment(self):
        p = init_params(5, [100, 100], 4)
        w = p.layers[0][0]
        a = math.sqrt(6.0 / 200)
        assert abs(w.std() - a / math.sqrt(3)) / (a / math.sqrt(3)) < 0.2
        assert np.all(p.layers[0][1] == 0.0)

    def test_empty_dims_rejected(self):
        with pytest.raises(ConfigError):
            init_params(0, [], 4)


class TestEncode:
    def test_unit_norm_rows(self):
        p = init_params(1, [6, 8], 4)
        x = rs.uniform(-3, 3, (10, 6))
        emb = encode_arrays(p, x)
        assert np.abs(np.linalg.norm(emb, axis=1) - 1.0).max() <= 1e-12

    def test_identical_rows_identical_outputs(self):
        p = init_params(1, [6, 8], 4)
        row = rs.uniform(-1, 1, 6)
        emb = encode_arrays(p, np.stack([row, row, row]))
        assert np.array_equal(emb[0], emb[1])
        assert np.array_equal(emb[1], emb[2])

    def test_width_mismatch(self):
        p = init_params(1, [6, 8], 4)
        with pytest.raises(ShapeError):
            encode_arrays(p, np.ones((2, 5)))

    def test_gradient_of_first_layer(self):
        p = init_params(2, [5, 7], 3)
        x = rs.uniform(-1, 1, (4, 5))
        tape = Tape()
        bound = bind(p, tape)
        tape.backward(tc.mean(encode(bound, x)))
        w_leaf = bound.layers[0][0]

        def f(params):
            q = init_params(2, [5, 7], 3)
            q.layers[0] = (params[0], q.layers[0][1])
            return float(np.mean(encode_arrays(q, x)))

        fd = finite_diff_grad(f, [p.layers[0][0]], 1e-5)
        err = np.max(np.abs(tape.grad(w_leaf) - fd[0]) / (1.0 + np.abs(fd[0])))
        assert err < 1e-6


class TestTemperature:
    def test_values(self):
        tp = init_temperature(1.0)
        tau, _ = temperature(tp)
        assert float(tau.value) == pytest.approx(1.0)
        tp = init_temperature()  # default 0.07
        tau, _ = temperature(tp)
        assert float(tau.value) == pytest.approx(0.07, rel=1e-12)

    def test_chain_rule_through_log_tau(self):
        tp = init_temperature(0.3)
        logits = rs.uniform(-1, 1, (2, 4))
        w = rs.uniform(-1, 1, (2, 4))

        tape = Tape()
        tau, leaf = temperature(tp, tape)
        tape.backward(tc.sum_all(tc.mul(tc.scaled_softmax_rows(Tensor(logits), tau), Tensor(w))))
        g_log_tau = float(tape.grad(leaf))

        def f(params):
            t = float(np.exp(params[0]))
            return float(
                tc.sum_all(tc.mul(tc.scaled_softmax_rows(Tensor(logits), t), Tensor(w))).value
            )

        fd = finite_diff_grad(f, [tp.log_tau], 1e-5)
        assert g_log_tau == pytest.approx(float(fd[0]), rel=1e-6, abs=1e-9)

    def test_nonpositive_init_rejected(self):
        with pytest.raises(ConfigError):
            init_temperature(0.0)


def test_query_and_key_towers_are_ema_compatible():
    from msdcl.momentum import MomentumPair

    pair = MomentumPair.create(init_params(4, [5, 6, 7], 3))
    for (wq, bq), (wk, bk) in zip(pair.query.layers, pair.key.layers):
        assert wq.shape == wk.shape and bq.shape == bk.shape
    assert pair.query.proj[0].shape == pair.key.proj[0].shape
