"""Loss equations: hand-computed values, detachment, and baseline identities."""

import numpy as np
import pytest

from msdcl import tensor as tc
from msdcl.errors import ConfigError, DegenerateBatchError, ParameterError
from msdcl.losses import (
    LossConfig,
    end2end_loss,
    infonce_uni,
    msd_loss,
    msd_targets,
    multi_loss,
    onehot_multi_loss,
    total_loss,
    uni_loss,
)
from msdcl.tensor import Tape, Tensor

rs = np.random.default_rng(5)


def unit_rows(n, d, gen=rs):
    m = gen.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class TestLossConfig:
    def test_defaults_match_reference_values(self):
        cfg = LossConfig()
        assert (cfg.alpha, cfg.beta) == (0.3, 0.7)
        assert (cfg.omega_uni, cfg.omega_multi) == (1.0, 10.0)
        assert cfg.mode == "msd"

    @pytest.mark.parametrize(
        "kwargs", [dict(alpha=-0.1), dict(alpha=0.0, beta=0.0), dict(omega_uni=0.0, omega_multi=0.0),
                   dict(mode="bogus")]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            LossConfig(**kwargs)


class TestInfonce:
    def test_single_key_gives_zero(self):
        q = Tensor(np.array([[1.0, 0.0]]))
        loss = infonce_uni(q, [0], np.array([[1.0, 0.0]]), 1.0)
        assert float(loss.value) == pytest.approx(0.0, abs=1e-12)

    def test_hand_values(self):
        q = Tensor(np.array([[1.0, 0.0]]))
        keys = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = infonce_uni(q, [0], keys, 1.0)
        assert float(loss.value) == pytest.approx(np.log(1 + np.exp(-1)), rel=1e-9)
        loss = infonce_uni(q, [0], keys, 0.5)
        assert float(loss.value) == pytest.approx(np.log(1 + np.exp(-2)), rel=1e-9)

    def test_pos_out_of_range(self):
        with pytest.raises(IndexError):
            infonce_uni(Tensor(np.ones((1, 2))), [2], np.eye(2), 1.0)

    def test_gradient_reaches_query_and_tau_only(self):
        keys = unit_rows(5, 3)
        tape = Tape()
        q = tape.leaf(unit_rows(2, 3))
        log_tau = tape.leaf(np.asarray(np.log(0.5)))
        tape.backward(infonce_uni(q, [0, 3], keys, tc.exp(log_tau)))
        assert np.abs(tape.grad(q)).max() > 0
        assert abs(float(tape.grad(log_tau))) > 0


class TestAverages:
    def test_uni_loss(self):
        assert float(uni_loss(Tensor(0.0), Tensor(0.0)).value) == 0.0
        assert float(uni_loss(Tensor(1.0), Tensor(3.0)).value) == 2.0

    def test_multi_loss(self):
        assert float(multi_loss(Tensor(0.4), Tensor(0.6)).value) == pytest.approx(0.5)

    def test_gradient_splits_evenly(self):
        tape = Tape()
        a, b = tape.leaf(np.asarray(1.0)), tape.leaf(np.asarray(3.0))
        tape.backward(uni_loss(a, b))
        assert float(tape.grad(a)) == pytest.approx(0.5)
        assert float(tape.grad(b)) == pytest.approx(0.5)

    def test_total_loss(self):
        assert float(total_loss(Tensor(11.0), Tensor(0.0), 1.0, 10.0).value) == pytest.approx(1.0)
        assert float(total_loss(Tensor(2.0), Tensor(99.0), 1.0, 0.0).value) == pytest.approx(2.0)
        with pytest.raises(ConfigError):
            total_loss(Tensor(1.0), Tensor(1.0), 0.0, 0.0)

    def test_omega_scaling_neutrality(self):
        lu, lm = Tensor(0.37), Tensor(1.21)
        base = float(total_loss(lu, lm, 1.0, 10.0).value)
        for c in (0.5, 3.0, 117.0):
            scaled = float(total_loss(lu, lm, c * 1.0, c * 10.0).value)
            assert abs(scaled - base) <= 1e-12


class TestMsdTargets:
    def test_k2k_peaks_at_own_index(self):
        keys = unit_rows(6, 4)
        _, p_k2k = msd_targets(unit_rows(3, 4), [1, 4, 2], keys, 0.2)
        assert np.argmax(p_k2k[0]) == 1
        assert np.argmax(p_k2k[1]) == 4
        assert np.argmax(p_k2k[2]) == 2

    def test_orthonormal_hand_value(self):
        keys = np.eye(2)
        _, p_k2k = msd_targets(np.eye(2), [0, 1], keys, 1.0)
        assert np.allclose(p_k2k[0], [0.73106, 0.26894], atol=1e-5)

    def test_query_equal_to_key_gives_equal_rows(self):
        keys = unit_rows(5, 4)
        pos = [2, 0]
        p_q2k, p_k2k = msd_targets(keys[pos], pos, keys, 0.5)
        assert np.allclose(p_q2k, p_k2k)


class TestMsdLoss:
    def test_zero_when_student_matches_teachers(self):
        p = np.array([[0.4, 0.6], [0.25, 0.75]])
        student = Tensor(np.log(p))
        loss = msd_loss(student, p, p, 0.3, 0.7)
        assert float(loss.value) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        student = Tensor(np.log([[0.5, 0.5]]))
        loss = msd_loss(student, np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]), 0.3, 0.7)
        assert float(loss.value) == pytest.approx(0.485203, abs=1e-6)

    def test_teacher_perturbation_changes_value_but_not_gradient_target(self):
        keys = unit_rows(6, 4)
        logits = rs.uniform(-1, 1, (2, 6))
        t1 = msd_targets(unit_rows(2, 4), [0, 1], keys, 0.3)
        t2 = msd_targets(unit_rows(2, 4), [0, 1], keys, 0.3)

        def run(teachers):
            tape = Tape()
            leaf = tape.leaf(logits)
            loss = msd_loss(tc.scaled_log_softmax_rows(leaf, 1.0), *teachers, 0.3, 0.7)
            tape.backward(loss)
            return float(loss.value), tape.grads

        v1, grads1 = run(t1)
        v2, grads2 = run(t2)
        assert v1 != v2
        # the only gradient-bearing node is the student leaf in both runs
        assert len(grads1) == len(grads2) == 1


class TestOnehotAndEnd2End:
    def test_onehot_single_key_zero(self):
        loss = onehot_multi_loss(Tensor(np.array([[0.7]])), [0], 1.0)
        assert float(loss.value) == pytest.approx(0.0, abs=1e-12)

    def test_onehot_equals_msd_with_exact_onehot_teacher(self):
        keys = unit_rows(5, 3)
        q = unit_rows(2, 3)
        pos = [1, 3]
        logits = Tensor(q @ keys.T)
        onehot = np.zeros((2, 5))
        onehot[[0, 1], pos] = 1.0
        a = float(onehot_multi_loss(logits, pos, 0.4).value)
        b = float(msd_loss(tc.scaled_log_softmax_rows(logits, 0.4), onehot, onehot, 0.0, 1.0).value)
        assert a == pytest.approx(b, abs=1e-12)

    def test_onehot_equals_msd_beta_only_at_tiny_temperature(self):
        # with tau -> 0 the key-to-key teacher becomes one-hot at the paired key
        keys = unit_rows(6, 4, np.random.default_rng(17))
        q = unit_rows(3, 4, np.random.default_rng(18))
        pos = [0, 2, 5]
        tau = 0.01
        logits = Tensor(q @ keys.T)
        _, p_k2k = msd_targets(q, pos, keys, tau)
        a = float(onehot_multi_loss(logits, pos, tau).value)
        b = float(msd_loss(tc.scaled_log_softmax_rows(logits, tau), p_k2k, p_k2k, 0.0, 1.0).value)
        assert a == pytest.approx(b, abs=1e-3)

    def test_onehot_matches_infonce_numbers(self):
        logits = Tensor(np.array([[1.0, 0.0]]))
        assert float(onehot_multi_loss(logits, [0], 1.0).value) == pytest.approx(
            np.log(1 + np.exp(-1)), rel=1e-9
        )

    def test_end2end_hand_value(self):
        emb = Tensor(np.eye(2))
        loss = end2end_loss(emb, Tensor(np.eye(2)), 1.0)
        assert float(loss.value) == pytest.approx(np.log(1 + np.exp(-1)), rel=1e-9)

    def test_end2end_low_temperature_limit(self):
        img = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        txt = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        assert float(end2end_loss(img, txt, 0.01).value) < 0.05

    def test_end2end_permutation_invariance(self):
        img = unit_rows(5, 4)
        txt = unit_rows(5, 4)
        base = float(end2end_loss(Tensor(img), Tensor(txt), 0.3).value)
        perm = rs.permutation(5)
        permuted = float(end2end_loss(Tensor(img[perm]), Tensor(txt[perm]), 0.3).value)
        assert base == pytest.approx(permuted, rel=1e-12)

    def test_end2end_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            end2end_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), 1.0)


def test_all_losses_finite_and_nonnegative_on_random_inputs():
    gen = np.random.default_rng(100)
    for _ in range(25):
        b, k, d = 3, 8, 4
        keys = unit_rows(k, d, gen)
        q = unit_rows(b, d, gen)
        pos = gen.integers(0, k, size=b)
        tau = float(gen.uniform(0.01, 2.0))
        vals = [float(infonce_uni(Tensor(q), pos, keys, tau).value)]
        teachers = msd_targets(unit_rows(b, d, gen), pos, keys, tau)
        student = tc.scaled_log_softmax_rows(Tensor(q @ keys.T), tau)
        vals.append(float(msd_loss(student, *teachers, 0.3, 0.7).value))
        vals.append(float(onehot_multi_loss(Tensor(q @ keys.T), pos, tau).value))
        vals.append(float(end2end_loss(Tensor(q), Tensor(unit_rows(b, d, gen)), tau).value))
        for v in vals:
            assert np.isfinite(v) and v >= -1e-12
