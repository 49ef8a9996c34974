"""RFBE step execution: gradient equivalence, phase ordering, ledger accounting."""

import numpy as np
import pytest

from msdcl.errors import ConfigError, LedgerStateError, PlanError
from msdcl.losses import LossConfig
from msdcl.rfbe import (
    ActivationLedger,
    RfbePlan,
    _copy_queue,
    _toy_setup,
    equivalence_report,
    peak_tracked_activations,
    run_monolithic_step,
    run_rfbe_step,
)

rs = np.random.default_rng(21)


class TestPlan:
    def test_divisibility(self):
        with pytest.raises(PlanError):
            RfbePlan.create(10, 3)
        with pytest.raises(PlanError):
            RfbePlan.create(0, 1)

    def test_cover(self):
        plan = RfbePlan.create(12, 4)
        assert [s.start for s in plan.phase1] == [0, 4, 8]
        assert plan.phase1 == plan.phase2
        covered = sorted(i for s in plan.phase2 for i in range(s.start, s.stop))
        assert covered == list(range(12))


class TestEquivalence:
    def test_degenerate_plan_is_monolithic(self):
        pairs = _toy_setup(0, 8, 32)
        image_pair, text_pair, q_img, q_txt, temp, batch = pairs
        cfg = LossConfig(mode="msd")
        r1 = run_rfbe_step(batch, RfbePlan.create(8, 8), image_pair, text_pair,
                           _copy_queue(q_img), _copy_queue(q_txt), cfg, temp)
        r2 = run_monolithic_step(batch, image_pair, text_pair,
                                 _copy_queue(q_img), _copy_queue(q_txt), cfg, temp)
        assert r1.loss == r2.loss
        for k in r1.grads:
            assert np.array_equal(r1.grads[k], r2.grads[k])

    def test_all_divisors_both_modes(self):
        rows = equivalence_report(16, [1, 2, 4, 8, 16], seed=3)
        for row in rows:
            assert row["max_grad_dev"] <= 1e-9, row
            assert row["loss_dev"] <= 1e-12, row

    def test_phase1_keys_invariant_to_partitioning(self):
        image_pair, text_pair, q_img, q_txt, temp, batch = _toy_setup(1, 16, 64)
        cfg = LossConfig(mode="onehot")
        snaps = []
        for b in (4, 16):
            qi, qt = _copy_queue(q_img), _copy_queue(q_txt)
            run_rfbe_step(batch, RfbePlan.create(16, b), image_pair, text_pair, qi, qt, cfg, temp)
            snaps.append((qi.snapshot().keys, qt.snapshot().keys))
        assert np.array_equal(snaps[0][0], snaps[1][0])
        assert np.array_equal(snaps[0][1], snaps[1][1])

    def test_deterministic(self):
        image_pair, text_pair, q_img, q_txt, temp, batch = _toy_setup(2, 8, 32)
        cfg = LossConfig(mode="msd")
        r1 = run_rfbe_step(batch, RfbePlan.create(8, 4), image_pair, text_pair,
                           _copy_queue(q_img), _copy_queue(q_txt), cfg, temp)
        r2 = run_rfbe_step(batch, RfbePlan.create(8, 4), image_pair, text_pair,
                           _copy_queue(q_img), _copy_queue(q_txt), cfg, temp)
        assert r1.loss == r2.loss
        for k in r1.grads:
            assert np.array_equal(r1.grads[k], r2.grads[k])

    def test_batch_plan_mismatch(self):
        image_pair, text_pair, q_img, q_txt, temp, batch = _toy_setup(0, 8, 32)
        with pytest.raises(PlanError):
            run_rfbe_step(batch, RfbePlan.create(16, 4), image_pair, text_pair,
                          q_img, q_txt, LossConfig(), temp)

    def test_end2end_mode_rejected(self):
        image_pair, text_pair, q_img, q_txt, temp, batch = _toy_setup(0, 8, 32)
        with pytest.raises(ConfigError):
            run_rfbe_step(batch, RfbePlan.create(8, 8), image_pair, text_pair,
                          q_img, q_txt, LossConfig(mode="end2end"), temp)


def _np_forward(params, x):
    h = x
    for w, b in params.layers:
        h = np.tanh(h @ w + b)
    e = h @ params.proj[0] + params.proj[1]
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def _np_log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def _np_kl(p, logq):
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - logq[nz])))


@pytest.mark.parametrize("mode", ["msd", "onehot"])
def test_loss_matches_per_sample_brute_force(mode):
    """Independent NumPy replay: simulate the queue as a list, compute each
    sample's four losses by hand, and compare the mean to the step loss."""
    n, capacity = 8, 20
    image_pair, text_pair, q_img, q_txt, temp, batch = _toy_setup(4, n, capacity)
    cfg = LossConfig(mode=mode)

    # list-model of both queues: prefill + the step's own keys
    pre_i = [(int(i), k.copy()) for i, k in zip(q_img.ids[: q_img.fill], q_img.ring[: q_img.fill])]
    pre_t = [(int(i), k.copy()) for i, k in zip(q_txt.ids[: q_txt.fill], q_txt.ring[: q_txt.fill])]
    k_img = _np_forward(image_pair.key, batch.image_key)
    k_txt = _np_forward(text_pair.key, batch.text_key)
    model_i = (pre_i + list(zip(batch.ids.tolist(), k_img)))[-capacity:]
    model_t = (pre_t + list(zip(batch.ids.tolist(), k_txt)))[-capacity:]
    keys_i = np.stack([k for _, k in model_i])
    keys_t = np.stack([k for _, k in model_t])
    pos_i = {sid: row for row, (sid, _) in enumerate(model_i)}
    pos_t = {sid: row for row, (sid, _) in enumerate(model_t)}

    tau = float(np.exp(temp.log_tau))
    q_i = _np_forward(image_pair.query, batch.image_query)
    q_t = _np_forward(text_pair.query, batch.text_query)
    mq_i = _np_forward(image_pair.key, batch.image_query)
    mq_t = _np_forward(text_pair.key, batch.text_query)

    per_sample = []
    for j, sid in enumerate(batch.ids.tolist()):
        pi, pt = pos_i[sid], pos_t[sid]
        lsm_i2i = _np_log_softmax(q_i[j] @ keys_i.T / tau)
        lsm_t2t = _np_log_softmax(q_t[j] @ keys_t.T / tau)
        l_i2i, l_t2t = -lsm_i2i[pi], -lsm_t2t[pt]
        student_t2i = _np_log_softmax(q_t[j] @ keys_i.T / tau)
        student_i2t = _np_log_softmax(q_i[j] @ keys_t.T / tau)
        if mode == "msd":
            p_q2k_t2i = np.exp(_np_log_softmax(mq_t[j] @ keys_i.T / tau))
            p_k2k_t2i = np.exp(_np_log_softmax(keys_i[pi] @ keys_i.T / tau))
            p_q2k_i2t = np.exp(_np_log_softmax(mq_i[j] @ keys_t.T / tau))
            p_k2k_i2t = np.exp(_np_log_softmax(keys_t[pt] @ keys_t.T / tau))
            l_t2i = 0.3 * _np_kl(p_q2k_t2i, student_t2i) + 0.7 * _np_kl(p_k2k_t2i, student_t2i)
            l_i2t = 0.3 * _np_kl(p_q2k_i2t, student_i2t) + 0.7 * _np_kl(p_k2k_i2t, student_i2t)
        else:
            l_t2i, l_i2t = -student_t2i[pi], -student_i2t[pt]
        l_uni = 0.5 * (l_i2i + l_t2t)
        l_multi = 0.5 * (l_t2i + l_i2t)
        per_sample.append((1.0 * l_uni + 10.0 * l_multi) / 11.0)

    result = run_monolithic_step(batch, image_pair, text_pair, q_img, q_txt, cfg, temp)
    assert result.loss == pytest.approx(float(np.mean(per_sample)), abs=1e-12)


class TestLedger:
    def test_zero_before_any_step(self):
        ledger = ActivationLedger()
        assert ledger.peak == 0
        with pytest.raises(LedgerStateError):
            peak_tracked_activations(ledger)

    def test_monolithic_peak_scales_linearly_in_n(self):
        peaks = {}
        for n in (64, 128):
            image_pair, text_pair, q_img, q_txt, temp, batch = _toy_setup(7, n, 128)
            res = run_monolithic_step(batch, image_pair, text_pair, q_img, q_txt,
                                      LossConfig(mode="msd"), temp)
            peaks[n] = peak_tracked_activations(res.ledger)
        ratio = peaks[128] / peaks[64]
        assert 1.8 <= ratio <= 2.2

    def test_rfbe_peak_independent_of_n(self):
        peaks = {}
        for n in (64, 256):
            image_pair, text_pair, q_img, q_txt, temp, batch = _toy_setup(8, n, 256)
            res = run_rfbe_step(batch, RfbePlan.create(n, 8), image_pair, text_pair,
                                q_img, q_txt, LossConfig(mode="msd"), temp)
            peaks[n] = peak_tracked_activations(res.ledger)
        assert abs(peaks[64] - peaks[256]) / peaks[256] < 0.05

    def test_monolithic_peak_exceeds_rfbe_by_sub_batch_factor(self):
        n, b = 256, 8
        image_pair, text_pair, q_img, q_txt, temp, batch = _toy_setup(8, n, 256)
        mono = run_monolithic_step(batch, image_pair, text_pair,
                                   _copy_queue(q_img), _copy_queue(q_txt),
                                   LossConfig(mode="msd"), temp)
        rfbe = run_rfbe_step(batch, RfbePlan.create(n, b), image_pair, text_pair,
                             q_img, q_txt, LossConfig(mode="msd"), temp)
        assert mono.ledger.peak / rfbe.ledger.peak >= 0.8 * b
