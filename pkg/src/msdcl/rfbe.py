"""Resource-free batch enlargement: two-phase step execution.

Phase 1 runs the gradient-free key branch over sub-batches and
concatenates + enqueues all keys, so the queue's newest entries are the
current batch. Phase 2 walks query sub-batches on fresh tapes against
the full key snapshot, scales each sub-loss by |s|/N, and accumulates
gradients; the result equals the monolithic large-batch gradient while
only one sub-batch of activations is ever live.

The ActivationLedger counts gradient-tracked intermediate scalars (the
device-independent proxy for activation memory); teacher distributions
and phase-1 encodings are gradient-free and deliberately not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .encoder import TemperatureParam, bind, encode, encode_arrays, temperature
from .errors import ConfigError, LedgerStateError, PlanError, WarmupError
from .losses import (
    LossConfig,
    infonce_uni,
    msd_loss,
    msd_targets,
    multi_loss,
    onehot_multi_loss,
    total_loss,
    uni_loss,
)
from .momentum import MomentumPair, MomentumQueue
from .tensor import Tape, Tensor

COMPONENT_KEYS = ("loss_i2i", "loss_t2t", "loss_t2i", "loss_i2t", "loss_uni", "loss_multi")


@dataclass
class RfbePlan:
    """Disjoint cover of a primary batch by equal sub-batches."""

    primary: int
    sub: int
    phase1: list[slice]
    phase2: list[slice]

    @classmethod
    def create(cls, primary: int = 512, sub: int = 16) -> "RfbePlan":
        if primary <= 0 or sub <= 0:
            raise PlanError(f"batch sizes must be positive, got N={primary}, b={sub}")
        if primary % sub != 0:
            raise PlanError(f"sub-batch size {sub} does not divide primary batch {primary}")
        slices = [slice(i, i + sub) for i in range(0, primary, sub)]
        return cls(primary=primary, sub=sub, phase1=list(slices), phase2=list(slices))


@dataclass
class ActivationLedger:
    """Running and peak counts of live gradient-tracked scalars."""

    current: int = 0
    peak: int = 0
    steps: int = 0

    def _add(self, n: int) -> None:
        self.current += n
        if self.current > self.peak:
            self.peak = self.current

    def _remove(self, n: int) -> None:
        self.current -= n

    def mark_step(self) -> None:
        self.steps += 1


def peak_tracked_activations(ledger: ActivationLedger) -> int:
    """Peak live tracked-scalar count; requires that a step has run."""
    if ledger.steps == 0:
        raise LedgerStateError("no step has run on this ledger")
    return ledger.peak


@dataclass
class StepBatch:
    """One primary batch of paired views (rows aligned across fields)."""

    ids: np.ndarray
    image_query: np.ndarray
    image_key: np.ndarray
    text_query: np.ndarray
    text_key: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class StepResult:
    grads: dict[str, np.ndarray]
    loss: float
    components: dict[str, float]
    ledger: ActivationLedger


def run_rfbe_step(
    batch: StepBatch,
    plan: RfbePlan,
    image_pair: MomentumPair,
    text_pair: MomentumPair,
    image_queue: MomentumQueue,
    text_queue: MomentumQueue,
    loss_cfg: LossConfig,
    temp: TemperatureParam,
    ledger: ActivationLedger | None = None,
) -> StepResult:
    """Execute one two-phase step. Mutates the queues; parameters untouched."""
    if loss_cfg.mode not in ("msd", "onehot"):
        raise ConfigError(f"momentum step supports msd/onehot modes, got {loss_cfg.mode!r}")
    n = len(batch)
    if n != plan.primary:
        raise PlanError(f"plan covers {plan.primary} samples but batch has {n}")
    if ledger is None:
        ledger = ActivationLedger()
    distill = loss_cfg.mode == "msd"
    tau_teacher = float(np.exp(temp.log_tau))

    # Phase 1: momentum branch, gradient-free, sub-batch by sub-batch.
    k_img, k_txt, mq_img, mq_txt = [], [], [], []
    for sl in plan.phase1:
        k_img.append(encode_arrays(image_pair.key, batch.image_key[sl]))
        k_txt.append(encode_arrays(text_pair.key, batch.text_key[sl]))
        if distill:
            mq_img.append(encode_arrays(image_pair.key, batch.image_query[sl]))
            mq_txt.append(encode_arrays(text_pair.key, batch.text_query[sl]))
    image_queue.enqueue(np.concatenate(k_img, axis=0), batch.ids)
    text_queue.enqueue(np.concatenate(k_txt, axis=0), batch.ids)

    snap_i = image_queue.snapshot()
    snap_t = text_queue.snapshot()
    if snap_i.keys.shape[0] < n or snap_t.keys.shape[0] < n:
        raise WarmupError(
            f"queue fill {min(snap_i.keys.shape[0], snap_t.keys.shape[0])} below primary batch {n}"
        )
    pos_i = np.array([snap_i.index_of[int(s)] for s in batch.ids], dtype=np.int64)
    pos_t = np.array([snap_t.index_of[int(s)] for s in batch.ids], dtype=np.int64)

    if distill:
        # Teachers for T2I come from the image-key queue; I2T from the text-key queue.
        q2k_t2i, k2k_t2i = msd_targets(np.concatenate(mq_txt, axis=0), pos_i, snap_i.keys, tau_teacher)
        q2k_i2t, k2k_i2t = msd_targets(np.concatenate(mq_img, axis=0), pos_t, snap_t.keys, tau_teacher)

    keys_i_t = Tensor(np.ascontiguousarray(snap_i.keys.T))
    keys_t_t = Tensor(np.ascontiguousarray(snap_t.keys.T))

    # Phase 2: on-tape query sub-batches, scaled gradient accumulation.
    grads: dict[str, np.ndarray] | None = None
    loss_val = 0.0
    comps = dict.fromkeys(COMPONENT_KEYS, 0.0)
    for sl in plan.phase2:
        frac = (sl.stop - sl.start) / n
        with Tape(ledger) as tape:
            img_enc = bind(image_pair.query, tape)
            txt_enc = bind(text_pair.query, tape)
            tau, log_tau_leaf = temperature(temp, tape)
            q_img = encode(img_enc, batch.image_query[sl])
            q_txt = encode(txt_enc, batch.text_query[sl])

            l_i2i = infonce_uni(q_img, pos_i[sl], snap_i.keys, tau)
            l_t2t = infonce_uni(q_txt, pos_t[sl], snap_t.keys, tau)
            if distill:
                student_t2i = tc.scaled_log_softmax_rows(tc.matmul(q_txt, keys_i_t), tau)
                student_i2t = tc.scaled_log_softmax_rows(tc.matmul(q_img, keys_t_t), tau)
                l_t2i = msd_loss(student_t2i, q2k_t2i[sl], k2k_t2i[sl], loss_cfg.alpha, loss_cfg.beta)
                l_i2t = msd_loss(student_i2t, q2k_i2t[sl], k2k_i2t[sl], loss_cfg.alpha, loss_cfg.beta)
            else:
                l_t2i = onehot_multi_loss(tc.matmul(q_txt, keys_i_t), pos_i[sl], tau)
                l_i2t = onehot_multi_loss(tc.matmul(q_img, keys_t_t), pos_t[sl], tau)
            l_uni = uni_loss(l_i2i, l_t2t)
            l_multi = multi_loss(l_t2i, l_i2t)
            l_total = total_loss(l_uni, l_multi, loss_cfg.omega_uni, loss_cfg.omega_multi)

            tape.backward(tc.scale(l_total, frac))

            named = (
                img_enc.named_tensors("image")
                + txt_enc.named_tensors("text")
                + [("log_tau", log_tau_leaf)]
            )
            if grads is None:
                grads = {name: np.zeros_like(t.value) for name, t in named}
            for name, t in named:
                grads[name] += tape.grad(t)

            loss_val += frac * l_total.item()
            for key, t in zip(
                COMPONENT_KEYS, (l_i2i, l_t2t, l_t2i, l_i2t, l_uni, l_multi)
            ):
                comps[key] += frac * t.item()

    ledger.mark_step()
    assert grads is not None
    return StepResult(grads=grads, loss=loss_val, components=comps, ledger=ledger)


def run_monolithic_step(
    batch: StepBatch,
    image_pair: MomentumPair,
    text_pair: MomentumPair,
    image_queue: MomentumQueue,
    text_queue: MomentumQueue,
    loss_cfg: LossConfig,
    temp: TemperatureParam,
    ledger: ActivationLedger | None = None,
) -> StepResult:
    """Single forward/backward over the whole primary batch (equivalence oracle)."""
    plan = RfbePlan.create(len(batch), len(batch))
    return run_rfbe_step(
        batch, plan, image_pair, text_pair, image_queue, text_queue, loss_cfg, temp, ledger
    )


def _toy_setup(seed: int, n: int, capacity: int):
    """Small random model, prefilled queues, and one batch of views."""
    from . import rng
    from .encoder import init_params, init_temperature

    d_a, d_b, d_e = 10, 9, 8
    image_pair = MomentumPair.create(init_params(seed, [d_a, 12], d_e))
    text_pair = MomentumPair.create(init_params(seed + 1, [d_b, 12], d_e))
    temp = init_temperature()
    # Nudge the EMA mirrors so query and key branches genuinely differ.
    ema_probe = rng.stream(seed, rng.STREAM_INIT, 99)
    for _, arr in _iter_arrays(image_pair.key):
        arr += 0.01 * ema_probe.standard_normal(arr.shape)
    for _, arr in _iter_arrays(text_pair.key):
        arr += 0.01 * ema_probe.standard_normal(arr.shape)

    g = rng.stream(seed, rng.STREAM_INIT, 100)
    image_queue = MomentumQueue(capacity, d_e)
    text_queue = MomentumQueue(capacity, d_e)
    pre = g.standard_normal((capacity, d_e))
    pre /= np.sqrt((pre * pre).sum(axis=1, keepdims=True))
    fill_ids = np.arange(10_000, 10_000 + capacity)
    image_queue.enqueue(pre, fill_ids)
    pre2 = g.standard_normal((capacity, d_e))
    pre2 /= np.sqrt((pre2 * pre2).sum(axis=1, keepdims=True))
    text_queue.enqueue(pre2, fill_ids)

    batch = StepBatch(
        ids=np.arange(n, dtype=np.int64),
        image_query=g.uniform(-1, 1, (n, d_a)),
        image_key=g.uniform(-1, 1, (n, d_a)),
        text_query=g.uniform(-1, 1, (n, d_b)),
        text_key=g.uniform(-1, 1, (n, d_b)),
    )
    return image_pair, text_pair, image_queue, text_queue, temp, batch


def _iter_arrays(params):
    for i, (w, b) in enumerate(params.layers):
        yield f"h{i}.w", w
        yield f"h{i}.b", b
    yield "proj.w", params.proj[0]
    yield "proj.b", params.proj[1]


def _copy_queue(q: MomentumQueue) -> MomentumQueue:
    state = q.state()
    return MomentumQueue.from_state(
        {**state, "ring": state["ring"].copy(), "ids": state["ids"].copy()}
    )


def equivalence_report(
    n: int,
    b_list,
    seed: int = 0,
    modes=("msd", "onehot"),
    grad_tol: float = 1e-9,
    loss_tol: float = 1e-12,
) -> list[dict]:
    """Compare accumulated RFBE gradients to the monolithic oracle.

    One row per (mode, b): max mixed-relative gradient deviation, absolute
    loss deviation, and the two ledger peaks.
    """
    for b in b_list:
        if n % b != 0:
            raise PlanError(f"sub-batch {b} does not divide N={n}")
    capacity = max(2 * n, 64)
    rows = []
    for mode in modes:
        loss_cfg = LossConfig(mode=mode)
        image_pair, text_pair, q_img, q_txt, temp, batch = _toy_setup(seed, n, capacity)
        mono = run_monolithic_step(
            batch, image_pair, text_pair, _copy_queue(q_img), _copy_queue(q_txt), loss_cfg, temp
        )
        for b in b_list:
            plan = RfbePlan.create(n, b)
            result = run_rfbe_step(
                batch, plan, image_pair, text_pair, _copy_queue(q_img), _copy_queue(q_txt),
                loss_cfg, temp,
            )
            grad_dev = max(
                float(np.max(np.abs(result.grads[k] - mono.grads[k]) / (1.0 + np.abs(mono.grads[k]))))
                for k in mono.grads
            )
            loss_dev = abs(result.loss - mono.loss)
            rows.append(
                {
                    "mode": mode,
                    "n": n,
                    "b": b,
                    "max_grad_dev": grad_dev,
                    "loss_dev": loss_dev,
                    "rfbe_peak": result.ledger.peak,
                    "mono_peak": mono.ledger.peak,
                    "passed": grad_dev <= grad_tol and loss_dev <= loss_tol,
                }
            )
    return rows
