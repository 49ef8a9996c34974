"""Contrastive and self-distillation losses.

Uni-modal InfoNCE against the momentum queue, the momentum
self-distillation multi-modal loss built from query-to-key and
key-to-key teacher distributions, the one-hot cross-modal baseline, the
in-batch end-to-end baseline, and the weighted total. All batch losses
are arithmetic means over the batch, so their magnitude is independent
of batch size; gradient accumulation relies on that.

Students are evaluated through log-softmax, never through probabilities,
and teachers are always detached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import tensor as tc
from .errors import ConfigError, DegenerateBatchError, ParameterError
from .tensor import Tensor

MODES = ("msd", "onehot", "end2end")


@dataclass
class LossConfig:
    """Loss weights and which multi-modal pathway to train."""

    alpha: float = 0.3
    beta: float = 0.7
    omega_uni: float = 1.0
    omega_multi: float = 10.0
    mode: str = "msd"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError(
                f"alpha/beta must be non-negative with alpha+beta > 0, got {self.alpha}, {self.beta}"
            )
        if self.omega_uni < 0 or self.omega_multi < 0 or self.omega_uni + self.omega_multi <= 0:
            raise ConfigError(
                f"omegas must be non-negative and not both zero, got {self.omega_uni}, {self.omega_multi}"
            )
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")


def _check_pos_rows(pos_rows, n_keys: int) -> np.ndarray:
    pos = np.asarray(pos_rows, dtype=np.int64)
    if pos.size and (pos.min() < 0 or pos.max() >= n_keys):
        raise IndexError(f"positive row index out of range [0, {n_keys})")
    return pos


def infonce_uni(q_emb: Tensor, pos_rows, keys: np.ndarray, tau) -> Tensor:
    """Mean InfoNCE of queries against a constant key matrix.

    Gradient flows into q_emb and tau only; keys stay off-tape.
    """
    keys = np.asarray(keys, dtype=np.float64)
    pos = _check_pos_rows(pos_rows, keys.shape[0])
    logits = tc.matmul(q_emb, Tensor(np.ascontiguousarray(keys.T)))
    logp = tc.scaled_log_softmax_rows(logits, tau)
    return tc.neg(tc.mean(tc.take_per_row(logp, pos)))


def uni_loss(loss_i2i, loss_t2t) -> Tensor:
    """Average of the two uni-modal losses."""
    return tc.scale(tc.add(loss_i2i, loss_t2t), 0.5)


def msd_targets(
    momentum_query_emb: np.ndarray, paired_key_rows, keys: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    """Teacher distributions from the gradient-free branch.

    p_q2k: softmax similarities of momentum-encoded queries to all keys.
    p_k2k: softmax similarities of each sample's own key to all keys.
    Both are plain arrays; teachers never carry gradients.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    keys = np.ascontiguousarray(np.asarray(keys, dtype=np.float64))
    memb = np.asarray(momentum_query_emb, dtype=np.float64)
    pos = _check_pos_rows(paired_key_rows, keys.shape[0])
    p_q2k = K.row_softmax(np.ascontiguousarray(memb @ keys.T), tau)
    p_k2k = K.row_softmax(np.ascontiguousarray(keys[pos] @ keys.T), tau)
    return p_q2k, p_k2k


def msd_loss(student_log_probs: Tensor, p_q2k, p_k2k, alpha: float, beta: float) -> Tensor:
    """alpha * KL(p_q2k || student) + beta * KL(p_k2k || student), batch-meaned."""
    if alpha < 0 or beta < 0 or alpha + beta <= 0:
        raise ConfigError(f"invalid alpha/beta: {alpha}, {beta}")
    terms = []
    if alpha > 0:
        terms.append(tc.scale(tc.kl_divergence(p_q2k, student_log_probs), alpha))
    if beta > 0:
        terms.append(tc.scale(tc.kl_divergence(p_k2k, student_log_probs), beta))
    total = terms[0]
    for t in terms[1:]:
        total = tc.add(total, t)
    return total


def multi_loss(loss_t2i, loss_i2t) -> Tensor:
    """Average of the two multi-modal losses."""
    return tc.scale(tc.add(loss_t2i, loss_i2t), 0.5)


def total_loss(loss_uni, loss_multi, omega_uni: float, omega_multi: float) -> Tensor:
    """(omega_uni * L_uni + omega_multi * L_multi) / (omega_uni + omega_multi)."""
    if omega_uni < 0 or omega_multi < 0 or omega_uni + omega_multi <= 0:
        raise ConfigError(f"omegas must be non-negative and not both zero: {omega_uni}, {omega_multi}")
    s = omega_uni + omega_multi
    return tc.add(tc.scale(loss_uni, omega_uni / s), tc.scale(loss_multi, omega_multi / s))


def onehot_multi_loss(student_logits: Tensor, pos_rows, tau) -> Tensor:
    """Cross-modal InfoNCE with the paired key as the single positive."""
    pos = _check_pos_rows(pos_rows, student_logits.shape[1])
    logp = tc.scaled_log_softmax_rows(student_logits, tau)
    return tc.neg(tc.mean(tc.take_per_row(logp, pos)))


def end2end_loss(img_emb: Tensor, txt_emb: Tensor, tau) -> Tensor:
    """Symmetric in-batch InfoNCE over the b x b similarity matrix."""
    b = img_emb.shape[0]
    if b != txt_emb.shape[0]:
        raise DegenerateBatchError("modalities must have equal batch sizes")
    if b < 2:
        raise DegenerateBatchError("end-to-end loss needs a batch of at least 2")
    diag = np.arange(b)
    logits_i2t = tc.matmul(img_emb, tc.transpose(txt_emb))
    loss_i2t = tc.neg(tc.mean(tc.take_per_row(tc.scaled_log_softmax_rows(logits_i2t, tau), diag)))
    logits_t2i = tc.transpose(logits_i2t)
    loss_t2i = tc.neg(tc.mean(tc.take_per_row(tc.scaled_log_softmax_rows(logits_t2i, tau), diag)))
    return tc.scale(tc.add(loss_i2t, loss_t2i), 0.5)
