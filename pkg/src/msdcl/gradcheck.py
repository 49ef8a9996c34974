"""Finite-difference verification for every differentiable operation.

Each check builds a random scalar objective, differentiates it with the
tape, and compares against central differences coordinate by
coordinate with the mixed criterion |ad - fd| <= tol * (1 + |fd|).
Inputs that would sit on a kink (relu at 0) or blow up (log near 0) are
drawn away from the singular set; everything else is uniform in [-2, 2].

The sabotage flag corrupts the tanh backward rule by 1 percent and is
only there to prove the checker catches a wrong gradient.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .encoder import EncoderParams, bind, encode
from .losses import (
    end2end_loss,
    infonce_uni,
    msd_loss,
    multi_loss,
    onehot_multi_loss,
    total_loss,
    uni_loss,
)
from .tensor import Tape, Tensor, finite_diff_grad


@dataclass
class OpReport:
    name: str
    max_err: float
    passed: bool


def _unit_rows(rs: np.random.Generator, shape) -> np.ndarray:
    m = rs.uniform(-1.0, 1.0, shape)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _weighted(out: Tensor, rs: np.random.Generator) -> Tensor:
    """Contract a tensor to a scalar with a fixed random weighting."""
    w = rs.uniform(-1.0, 1.0, out.shape)
    return tc.sum_all(tc.mul(out, Tensor(w)))


def _builders(rs: np.random.Generator):
    """(name, params, fn) triples; fn maps leaf/const tensors to a scalar tensor."""
    cases = []

    def case(name, params, fn):
        cases.append((name, [np.asarray(p, dtype=np.float64) for p in params], fn))

    u = lambda *s: rs.uniform(-2.0, 2.0, s)

    a, b = u(3, 4), u(4, 2)
    wts = rs.uniform(-1, 1, (3, 2))
    case("matmul", [a, b], lambda p: tc.sum_all(tc.mul(tc.matmul(p[0], p[1]), Tensor(wts))))

    x = u(4, 3)
    case("transpose", [x], lambda p: _weighted(tc.transpose(p[0]), np.random.default_rng(7)))

    pair = [u(3, 4), u(3, 4)]
    case("add", list(pair), lambda p: _weighted(tc.add(p[0], p[1]), np.random.default_rng(8)))
    case("sub", list(pair), lambda p: _weighted(tc.sub(p[0], p[1]), np.random.default_rng(9)))
    case("mul", list(pair), lambda p: _weighted(tc.mul(p[0], p[1]), np.random.default_rng(10)))
    case("scale", [u(3, 4)], lambda p: _weighted(tc.scale(p[0], 1.7), np.random.default_rng(11)))

    case(
        "add_row_bias",
        [u(4, 5), u(5)],
        lambda p: _weighted(tc.add_row_bias(p[0], p[1]), np.random.default_rng(12)),
    )

    case("tanh", [u(3, 4)], lambda p: _weighted(tc.tanh(p[0]), np.random.default_rng(13)))
    relu_in = rs.uniform(0.05, 2.0, (3, 4)) * rs.choice([-1.0, 1.0], (3, 4))
    case("relu", [relu_in], lambda p: _weighted(tc.relu(p[0]), np.random.default_rng(14)))
    case("exp", [rs.uniform(-2.0, 1.0, (3, 4))], lambda p: _weighted(tc.exp(p[0]), np.random.default_rng(15)))
    case("log", [rs.uniform(0.2, 3.0, (3, 4))], lambda p: _weighted(tc.log(p[0]), np.random.default_rng(16)))

    case("mean", [u(3, 4)], lambda p: tc.mean(p[0]))
    case("sum", [u(3, 4)], lambda p: tc.sum_all(p[0]))

    parts = [u(2, 3), u(3, 3)]
    case(
        "concat_rows",
        list(parts),
        lambda p: _weighted(tc.concat_rows([p[0], p[1]]), np.random.default_rng(17)),
    )

    idx = rs.integers(0, 5, size=4)
    case(
        "take_per_row",
        [u(4, 5)],
        lambda p: _weighted(tc.take_per_row(p[0], idx), np.random.default_rng(18)),
    )

    norm_in = u(3, 4) + np.sign(u(3, 4)) * 0.5
    case(
        "row_l2_normalize",
        [norm_in],
        lambda p: _weighted(tc.row_l2_normalize(p[0]), np.random.default_rng(19)),
    )

    logits = u(3, 5)
    log_tau = np.asarray(rs.uniform(-1.5, 0.5))
    case(
        "scaled_softmax_rows",
        [logits, log_tau],
        lambda p: _weighted(
            tc.scaled_softmax_rows(p[0], tc.exp(p[1])), np.random.default_rng(20)
        ),
    )
    case(
        "scaled_log_softmax_rows",
        [logits.copy(), log_tau.copy()],
        lambda p: _weighted(
            tc.scaled_log_softmax_rows(p[0], tc.exp(p[1])), np.random.default_rng(21)
        ),
    )

    teacher = np.exp(u(3, 5))
    teacher /= teacher.sum(axis=1, keepdims=True)
    case(
        "kl_divergence",
        [u(3, 5)],
        lambda p: tc.kl_divergence(teacher, tc.scaled_log_softmax_rows(p[0], 1.0)),
    )

    # composite: two-layer MLP encoder
    w0, b0 = u(5, 6), u(6)
    w1, b1 = u(6, 4), u(4)
    mlp_in = u(3, 5)

    def mlp_fn(p):
        enc = _TensorEncoder(layers=[(p[0], p[1])], proj=(p[2], p[3]))
        return _weighted(_encode_tensors(enc, Tensor(mlp_in)), np.random.default_rng(22))

    case("mlp_encode", [w0, b0, w1, b1], mlp_fn)

    # composite losses (the five loss equations plus the two baselines)
    keys_i = _unit_rows(rs, (7, 4))
    keys_t = _unit_rows(rs, (7, 4))
    pos_i = rs.integers(0, 7, size=3)
    pos_t = rs.integers(0, 7, size=3)
    q_img_raw = u(3, 4) + np.sign(u(3, 4)) * 0.5
    q_txt_raw = u(3, 4) + np.sign(u(3, 4)) * 0.5
    lt = np.asarray(rs.uniform(-1.5, 0.0))
    tq2k = np.exp(u(3, 7))
    tq2k /= tq2k.sum(axis=1, keepdims=True)
    tk2k = np.exp(u(3, 7))
    tk2k /= tk2k.sum(axis=1, keepdims=True)

    case(
        "infonce",
        [q_img_raw, lt],
        lambda p: infonce_uni(tc.row_l2_normalize(p[0]), pos_i, keys_i, tc.exp(p[1])),
    )
    case(
        "msd_loss",
        [q_txt_raw, lt.copy()],
        lambda p: msd_loss(
            tc.scaled_log_softmax_rows(
                tc.matmul(tc.row_l2_normalize(p[0]), Tensor(keys_i.T.copy())), tc.exp(p[1])
            ),
            tq2k,
            tk2k,
            0.3,
            0.7,
        ),
    )
    case(
        "onehot_multi_loss",
        [q_txt_raw.copy(), lt.copy()],
        lambda p: onehot_multi_loss(
            tc.matmul(tc.row_l2_normalize(p[0]), Tensor(keys_i.T.copy())), pos_i, tc.exp(p[1])
        ),
    )
    case(
        "end2end_loss",
        [q_img_raw.copy(), q_txt_raw.copy(), lt.copy()],
        lambda p: end2end_loss(
            tc.row_l2_normalize(p[0]), tc.row_l2_normalize(p[1]), tc.exp(p[2])
        ),
    )

    def total_fn(p):
        tau = tc.exp(p[2])
        q_i = tc.row_l2_normalize(p[0])
        q_t = tc.row_l2_normalize(p[1])
        l_i2i = infonce_uni(q_i, pos_i, keys_i, tau)
        l_t2t = infonce_uni(q_t, pos_t, keys_t, tau)
        l_t2i = msd_loss(
            tc.scaled_log_softmax_rows(tc.matmul(q_t, Tensor(keys_i.T.copy())), tau),
            tq2k, tk2k, 0.3, 0.7,
        )
        l_i2t = msd_loss(
            tc.scaled_log_softmax_rows(tc.matmul(q_i, Tensor(keys_t.T.copy())), tau),
            tq2k, tk2k, 0.3, 0.7,
        )
        return total_loss(uni_loss(l_i2i, l_t2t), multi_loss(l_t2i, l_i2t), 1.0, 10.0)

    case("weighted_total", [q_img_raw.copy(), q_txt_raw.copy(), lt.copy()], total_fn)

    return cases


class _TensorEncoder:
    def __init__(self, layers, proj):
        self.layers = layers
        self.proj = proj


def _encode_tensors(enc: _TensorEncoder, x: Tensor) -> Tensor:
    h = x
    for w, b in enc.layers:
        h = tc.tanh(tc.add_row_bias(tc.matmul(h, w), b))
    w, b = enc.proj
    return tc.row_l2_normalize(tc.add_row_bias(tc.matmul(h, w), b))


@contextlib.contextmanager
def _sabotaged_tanh():
    original = tc.tanh

    def bad_tanh(t):
        return tc._elementwise_unary(
            "tanh", t, np.tanh, lambda g, x, y: 1.01 * g * (1.0 - y * y)
        )

    tc.tanh = bad_tanh
    try:
        yield
    finally:
        tc.tanh = original


def run_suite(
    seed: int = 0,
    instances: int = 20,
    tol: float = 1e-6,
    eps: float = 1e-5,
    sabotage: bool = False,
) -> list[OpReport]:
    """Check every op on `instances` random cases; returns one report per op."""
    ctx = _sabotaged_tanh() if sabotage else contextlib.nullcontext()
    worst: dict[str, float] = {}
    with ctx:
        for inst in range(instances):
            rs = np.random.default_rng(seed * 100003 + inst)
            for name, params, fn in _builders(rs):
                tape = Tape()
                leaves = [tape.leaf(p) for p in params]
                tape.backward(fn(leaves))
                ad = [tape.grad(leaf) for leaf in leaves]
                fd = finite_diff_grad(lambda ps: float(fn([Tensor(p) for p in ps]).value), params, eps)
                err = max(
                    float(np.max(np.abs(g_ad - g_fd) / (1.0 + np.abs(g_fd))))
                    for g_ad, g_fd in zip(ad, fd)
                )
                worst[name] = max(worst.get(name, 0.0), err)
    return [OpReport(name=k, max_err=v, passed=v <= tol) for k, v in worst.items()]


def format_reports(reports: list[OpReport]) -> str:
    width = max(len(r.name) for r in reports)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  status"]
    for r in sorted(reports, key=lambda r: r.name):
        lines.append(f"{r.name:<{width}}  {r.max_err:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
