"""Two-tower MLP encoders with projection heads and a learnable temperature.

Each tower is a stack of tanh layers followed by a linear projection to
the embedding dimension; outputs are row-normalized, so cosine similarity
reduces to a dot product. Query and key towers share this architecture
exactly, which keeps their parameter vectors EMA-compatible coordinate
by coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from . import tensor as tc
from .errors import ConfigError
from .tensor import Tape, Tensor


@dataclass
class EncoderParams:
    """Hidden layers as (weight, bias) pairs plus the projection head."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    proj: tuple[np.ndarray, np.ndarray]

    @property
    def input_dim(self) -> int:
        if self.layers:
            return self.layers[0][0].shape[0]
        return self.proj[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.proj[0].shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            proj=(self.proj[0].copy(), self.proj[1].copy()),
        )


@dataclass
class TemperatureParam:
    """Learnable log-temperature; tau = exp(log_tau) is positive by construction."""

    log_tau: np.ndarray = field(default_factory=lambda: np.asarray(math.log(0.07)))


def init_temperature(tau0: float = 0.07) -> TemperatureParam:
    if tau0 <= 0:
        raise ConfigError(f"initial temperature must be positive, got {tau0}")
    return TemperatureParam(log_tau=np.asarray(math.log(tau0)))


def init_params(seed: int, dims: list[int], d_e: int) -> EncoderParams:
    """Deterministic Xavier-uniform weights, zero biases.

    ``dims`` lists the input width followed by hidden widths; the
    projection maps dims[-1] to ``d_e``.
    """
    if not dims or any(d <= 0 for d in dims) or d_e <= 0:
        raise ConfigError(f"dims must be non-empty and positive, got dims={dims}, d_e={d_e}")
    shapes = [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)] + [(dims[-1], d_e)]
    mats = []
    for li, (d_in, d_out) in enumerate(shapes):
        a = math.sqrt(6.0 / (d_in + d_out))
        g = rng.stream(seed, rng.STREAM_INIT, li)
        w = g.uniform(-a, a, size=(d_in, d_out))
        mats.append((w, np.zeros(d_out)))
    return EncoderParams(layers=mats[:-1], proj=mats[-1])


def named_arrays(params: EncoderParams, prefix: str) -> list[tuple[str, np.ndarray]]:
    """Stable (name, array) pairs: <prefix>.h<i>.{w,b} then <prefix>.proj.{w,b}."""
    out = []
    for i, (w, b) in enumerate(params.layers):
        out.append((f"{prefix}.h{i}.w", w))
        out.append((f"{prefix}.h{i}.b", b))
    out.append((f"{prefix}.proj.w", params.proj[0]))
    out.append((f"{prefix}.proj.b", params.proj[1]))
    return out


class BoundEncoder:
    """Encoder parameters wrapped as tensors, optionally as leaves on a tape."""

    def __init__(self, params: EncoderParams, tape: Tape | None):
        def wrap(arr: np.ndarray) -> Tensor:
            return tape.leaf(arr) if tape is not None else Tensor(arr)

        self.layers = [(wrap(w), wrap(b)) for w, b in params.layers]
        self.proj = (wrap(params.proj[0]), wrap(params.proj[1]))

    def named_tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"{prefix}.h{i}.w", w))
            out.append((f"{prefix}.h{i}.b", b))
        out.append((f"{prefix}.proj.w", self.proj[0]))
        out.append((f"{prefix}.proj.b", self.proj[1]))
        return out


def bind(params: EncoderParams, tape: Tape | None) -> BoundEncoder:
    return BoundEncoder(params, tape)


def encode(bound: BoundEncoder, inputs) -> Tensor:
    """Forward a batch of rows to unit-norm embeddings."""
    h = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    for w, b in bound.layers:
        h = tc.tanh(tc.add_row_bias(tc.matmul(h, w), b))
    w, b = bound.proj
    e = tc.add_row_bias(tc.matmul(h, w), b)
    return tc.row_l2_normalize(e)


def encode_arrays(params: EncoderParams, inputs: np.ndarray) -> np.ndarray:
    """Gradient-free forward pass on plain arrays."""
    return encode(bind(params, None), inputs).value


def temperature(tp: TemperatureParam, tape: Tape | None = None) -> tuple[Tensor, Tensor]:
    """Return (tau, log_tau_leaf); tau = exp(log_tau) stays on-tape if given one."""
    leaf = tape.leaf(tp.log_tau) if tape is not None else Tensor(tp.log_tau)
    return tc.exp(leaf), leaf
