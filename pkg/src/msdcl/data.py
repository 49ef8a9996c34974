"""Deterministic synthetic paired-modality dataset and its binary format.

Samples share a per-class latent vector observed through two fixed random
projections plus Gaussian noise, so paired rows are genuinely aligned
and labels are linearly decodable. All randomness is addressed by
(seed, stream, sample id) counters; the same config always produces the
same bytes on disk.

File layout (little-endian), magic "MSDD":
  header: magic(4) version u32 N u64 d_A u32 d_B u32 C u32 seed u64
  per sample: id u64, x_A as d_A f64, x_B as d_B f64, label u32
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ConfigError, FormatError

MAGIC = b"MSDD"
VERSION = 1
HEADER = struct.Struct("<4sIQIIIQ")  # magic, version, N, d_A, d_B, C, seed

DEFAULT_TRAIN_FRAC = 0.8

# Generation internals (not part of GenConfig): class-mean scale and
# within-class latent spread. The ratio is deliberately class-ambiguous
# (same-class samples are close in feature space) so that exact-label
# contrastive training faces genuine false negatives.
_MEAN_SCALE = 0.9
_LATENT_SIGMA = 0.3


@dataclass
class GenConfig:
    seed: int
    n: int = 2000
    d_latent: int = 16
    d_a: int = 48
    d_b: int = 40
    n_classes: int = 5
    noise_sigma: float = 0.3
    aug_sigma: float = 0.2
    mask_prob: float = 0.1
    scale_jitter: float = 0.1  # augment scale ~ uniform[1-j, 1+j]

    def __post_init__(self):
        if self.n <= 0 or self.d_latent <= 0 or self.d_a <= 0 or self.d_b <= 0:
            raise ConfigError("n and dimensions must be positive")
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.noise_sigma < 0 or self.aug_sigma < 0 or self.scale_jitter < 0:
            raise ConfigError("sigmas must be non-negative")
        if not (0.0 <= self.mask_prob < 1.0):
            raise ConfigError(f"mask_prob must lie in [0, 1), got {self.mask_prob}")


@dataclass
class PairedDataset:
    ids: np.ndarray  # (N,) int64, dense [0, N)
    features_a: np.ndarray  # (N, d_a)
    features_b: np.ndarray  # (N, d_b)
    labels: np.ndarray  # (N,) int32 in [0, C)
    n_classes: int
    seed: int

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d_a(self) -> int:
        return self.features_a.shape[1]

    @property
    def d_b(self) -> int:
        return self.features_b.shape[1]


def class_projections(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class latent means and the two fixed projections (mu, P_A, P_B)."""
    g = rng.stream(cfg.seed, rng.STREAM_PROJ)
    mu = g.standard_normal((cfg.n_classes, cfg.d_latent)) * _MEAN_SCALE
    p_a = g.standard_normal((cfg.d_latent, cfg.d_a)) / np.sqrt(cfg.d_latent)
    p_b = g.standard_normal((cfg.d_latent, cfg.d_b)) / np.sqrt(cfg.d_latent)
    return mu, p_a, p_b


def generate_dataset(cfg: GenConfig) -> PairedDataset:
    """Generate N paired samples, fully determined by cfg.seed."""
    mu, p_a, p_b = class_projections(cfg)
    ids = np.arange(cfg.n, dtype=np.int64)
    labels = np.empty(cfg.n, dtype=np.int32)
    xa = np.empty((cfg.n, cfg.d_a))
    xb = np.empty((cfg.n, cfg.d_b))
    for i in range(cfg.n):
        labels[i] = rng.stream(cfg.seed, rng.STREAM_LABELS, i).integers(0, cfg.n_classes)
        z = mu[labels[i]] + _LATENT_SIGMA * rng.stream(cfg.seed, rng.STREAM_LATENT, i).standard_normal(cfg.d_latent)
        xa[i] = z @ p_a + cfg.noise_sigma * rng.stream(cfg.seed, rng.STREAM_NOISE_A, i).standard_normal(cfg.d_a)
        xb[i] = z @ p_b + cfg.noise_sigma * rng.stream(cfg.seed, rng.STREAM_NOISE_B, i).standard_normal(cfg.d_b)
    return PairedDataset(
        ids=ids, features_a=xa, features_b=xb, labels=labels, n_classes=cfg.n_classes, seed=cfg.seed
    )


def augment(x: np.ndarray, seed: int, cfg: GenConfig) -> np.ndarray:
    """Noise + random scale + coordinate mask; deterministic given seed."""
    g = rng.stream(seed, rng.STREAM_AUG)
    d = x.shape[-1]
    noise = g.standard_normal(d) * cfg.aug_sigma
    s = g.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter)
    out = s * (x + noise)
    if cfg.mask_prob > 0.0:
        out = np.where(g.random(d) < cfg.mask_prob, 0.0, out)
    return out


def train_test_split(ds: PairedDataset, train_frac: float = DEFAULT_TRAIN_FRAC):
    """Deterministic contiguous split: first floor(frac*N) ids train, rest test."""
    if not (0.0 < train_frac <= 1.0):
        raise ConfigError(f"train_frac must lie in (0, 1], got {train_frac}")
    cut = int(len(ds) * train_frac)
    return ds.ids[:cut], ds.ids[cut:]


def file_size(n: int, d_a: int, d_b: int) -> int:
    """Exact on-disk size: header plus N * (8 + 8*(d_a+d_b) + 4) bytes."""
    return HEADER.size + n * (8 + 8 * (d_a + d_b) + 4)


def write_dataset(ds: PairedDataset, path) -> None:
    record = struct.Struct(f"<Q{ds.d_a}d{ds.d_b}dI")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, len(ds), ds.d_a, ds.d_b, ds.n_classes, ds.seed))
        for i in range(len(ds)):
            fh.write(
                record.pack(
                    int(ds.ids[i]), *ds.features_a[i], *ds.features_b[i], int(ds.labels[i])
                )
            )


def read_dataset(path) -> PairedDataset:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise FormatError("truncated header", offset=len(head))
        magic, version, n, d_a, d_b, n_classes, seed = HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        expected = file_size(n, d_a, d_b)
        if size != expected:
            raise FormatError(
                f"file size {size} does not match expected {expected}", offset=min(size, expected)
            )
        record = struct.Struct(f"<Q{d_a}d{d_b}dI")
        ids = np.empty(n, dtype=np.int64)
        xa = np.empty((n, d_a))
        xb = np.empty((n, d_b))
        labels = np.empty(n, dtype=np.int32)
        for i in range(n):
            chunk = fh.read(record.size)
            if len(chunk) < record.size:
                raise FormatError("truncated record", offset=HEADER.size + i * record.size)
            vals = record.unpack(chunk)
            ids[i] = vals[0]
            xa[i] = vals[1 : 1 + d_a]
            xb[i] = vals[1 + d_a : 1 + d_a + d_b]
            labels[i] = vals[-1]
    return PairedDataset(
        ids=ids, features_a=xa, features_b=xb, labels=labels, n_classes=n_classes, seed=seed
    )
