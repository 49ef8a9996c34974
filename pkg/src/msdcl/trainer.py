"""Training loop: data -> encoders -> momentum bank -> losses -> RFBE.

One optimizer step and one EMA update per primary batch, applied strictly
after phase 2 completes. The first step of a fresh run is a warmup step:
the queues start empty, so losses are computed and logged (flagged) but
the update is skipped until the pre-step queue fill reaches the primary
batch size. Checkpoints restore training bit-exactly because every
random draw is addressed by (seed, stream, counters) rather than by
mutable RNG state.

Checkpoint layout (little-endian), magic "MSDC": header (magic, version
u32, config-hash u64, step u64), named-tensor table (count u32; per
tensor: name-length u16, UTF-8 name, rank u8, dims u32 each, f64
payload), two queue blocks, and a counter block.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import shutil
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from . import rng
from . import tensor as tc
from .data import DEFAULT_TRAIN_FRAC, PairedDataset, augment, read_dataset, train_test_split
from .encoder import (
    EncoderParams,
    TemperatureParam,
    bind,
    encode,
    init_params,
    init_temperature,
    named_arrays,
    temperature,
)
from .errors import (
    ConfigError,
    FormatError,
    NonFiniteError,
    ParameterError,
    ScheduleError,
    ShapeError,
)
from .losses import LossConfig, end2end_loss
from .momentum import MomentumPair, MomentumQueue, ema_update
from .rfbe import ActivationLedger, RfbePlan, StepBatch, StepResult, run_rfbe_step
from .tensor import Tape

CKPT_MAGIC = b"MSDC"
CKPT_VERSION = 1

# Reference configuration trains pretrained backbones at lr 1e-6; the
# from-scratch synthetic default needs a larger step size.
PAPER_BASE_LR = 1e-6


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 50
    primary_batch: int = 512
    sub_batch: int = 16
    base_lr: float = 1e-3
    momentum: float = 0.995
    queue_capacity: int = 4096
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    tau_init: float = 0.07
    train_frac: float = DEFAULT_TRAIN_FRAC
    shuffle: bool = True
    aug_sigma: float = 0.2
    mask_prob: float = 0.1
    scale_jitter: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.primary_batch < 1 or self.sub_batch < 1 or self.primary_batch % self.sub_batch:
            raise ConfigError(
                f"sub_batch must divide primary_batch, got {self.primary_batch} % {self.sub_batch}"
            )
        if not (0.0 <= self.momentum <= 1.0):
            raise ConfigError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be non-negative, got {self.base_lr}")
        if self.queue_capacity < self.primary_batch:
            raise ConfigError(
                f"queue capacity {self.queue_capacity} below primary batch {self.primary_batch}"
            )
        if not (0.0 < self.train_frac <= 1.0):
            raise ConfigError(f"train_frac must lie in (0, 1], got {self.train_frac}")


def config_hash(cfg: TrainConfig) -> int:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:8], "little")


# ---------------------------------------------------------------------------
# optimizer and schedule


def adamw_update_array(w, g, m, v, lr, beta1, beta2, eps, weight_decay, t) -> None:
    """One AdamW step on a single parameter array, in place."""
    if t < 1:
        raise ParameterError(f"step counter must be >= 1, got {t}")
    if not (w.shape == g.shape == m.shape == v.shape):
        raise ShapeError("parameter, gradient and moment shapes must agree")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    K.adamw_update(
        w.reshape(-1),
        np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
        m.reshape(-1),
        v.reshape(-1),
        lr,
        beta1,
        beta2,
        bc1,
        bc2,
        eps,
        weight_decay,
    )


def adamw_step(params, grads, moments_m, moments_v, lr, beta1, beta2, eps, weight_decay, t) -> None:
    """Apply AdamW to every named parameter, in place."""
    for name, w in params.items():
        adamw_update_array(
            w, grads[name], moments_m[name], moments_v[name], lr, beta1, beta2, eps, weight_decay, t
        )


def cosine_lr(t: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr to 0 over total_steps, no warmup."""
    if total_steps <= 0:
        raise ScheduleError(f"total_steps must be positive, got {total_steps}")
    if t < 0 or t > total_steps:
        raise ScheduleError(f"step {t} outside schedule range [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total_steps))


# ---------------------------------------------------------------------------
# model state


@dataclass
class ModelState:
    image_pair: MomentumPair
    text_pair: MomentumPair
    temp: TemperatureParam
    image_queue: MomentumQueue
    text_queue: MomentumQueue

    def trainable(self) -> dict[str, np.ndarray]:
        out = dict(named_arrays(self.image_pair.query, "image"))
        out.update(named_arrays(self.text_pair.query, "text"))
        out["log_tau"] = self.temp.log_tau
        return out

    def key_mirrors(self) -> dict[str, np.ndarray]:
        out = dict(named_arrays(self.image_pair.key, "image_key"))
        out.update(named_arrays(self.text_pair.key, "text_key"))
        return out


def init_model(cfg: TrainConfig, d_a: int, d_b: int) -> ModelState:
    hidden = list(cfg.hidden_dims)
    image = init_params(cfg.seed, [d_a] + hidden, cfg.embed_dim)
    text = init_params(cfg.seed + 1, [d_b] + hidden, cfg.embed_dim)
    return ModelState(
        image_pair=MomentumPair.create(image),
        text_pair=MomentumPair.create(text),
        temp=init_temperature(cfg.tau_init),
        image_queue=MomentumQueue(cfg.queue_capacity, cfg.embed_dim),
        text_queue=MomentumQueue(cfg.queue_capacity, cfg.embed_dim),
    )


@dataclass
class TrainerState:
    model: ModelState
    moments_m: dict[str, np.ndarray]
    moments_v: dict[str, np.ndarray]
    epoch_completed: int = 0
    global_step: int = 0
    adam_t: int = 0
    divergence_streak: int = 0
    initial_epoch_loss: float = math.nan
    cfg_hash: int = 0


def _fresh_trainer_state(cfg: TrainConfig, d_a: int, d_b: int) -> TrainerState:
    model = init_model(cfg, d_a, d_b)
    trainable = model.trainable()
    return TrainerState(
        model=model,
        moments_m={k: np.zeros_like(v) for k, v in trainable.items()},
        moments_v={k: np.zeros_like(v) for k, v in trainable.items()},
        cfg_hash=config_hash(cfg),
    )


# ---------------------------------------------------------------------------
# checkpoint format


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<B", fh.read(1))
    dims = [struct.unpack("<I", fh.read(4))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(8 * count)
    if len(payload) < 8 * count:
        raise FormatError(f"truncated payload for tensor {name!r}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return name, arr


def _write_queue(fh, q: MomentumQueue) -> None:
    fh.write(struct.pack("<QIQQ", q.capacity, q.dim, q.head, q.fill))
    fh.write(np.ascontiguousarray(q.ring, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(q.ids, dtype="<i8").tobytes())


def _read_queue(fh) -> MomentumQueue:
    capacity, dim, head, fill = struct.unpack("<QIQQ", fh.read(28))
    ring = np.frombuffer(fh.read(8 * capacity * dim), dtype="<f8").astype(np.float64)
    ids = np.frombuffer(fh.read(8 * capacity), dtype="<i8").astype(np.int64)
    return MomentumQueue.from_state(
        {
            "capacity": capacity,
            "dim": dim,
            "ring": ring.reshape(capacity, dim),
            "ids": ids,
            "head": head,
            "fill": fill,
        }
    )


def save_checkpoint(ts: TrainerState, path) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    tensors.extend(ts.model.trainable().items())
    tensors.extend(ts.model.key_mirrors().items())
    tensors.extend((f"opt.m.{k}", v) for k, v in ts.moments_m.items())
    tensors.extend((f"opt.v.{k}", v) for k, v in ts.moments_v.items())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQQ", CKPT_VERSION, ts.cfg_hash, ts.global_step))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, np.asarray(arr, dtype=np.float64))
        _write_queue(fh, ts.model.image_queue)
        _write_queue(fh, ts.model.text_queue)
        fh.write(
            struct.pack(
                "<QQQd",
                ts.epoch_completed,
                ts.adam_t,
                ts.divergence_streak,
                ts.initial_epoch_loss,
            )
        )


def _params_from_tensors(tensors: dict[str, np.ndarray], prefix: str) -> EncoderParams:
    layers = []
    i = 0
    while f"{prefix}.h{i}.w" in tensors:
        layers.append((tensors[f"{prefix}.h{i}.w"], tensors[f"{prefix}.h{i}.b"]))
        i += 1
    for required in (f"{prefix}.proj.w", f"{prefix}.proj.b"):
        if required not in tensors:
            raise FormatError(f"checkpoint is missing tensor {required!r}")
    return EncoderParams(layers=layers, proj=(tensors[f"{prefix}.proj.w"], tensors[f"{prefix}.proj.b"]))


def load_checkpoint(path) -> TrainerState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", offset=0)
        version, cfg_hash, global_step = struct.unpack("<IQQ", fh.read(20))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = _read_tensor(fh)
            tensors[name] = arr
        image_queue = _read_queue(fh)
        text_queue = _read_queue(fh)
        epoch_completed, adam_t, streak, initial_loss = struct.unpack("<QQQd", fh.read(32))

    if "log_tau" not in tensors:
        raise FormatError("checkpoint is missing tensor 'log_tau'")
    model = ModelState(
        image_pair=MomentumPair(
            query=_params_from_tensors(tensors, "image"),
            key=_params_from_tensors(tensors, "image_key"),
        ),
        text_pair=MomentumPair(
            query=_params_from_tensors(tensors, "text"),
            key=_params_from_tensors(tensors, "text_key"),
        ),
        temp=TemperatureParam(log_tau=tensors["log_tau"].reshape(())),
        image_queue=image_queue,
        text_queue=text_queue,
    )
    trainable = model.trainable()
    moments_m, moments_v = {}, {}
    for k in trainable:
        for store, tag in ((moments_m, "m"), (moments_v, "v")):
            full = f"opt.{tag}.{k}"
            if full not in tensors:
                raise FormatError(f"checkpoint is missing tensor {full!r}")
            store[k] = tensors[full].reshape(trainable[k].shape)
    return TrainerState(
        model=model,
        moments_m=moments_m,
        moments_v=moments_v,
        epoch_completed=int(epoch_completed),
        global_step=int(global_step),
        adam_t=int(adam_t),
        divergence_streak=int(streak),
        initial_epoch_loss=float(initial_loss),
        cfg_hash=int(cfg_hash),
    )


# ---------------------------------------------------------------------------
# view construction

_SEED_HIGH = 2**63


def build_views(ds: PairedDataset, ids: np.ndarray, cfg: TrainConfig, epoch: int, step: int) -> StepBatch:
    """Per sample and modality: a fair coin picks which branch gets the
    original; the other branch gets an augmented draw. All draws are keyed
    by (seed, sample, step, epoch), so re-running a step rebuilds the same
    views."""
    n = len(ids)
    img_q = np.empty((n, ds.d_a))
    img_k = np.empty((n, ds.d_a))
    txt_q = np.empty((n, ds.d_b))
    txt_k = np.empty((n, ds.d_b))
    for j, sid in enumerate(ids):
        g = rng.stream(cfg.seed, rng.STREAM_VIEWS, int(sid), step, epoch)
        coin_a, coin_b = g.integers(0, 2, size=2)
        seed_a, seed_b = g.integers(0, _SEED_HIGH, size=2)
        xa, xb = ds.features_a[sid], ds.features_b[sid]
        aug_a = augment(xa, int(seed_a), cfg)
        aug_b = augment(xb, int(seed_b), cfg)
        img_q[j], img_k[j] = (xa, aug_a) if coin_a == 0 else (aug_a, xa)
        txt_q[j], txt_k[j] = (xb, aug_b) if coin_b == 0 else (aug_b, xb)
    return StepBatch(
        ids=np.asarray(ids, dtype=np.int64),
        image_query=img_q,
        image_key=img_k,
        text_query=txt_q,
        text_key=txt_k,
    )


def run_end2end_step(
    batch: StepBatch,
    image_params: EncoderParams,
    text_params: EncoderParams,
    temp: TemperatureParam,
    ledger: ActivationLedger | None = None,
) -> StepResult:
    """In-batch symmetric contrastive step; no queues, no momentum branch."""
    if ledger is None:
        ledger = ActivationLedger()
    with Tape(ledger) as tape:
        img_enc = bind(image_params, tape)
        txt_enc = bind(text_params, tape)
        tau, log_tau_leaf = temperature(temp, tape)
        e_img = encode(img_enc, batch.image_query)
        e_txt = encode(txt_enc, batch.text_query)
        loss = end2end_loss(e_img, e_txt, tau)
        tape.backward(loss)
        named = (
            img_enc.named_tensors("image")
            + txt_enc.named_tensors("text")
            + [("log_tau", log_tau_leaf)]
        )
        grads = {name: tape.grad(t).copy() for name, t in named}
        loss_val = loss.item()
    ledger.mark_step()
    components = {
        "loss_i2i": 0.0,
        "loss_t2t": 0.0,
        "loss_t2i": 0.0,
        "loss_i2t": 0.0,
        "loss_uni": 0.0,
        "loss_multi": loss_val,
    }
    return StepResult(grads=grads, loss=loss_val, components=components, ledger=ledger)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    status: str  # "ok" or "training_failed"
    epochs_run: int
    global_step: int
    checkpoint_path: str | None
    metrics_path: str
    failure: dict | None = None


def _metric_line(kind, step, epoch, warmup, loss, comps, tau, lr, mode) -> str:
    rec = {
        "kind": kind,
        "step": step,
        "epoch": epoch,
        "warmup": warmup,
        "loss": loss,
        "loss_i2i": comps["loss_i2i"],
        "loss_t2t": comps["loss_t2t"],
        "loss_t2i": comps["loss_t2i"],
        "loss_i2t": comps["loss_i2t"],
        "loss_uni": comps["loss_uni"],
        "loss_multi": comps["loss_multi"],
        "tau": tau,
        "lr": lr,
        "mode": mode,
    }
    return json.dumps(rec, separators=(",", ":"))


def train(cfg: TrainConfig, dataset_path, out_dir, resume: bool = False) -> TrainResult:
    """Run (or resume) training; writes metrics.jsonl and per-epoch checkpoints."""
    ds = read_dataset(dataset_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    last_path = out / "last.msdc"

    train_ids, _ = train_test_split(ds, cfg.train_frac)
    steps_per_epoch = len(train_ids) // cfg.primary_batch
    if steps_per_epoch < 1:
        raise ConfigError(
            f"primary batch {cfg.primary_batch} exceeds the {len(train_ids)}-sample training split"
        )
    total_steps = cfg.epochs * steps_per_epoch

    if resume:
        if not last_path.exists():
            raise FormatError(f"no checkpoint to resume from at {last_path}")
        ts = load_checkpoint(last_path)
        if ts.cfg_hash != config_hash(cfg):
            warnings.warn("checkpoint config hash differs from the active config", stacklevel=2)
            ts.cfg_hash = config_hash(cfg)
    else:
        ts = _fresh_trainer_state(cfg, ds.d_a, ds.d_b)

    mode = cfg.loss.mode
    plan = RfbePlan.create(cfg.primary_batch, cfg.sub_batch)
    trainable = ts.model.trainable()
    log_fh = open(metrics_path, "a" if resume else "w")
    failure: dict | None = None

    try:
        for epoch in range(ts.epoch_completed + 1, cfg.epochs + 1):
            if cfg.shuffle:
                order = rng.stream(cfg.seed, rng.STREAM_SHUFFLE, epoch).permutation(train_ids)
            else:
                order = train_ids
            epoch_losses = []
            epoch_comps = dict.fromkeys(
                ("loss_i2i", "loss_t2t", "loss_t2i", "loss_i2t", "loss_uni", "loss_multi"), 0.0
            )
            last_lr = cosine_lr(min(ts.global_step, total_steps), total_steps, cfg.base_lr)
            for step_i in range(steps_per_epoch):
                ids = order[step_i * cfg.primary_batch : (step_i + 1) * cfg.primary_batch]
                batch = build_views(ds, ids, cfg, epoch, ts.global_step)
                lr = cosine_lr(min(ts.global_step, total_steps), total_steps, cfg.base_lr)
                last_lr = lr
                warmup = False
                try:
                    if mode == "end2end":
                        result = run_end2end_step(
                            batch, ts.model.image_pair.query, ts.model.text_pair.query, ts.model.temp
                        )
                    else:
                        warmup = ts.model.image_queue.fill < cfg.primary_batch
                        result = run_rfbe_step(
                            batch,
                            plan,
                            ts.model.image_pair,
                            ts.model.text_pair,
                            ts.model.image_queue,
                            ts.model.text_queue,
                            cfg.loss,
                            ts.model.temp,
                        )
                except NonFiniteError as exc:
                    failure = {
                        "reason": "non_finite_loss",
                        "detail": str(exc),
                        "epoch": epoch,
                        "step": ts.global_step,
                    }
                    break
                if not math.isfinite(result.loss):
                    failure = {"reason": "non_finite_loss", "epoch": epoch, "step": ts.global_step}
                    break

                if not warmup:
                    ts.adam_t += 1
                    adamw_step(
                        trainable,
                        result.grads,
                        ts.moments_m,
                        ts.moments_v,
                        lr,
                        cfg.beta1,
                        cfg.beta2,
                        cfg.adam_eps,
                        cfg.weight_decay,
                        ts.adam_t,
                    )
                    if mode != "end2end":
                        ema_update(ts.model.image_pair, cfg.momentum)
                        ema_update(ts.model.text_pair, cfg.momentum)

                tau_now = float(np.exp(ts.model.temp.log_tau))
                log_fh.write(
                    _metric_line(
                        "step", ts.global_step, epoch, warmup, result.loss, result.components,
                        tau_now, lr, mode,
                    )
                    + "\n"
                )
                epoch_losses.append(result.loss)
                for k in epoch_comps:
                    epoch_comps[k] += result.components[k] / steps_per_epoch
                ts.global_step += 1

            if failure is not None:
                break

            epoch_mean = float(np.mean(epoch_losses))
            tau_now = float(np.exp(ts.model.temp.log_tau))
            log_fh.write(
                _metric_line(
                    "epoch", ts.global_step, epoch, False, epoch_mean, epoch_comps,
                    tau_now, last_lr, mode,
                )
                + "\n"
            )
            if math.isnan(ts.initial_epoch_loss):
                ts.initial_epoch_loss = epoch_mean
            if epoch_mean > 10.0 * ts.initial_epoch_loss:
                ts.divergence_streak += 1
            else:
                ts.divergence_streak = 0
            ts.epoch_completed = epoch
            epoch_path = out / f"epoch_{epoch:04d}.msdc"
            save_checkpoint(ts, epoch_path)
            shutil.copyfile(epoch_path, last_path)
            if ts.divergence_streak >= 3:
                failure = {
                    "reason": "loss_exceeded_10x_initial_for_3_epochs",
                    "epoch": epoch,
                    "epoch_loss": epoch_mean,
                    "initial_epoch_loss": ts.initial_epoch_loss,
                }
                break
    finally:
        log_fh.close()

    if failure is not None:
        report = {"status": "training_failed", **failure}
        with open(out / "failure.json", "w") as fh:
            json.dump(report, fh, indent=2)
        return TrainResult(
            status="training_failed",
            epochs_run=ts.epoch_completed,
            global_step=ts.global_step,
            checkpoint_path=str(last_path) if last_path.exists() else None,
            metrics_path=str(metrics_path),
            failure=report,
        )
    return TrainResult(
        status="ok",
        epochs_run=ts.epoch_completed,
        global_step=ts.global_step,
        checkpoint_path=str(last_path),
        metrics_path=str(metrics_path),
    )
