"""Evaluation harness: retrieval, AUC-ROC, zero-shot and linear probe.

All metrics are deterministic given inputs and seed. Retrieval ties are
broken by lower gallery index; AUC uses mid-rank tie handling. Zero-shot
anchors are class-mean modality-B feature vectors (averaged over the
training split, which cancels the per-sample noise) pushed through the
text-side query encoder. The probe trains a softmax regression head on
frozen embeddings by full-batch gradient descent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import rng
from .data import PairedDataset, read_dataset, train_test_split
from .encoder import encode_arrays
from .errors import ConfigError, DegenerateLabelsError, ParameterError, ShapeError
from .trainer import load_checkpoint


def recall_at_k(query_emb: np.ndarray, gallery_emb: np.ndarray, k: int) -> float:
    """Fraction of queries whose paired gallery row ranks in the top k.

    Row i of the query matrix pairs with row i of the gallery. Ties are
    broken in favor of the lower gallery index.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[0] != g.shape[0]:
        raise ShapeError("query and gallery must be rank-2 with equal row counts")
    n = q.shape[0]
    if k < 1 or k > n:
        raise ParameterError(f"k must lie in [1, {n}], got {k}")
    sims = q @ g.T
    true_sims = sims[np.arange(n), np.arange(n)]
    better = (sims > true_sims[:, None]).sum(axis=1)
    cols = np.arange(n)
    ties_before = ((sims == true_sims[:, None]) & (cols[None, :] < cols[:, None])).sum(axis=1)
    ranks = 1 + better + ties_before
    return float((ranks <= k).mean())


def auc_roc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC with mid-rank tie handling."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ShapeError("scores and labels must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s))
    i = 0
    sorted_s = s[order]
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ZeroShotResult:
    accuracy: float
    per_class_auc: dict[int, float]
    macro_auc: float


def zero_shot_classify(img_emb: np.ndarray, anchors: np.ndarray, labels) -> ZeroShotResult:
    """Nearest-anchor classification plus one-vs-rest AUC per class."""
    emb = np.asarray(img_emb, dtype=np.float64)
    anc = np.asarray(anchors, dtype=np.float64)
    y = np.asarray(labels)
    n_classes = anc.shape[0]
    if n_classes < 2:
        raise ConfigError(f"need at least 2 anchor classes, got {n_classes}")
    sims = emb @ anc.T
    pred = sims.argmax(axis=1)
    accuracy = float((pred == y).mean())
    per_class = {}
    for c in range(n_classes):
        binary = (y == c).astype(np.int64)
        if 0 < binary.sum() < len(binary):
            per_class[c] = auc_roc(sims[:, c], binary)
    macro = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return ZeroShotResult(accuracy=accuracy, per_class_auc=per_class, macro_auc=macro)


@dataclass
class ProbeResult:
    macro_auc: float
    accuracy: float
    fraction: float
    n_fit: int


def _stratified_subset(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Per-class sample of ceil(fraction * count) indices, at least one each."""
    picks = []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        take = max(1, int(np.ceil(fraction * len(rows))))
        perm = rng.stream(seed, rng.STREAM_PROBE, int(c)).permutation(len(rows))
        picks.append(rows[perm[:take]])
    return np.sort(np.concatenate(picks))


def linear_probe(
    train_emb: np.ndarray,
    train_labels,
    test_emb: np.ndarray,
    test_labels,
    fraction: float = 0.1,
    seed: int = 0,
    iters: int = 500,
    lr: float = 0.5,
) -> ProbeResult:
    """Softmax-regression head on frozen embeddings; returns test macro AUC.

    Fits on a stratified ``fraction`` of the training rows (every class is
    represented by construction), by full-batch gradient descent from a
    zero initialization, so the result is deterministic given the seed.
    """
    if not (0.0 < fraction <= 1.0):
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    x_all = np.asarray(train_emb, dtype=np.float64)
    y_all = np.asarray(train_labels, dtype=np.int64)
    subset = _stratified_subset(y_all, fraction, seed)
    x, y = x_all[subset], y_all[subset]
    n_classes = int(max(y_all.max(), np.asarray(test_labels).max())) + 1
    onehot = np.zeros((len(y), n_classes))
    onehot[np.arange(len(y)), y] = 1.0

    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(iters):
        p = K.row_softmax(np.ascontiguousarray(x @ w + b), 1.0)
        delta = (p - onehot) / len(y)
        w -= lr * (x.T @ delta)
        b -= lr * delta.sum(axis=0)

    xt = np.asarray(test_emb, dtype=np.float64)
    yt = np.asarray(test_labels, dtype=np.int64)
    probs = K.row_softmax(np.ascontiguousarray(xt @ w + b), 1.0)
    accuracy = float((probs.argmax(axis=1) == yt).mean())
    aucs = []
    for c in range(n_classes):
        binary = (yt == c).astype(np.int64)
        if 0 < binary.sum() < len(binary):
            aucs.append(auc_roc(probs[:, c], binary))
    macro = float(np.mean(aucs)) if aucs else float("nan")
    return ProbeResult(macro_auc=macro, accuracy=accuracy, fraction=fraction, n_fit=len(y))


# ---------------------------------------------------------------------------
# whole-checkpoint evaluation


@dataclass
class EvalReport:
    recall_at: dict[int, float]
    zero_shot_accuracy: float
    zero_shot_per_class_auc: dict[int, float]
    zero_shot_macro_auc: float
    probe_auc: float
    probe_accuracy: float
    n_test: int
    seed: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "zero_shot_accuracy": self.zero_shot_accuracy,
            "zero_shot_per_class_auc": {str(k): v for k, v in sorted(self.zero_shot_per_class_auc.items())},
            "zero_shot_macro_auc": self.zero_shot_macro_auc,
            "probe_auc": self.probe_auc,
            "probe_accuracy": self.probe_accuracy,
            "n_test": self.n_test,
            "seed": self.seed,
            "config": self.config,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def format_table(self) -> str:
        rows = [("metric", "value")]
        for k, v in sorted(self.recall_at.items()):
            rows.append((f"recall@{k}", f"{v:.4f}"))
        rows.append(("zero-shot accuracy", f"{self.zero_shot_accuracy:.4f}"))
        rows.append(("zero-shot macro AUC", f"{self.zero_shot_macro_auc:.4f}"))
        rows.append(("probe macro AUC", f"{self.probe_auc:.4f}"))
        rows.append(("probe accuracy", f"{self.probe_accuracy:.4f}"))
        rows.append(("test samples", str(self.n_test)))
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {val}" for name, val in rows]
        lines.insert(1, "-" * (width + 10))
        return "\n".join(lines)


def class_anchor_features(ds: PairedDataset, train_ids: np.ndarray) -> np.ndarray:
    """Per-class mean of modality-B features over the training split."""
    anchors = np.zeros((ds.n_classes, ds.d_b))
    labels = ds.labels[train_ids]
    for c in range(ds.n_classes):
        rows = train_ids[labels == c]
        if len(rows) == 0:
            raise ConfigError(f"class {c} absent from the training split")
        anchors[c] = ds.features_b[rows].mean(axis=0)
    return anchors


def evaluate_checkpoint(
    checkpoint_path,
    dataset_path,
    ks=(1, 5, 10),
    probe_fraction: float = 0.1,
    seed: int = 0,
    train_frac: float | None = None,
) -> EvalReport:
    """Full report: retrieval on the test split, zero-shot, linear probe."""
    ts = load_checkpoint(checkpoint_path)
    ds = read_dataset(dataset_path)
    train_ids, test_ids = (
        train_test_split(ds) if train_frac is None else train_test_split(ds, train_frac)
    )
    if len(test_ids) < 2:
        raise ConfigError("test split needs at least 2 samples")

    img_q = ts.model.image_pair.query
    txt_q = ts.model.text_pair.query
    img_test = encode_arrays(img_q, ds.features_a[test_ids])
    txt_test = encode_arrays(txt_q, ds.features_b[test_ids])

    recalls = {k: recall_at_k(img_test, txt_test, k) for k in ks if 1 <= k <= len(test_ids)}
    anchors = encode_arrays(txt_q, class_anchor_features(ds, train_ids))
    zs = zero_shot_classify(img_test, anchors, ds.labels[test_ids])
    img_train = encode_arrays(img_q, ds.features_a[train_ids])
    probe = linear_probe(
        img_train, ds.labels[train_ids], img_test, ds.labels[test_ids],
        fraction=probe_fraction, seed=seed,
    )
    return EvalReport(
        recall_at=recalls,
        zero_shot_accuracy=zs.accuracy,
        zero_shot_per_class_auc=zs.per_class_auc,
        zero_shot_macro_auc=zs.macro_auc,
        probe_auc=probe.macro_auc,
        probe_accuracy=probe.accuracy,
        n_test=len(test_ids),
        seed=seed,
        config={"ks": list(ks), "probe_fraction": probe_fraction, "checkpoint": str(checkpoint_path)},
    )
