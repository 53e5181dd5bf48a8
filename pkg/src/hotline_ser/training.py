"""Subject-level splits, the training loop and classification metrics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import LABELS, load_segment, read_manifest
from .dsp_features import MfccConfig, PitchConfig, mfcc_39, pitch_contour, standardize_pitch
from .fusion_model import FusionModel, loss, probabilities
from .numerics import Adam, CheckpointError, derive_rng, load_checkpoint, no_grad, save_checkpoint

log = logging.getLogger(__name__)

POSITIVE_LABEL = "negative"      # the detected class: negative emotion
LOG_COLUMNS = ("epoch", "train_loss", "val_accuracy", "val_recall", "val_f1")


class DataError(ValueError):
    """Unusable dataset (empty, unlabeled, too few subjects)."""


class NumericalError(RuntimeError):
    """Non-finite training loss."""


# -- splits -------------------------------------------------------------------
@dataclass(frozen=True)
class SplitPlan:
    train_subjects: tuple[str, ...]
    val_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]
    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...] | None = None

    def __post_init__(self):
        a, b, c = set(self.train_subjects), set(self.val_subjects), set(self.test_subjects)
        if a & b or a & c or b & c:
            raise DataError("a subject appears on more than one side of the split")

    def side(self, subject: str) -> str:
        for name in ("train", "val", "test"):
            if subject in getattr(self, f"{name}_subjects"):
                return name
        raise KeyError(subject)

    def to_json(self) -> dict:
        return {"train": list(self.train_subjects), "val": list(self.val_subjects),
                "test": list(self.test_subjects),
                "folds": None if self.folds is None else [[list(t), list(v)] for t, v in self.folds]}


def make_split(subjects, ratio=(4, 1), seed: int = 0, n_folds: int = 5, val_subjects: int = 0) -> SplitPlan:
    """Shuffle unique subjects by ``seed`` and cut them train:test by ``ratio``.

    ``val_subjects`` subjects are moved from the training side into a fixed
    validation set. The remaining training subjects are additionally
    partitioned into ``n_folds`` near-equal cross-validation folds.
    """
    uniq = sorted(set(str(s) for s in subjects))
    if len(uniq) < 5:
        raise DataError(f"need at least 5 subjects, got {len(uniq)}")
    r_train, r_test = ratio
    if r_train <= 0 or r_test <= 0:
        raise ValueError("split ratio terms must be positive")
    order = [uniq[i] for i in derive_rng(seed, "split").permutation(len(uniq))]
    n_test = max(1, int(math.floor(len(uniq) * r_test / (r_train + r_test) + 0.5)))
    test, train = order[:n_test], order[n_test:]
    if not 0 <= val_subjects < len(train):
        raise DataError(f"cannot hold out {val_subjects} validation subjects from {len(train)}")
    val, train = train[:val_subjects], train[val_subjects:]
    folds = None
    if n_folds:
        if len(train) < n_folds:
            raise DataError(f"{len(train)} training subjects cannot form {n_folds} folds")
        chunks = np.array_split(np.arange(len(train)), n_folds)
        folds = tuple(
            (tuple(sorted(train[j] for c in chunks if c is not ch for j in c)), tuple(sorted(train[j] for j in ch)))
            for ch in chunks)
    return SplitPlan(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)), folds)


# -- data ---------------------------------------------------------------------
@dataclass
class Dataset:
    """Model-ready arrays for N labeled segments (label 1 = negative emotion)."""

    wave: np.ndarray        # (N, 160000)
    mfcc: np.ndarray        # (N, 1001, 39)
    pitch: np.ndarray       # (N, 1001, 1), standardized
    labels: np.ndarray      # (N,) int
    subjects: np.ndarray    # (N,) str
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.wave[idx], self.mfcc[idx], self.pitch[idx], self.labels[idx],
                       self.subjects[idx], [self.ids[i] for i in idx] if self.ids else [])

    def for_subjects(self, subjects) -> "Dataset":
        keep = set(subjects)
        return self.subset([i for i, s in enumerate(self.subjects) if s in keep])

    def batch(self, idx) -> dict:
        return {"wave": self.wave[idx], "mfcc": self.mfcc[idx], "pitch": self.pitch[idx]}


def encode_label(label: str) -> int:
    if label not in LABELS:
        raise DataError(f"unknown label {label!r}")
    return int(label == POSITIVE_LABEL)


def segment_features(segment, mfcc_cfg: MfccConfig = MfccConfig(),
                     pitch_cfg: PitchConfig = PitchConfig()) -> tuple[np.ndarray, np.ndarray]:
    mfcc = mfcc_39(segment, segment.sample_rate, mfcc_cfg).frames
    pitch = standardize_pitch(pitch_contour(segment, segment.sample_rate, pitch_cfg)).frames
    return mfcc, pitch


def load_dataset(manifest, cache_path=None, mfcc_cfg: MfccConfig = MfccConfig(),
                 pitch_cfg: PitchConfig = PitchConfig(), dtype=np.float32) -> Dataset:
    """Load and preprocess every manifest row.

    MFCC and pitch arrays come from ``cache_path`` when it exists (and is
    written there otherwise).
    """
    rows = read_manifest(manifest)
    if not rows:
        raise DataError(f"{manifest}: empty manifest")
    if any(r.get("label") is None for r in rows):
        raise DataError(f"{manifest}: every segment needs a label")
    segs = [load_segment(r) for r in rows]
    ids = [r["path"] for r in rows]
    cache = Path(cache_path) if cache_path else None
    if cache is not None and cache.exists():
        mfcc, pitch = load_feature_cache(cache, ids)
    else:
        feats = [segment_features(s, mfcc_cfg, pitch_cfg) for s in segs]
        mfcc = np.stack([f[0] for f in feats])
        pitch = np.stack([f[1] for f in feats])
        if cache is not None:
            save_feature_cache(cache, ids, mfcc, pitch)
    return Dataset(
        wave=np.stack([s.samples for s in segs]).astype(dtype),
        mfcc=mfcc.astype(dtype), pitch=pitch.astype(dtype),
        labels=np.array([encode_label(r["label"]) for r in rows], dtype=np.int64),
        subjects=np.array([str(r.get("subject_id", r["session_id"])) for r in rows]),
        ids=ids,
    )


def save_feature_cache(path, ids, mfcc, pitch) -> None:
    """Stacked MFCC/pitch arrays in the checkpoint container, keyed by segment file name."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, {"mfcc": mfcc, "pitch": pitch},
                    {"kind": "feature_cache", "ids": [Path(i).name for i in ids]})


def load_feature_cache(path, ids) -> tuple[np.ndarray, np.ndarray]:
    try:
        arrays, meta = load_checkpoint(path)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc
    if meta.get("kind") != "feature_cache" or meta.get("ids") != [Path(i).name for i in ids]:
        raise DataError(f"{path}: feature cache does not match the manifest")
    return arrays["mfcc"], arrays["pitch"]


# -- metrics --------------------------------------------------------------------
def _div(a, b) -> float:
    return a / b if b else 0.0


def metrics_from_confusion(confusion, positive: int = 1) -> dict:
    """All report metrics from a (true x predicted) count matrix.

    Binary headline metrics treat class ``positive`` as the detected class;
    the ``weighted_*`` variants average per-class scores by support.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ValueError(f"confusion must be square with >= 2 classes, got {cm.shape}")
    k = cm.shape[0]
    n = int(cm.sum())
    if n == 0:
        raise DataError("empty confusion matrix")
    support = [int(cm[i].sum()) for i in range(k)]
    predicted = [int(cm[:, i].sum()) for i in range(k)]
    tp = [int(cm[i, i]) for i in range(k)]
    recall = [_div(tp[i], support[i]) for i in range(k)]
    precision = [_div(tp[i], predicted[i]) for i in range(k)]
    f1 = [_div(2 * precision[i] * recall[i], precision[i] + recall[i]) for i in range(k)]
    present = [i for i in range(k) if support[i]]
    wmean = lambda v: sum(v[i] * support[i] for i in range(k)) / n
    return {
        "accuracy": sum(tp) / n,
        "precision": precision[positive],
        "recall": recall[positive],
        "f1": f1[positive],
        "weighted_precision": wmean(precision),
        "weighted_recall": wmean(recall),
        "weighted_f1": wmean(f1),
        "ua": sum(recall[i] for i in present) / len(present),
        "wa": wmean(recall),
        "n": n,
    }


@dataclass
class EvalReport:
    confusion: list[list[int]]
    accuracy: float
    precision: float
    recall: float
    f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    ua: float
    wa: float
    n: int
    class_names: tuple[str, ...] = ("non_negative", "negative")

    @classmethod
    def from_confusion(cls, confusion, class_names=("non_negative", "negative")) -> "EvalReport":
        cm = np.asarray(confusion, dtype=np.int64)
        return cls(confusion=cm.tolist(), class_names=tuple(class_names), **metrics_from_confusion(cm))

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        return d


def confusion_matrix(y_true, y_pred, n_classes: int = 2) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def predict_proba(model: FusionModel, data: Dataset, batch_size: int = 8) -> np.ndarray:
    """P(negative emotion) per segment."""
    was = model.training
    model.eval()
    out = []
    with no_grad():
        for lo in range(0, len(data), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(data)))
            out.append(probabilities(model(data.batch(idx)).data))
    model.train(was)
    p = np.concatenate(out)
    return p[:, 0] if p.shape[1] == 1 else p[:, 1]


def evaluate(model: FusionModel, data: Dataset, threshold: float = 0.5, batch_size: int = 8) -> EvalReport:
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    pred = (predict_proba(model, data, batch_size) > threshold).astype(np.int64)
    return EvalReport.from_confusion(confusion_matrix(data.labels, pred))


# -- training -------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 3e-5
    epochs: int = 30
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # optional early stop: end once validation F1 reaches this value
    target_val_f1: float | None = None
    # optional early stop: end after this many epochs without a validation F1 gain
    patience: int | None = None
    fit_mfcc_normalizer: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float | None = None
    val_recall: float | None = None
    val_f1: float | None = None


@dataclass
class TrainResult:
    model: FusionModel
    history: list[EpochRecord]
    best_epoch: int
    best_val_f1: float | None


def write_log(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss)] +
                       ["" if v is None else repr(v) for v in (r.val_accuracy, r.val_recall, r.val_f1)])


def train(model: FusionModel, data: Dataset, cfg: TrainConfig = TrainConfig(), val: Dataset | None = None,
          log_path=None, checkpoint_path=None, meta: dict | None = None) -> TrainResult:
    """Adam on BCE loss with seeded epoch shuffling.

    With a validation set the parameters of the best-validation-F1 epoch
    (earliest on ties) are restored at the end; otherwise the last epoch's.
    """
    if len(data) == 0:
        raise DataError("cannot train on an empty dataset")
    if cfg.fit_mfcc_normalizer and model.mfcc is not None:
        model.mfcc.fit_normalizer(data.mfcc)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    order_rng = derive_rng(cfg.seed, "batches")
    history: list[EpochRecord] = []
    best = (-1.0, 0, None)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(len(data))
        total = 0.0
        for lo in range(0, len(data), cfg.batch_size):
            idx = np.sort(perm[lo:lo + cfg.batch_size])
            opt.zero_grad()
            L = loss(model(data.batch(idx)), data.labels[idx])
            value = float(L.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}")
            L.backward()
            opt.step()
            total += value * len(idx)
        rec = EpochRecord(epoch, total / len(data))
        if val is not None and len(val):
            rep = evaluate(model, val, batch_size=cfg.batch_size)
            rec.val_accuracy, rec.val_recall, rec.val_f1 = rep.accuracy, rep.recall, rep.f1
            if rep.f1 > best[0]:
                best = (rep.f1, epoch, {k: v.copy() for k, v in model.state_arrays().items()})
        history.append(rec)
        log.info("epoch %d loss %.5f val_f1 %s", epoch, rec.train_loss, rec.val_f1)
        if log_path is not None:
            write_log(log_path, history)
        if rec.val_f1 is not None:
            if cfg.target_val_f1 is not None and rec.val_f1 >= cfg.target_val_f1:
                break
            if cfg.patience is not None and epoch - best[1] >= cfg.patience:
                break
    if best[2] is not None:
        model.load_arrays(best[2])
        best_epoch, best_f1 = best[1], best[0]
    else:
        best_epoch, best_f1 = history[-1].epoch, None
    model.eval()
    if checkpoint_path is not None:
        m = dict(meta or {})
        m.update(best_epoch=best_epoch, best_val_f1=best_f1)
        save_checkpoint(checkpoint_path, model.state_arrays(), m)
    return TrainResult(model, history, best_epoch, best_f1)


def cross_validate(build_model, data: Dataset, plan: SplitPlan, cfg: TrainConfig = TrainConfig()) -> list[EvalReport]:
    """Train a fresh model per fold of ``plan`` and evaluate it on the held-out fold."""
    if not plan.folds:
        raise DataError("split plan has no folds")
    reports = []
    for train_s, val_s in plan.folds:
        model = build_model()
        res = train(model, data.for_subjects(train_s), cfg)
        reports.append(evaluate(res.model, data.for_subjects(val_s), batch_size=cfg.batch_size))
    return reports
