"""Training loop, optimizer, schedule and evaluation (accuracy, micro-averaged ROC)."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as T
from .augment import AugmentationPolicy
from .checkpoint import Checkpoint, load, save
from .dataset import DatasetManifest, FeatureLoader, load_noise_bank, make_batches
from .errors import ConfigurationError, NumericError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 200
    lr0: float = 0.1
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0
    subtask: int = 10
    model: str = "lambda-resnet18"
    patience: int = 20
    augment: bool = True
    unknown_fraction: float = 0.1
    silence_fraction: float = 0.1
    precision: str = "float32"
    max_clips_per_class: int = 0  # 0 keeps every training clip

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "lr0", "lr_decay", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"train.{name} must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigurationError("momentum must lie in [0, 1) and weight_decay must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


def cosine_lr(epoch, max_epochs, lr0=0.1, decay=0.1):
    """Cosine decay from lr0 at epoch 0 to lr0 * decay at the last epoch."""
    if max_epochs <= 1:
        return lr0
    lr_final = lr0 * decay
    return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + math.cos(math.pi * epoch / (max_epochs - 1)))


def sgd_step(params: dict, velocity: dict, lr, momentum=0.9, weight_decay=1e-3):
    """Momentum SGD with L2 decay folded into the gradient.

    v <- momentum * v + g + weight_decay * w;  w <- w - lr * v

    Every gradient is checked before anything is modified.
    """
    for name, p in params.items():
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    for name, p in params.items():
        v = velocity.get(name)
        step = p.grad + weight_decay * p.data
        v = step if v is None else momentum * v + step
        velocity[name] = v
        p.data = p.data - lr * v
    return params, velocity


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------


@dataclass
class RocCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray

    @property
    def auc(self):
        """Area under detection rate (1 - frr) against false alarm rate."""
        order = np.lexsort((-self.frr, self.far))  # along the curve, from the (0, 1) end
        return float(np.trapezoid(1.0 - self.frr[order], self.far[order]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "far", "frr"])
            for t, a, r in zip(self.thresholds, self.far, self.frr):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(r))])


def roc_curve(scores, labels) -> RocCurve:
    """Micro-averaged one-vs-rest ROC over every (clip, class) score.

    Points are ordered by rising threshold; a score counts as an alarm when
    it is >= the threshold.  The first point accepts everything
    (far = 1, frr = 0) and the last, at +inf, rejects everything.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = scores.shape
    target = np.zeros((n, c), dtype=bool)
    target[np.arange(n), labels] = True
    s, y = scores.ravel(), target.ravel()
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]  # last index of each distinct score
    n_pos, n_neg = max(int(y.sum()), 1), max(int((~y).sum()), 1)
    thr = np.r_[np.inf, s[last]]
    far = np.r_[0.0, fp[last] / n_neg]
    frr = np.r_[1.0, 1.0 - tp[last] / n_pos]
    return RocCurve(thr[::-1].copy(), far[::-1].copy(), frr[::-1].copy())


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    loss: float
    confusion: np.ndarray
    roc: RocCurve
    scores: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)


def predict(mp: M.ModelParams, x, batch_size=256):
    """Softmax scores in eval mode, computed in chunks."""
    out = []
    with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        for i in range(0, len(x), batch_size):
            logits = M.forward(mp, x[i : i + batch_size], "eval").data.astype(np.float64)
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, mp.spec.num_classes))


def report_from_scores(scores, labels, num_classes) -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    pred = scores.argmax(axis=1)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    loss = float(-np.mean(np.log(np.maximum(scores[np.arange(len(labels)), labels], 1e-300))))
    return EvalReport(float(np.mean(pred == labels)), loss, confusion, roc_curve(scores, labels), scores, labels)


def _eval_set(manifest, split, loader, config):
    rng = np.random.default_rng([config.seed, 7919])
    batches = make_batches(manifest, split, config.batch_size, rng,
                           unknown_fraction=config.unknown_fraction, silence_fraction=config.silence_fraction)
    xs, ys = zip(*(loader.load(b, epoch=-1, augmented=False) for b in batches))
    return np.concatenate(xs), np.concatenate(ys)


def evaluate(ckpt, manifest: DatasetManifest, split="test", config: TrainConfig | None = None,
             loader: FeatureLoader | None = None) -> EvalReport:
    """Top-1 accuracy, confusion matrix and micro-averaged ROC over ``split``."""
    mp = ckpt.model if isinstance(ckpt, Checkpoint) else ckpt
    if mp.spec.num_classes != len(manifest.classes):
        raise ConfigurationError(
            f"model predicts {mp.spec.num_classes} classes, manifest has {len(manifest.classes)}"
        )
    config = config or TrainConfig(subtask=manifest.subtask)
    if loader is None:
        bank = load_noise_bank(manifest.root) if manifest.has_silence else None
        loader = FeatureLoader(manifest.root, bank, None, seed=config.seed, dtype=mp.tensors()[0].dtype)
    x, y = _eval_set(manifest, split, loader, config)
    return report_from_scores(predict(mp, x.astype(mp.tensors()[0].dtype)), y, mp.spec.num_classes)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    metrics: list
    test: EvalReport | None
    best_epoch: int


def _cap_per_class(manifest, limit, seed):
    if not limit:
        return manifest
    rng = np.random.default_rng([seed, 104729])
    by_label = {}
    for i, e in enumerate(manifest.entries):
        if e.split == "train":
            by_label.setdefault(e.label, []).append(i)
    keep = {i for i, e in enumerate(manifest.entries) if e.split != "train"}
    for idx in by_label.values():
        chosen = idx if len(idx) <= limit else rng.choice(idx, size=limit, replace=False)
        keep.update(int(i) for i in chosen)
    return DatasetManifest(manifest.root, manifest.subtask, manifest.classes,
                           [e for i, e in enumerate(manifest.entries) if i in keep])


def train(config: TrainConfig, manifest: DatasetManifest, out_dir=None, spec: M.ModelSpec | None = None,
          policy: AugmentationPolicy | None = None, evaluate_test=True, progress=None) -> TrainResult:
    """Train with momentum SGD and a per-epoch cosine schedule.

    The checkpoint with the lowest validation loss is kept; training stops
    after ``patience`` epochs without improvement.  Test metrics are computed
    from that checkpoint only.
    """
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    spec = spec or M.named_spec(config.model, num_classes=len(manifest.classes))
    if spec.num_classes != len(manifest.classes):
        raise ConfigurationError(f"spec has {spec.num_classes} classes, manifest {len(manifest.classes)}")
    manifest = _cap_per_class(manifest, config.max_clips_per_class, config.seed)
    if policy is None:
        policy = AugmentationPolicy(seed=config.seed) if config.augment else None
    needs_bank = manifest.has_silence or (policy is not None and policy.entries["noise"].p > 0)
    bank = load_noise_bank(manifest.root) if needs_bank else None
    loader = FeatureLoader(manifest.root, bank, policy, seed=config.seed, dtype=config.dtype)
    has_val = bool(manifest.split("validation"))
    val_x, val_y = _eval_set(manifest, "validation", loader, config) if has_val else (None, None)

    mp = M.build(spec, config.seed).astype(config.dtype)
    velocity = {}
    rng = np.random.default_rng(config.seed)
    metrics, best, best_loss, best_epoch, stale = [], None, math.inf, -1, 0
    log_fh = open(out_dir / "metrics.jsonl", "w") if out_dir else None
    try:
        for epoch in range(config.max_epochs):
            t0 = time.perf_counter()
            lr = cosine_lr(epoch, config.max_epochs, config.lr0, config.lr_decay)
            batches = make_batches(manifest, "train", config.batch_size, rng,
                                   unknown_fraction=config.unknown_fraction,
                                   silence_fraction=config.silence_fraction)
            total, correct, seen = 0.0, 0, 0
            for batch in batches:
                x, y = loader.load(batch, epoch, augmented=policy is not None)
                if len(batch) < 2:
                    continue  # batch norm needs more than one clip
                mp.zero_grad()
                logits = M.forward(mp, x, "train")
                loss = T.cross_entropy(logits, y)
                if not math.isfinite(loss.item()):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                T.backward(loss)
                sgd_step(mp.params, velocity, lr, config.momentum, config.weight_decay)
                total += loss.item() * len(batch)
                correct += int((logits.data.argmax(axis=1) == y).sum())
                seen += len(batch)
            record = {"epoch": epoch, "lr": lr, "train_loss": total / max(seen, 1),
                      "train_acc": correct / max(seen, 1)}
            if has_val:
                try:
                    rep = report_from_scores(predict(mp, val_x), val_y, spec.num_classes)
                    score = rep.loss if math.isfinite(rep.loss) else math.inf
                    record.update(val_loss=rep.loss if math.isfinite(rep.loss) else None, val_acc=rep.accuracy)
                except NumericError:
                    # running statistics still lag the weights; not a training failure
                    log.warning("epoch %d: eval-mode forward is non-finite", epoch)
                    record.update(val_loss=None, val_acc=0.0)
                    score = math.inf
            else:
                record.update(val_loss=None, val_acc=None)
                score = record["train_loss"]
            record["seconds"] = round(time.perf_counter() - t0, 3)
            metrics.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if progress:
                progress(record)
            if best is None or score < best_loss:
                best_loss, best_epoch, stale = score, epoch, 0
                best = Checkpoint(mp.astype(mp.tensors()[0].dtype),
                                  {"epoch": epoch, "seed": config.seed, "val_loss": score},
                                  {k: v.copy() for k, v in velocity.items()})
                if out_dir:
                    save(best, out_dir / "best.ckpt")
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
    except NumericError as exc:
        where = f"; last good checkpoint: {out_dir / 'best.ckpt'}" if out_dir and best else ""
        raise NumericError(f"{exc}{where}") from exc
    finally:
        if log_fh:
            log_fh.close()
    final = Checkpoint(mp, {"epoch": metrics[-1]["epoch"], "seed": config.seed}, velocity)
    if out_dir:
        save(final, out_dir / "final.ckpt")
    test = None
    if evaluate_test and manifest.split("test"):
        test = evaluate(best, manifest, "test", config, loader)
        if out_dir:
            test.roc.to_csv(out_dir / "roc.csv")
    return TrainResult(best, final, metrics, test, best_epoch)


def config_snapshot(config: TrainConfig):
    return asdict(config)


def load_checkpoint(path, spec=None):
    return load(path, spec)
