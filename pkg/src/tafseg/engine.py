"""Training and evaluation: Nesterov SGD with poly decay, confusion-matrix metrics,
feature-swap / attenuation probes and per-class change-rate curves."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import IGNORE, AugmentOptions, Dataset, augment_pair, collate, make_pair
from .model import FactorizedModel, build_model, load_checkpoint, save_checkpoint
from .taf import TAFConfig, sample_offset, swap_branch, taf_objective
from .tensor import NonFiniteError, Tape, Tensor, backward, softmax_channel

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingAborted",
    "ConfusionMatrix",
    "Metrics",
    "SGD",
    "poly_lr",
    "sgd_step",
    "train",
    "evaluate",
    "attenuate_eval",
    "class_change_rate",
    "LOG_FIELDS",
]

LOG_FIELDS = ("step", "epoch", "lr", "ce", "reg_fwd", "reg_bwd", "total")


PROTOCOLS = ("matched_epochs", "half_batch")


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "MicroFCN"
    width: int = 8
    num_classes: int = 4
    init_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    max_epoch: int = 30
    batch_size: int = 8
    seed: int = 0
    mode: str = "taf"
    taf: TAFConfig = field(default_factory=TAFConfig)
    aug: AugmentOptions = field(default_factory=AugmentOptions)
    # "matched_epochs": every step carries batch_size key frames (plus partners under TAF).
    # "half_batch": TAF steps carry batch_size // 2 key frames and partners, so an epoch takes
    # twice the steps; same labelled examples and images per step as the baseline.
    protocol: str = "matched_epochs"

    def __post_init__(self):
        if self.init_lr <= 0:
            raise ValueError("init_lr must be > 0")
        if self.max_epoch < 1:
            raise ValueError("max_epoch must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("baseline", "taf"):
            raise ValueError(f"mode must be 'baseline' or 'taf', got {self.mode!r}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.mode == "baseline" and self.taf.lam != 0:
            object.__setattr__(self, "taf", replace(self.taf, lam=0.0))

    @property
    def regularized(self) -> bool:
        return self.mode == "taf" and self.taf.lam > 0 and not self.taf.schedule.disabled

    @property
    def key_frames_per_step(self) -> int:
        if self.protocol == "half_batch" and self.regularized:
            return max(1, self.batch_size // 2)
        return self.batch_size


# -- optimisation -----------------------------------------------------------------


def poly_lr(cfg: TrainConfig, epoch: float) -> float:
    """``init_lr * (1 - epoch / max_epoch) ** power``."""
    if not 0 <= epoch <= cfg.max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epoch}]")
    return cfg.init_lr * (1.0 - epoch / cfg.max_epoch) ** cfg.power


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9,
             nesterov: bool = True, weight_decay: float = 1e-4) -> dict:
    """One SGD update; returns new parameter arrays and updates ``velocity`` in place.

    ``d = g + wd * theta``; ``v <- mu * v + d``; the step is ``d + mu * v``
    (Nesterov) or ``v`` (heavy ball).
    """
    out = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        d = g + weight_decay * theta if weight_decay else g
        v = velocity.get(name)
        v = d.copy() if v is None else momentum * v + d
        velocity[name] = v
        step = d + momentum * v if nesterov else v
        out[name] = theta - lr * step
    return out


class SGD:
    """Stateful wrapper around :func:`sgd_step` for a model's parameters."""

    def __init__(self, momentum=0.9, weight_decay=1e-4, nesterov=True):
        self.momentum, self.weight_decay, self.nesterov = momentum, weight_decay, nesterov
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, model: FactorizedModel, grads, lr: float) -> None:
        params = {n: p.data for n, p in model.params.items()}
        g = {n: grads[p] for n, p in model.params.items()}
        new = sgd_step(params, g, self.velocity, lr, self.momentum, self.nesterov, self.weight_decay)
        for n, arr in new.items():
            model.params[n] = Tensor(arr.astype(model.params[n].dtype, copy=False), requires_grad=True, name=n)


# -- metrics ------------------------------------------------------------------------


class ConfusionMatrix:
    """Rows are ground truth, columns prediction; ignore pixels never counted."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, gt, pred, ignore_index: int = IGNORE) -> ConfusionMatrix:
        gt = np.asarray(gt).ravel().astype(np.int64)
        pred = np.asarray(pred).ravel().astype(np.int64)
        keep = gt != ignore_index
        k = self.num_classes
        self.counts += np.bincount(gt[keep] * k + pred[keep], minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class TP / (TP + FP + FN); NaN for classes absent from both gt and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)

    def miou(self) -> float:
        iou = self.iou()
        return float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")

    def pixel_acc(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")


@dataclass
class Metrics:
    miou: float
    pixel_acc: float
    per_class_iou: np.ndarray
    confusion: ConfusionMatrix

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> Metrics:
        return cls(cm.miou(), cm.pixel_acc(), cm.iou(), cm)


# -- training -----------------------------------------------------------------------


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, batch_seed, message: str):
        self.step, self.batch_seed = step, batch_seed
        super().__init__(f"step {step} (batch rng seed {batch_seed}): {message}")


@dataclass
class TrainResult:
    model: FactorizedModel
    best_model: FactorizedModel
    best_miou: float
    log: list[dict]
    val_history: list[float]


def _assemble(ds: Dataset, indices, cfg: TrainConfig, rng: np.random.Generator):
    pairs = []
    half = ds.half_len
    n_h = min(cfg.taf.n_h, half)
    for idx in indices:
        n = sample_offset(n_h, rng, cfg.taf.exclude_zero_offset) if cfg.regularized and n_h > 0 else 0
        pairs.append(augment_pair(make_pair(ds, int(idx), n), rng, cfg.aug))
    return collate(pairs)


def train(cfg: TrainConfig, ds: Dataset, val: Dataset | None = None, checkpoint_dir=None) -> TrainResult:
    """Minimise the (TAF-regularised) objective with Nesterov SGD.

    One epoch visits every key frame once, so baseline and TAF see the same
    number of labelled examples under either protocol; TAF slots additionally
    carry an unlabelled partner. Randomness for step ``s`` comes from ``default_rng([seed, s])``.
    """
    model = build_model(cfg.arch, cfg.num_classes, cfg.width, cfg.seed)
    if cfg.regularized and cfg.taf.schedule.m != model.m:
        raise ValueError(f"schedule has {cfg.taf.schedule.m} rates but {cfg.arch} has {model.m} branches")
    opt = SGD(cfg.momentum, cfg.weight_decay)
    taf_cfg = cfg.taf if cfg.regularized else replace(cfg.taf, lam=0.0)
    log, val_hist = [], []
    best, best_miou = model.copy(), -math.inf
    per_step = cfg.key_frames_per_step
    steps_per_epoch = math.ceil(len(ds) / per_step)
    step = 0
    for epoch in range(cfg.max_epoch):
        perm = np.random.default_rng([cfg.seed, 1_000_003, epoch]).permutation(len(ds))
        lr = poly_lr(cfg, epoch)
        for b in range(steps_per_epoch):
            rng = np.random.default_rng([cfg.seed, step])
            batch = _assemble(ds, perm[b * per_step:(b + 1) * per_step], cfg, rng)
            try:
                with Tape() as tape:
                    loss, parts = taf_objective(model, batch, taf_cfg, rng)
                grads = backward(tape, loss)
            except NonFiniteError as exc:
                raise TrainingAborted(step, [cfg.seed, step], str(exc)) from exc
            total = float(loss.data)
            if not math.isfinite(total):
                raise TrainingAborted(step, [cfg.seed, step], "non-finite loss")
            opt.step(model, grads, lr)
            log.append({"step": step, "epoch": epoch, "lr": lr, **parts, "total": total})
            step += 1
        if val is not None:
            m = evaluate(model, val).miou
            val_hist.append(m)
            if m > best_miou:
                best, best_miou = model.copy(), m
        logger.info("epoch %d lr %.5f ce %.4f", epoch, lr,
                    np.mean([r["ce"] for r in log[-steps_per_epoch:]]))
    if val is None:
        best = model.copy()
        best_miou = float("nan")
    if checkpoint_dir is not None:
        import os

        save_checkpoint(model, os.path.join(checkpoint_dir, "final"))
        save_checkpoint(best, os.path.join(checkpoint_dir, "best"))
    return TrainResult(model, best, best_miou, log, val_hist)


# -- evaluation ---------------------------------------------------------------------


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def _predict_from_branches(model, bs) -> np.ndarray:
    return softmax_channel(model.aggregate(bs)).data.argmax(axis=1)


def evaluate(model: FactorizedModel, ds: Dataset, swap_spec: tuple[int, int] | None = None,
             batch_size: int = 32) -> Metrics:
    """Key-frame metrics; ``swap_spec=(i, delta)`` takes branch ``i`` from frame ``key + delta``."""
    cm = ConfusionMatrix(model.num_classes)
    if swap_spec is not None:
        i, delta = swap_spec
        for c in ds.clips:
            if not 0 <= c.key_index + delta < len(c.frames):
                raise ValueError(f"offset {delta} outside clip {c.clip_id}")
    labels = ds.key_labels()
    dt = model.params_dtype()
    for sl in _batches(len(ds), batch_size):
        x = Tensor(np.stack([c.image(c.key_index) for c in ds.clips[sl]]).astype(dt, copy=False))
        bs = model.extract_branches(x)
        if swap_spec is not None and swap_spec[1] != 0:
            xo = Tensor(np.stack([c.image(c.key_index + delta) for c in ds.clips[sl]]).astype(dt, copy=False))
            bs = swap_branch(bs, model.extract_branches(xo), i)
        cm.update(labels[sl], _predict_from_branches(model, bs))
    return Metrics.from_confusion(cm)


def branch_mean(model: FactorizedModel, ds: Dataset, i: int, batch_size: int = 32) -> np.ndarray:
    """Per-channel mean of branch ``i`` over all key frames and positions."""
    total, count = None, 0
    dt = model.params_dtype()
    for sl in _batches(len(ds), batch_size):
        x = Tensor(np.stack([c.image(c.key_index) for c in ds.clips[sl]]).astype(dt, copy=False))
        f = model.extract_branches(x).features[i - 1].data
        s = f.sum(axis=(0, 2, 3))
        total = s if total is None else total + s
        count += f.shape[0] * f.shape[2] * f.shape[3]
    return total / count


def attenuate_eval(model: FactorizedModel, ds: Dataset, i: int, mode: str = "zeros",
                   batch_size: int = 32) -> np.ndarray:
    """Per-class IOU change when branch ``i`` is replaced by zeros or its dataset mean."""
    if mode not in ("zeros", "sample_mean"):
        raise ValueError(f"unknown attenuation mode {mode!r}")
    fill = branch_mean(model, ds, i, batch_size) if mode == "sample_mean" else None
    normal = ConfusionMatrix(model.num_classes)
    atten = ConfusionMatrix(model.num_classes)
    labels = ds.key_labels()
    dt = model.params_dtype()
    for sl in _batches(len(ds), batch_size):
        x = Tensor(np.stack([c.image(c.key_index) for c in ds.clips[sl]]).astype(dt, copy=False))
        bs = model.extract_branches(x)
        normal.update(labels[sl], _predict_from_branches(model, bs))
        f = bs.features[i - 1].data
        repl = np.zeros_like(f) if fill is None else np.broadcast_to(fill.astype(f.dtype)[None, :, None, None], f.shape)
        atten.update(labels[sl], _predict_from_branches(model, bs.replace_feature(i, Tensor(repl))))
    return atten.iou() - normal.iou()


def class_change_rate(model: FactorizedModel | None, ds: Dataset, offsets, reference: str = "prediction",
                      batch_size: int = 32) -> dict[int, np.ndarray]:
    """Per-class IOU of predictions at ``key + delta`` scored against the key frame.

    With ``model=None`` the synthetic ground truth plays the prediction at
    every frame (and the reference). Each curve is divided by its value at
    ``delta = 0``; classes absent at ``delta = 0`` come out NaN.
    """
    if reference not in ("prediction", "gt"):
        raise ValueError("reference must be 'prediction' or 'gt'")
    k = ds.num_classes if model is None else model.num_classes

    def labels_at(offset):
        if model is None:
            if any(c.gt_all is None for c in ds.clips):
                raise ValueError("ground-truth mode needs per-frame gt")
            return np.stack([c.gt_all[c.key_index + offset] for c in ds.clips])
        out = []
        dt = model.params_dtype()
        for sl in _batches(len(ds), batch_size):
            x = Tensor(np.stack([c.image(c.key_index + offset) for c in ds.clips[sl]]).astype(dt, copy=False))
            out.append(_predict_from_branches(model, model.extract_branches(x)))
        return np.concatenate(out)

    if model is not None and reference == "gt":
        ref = np.stack([c.key_label for c in ds.clips])
    else:
        ref = labels_at(0)
    base = ConfusionMatrix(k).update(ref, labels_at(0)).iou()
    curves = {}
    for d in offsets:
        iou = ConfusionMatrix(k).update(ref, labels_at(d)).iou()
        with np.errstate(invalid="ignore", divide="ignore"):
            curves[d] = np.where(base > 0, iou / np.where(base > 0, base, 1), np.nan)
    return curves


def load_model(path) -> FactorizedModel:
    return load_checkpoint(path)
