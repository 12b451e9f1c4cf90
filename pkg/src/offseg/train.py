"""Loss, optimizer, schedule, training loop, and segmentation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .data import IGNORE_LABEL, Dataset, encoder_forward, init_encoder
from .diff import GradSlot, MLPParams, mlp_backward
from .heads import (
    Checkpoint,
    OffsetHeadParams,
    decode_mask,
    init_params,
    offset_backward,
    offset_forward,
    perpixel_forward,
)
from .linalg import NonFiniteError
from .seeding import substream


class TrainingDiverged(RuntimeError):
    """Loss or an intermediate went non-finite during training."""

    def __init__(self, iteration: int, lr: float, detail: str):
        super().__init__(
            f"training diverged at iteration {iteration} (lr {lr:.3e}): {detail}"
        )
        self.iteration = iteration
        self.lr = lr


@dataclass(frozen=True)
class HeadConfig:
    channels: int = 32
    hidden: int = 16
    class_offset: bool = True
    feature_offset: bool = True
    temperature: float = 1.0


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int = 6


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 2e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_iters: int = 100
    total_iters: int = 2000
    poly_power: float = 0.9
    batch_size: int = 8
    seed: int = 0
    eval_interval: int = 0  # 0: evaluate only at the end

    def __post_init__(self) -> None:
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.total_iters > 0 and not 0 <= self.warmup_iters < self.total_iters:
            raise ValueError(
                f"need 0 <= warmup_iters < total_iters, got "
                f"{self.warmup_iters} vs {self.total_iters}"
            )
        if min(self.base_lr, self.betas[0], self.betas[1], self.eps) <= 0:
            raise ValueError("base_lr, betas, eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# Loss


def cross_entropy(
    logits: np.ndarray, labels: np.ndarray, ignore: int = IGNORE_LABEL
) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross entropy over non-ignored pixels.

    `logits` is [K, HW] (classes down the rows); returns the scalar loss and
    the gradient with the same shape as `logits`, zero on ignored columns.
    Stabilized with log-sum-exp.
    """
    k, hw = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (hw,):
        raise ValueError(f"labels shape {labels.shape} != ({hw},)")
    valid = labels != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("all pixels ignored; loss undefined")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        i = int(bad.argmax())
        raise ValueError(f"label {int(labels[i])} out of range [0,{k}) at pixel {i}")

    m = logits.max(axis=0)
    shifted = logits - m
    sumexp = np.exp(shifted).sum(axis=0)
    lse = m + np.log(sumexp)

    idx = np.flatnonzero(valid)
    y = labels[idx]
    loss = float((lse[idx] - logits[y, idx]).sum() / n_valid)

    dlogits = np.zeros_like(logits)
    soft = np.exp(shifted[:, idx]) / sumexp[idx]
    soft[y, np.arange(idx.size)] -= 1.0
    dlogits[:, idx] = soft / n_valid
    return loss, dlogits


# Schedule


def poly_lr(t: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then polynomial decay to zero."""
    if not 0 <= t <= cfg.total_iters:
        raise ValueError(f"iteration {t} outside [0, {cfg.total_iters}]")
    if t < cfg.warmup_iters:
        return cfg.base_lr * (t + 1) / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    frac = (t - cfg.warmup_iters) / span if span > 0 else 1.0
    return cfg.base_lr * (1.0 - frac) ** cfg.poly_power


# Optimizer


@dataclass
class AdamHyper:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, theta: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(theta), v=np.zeros_like(theta), t=0)


def adamw_step(
    theta: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    hyper: AdamHyper,
    decay: bool = True,
) -> np.ndarray:
    """One AdamW update; mutates `state`, returns the new parameter value.

    Weight decay is decoupled and skipped when `decay` is False (biases).
    """
    if grad.shape != theta.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {theta.shape}")
    state.t += 1
    state.m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    state.v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = state.m / (1.0 - hyper.beta1**state.t)
    v_hat = state.v / (1.0 - hyper.beta2**state.t)
    step = m_hat / (np.sqrt(v_hat) + hyper.eps)
    if decay and hyper.weight_decay > 0:
        step = step + hyper.weight_decay * theta
    return theta - hyper.lr * step


# Metrics


@dataclass
class MetricsReport:
    """Confusion-matrix derived segmentation metrics.

    Rows of `confusion` are ground truth, columns predictions. Classes with
    TP+FP+FN = 0 get NaN IoU and are excluded from the mIoU mean.
    """

    confusion: np.ndarray
    per_class_iou: np.ndarray
    miou: float
    pixel_accuracy: float
    ignored_pixels: int

    def to_json_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class_iou": [
                None if np.isnan(x) else float(x) for x in self.per_class_iou
            ],
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "ignored_pixels": self.ignored_pixels,
        }


def confusion_matrix(
    gt: np.ndarray, pred: np.ndarray, k: int, ignore: int = IGNORE_LABEL
) -> tuple[np.ndarray, int]:
    """Pixel-count confusion over non-ignored pixels, plus the ignored count."""
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    if gt.shape != pred.shape:
        raise ValueError(f"gt shape {gt.shape} != pred shape {pred.shape}")
    valid = gt != ignore
    g = gt[valid]
    p = pred[valid]
    if ((g < 0) | (g >= k)).any() or ((p < 0) | (p >= k)).any():
        raise ValueError("labels outside [0, K) in confusion accumulation")
    cm = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return cm, int((~valid).sum())


def metrics_from_confusion(cm: np.ndarray, ignored: int = 0) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    k = cm.shape[0]
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(k, np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    if not present.any():
        raise ValueError("no class has any ground-truth or predicted pixels")
    total = cm.sum()
    return MetricsReport(
        confusion=cm,
        per_class_iou=iou,
        miou=float(np.nanmean(iou)),
        pixel_accuracy=float(tp.sum() / total) if total else 0.0,
        ignored_pixels=ignored,
    )


# Training loop


@dataclass
class TrainResult:
    head: OffsetHeadParams
    encoder: MLPParams
    log: list[dict] = field(default_factory=list)
    final_metrics: MetricsReport | None = None


def _named_slots(
    head: OffsetHeadParams, encoder: MLPParams
) -> dict[str, GradSlot]:
    """Live views of every trainable tensor, honoring the branch flags."""
    slots = {"head.class_embed": GradSlot(head.class_embed)}
    if head.enable_class_offset:
        for name, arr in head.class_mlp.items():
            slots[f"head.class_mlp.{name}"] = GradSlot(arr)
    if head.enable_feature_offset:
        for name, arr in head.feature_mlp.items():
            slots[f"head.feature_mlp.{name}"] = GradSlot(arr)
    for name, arr in encoder.items():
        slots[f"encoder.{name}"] = GradSlot(arr)
    return slots


def _accumulate_mlp(slots: dict[str, GradSlot], prefix: str, grads: MLPParams, scale):
    for name, arr in grads.items():
        slots[f"{prefix}.{name}"].accumulate(arr * scale)


def _forward_backward(
    head: OffsetHeadParams,
    encoder: MLPParams,
    sample_features: np.ndarray,
    labels: np.ndarray,
    slots: dict[str, GradSlot],
    scale: float,
) -> float:
    """One sample's loss and gradient accumulation into `slots`."""
    feats, enc_cache = encoder_forward(encoder, sample_features)
    use_offset = head.enable_class_offset or head.enable_feature_offset
    if use_offset:
        trace = offset_forward(head, feats)
        loss, dlogits = cross_entropy(trace.logits, labels)
        hg = offset_backward(head, trace, dlogits)
        slots["head.class_embed"].accumulate(hg.class_embed * scale)
        if hg.class_mlp is not None:
            _accumulate_mlp(slots, "head.class_mlp", hg.class_mlp, scale)
        if hg.feature_mlp is not None:
            _accumulate_mlp(slots, "head.feature_mlp", hg.feature_mlp, scale)
        d_feats = hg.features
    else:
        logits = perpixel_forward(head.class_embed, feats)
        loss, dlogits = cross_entropy(logits, labels)
        slots["head.class_embed"].accumulate((dlogits @ feats) * scale)
        d_feats = dlogits.T @ head.class_embed
    _, enc_grads = mlp_backward(enc_cache, d_feats)
    _accumulate_mlp(slots, "encoder", enc_grads, scale)
    return loss


class _BatchSampler:
    """Deterministic cycling sampler: reshuffles the pool each pass."""

    def __init__(self, indices: list[int], batch_size: int, rng: np.random.Generator):
        if not indices:
            raise ValueError("empty training split")
        self.pool = list(indices)
        self.batch_size = batch_size
        self.rng = rng
        self.queue: list[int] = []

    def next_batch(self) -> list[int]:
        batch = []
        while len(batch) < self.batch_size:
            if not self.queue:
                self.queue = [self.pool[i] for i in self.rng.permutation(len(self.pool))]
            batch.append(self.queue.pop())
        return batch


def train(
    head_cfg: HeadConfig,
    enc_cfg: EncoderConfig,
    dataset: Dataset,
    cfg: TrainConfig,
) -> TrainResult:
    """Jointly optimize encoder and head end to end.

    Deterministic for a fixed seed: initialization, batch order and the
    gradient reduction over the batch are all fixed-order. Aborts with
    TrainingDiverged if the loss or any forward stage goes non-finite.
    """
    if dataset.n_samples == 0:
        raise ValueError("dataset is empty")
    k = dataset.k
    c0 = dataset.config.c0
    head = init_params(
        k,
        head_cfg.channels,
        head_cfg.hidden,
        cfg.seed,
        temperature=head_cfg.temperature,
        class_offset=head_cfg.class_offset,
        feature_offset=head_cfg.feature_offset,
    )
    encoder = init_encoder(c0, enc_cfg.hidden, head_cfg.channels, cfg.seed)
    result = TrainResult(head=head, encoder=encoder)

    slots = _named_slots(head, encoder)
    states = {name: AdamState.like(slot.value) for name, slot in slots.items()}
    sampler = _BatchSampler(
        dataset.train_indices, cfg.batch_size, substream(cfg.seed, "train", "batching")
    )
    scale = 1.0 / cfg.batch_size

    for it in range(cfg.total_iters):
        lr = poly_lr(it, cfg)
        for slot in slots.values():
            slot.zero_grad()
        loss_sum = 0.0
        try:
            for idx in sampler.next_batch():
                s = dataset.samples[idx]
                loss_sum += _forward_backward(
                    head, encoder, s.features, s.labels, slots, scale
                )
        except NonFiniteError as exc:
            raise TrainingDiverged(it, lr, str(exc)) from exc
        loss = loss_sum * scale
        if not np.isfinite(loss):
            raise TrainingDiverged(it, lr, f"loss = {loss}")

        hyper = AdamHyper(
            lr=lr,
            weight_decay=cfg.weight_decay,
            beta1=cfg.betas[0],
            beta2=cfg.betas[1],
            eps=cfg.eps,
        )
        for name, slot in slots.items():
            decay = slot.value.ndim >= 2  # decoupled decay skips bias vectors
            slot.value[...] = adamw_step(slot.value, slot.grad, states[name], hyper, decay)

        record = {"iter": it, "lr": lr, "loss": loss}
        if cfg.eval_interval and (it + 1) % cfg.eval_interval == 0:
            record["val_miou"] = evaluate_params(
                head, encoder, dataset, dataset.val_indices
            ).miou
        result.log.append(record)

    if dataset.val_indices:
        result.final_metrics = evaluate_params(
            head, encoder, dataset, dataset.val_indices
        )
    return result


def evaluate_params(
    head: OffsetHeadParams,
    encoder: MLPParams,
    dataset: Dataset,
    indices: Iterable[int],
) -> MetricsReport:
    """Accumulate the confusion matrix over `indices` and derive metrics."""
    k = dataset.k
    cm = np.zeros((k, k), dtype=np.int64)
    ignored = 0
    use_offset = head.enable_class_offset or head.enable_feature_offset
    n = 0
    for idx in indices:
        s = dataset.samples[idx]
        feats, _ = encoder_forward(encoder, s.features)
        if use_offset:
            logits = offset_forward(head, feats).logits
        else:
            logits = perpixel_forward(head.class_embed, feats)
        pred = decode_mask(logits)
        part, ign = confusion_matrix(s.labels, pred, k)
        cm += part
        ignored += ign
        n += 1
    if n == 0:
        raise ValueError("empty evaluation split")
    return metrics_from_confusion(cm, ignored)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, split: str = "val") -> MetricsReport:
    """Evaluate a loaded checkpoint on a named dataset split."""
    if checkpoint.encoder is None:
        raise ValueError("checkpoint has no encoder parameters")
    if checkpoint.head.n_classes != dataset.k:
        raise ValueError(
            f"checkpoint has {checkpoint.head.n_classes} classes, "
            f"dataset has {dataset.k}"
        )
    if checkpoint.encoder.d_in != dataset.config.c0:
        raise ValueError(
            f"checkpoint encoder expects {checkpoint.encoder.d_in} input channels, "
            f"dataset provides {dataset.config.c0}"
        )
    return evaluate_params(checkpoint.head, checkpoint.encoder, dataset, dataset.split(split))
