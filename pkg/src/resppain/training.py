"""Deterministic training loop for the windowed classification pipeline.

A run is fully determined by its seed: parameter init, epoch shuffles,
augmentation, dropout, and gate sampling each consume a dedicated RNG
stream derived from (seed, purpose tag, epoch, sample index), so no step
depends on hidden global state and two runs with equal config are
bit-identical.

Per sample the pipeline is: augment (training only) -> band-pass filter
-> zero-pad to fixed length -> segment into windows -> encode windows and
the padded full signal with the shared encoder -> fuse -> route to final
logits -> label-smoothed cross-entropy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from . import encoder as enc
from . import fusion as fus
from . import numerics as nm
from . import signal as sig
from .numerics import Tensor

logger = logging.getLogger(__name__)

# RNG stream purpose tags (second entry of the seeding key).
_TAG_INIT = 0
_TAG_SHUFFLE = 1
_TAG_AUGMENT = 2
_TAG_MODEL = 3   # dropout and gate sampling, one stream per sample

METRICS_HEADER = "epoch\tlr\ttrain_loss\tval_macro_acc\tval_macro_prec\tval_macro_f1\tgate_histogram"


class NumericalError(RuntimeError):
    """Loss went non-finite; training aborts rather than drifting on."""


def stream(seed: int, *key: int) -> np.random.Generator:
    """Named deterministic RNG stream."""
    return np.random.default_rng([int(seed)] + [int(k) for k in key])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-4
    label_smoothing: float = 0.10
    warmup_epochs: int = 50
    cooldown_epochs: int = 10
    seed: int = 3407
    fusion_variant: str = fus.DEFAULT_VARIANT
    checkpoint_interval: int = 0   # 0: only final/best checkpoints
    augment_enabled: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must satisfy 0 <= s < 1, got {self.label_smoothing}")
        if self.warmup_epochs < 0 or self.cooldown_epochs < 0:
            raise ValueError("warmup_epochs and cooldown_epochs must be >= 0")
        if self.warmup_epochs + self.cooldown_epochs > self.epochs:
            raise ValueError(f"warmup ({self.warmup_epochs}) + cooldown ({self.cooldown_epochs}) "
                             f"exceed total epochs ({self.epochs})")
        if self.fusion_variant not in fus.VARIANTS:
            raise ValueError(f"unknown fusion variant {self.fusion_variant!r}; expected one of {fus.VARIANTS}")
        if self.checkpoint_interval < 0:
            raise ValueError(f"checkpoint_interval must be >= 0, got {self.checkpoint_interval}")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-linear schedule, epoch granularity.

    Warmup epochs e in [0, warmup) run at lr * (e + 1) / warmup, the
    plateau at lr, and the final cooldown epochs ramp to lr / cooldown
    (epoch e >= epochs - cooldown runs at lr * (epochs - e) / cooldown).
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.warmup_epochs and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    if cfg.cooldown_epochs and epoch >= cfg.epochs - cfg.cooldown_epochs:
        return cfg.lr * (cfg.epochs - epoch) / cfg.cooldown_epochs
    return cfg.lr


def smoothed_ce_loss(logits: Tensor, target_index: int, smoothing: float, n_classes: int) -> Tensor:
    """Cross-entropy against (1-s) * one-hot + s / C uniform mass.

    s = 0 is exactly standard cross-entropy; uniform logits give ln C for
    every s because the target distribution always sums to one.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must satisfy 0 <= s < 1, got {smoothing}")
    if logits.shape != (n_classes,):
        raise nm.ShapeError(f"logits shape {logits.shape} does not match {n_classes} classes")
    if not 0 <= target_index < n_classes:
        raise ValueError(f"target index {target_index} outside [0, {n_classes})")
    q = np.full(n_classes, smoothing / n_classes)
    q[target_index] += 1.0 - smoothing
    logp = nm.log_softmax(logits)
    return nm.scale(nm.sum_all(nm.mul(logp, nm.constant(q, dtype=logits.dtype))), -1.0)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Standard Adam (beta1 0.9, beta2 0.999, eps 1e-8) with bias correction.

    Parameters are immutable tensors, so a step replaces each entry of the
    param dict with a fresh leaf holding the updated values.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def describe(self) -> str:
        return f"adam(beta1={self.beta1}, beta2={self.beta2}, eps={self.eps}, weight_decay=0)"

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            upd = (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
            params[name] = nm.parameter(p.data - upd, dtype=p.data.dtype)


# ---------------------------------------------------------------------------
# pipeline forward

def preprocess(x: np.ndarray, prep: sig.PreprocessConfig) -> tuple[np.ndarray, np.ndarray]:
    """Signal -> (windows (S, w), padded full signal)."""
    if prep.filter_enabled:
        x = sig.bandpass_filter(x, prep.sample_rate_hz, prep.filter_low_hz, prep.filter_high_hz)
    padded = sig.pad_to_fixed(x, prep.pad_len)
    ws = sig.segment_windows(padded, prep.window_seconds, prep.sample_rate_hz)
    return ws.windows, padded


def forward_views(windows: np.ndarray, padded: np.ndarray, enc_cfg: enc.EncoderConfig,
                  params: dict[str, Tensor], training: bool,
                  rng: np.random.Generator | None) -> tuple[Tensor, Tensor, Tensor]:
    """Encode every window plus the full signal with the shared encoder."""
    embeddings = [enc.encode(windows[i], enc_cfg, params, training, rng)
                  for i in range(windows.shape[0])]
    z_full = enc.encode(padded, enc_cfg, params, training, rng)
    z_add, z_concat = fus.fuse_windows(embeddings)
    return z_add, z_concat, z_full


def forward_logits(windows: np.ndarray, padded: np.ndarray, enc_cfg: enc.EncoderConfig,
                   params: dict[str, Tensor], variant: str, training: bool,
                   rng: np.random.Generator | None) -> tuple[Tensor, int | None]:
    z_add, z_concat, z_full = forward_views(windows, padded, enc_cfg, params, training, rng)
    return fus.classify(z_add, z_concat, z_full, params, variant, training, rng)


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class MetricsReport:
    """Confusion-derived metrics for one evaluation pass.

    Macro accuracy is the unweighted mean of per-class recall (balanced
    accuracy); plain accuracy is trace / total.  Classes with zero
    support (or zero predictions, for precision) contribute zero terms.
    """

    macro_accuracy: float
    macro_precision: float
    macro_f1: float
    plain_accuracy: float
    mean_loss: float
    confusion: np.ndarray     # (C, C) int64, rows = true, cols = predicted


def metrics_from_confusion(confusion: np.ndarray, mean_loss: float = float("nan")) -> MetricsReport:
    conf = np.asarray(confusion, dtype=np.int64)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ValueError(f"confusion must be square, got shape {conf.shape}")
    c = conf.shape[0]
    diag = np.diag(conf).astype(np.float64)
    row = conf.sum(axis=1).astype(np.float64)
    col = conf.sum(axis=0).astype(np.float64)
    recall = np.divide(diag, row, out=np.zeros(c), where=row > 0)
    precision = np.divide(diag, col, out=np.zeros(c), where=col > 0)
    pr = precision + recall
    f1 = np.divide(2.0 * precision * recall, pr, out=np.zeros(c), where=pr > 0)
    total = conf.sum()
    plain = float(diag.sum() / total) if total > 0 else 0.0
    return MetricsReport(macro_accuracy=float(recall.mean()),
                         macro_precision=float(precision.mean()),
                         macro_f1=float(f1.mean()),
                         plain_accuracy=plain,
                         mean_loss=mean_loss,
                         confusion=conf)


def _evaluate_prepared(prepared: list[tuple[np.ndarray, np.ndarray, int]],
                       enc_cfg: enc.EncoderConfig, params: dict[str, Tensor],
                       variant: str) -> MetricsReport:
    """Inference over preprocessed (windows, padded, label) triples.

    Runs outside the tape with no RNG: augmentation, dropout, and gate
    sampling are all inert, so repeat calls are bit-identical.
    """
    n_classes = sig.N_CLASSES
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    losses = []
    with nm.no_grad():
        for windows, padded, label_idx in prepared:
            logits, _ = forward_logits(windows, padded, enc_cfg, params, variant,
                                       training=False, rng=None)
            pred = int(np.argmax(logits.data))
            conf[label_idx, pred] += 1
            losses.append(smoothed_ce_loss(logits, label_idx, 0.0, n_classes).item())
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return metrics_from_confusion(conf, mean_loss)


def evaluate(records: list[sig.RespirationRecord], enc_cfg: enc.EncoderConfig,
             params: dict[str, Tensor], prep: sig.PreprocessConfig,
             variant: str = fus.DEFAULT_VARIANT) -> MetricsReport:
    """Full-pipeline evaluation of raw records (no augmentation)."""
    if not records:
        raise sig.DataError("evaluate needs at least one record")
    prepared = []
    for r in records:
        windows, padded = preprocess(r.samples, prep)
        prepared.append((windows, padded, r.label.index))
    return _evaluate_prepared(prepared, enc_cfg, params, variant)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    params: dict[str, Tensor]
    enc_cfg: enc.EncoderConfig
    prep: sig.PreprocessConfig
    variant: str
    metrics_lines: list[str]
    val_reports: list[MetricsReport]
    train_loss_curve: list[float]
    best_epoch: int
    best_val_macro_acc: float
    final_report: MetricsReport
    best_params: dict[str, Tensor]

    @property
    def metrics_text(self) -> str:
        return "\n".join(self.metrics_lines) + "\n"


def init_pipeline_params(enc_cfg: enc.EncoderConfig, variant: str, n_windows: int,
                         n_classes: int, rng: np.random.Generator,
                         dtype=nm.DEFAULT_DTYPE) -> dict[str, Tensor]:
    """Encoder parameters followed by fusion heads/gate, one flat dict."""
    params = enc.init_encoder_params(enc_cfg, rng, dtype)
    params.update(fus.init_fusion_params(variant, n_windows, enc_cfg.out_dim, n_classes, rng, dtype))
    return params


def _format_row(epoch: int, lr: float, train_loss: float, rep: MetricsReport,
                hist: np.ndarray) -> str:
    return (f"{epoch}\t{lr:.10g}\t{train_loss:.10g}\t{rep.macro_accuracy:.10g}"
            f"\t{rep.macro_precision:.10g}\t{rep.macro_f1:.10g}"
            f"\t{','.join(str(int(h)) for h in hist)}")


def train(train_records: list[sig.RespirationRecord],
          val_records: list[sig.RespirationRecord],
          enc_cfg: enc.EncoderConfig,
          train_cfg: TrainConfig,
          prep: sig.PreprocessConfig,
          aug_cfg: aug.AugmentConfig | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Run the full loop; returns trained parameters plus per-epoch metrics.

    When out_dir is given, writes metrics.tsv, checkpoint_final.bin,
    checkpoint_best.bin (best validation macro accuracy, earliest epoch on
    ties) and optional periodic checkpoint_epochNNN.bin files there.
    """
    if not train_records or not val_records:
        raise sig.DataError("train needs non-empty train and val splits")
    if aug_cfg is None:
        aug_cfg = aug.AugmentConfig()
    n_classes = sig.N_CLASSES
    n_windows = prep.n_windows
    variant = train_cfg.fusion_variant

    params = init_pipeline_params(enc_cfg, variant, n_windows, n_classes,
                                  stream(train_cfg.seed, _TAG_INIT))
    optimizer = Adam()
    logger.info("optimizer: %s | lr schedule: peak %g, warmup %d, cooldown %d, %d epochs",
                optimizer.describe(), train_cfg.lr, train_cfg.warmup_epochs,
                train_cfg.cooldown_epochs, train_cfg.epochs)
    logger.info("model: layout %s, %d latents x %d, %d windows of %gs + full signal, variant %s",
                enc_cfg.layout(), enc_cfg.n_latents, enc_cfg.model_dim,
                n_windows, prep.window_seconds, variant)

    val_prepared = []
    for r in val_records:
        windows, padded = preprocess(r.samples, prep)
        val_prepared.append((windows, padded, r.label.index))

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    metrics_lines = [METRICS_HEADER]
    val_reports: list[MetricsReport] = []
    loss_curve: list[float] = []
    best_epoch, best_acc = -1, -1.0
    best_params: dict[str, Tensor] = dict(params)
    n = len(train_records)

    for epoch in range(train_cfg.epochs):
        lr = lr_at_epoch(epoch, train_cfg)
        order = stream(train_cfg.seed, _TAG_SHUFFLE, epoch).permutation(n)
        hist = np.zeros(fus.N_ROUTES, dtype=np.int64)
        epoch_losses = []
        for start in range(0, n, train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            for idx in batch:
                rec = train_records[int(idx)]
                x = rec.samples
                if train_cfg.augment_enabled:
                    x = aug.apply_augmentations(x, aug_cfg, stream(train_cfg.seed, _TAG_AUGMENT, epoch, int(idx)))
                windows, padded = preprocess(x, prep)
                rng_model = stream(train_cfg.seed, _TAG_MODEL, epoch, int(idx))
                logits, route = forward_logits(windows, padded, enc_cfg, params, variant,
                                               training=True, rng=rng_model)
                loss = smoothed_ce_loss(logits, rec.label.index, train_cfg.label_smoothing, n_classes)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch}, "
                                         f"record {rec.subject_id!r}; aborting")
                epoch_losses.append(value)
                if route is not None:
                    hist[route] += 1
                nm.backward(nm.scale(loss, 1.0 / len(batch)))
            optimizer.step(params, lr)
            nm.zero_grads(params.values())

        train_loss = float(np.mean(epoch_losses))
        report = _evaluate_prepared(val_prepared, enc_cfg, params, variant)
        metrics_lines.append(_format_row(epoch, lr, train_loss, report, hist))
        val_reports.append(report)
        loss_curve.append(train_loss)
        if report.macro_accuracy > best_acc:
            best_epoch, best_acc = epoch, report.macro_accuracy
            best_params = dict(params)
        if out_path is not None and train_cfg.checkpoint_interval > 0 \
                and (epoch + 1) % train_cfg.checkpoint_interval == 0:
            _save_pipeline(out_path / f"checkpoint_epoch{epoch + 1:03d}.bin",
                           enc_cfg, params, prep, variant, n_classes)

    result = TrainResult(params=params, enc_cfg=enc_cfg, prep=prep, variant=variant,
                         metrics_lines=metrics_lines, val_reports=val_reports,
                         train_loss_curve=loss_curve, best_epoch=best_epoch,
                         best_val_macro_acc=best_acc, final_report=val_reports[-1],
                         best_params=best_params)
    logger.info("training done: best val macro acc %.4f at epoch %d; final %.4f",
                best_acc, best_epoch, result.final_report.macro_accuracy)
    if out_path is not None:
        (out_path / "metrics.tsv").write_text(result.metrics_text)
        _save_pipeline(out_path / "checkpoint_final.bin", enc_cfg, params, prep, variant, n_classes)
        _save_pipeline(out_path / "checkpoint_best.bin", enc_cfg, best_params, prep, variant, n_classes)
    return result


# ---------------------------------------------------------------------------
# pipeline checkpoints (encoder container + head/gate tensors + run extras)

def _save_pipeline(path: str | Path, enc_cfg: enc.EncoderConfig, params: dict[str, Tensor],
                   prep: sig.PreprocessConfig, variant: str, n_classes: int) -> None:
    extras = {
        "variant": variant,
        "n_classes": n_classes,
        "window_seconds": prep.window_seconds,
        "pad_len": prep.pad_len,
        "sample_rate_hz": prep.sample_rate_hz,
        "filter_enabled": int(prep.filter_enabled),
        "filter_low_hz": prep.filter_low_hz,
        "filter_high_hz": prep.filter_high_hz,
    }
    enc.save_checkpoint(path, enc_cfg, params, extras)


save_pipeline = _save_pipeline


def load_pipeline(path: str | Path) -> tuple[enc.EncoderConfig, dict[str, Tensor],
                                             sig.PreprocessConfig, str]:
    """Checkpoint -> (encoder config, trainable params, preprocessing, variant)."""
    cfg, arrays, extras = enc.load_checkpoint(path)
    required = {"variant", "n_classes", "window_seconds", "pad_len", "sample_rate_hz",
                "filter_enabled", "filter_low_hz", "filter_high_hz"}
    missing = required - extras.keys()
    if missing:
        raise enc.CheckpointError(f"{path}: checkpoint lacks pipeline fields {sorted(missing)}")
    variant = str(extras["variant"])
    if variant not in fus.VARIANTS:
        raise enc.CheckpointError(f"{path}: unknown fusion variant {variant!r}")
    prep = sig.PreprocessConfig(sample_rate_hz=float(extras["sample_rate_hz"]),
                                filter_enabled=bool(extras["filter_enabled"]),
                                filter_low_hz=float(extras["filter_low_hz"]),
                                filter_high_hz=float(extras["filter_high_hz"]),
                                pad_len=int(extras["pad_len"]),
                                window_seconds=float(extras["window_seconds"]))
    params = {name: nm.parameter(arr) for name, arr in arrays.items()}
    return cfg, params, prep, variant
