"""Pre-training, fine-tuning, evaluation and the undersampling sweep."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .kspace import ComplexSeries, apply_b0_phase, fft2c, ifft2c, make_b0_field, psnr
from .model import (
    CNNBaseline,
    CNNConfig,
    KMAE,
    ModelCheckpoint,
    ModelConfig,
    checkpoint_from_model,
    classification_logits,
    cnn_baseline_forward,
    complex_to_pair,
    data_consistency,
    encode,
    interpolation_decoder,
    kspace_channels,
    model_from_checkpoint,
    multi_slice_aggregate,
    patchify,
    regression_head,
    segmentation_logits,
    task_features,
    tokenize_image,
    tokenize_kspace,
    unpatchify,
)
from .nn import ConfigError
from .optim import OptimizerState, ScheduleConfig, adam_step, lr_at_step
from .phantom import Cohort
from .sampling import make_mask
from .tensor import Tensor

log = logging.getLogger(__name__)

REGRESSION_TASKS = ("regress_ef", "regress_edv")
FINETUNE_TASKS = REGRESSION_TASKS + ("classify", "segment")
SEGMENT_SLICE = 0
SWEEP_MASK_OFFSET = 1000


class NumericalError(RuntimeError):
    """Non-finite loss; ``context`` describes the step inputs for the dump."""

    def __init__(self, msg, context=None):
        super().__init__(msg)
        self.context = context or {}


# ---------------------------------------------------------------------------
# data: cached k-space per (subject, slice) and masks per (subject, R)
# ---------------------------------------------------------------------------

def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) % (2**63) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


class KSpaceBank:
    """Fully sampled, B0-phased k-space for every subject slice of a cohort."""

    def __init__(self, cohort: Cohort, b0_amplitude: float = np.pi / 2, b0_sigma: Optional[float] = None,
                 acs_count: Optional[int] = None, mask_offset: int = 0):
        self.cohort = cohort
        self.b0_amplitude = b0_amplitude
        self.b0_sigma = b0_sigma
        self.acs_count = acs_count
        self.mask_offset = mask_offset
        self._kspace: dict = {}
        self._masks: dict = {}
        first = cohort.records[0]
        self.S, self.T, self.H, self.W = first.images.shape

    def kspace(self, i: int, s: int) -> np.ndarray:
        key = (i, s)
        k = self._kspace.get(key)
        if k is None:
            rec = self.cohort.records[i]
            b0 = make_b0_field(self.H, self.W, self.b0_sigma, self.b0_amplitude,
                               seed=_derived_seed(rec.params.seed, 101, s))
            img = apply_b0_phase(ComplexSeries("image", rec.images[s].astype(np.complex64)), b0)
            k = fft2c(img.data).astype(np.complex64)
            self._kspace[key] = k
        return k

    def reference_image(self, i: int, s: int) -> np.ndarray:
        return np.abs(ifft2c(self.kspace(i, s)))

    def mask(self, i: int, R: float, offset: Optional[int] = None):
        offset = self.mask_offset if offset is None else offset
        key = (i, float(R), offset)
        m = self._masks.get(key)
        if m is None:
            seed = _derived_seed(self.cohort.records[i].params.seed, 202, int(round(R * 100)), offset)
            m = make_mask(self.H, self.T, R, self.acs_count, seed)
            self._masks[key] = m
        return m

    def masked(self, i: int, s: int, R: float, offset: Optional[int] = None):
        m = self.mask(i, R, offset)
        k = self.kspace(i, s)
        return np.where(m.lines[..., None], k, 0).astype(k.dtype), m


# ---------------------------------------------------------------------------
# specs and reports
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Pre-training settings."""

    epochs: int = 30
    lr_peak: float = 1e-3
    warmup_frac: float = 0.1
    input_R: float = 4.0
    batch_size: int = 1
    seed: int = 0
    log_every: int = 50
    # further accelerations drawn per step alongside input_R (empty: input_R only)
    extra_train_R: tuple = ()

    def to_dict(self):
        return asdict(self)


@dataclass
class TaskSpec:
    task: str
    input_R: float = 4.0
    freeze_encoder: bool = True
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    lr_peak: float = 1e-3
    warmup_frac: float = 0.1
    arch: str = "kmae"
    encoder_lr_scale: float = 0.01
    # accelerations mixed into training next to input_R; None picks the task default
    extra_train_R: Optional[tuple] = None

    def __post_init__(self):
        if self.task not in FINETUNE_TASKS + ("pretrain",):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.arch not in ("kmae", "cnn"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.arch == "cnn" and self.task not in ("classify",) + REGRESSION_TASKS:
            raise ConfigError("the CNN baseline only covers classification and regression")

    @property
    def train_R_extra(self) -> tuple:
        if self.extra_train_R is not None:
            return tuple(float(r) for r in self.extra_train_R)
        # the segmentation head sees R=8 during training so Dice holds up under heavy undersampling
        return (8.0,) if self.task == "segment" else ()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsReport:
    task: str
    split: str
    metrics: dict = field(default_factory=dict)
    per_R: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)

    def to_dict(self):
        return {
            "task": self.task,
            "split": self.split,
            "metrics": self.metrics,
            "per_R": {str(k): v for k, v in self.per_R.items()},
            "meta": self.meta,
        }


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    d = pred - target
    return (d * d).mean()


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    return T.huber(pred - target, delta).mean()


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    return -T.log_softmax(logits.reshape(1, -1))[0, int(label)]


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """mean(softplus(z) - y*z), evaluated stably."""
    target = np.asarray(target, dtype=logits.dtype)
    z = logits
    soft = T.relu(z) + T.log(1.0 + T.exp(-T.absolute(z)))
    return (soft - z * target).mean()


def dice_score(pred_mask: np.ndarray, truth: np.ndarray) -> float:
    """2|P and G| / (|P| + |G|); both empty counts as 1."""
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(truth, dtype=bool)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def mean_frame_dice(prob: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    """Dice per frame at ``threshold``, averaged over frames."""
    return float(np.mean([dice_score(prob[t] >= threshold, truth[t]) for t in range(truth.shape[0])]))


def regression_target(cohort: Cohort, i: int, task: str) -> float:
    rec = cohort.records[i]
    if task == "regress_ef":
        return rec.ef_analog
    H, W = rec.images.shape[-2:]
    return rec.edv_analog / (H * W)


def report_scale(task: str, H: int, W: int) -> float:
    return float(H * W) if task == "regress_edv" else 1.0


def target_stats(cohort: Cohort, task: str) -> tuple[float, float]:
    """Train-split mean and std of a regression target; the head learns the standardized value."""
    t = np.array([regression_target(cohort, i, task) for i in cohort.splits["train"]])
    std = float(t.std())
    return float(t.mean()), std if std > 0 else 1.0


def regression_value(model, z: float) -> float:
    mean, std = model.target_norm
    return mean + std * float(z)


def _draw_R(base: float, extra, rng) -> float:
    if not extra:
        return base
    choices = [float(base)] + [float(r) for r in extra]
    return choices[int(rng.integers(len(choices)))]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _model_input(model, bank: KSpaceBank, i, s, R, offset=None):
    km, m = bank.masked(i, s, R, offset)
    return km, m


def reconstruct(model: KMAE, km: np.ndarray, mask) -> Tensor:
    """k-space mode: predicted full k-space pairs [T, H, W, 2] (no consistency step)."""
    grid = tokenize_kspace(model, km, mask)
    return interpolation_decoder(model, encode(model, grid))


def _image_input(km, mask):
    return np.abs(ifft2c(np.where(mask.lines[..., None], km, 0)))


def features_for(model, km, mask, freeze: bool) -> Tensor:
    """Encoder output followed by the trainable task blocks."""
    cfg = model.cfg
    if freeze:
        with T.no_grad():
            enc = _encode_input(model, km, mask)
        enc = enc.detach()
    else:
        enc = _encode_input(model, km, mask)
    return task_features(model, enc)


def _encode_input(model, km, mask):
    if model.cfg.token_scheme == "kline":
        return encode(model, tokenize_kspace(model, km, mask))
    return encode(model, tokenize_image(model, _image_input(km, mask), mask_ratio=0.0))


def task_output(model, km, mask, task: str, freeze: bool = False) -> Tensor:
    """Raw task output: regression scalar, 2 class logits, or segmentation logits [T, H, W]."""
    if isinstance(model, CNNBaseline):
        x = kspace_channels(km, model.cfg.dtype, model.cfg.kspace_scale)
        return cnn_baseline_forward(model, x, task, logits=True)
    if task in REGRESSION_TASKS:
        return regression_head(model, features_for(model, km, mask, freeze))
    if task == "classify":
        return classification_logits(model, features_for(model, km, mask, freeze))
    if task == "segment":
        return segmentation_logits_for(model, km, mask, freeze)
    raise ConfigError(f"no task output for {task!r}")


def segmentation_logits_for(model, km, mask, freeze=False) -> Tensor:
    cfg = model.cfg
    if cfg.token_scheme == "kline":
        if freeze:
            with T.no_grad():
                enc = encode(model, tokenize_kspace(model, km, mask))
            enc = enc.detach()
        else:
            enc = encode(model, tokenize_kspace(model, km, mask))
        pred = interpolation_decoder(model, enc)
        consistent = data_consistency(pred, km, mask)
        return segmentation_logits(model, consistent)
    # image MAE: the decoder's last layer emits per-pixel logits
    enc = _encode_input(model, km, mask)
    out = interpolation_decoder(model, enc)
    return unpatchify(out, cfg.T, cfg.H, cfg.W, cfg.image_patch_size)


def segmentation_prediction(model, km, mask):
    """(probabilities [T, H, W], consistent k-space or None)."""
    with T.no_grad():
        if model.cfg.token_scheme == "kline":
            pred = reconstruct(model, km, mask)
            consistent = data_consistency(pred, km, mask)
            prob = T.sigmoid(segmentation_logits(model, consistent)).data
            return prob, consistent.data
        prob = T.sigmoid(segmentation_logits_for(model, km, mask)).data
        return prob, None


def reconstruction(model, km, mask, bank=None) -> np.ndarray:
    """Magnitude reconstruction [T, H, W] after data consistency."""
    with T.no_grad():
        if model.cfg.token_scheme == "kline":
            pred = reconstruct(model, km, mask).data
            k = data_consistency(pred[..., 0] + 1j * pred[..., 1], km, mask)
            return np.abs(ifft2c(k.astype(np.complex128)))
        cfg = model.cfg
        grid = tokenize_image(model, _image_input(km, mask), mask_ratio=0.0)
        out = interpolation_decoder(model, encode(model, grid), grid).data
        return unpatchify(out, cfg.T, cfg.H, cfg.W, cfg.image_patch_size)


def pretrain_loss(model, bank: KSpaceBank, i, s, R, rng) -> Tensor:
    cfg = model.cfg
    km, mask = bank.masked(i, s, R)
    k_full = bank.kspace(i, s)
    if cfg.token_scheme == "kline":
        pred = reconstruct(model, km, mask)
        target = complex_to_pair(k_full, cfg.np_dtype)
        if cfg.loss_support == "missing_only":
            miss = ~mask.lines
            d = pred - target
            w = np.broadcast_to(miss[:, :, None, None], pred.shape).astype(cfg.np_dtype)
            return (d * d * w).sum() * (1.0 / max(w.sum(), 1.0))
        return mse(pred, target)
    grid = tokenize_image(model, _image_input(km, mask), rng=rng)
    out = interpolation_decoder(model, encode(model, grid), grid)
    target = patchify(np.abs(ifft2c(k_full)).astype(cfg.np_dtype), cfg.image_patch_size)
    if cfg.loss_support == "missing_only" and not grid.visibility.all():
        hidden = np.flatnonzero(~grid.visibility)
        return mse(out[hidden], target[hidden])
    return mse(out, target)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _check_finite(loss: Tensor, context: dict, bank=None, R=None):
    if np.isfinite(loss.data).all():
        return
    context = dict(context, loss=str(float(loss.data)))
    if bank is not None:
        i, s = context["subject"], context["slice"]
        k = bank.kspace(i, s)
        m = bank.mask(i, R)
        context.update(R=float(R), mask_seed=int(m.seed), sampled_lines=int(m.lines.sum()),
                       kspace_abs_max=float(np.abs(k).max()), kspace_finite=bool(np.isfinite(k).all()),
                       subject_seed=int(bank.cohort.records[i].params.seed))
    raise NumericalError(f"non-finite loss at {context}", context)


def _train_items(cohort: Cohort, split: str, slices) -> list:
    return [(i, s) for i in cohort.splits[split] for s in slices]


def _params_snapshot(model) -> dict:
    return {n: p.data.copy() for n, p in model.named_parameters()}


def _restore(model, snap: dict):
    for n, p in model.named_parameters():
        p.data = snap[n].copy()


def validation_psnr(model, bank: KSpaceBank, split_idx, R, slices=None) -> tuple[float, float]:
    """Mean (model PSNR after data consistency, zero-filled PSNR) over subject slices."""
    slices = range(bank.S) if slices is None else slices
    ours, zf = [], []
    for i in split_idx:
        for s in slices:
            km, mask = bank.masked(i, s, R)
            ref = bank.reference_image(i, s)
            ours.append(psnr(ref, reconstruction(model, km, mask)))
            zf.append(psnr(ref, np.abs(ifft2c(km))))
    return float(np.mean(ours)), float(np.mean(zf))


def _smoothed(x, w=50):
    x = np.asarray(x, dtype=np.float64)
    if len(x) < w:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[w:] - c[:-w]) / w


def pretrain(cohort: Cohort, cfg: ModelConfig, tcfg: TrainConfig, bank: Optional[KSpaceBank] = None,
             val_slices=None, init: Optional[ModelCheckpoint] = None):
    """Masked k-space interpolation pre-training; returns (best-val checkpoint, report).

    ``init`` resumes from a checkpoint: weights and Adam moments are restored
    and ``tcfg.epochs`` further epochs run on a fresh schedule.
    """
    bank = bank or KSpaceBank(cohort)
    if (bank.T, bank.H, bank.W) != (cfg.T, cfg.H, cfg.W):
        raise ConfigError(f"data grid T={bank.T} H={bank.H} W={bank.W} does not match model config "
                          f"T={cfg.T} H={cfg.H} W={cfg.W}")
    if init is not None and init.config != cfg.to_dict():
        raise ConfigError("resume checkpoint was trained with a different model config")
    model = KMAE(cfg) if init is None else model_from_checkpoint(init)
    params = model.param_dict()
    items = _train_items(cohort, "train", range(bank.S))
    steps_per_epoch = int(np.ceil(len(items) / tcfg.batch_size))
    sched = ScheduleConfig.from_total(tcfg.epochs * steps_per_epoch, tcfg.lr_peak, tcfg.warmup_frac)
    state = OptimizerState.for_params(params, lr_peak=tcfg.lr_peak)
    start = 0
    if init is not None and init.optimizer is not None:
        state.step = start = int(init.optimizer["step"])
        state.first_moment.update({k: v.copy() for k, v in init.optimizer["m"].items()})
        state.second_moment.update({k: v.copy() for k, v in init.optimizer["v"].items()})
    rng = np.random.default_rng(tcfg.seed + start)
    t0 = time.time()
    losses, epochs_log = [], []
    best = (-np.inf, None, -1)
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(items))
        for b in range(steps_per_epoch):
            batch = [items[j] for j in order[b * tcfg.batch_size : (b + 1) * tcfg.batch_size]]
            model.zero_grad()
            total = 0.0
            for i, s in batch:
                R = _draw_R(tcfg.input_R, tcfg.extra_train_R, rng)
                loss = pretrain_loss(model, bank, i, s, R, rng)
                _check_finite(loss, {"epoch": epoch, "step": step, "subject": i, "slice": s}, bank, R)
                (loss * (1.0 / len(batch))).backward()
                total += float(loss.data) / len(batch)
            lr = lr_at_step(step, sched)
            adam_step(params, {n: p.grad for n, p in params.items()}, state, lr)
            losses.append(total)
            step += 1
        val, zf = validation_psnr(model, bank, cohort.splits["val"], tcfg.input_R, val_slices)
        epochs_log.append({"epoch": epoch, "train_loss": float(np.mean(losses[-steps_per_epoch:])),
                           "val_psnr": val, "zero_filled_psnr": zf})
        log.info("pretrain epoch %d loss %.5f val psnr %.2f dB (zero-filled %.2f)", epoch,
                 epochs_log[-1]["train_loss"], val, zf)
        if val > best[0]:
            best = (val, _params_snapshot(model), epoch)
    _restore(model, best[1])
    meta = {"task": "pretrain", "input_R": tcfg.input_R, "best_epoch": best[2], "train": tcfg.to_dict()}
    ckpt = checkpoint_from_model(model, start + step, meta, state)
    val, zf = validation_psnr(model, bank, cohort.splits["val"], tcfg.input_R, val_slices)
    report = MetricsReport(
        "pretrain", "val",
        metrics={"psnr_mean": val, "zero_filled_psnr_mean": zf},
        per_R={tcfg.input_R: {"psnr_mean": val, "zero_filled_psnr_mean": zf}},
        meta={"seed": tcfg.seed, "steps": step, "wall_time": time.time() - t0, "epochs": epochs_log},
        curve=losses,
    )
    return ckpt, report


def _task_slices(task, S):
    return [SEGMENT_SLICE] if task == "segment" else list(range(S))


def _validate_task_data(cohort: Cohort, task: str):
    if task == "segment" and not cohort.has_segmentation:
        raise ConfigError("segmentation needs myocardium labels, which this cohort does not carry")
    if task == "classify" and cohort.regression_mode:
        log.warning("classification on a regression cohort: labels come from the EF threshold")


def task_loss(model, bank, cohort, i, s, spec: TaskSpec, R=None) -> Tensor:
    km, mask = bank.masked(i, s, spec.input_R if R is None else R)
    out = task_output(model, km, mask, spec.task, spec.freeze_encoder)
    if spec.task in REGRESSION_TASKS:
        mean, std = model.target_norm
        return huber_loss(out, (regression_target(cohort, i, spec.task) - mean) / std)
    if spec.task == "classify":
        return cross_entropy(out, cohort.records[i].class_label)
    return bce_with_logits(out, cohort.records[i].myocardium_masks[s])


def build_model(ckpt: Optional[ModelCheckpoint], spec: TaskSpec, bank: KSpaceBank):
    if spec.arch == "cnn":
        if ckpt is not None and ckpt.arch == "cnn":
            return model_from_checkpoint(ckpt)
        return CNNBaseline(CNNConfig(in_channels=2 * bank.T, seed=spec.seed))
    if ckpt is None:
        raise ConfigError("KMAE fine-tuning needs a pre-trained checkpoint")
    model = model_from_checkpoint(ckpt)
    cfg = model.cfg
    if (bank.T, bank.H, bank.W) != (cfg.T, cfg.H, cfg.W):
        raise ConfigError(f"data grid T={bank.T} H={bank.H} W={bank.W} does not match checkpoint grid "
                          f"T={cfg.T} H={cfg.H} W={cfg.W}")
    return model


def trainable_params(model, spec: TaskSpec) -> dict:
    params = model.param_dict()
    if spec.arch == "cnn" or not spec.freeze_encoder:
        return params
    frozen = set(model.encoder_param_names())
    return {n: p for n, p in params.items() if n not in frozen}


def finetune(ckpt: Optional[ModelCheckpoint], cohort: Cohort, spec: TaskSpec,
             bank: Optional[KSpaceBank] = None):
    """Task fine-tuning; the encoder stays bit-identical when frozen."""
    bank = bank or KSpaceBank(cohort)
    _validate_task_data(cohort, spec.task)
    model = build_model(ckpt, spec, bank)
    if spec.task in REGRESSION_TASKS:
        model.target_norm = target_stats(cohort, spec.task)
    params = trainable_params(model, spec)
    items = _train_items(cohort, "train", _task_slices(spec.task, bank.S))
    steps_per_epoch = int(np.ceil(len(items) / spec.batch_size))
    sched = ScheduleConfig.from_total(spec.epochs * steps_per_epoch, spec.lr_peak, spec.warmup_frac)
    state = OptimizerState.for_params(params, lr_peak=spec.lr_peak)
    scales = None
    if spec.arch == "kmae" and not spec.freeze_encoder:
        scales = {n: spec.encoder_lr_scale for n in model.encoder_param_names()}
    rng = np.random.default_rng(spec.seed)
    t0 = time.time()
    losses, epochs_log = [], []
    best = (-np.inf, None, -1)
    step = 0
    for epoch in range(spec.epochs):
        order = rng.permutation(len(items))
        for b in range(steps_per_epoch):
            batch = [items[j] for j in order[b * spec.batch_size : (b + 1) * spec.batch_size]]
            model.zero_grad()
            total = 0.0
            for i, s in batch:
                R = _draw_R(spec.input_R, spec.train_R_extra, rng)
                loss = task_loss(model, bank, cohort, i, s, spec, R)
                _check_finite(loss, {"epoch": epoch, "step": step, "subject": i, "slice": s}, bank, R)
                (loss * (1.0 / len(batch))).backward()
                total += float(loss.data) / len(batch)
            adam_step(params, {n: p.grad for n, p in params.items()}, state, lr_at_step(step, sched), scales)
            losses.append(total)
            step += 1
        score = _selection_score(model, bank, cohort, spec)
        epochs_log.append({"epoch": epoch, "train_loss": float(np.mean(losses[-steps_per_epoch:])), "val_score": score})
        log.info("finetune %s epoch %d loss %.5f val score %.4f", spec.task, epoch, epochs_log[-1]["train_loss"], score)
        if score > best[0]:
            best = (score, _params_snapshot(model), epoch)
    _restore(model, best[1])
    meta = {"task": spec.task, "input_R": spec.input_R, "freeze_encoder": spec.freeze_encoder,
            "best_epoch": best[2], "spec": spec.to_dict()}
    if spec.task in REGRESSION_TASKS:
        meta["target_norm"] = list(model.target_norm)
    if ckpt is not None:
        meta["parent_encoder_hash"] = ckpt.meta.get("encoder_hash")
    out = checkpoint_from_model(model, step, meta, state)
    report = MetricsReport(spec.task, "train", metrics={"final_train_loss": float(np.mean(losses[-steps_per_epoch:]))},
                           meta={"seed": spec.seed, "steps": step, "wall_time": time.time() - t0,
                                 "epochs": epochs_log, "input_R": spec.input_R},
                           curve=losses)
    return out, report


def _selection_score(model, bank, cohort, spec: TaskSpec) -> float:
    """Higher is better: -MAE, accuracy, or Dice on the validation split."""
    preds = predict_split(model, bank, cohort, cohort.splits["val"], spec.input_R, spec.task)
    m = metrics_from_predictions(preds, spec.task)
    if spec.task in REGRESSION_TASKS:
        return -m["mae"]
    if spec.task == "classify":
        # tie-break on mean true-class probability
        return m["accuracy"] + 1e-3 * float(np.mean(preds["prob"][np.arange(len(preds["truth"])), preds["truth"].astype(int)]))
    return m["dice_mean"]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_split(model, bank: KSpaceBank, cohort: Cohort, idx, R, task: str, offset=None) -> dict:
    """Per-subject predictions for one R; arrays suitable for persisting."""
    idx = list(idx)
    H, W = bank.H, bank.W
    if task in REGRESSION_TASKS:
        scale = report_scale(task, H, W)
        pred = []
        for i in idx:
            outs = []
            for s in range(bank.S):
                km, m = bank.masked(i, s, R, offset)
                with T.no_grad():
                    outs.append(regression_value(model, task_output(model, km, m, task).data))
            pred.append(multi_slice_aggregate(outs) * scale)
        truth = [regression_target(cohort, i, task) * scale for i in idx]
        return {"subjects": np.array(idx, dtype=np.float64), "pred": np.array(pred), "truth": np.array(truth)}
    if task == "classify":
        probs = []
        for i in idx:
            outs = []
            for s in range(bank.S):
                km, m = bank.masked(i, s, R, offset)
                with T.no_grad():
                    logits = task_output(model, km, m, task).data.astype(np.float64)
                e = np.exp(logits - logits.max())
                outs.append(e / e.sum())
            probs.append(multi_slice_aggregate(outs))
        truth = [cohort.records[i].class_label for i in idx]
        return {"subjects": np.array(idx, dtype=np.float64), "prob": np.array(probs), "truth": np.array(truth, dtype=np.float64)}
    if task == "segment":
        probs, truths, exact = [], [], []
        for i in idx:
            km, m = bank.masked(i, SEGMENT_SLICE, R, offset)
            prob, consistent = segmentation_prediction(model, km, m)
            if consistent is not None:
                measured = complex_to_pair(km, consistent.dtype)
                exact.append(bool(np.array_equal(consistent[m.lines], measured[m.lines])))
            probs.append(prob.astype(np.float32))
            truths.append(cohort.records[i].myocardium_masks[SEGMENT_SLICE])
        out = {"subjects": np.array(idx, dtype=np.float64), "prob": np.array(probs), "truth": np.array(truths, dtype=np.uint8)}
        out["dc_exact"] = np.array(exact if exact else [True], dtype=np.uint8)
        return out
    if task == "pretrain":
        recon, refs, zf = [], [], []
        for i in idx:
            for s in range(bank.S):
                km, m = bank.masked(i, s, R, offset)
                recon.append(reconstruction(model, km, m).astype(np.float32))
                refs.append(bank.reference_image(i, s).astype(np.float32))
                zf.append(np.abs(ifft2c(km)).astype(np.float32))
        return {"subjects": np.array(idx, dtype=np.float64), "recon": np.array(recon), "reference": np.array(refs),
                "zero_filled": np.array(zf)}
    raise ConfigError(f"unknown task {task!r}")


def metrics_from_predictions(preds: dict, task: str) -> dict:
    """Recompute every reported metric from persisted predictions."""
    if task in REGRESSION_TASKS:
        return {"mae": float(np.mean(np.abs(preds["pred"] - preds["truth"])))}
    if task == "classify":
        return {"accuracy": float(np.mean(np.argmax(preds["prob"], axis=1) == preds["truth"].astype(int)))}
    if task == "segment":
        dice = [mean_frame_dice(p, t) for p, t in zip(preds["prob"], preds["truth"])]
        return {"dice_mean": float(np.mean(dice)), "dc_exact": bool(np.all(preds["dc_exact"]))}
    if task == "pretrain":
        ours = [psnr(r, x) for r, x in zip(preds["reference"], preds["recon"])]
        zf = [psnr(r, x) for r, x in zip(preds["reference"], preds["zero_filled"])]
        return {"psnr_mean": float(np.mean(ours)), "zero_filled_psnr_mean": float(np.mean(zf))}
    raise ConfigError(f"unknown task {task!r}")


def evaluate(ckpt: ModelCheckpoint, cohort: Cohort, split: str = "test", R_list=(1, 4, 8),
             bank: Optional[KSpaceBank] = None, offset: Optional[int] = None):
    """Metrics per R for the task the checkpoint was trained on; returns (report, predictions)."""
    bank = bank or KSpaceBank(cohort)
    idx = cohort.splits[split]
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    task = ckpt.meta.get("task", "pretrain")
    model = model_from_checkpoint(ckpt)
    t0 = time.time()
    per_R, arrays = {}, {}
    for R in R_list:
        preds = predict_split(model, bank, cohort, idx, R, task, offset)
        per_R[float(R)] = metrics_from_predictions(preds, task)
        for k, v in preds.items():
            arrays[f"R{float(R):g}/{k}"] = v
    first = per_R[float(R_list[0])]
    report = MetricsReport(task, split, metrics=dict(first), per_R=per_R,
                           meta={"steps": ckpt.step, "wall_time": time.time() - t0,
                                 "input_R": ckpt.meta.get("input_R"), "R_list": [float(r) for r in R_list],
                                 "arch": ckpt.arch, "mask_offset": bank.mask_offset if offset is None else offset})
    return report, arrays


def robustness_sweep(ckpt: ModelCheckpoint, cohort: Cohort, bank: Optional[KSpaceBank] = None,
                     split: str = "test", R_list=(1, 4, 8), offset: int = SWEEP_MASK_OFFSET):
    """Evaluate at each R with freshly seeded masks; deltas are relative to R=1."""
    report, arrays = evaluate(ckpt, cohort, split, R_list, bank, offset)
    base = report.per_R[1.0] if 1.0 in report.per_R else report.per_R[float(R_list[0])]
    rows = []
    for R, m in report.per_R.items():
        row = {"R": R}
        for k, v in m.items():
            if isinstance(v, bool):
                row[k] = v
                continue
            row[k] = v
            row[f"delta_{k}"] = v - base[k]
        rows.append(row)
    return rows, report, arrays


def predictions_to_arrays(arrays: dict) -> dict:
    out = {}
    for k, v in arrays.items():
        v = np.asarray(v)
        if v.dtype.kind in "iub" and k.endswith(("truth", "dc_exact")) and v.max(initial=0) < 256:
            out[k] = v.astype(np.uint8)
        elif v.dtype == np.float32:
            out[k] = v
        else:
            out[k] = v.astype(np.float64)
    return out


def predictions_from_arrays(arrays: dict) -> dict:
    """Group persisted arrays back into {R: {name: array}}."""
    grouped: dict = {}
    for k, v in arrays.items():
        head, name = k.split("/", 1)
        grouped.setdefault(float(head[1:]), {})[name] = v
    return grouped
