"""Loss, optimizer, schedule, augmentation, input preprocessing and the fit loop."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ConfigurationError, DataError, TrainingError
from .kernels import resize_linear, resize_nearest
from .layers import predict_labels
from .metrics import Box, evaluate
from .nn import Module
from .phantom import VolumeSample
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

INPUT_MODES = ("downsample", "patches", "crop_then_downsample")
DICE_SMOOTH = 1e-5
CE_FLOOR = 1e-7
CE_SCOPES = ("foreground", "all")


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    poly_power: float = 0.9
    epochs: int = 10
    max_wall_seconds: Optional[float] = None
    batch_size: int = 1
    input_mode: str = "downsample"
    target_extent: int = 32
    rotate_max_deg: float = 20.0
    rotate_prob: float = 0.5
    flip_prob: float = 0.5
    seed: int = 0
    val_every: int = 1
    exclude_background: bool = True
    ce_scope: str = "all"

    def violations(self) -> list[str]:
        out = []
        for name in ("rotate_prob", "flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                out.append(f"{name} must lie in [0, 1], got {v}")
        if self.target_extent < 16 or self.target_extent % 16:
            out.append(f"target_extent must be a positive multiple of 16, got {self.target_extent}")
        if self.input_mode not in INPUT_MODES:
            out.append(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if self.batch_size != 1:
            out.append("only batch_size 1 is supported")
        if self.base_lr <= 0 or self.poly_power <= 0:
            out.append("base_lr and poly_power must be positive")
        if self.ce_scope not in CE_SCOPES:
            out.append(f"ce_scope must be one of {CE_SCOPES}, got {self.ce_scope!r}")
        if self.val_every < 1:
            out.append("val_every must be >= 1")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.violations()
        if problems:
            raise ConfigurationError("invalid train config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- schedule and optimizer -----------------------------------------------------------

def poly_lr(base_lr: float, iteration: int, max_iters: int, power: float = 0.9) -> float:
    """base_lr * (1 - iteration / max_iters) ** power."""
    if max_iters <= 0:
        raise ConfigurationError("max_iters must be positive")
    if iteration > max_iters:
        warnings.warn(f"iteration {iteration} beyond max_iters {max_iters}; learning rate clamped to 0")
        return 0.0
    return base_lr * (1.0 - iteration / max_iters) ** power


@dataclass
class AdamState:
    m: list
    v: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    """Adam over a module's parameters (declaration order)."""

    def __init__(self, module: Module, beta1=0.9, beta2=0.999, eps=1e-8):
        named = list(module.named_parameters())
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.state = AdamState([np.zeros_like(p.data) for p in self.params],
                               [np.zeros_like(p.data) for p in self.params], 0, beta1, beta2, eps)

    @property
    def m(self):
        return self.state.m

    @property
    def v(self):
        return self.state.v

    @property
    def step_count(self) -> int:
        return self.state.step_count

    def step(self, lr: float) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- loss -------------------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """[N, *S] integer labels -> [N, C, *S] indicator array."""
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise DataError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1, axis=1)
    return out


def dice_ce_loss_terms(probabilities: Tensor, labels: np.ndarray, exclude_background: bool = True,
                       ce_scope: str = "foreground") -> tuple[Tensor, Tensor]:
    """Return (Dice loss, cross-entropy) tensors for softmax outputs.

    Dice is averaged over the foreground channels (all channels when
    ``exclude_background`` is off) with smoothing 1e-5. The cross-entropy
    averages -log p_true over foreground-labelled voxels (``ce_scope`` =
    "foreground", 0 when there are none) or over every voxel ("all").
    """
    if ce_scope not in CE_SCOPES:
        raise ConfigurationError(f"ce_scope must be one of {CE_SCOPES}, got {ce_scope!r}")
    n, c = probabilities.shape[:2]
    if labels.shape != (n,) + probabilities.shape[2:]:
        raise DataError(f"labels shape {labels.shape} does not match probabilities {probabilities.shape}")
    y = one_hot(labels, c, probabilities.dtype)
    reduce_axes = (0,) + tuple(range(2, probabilities.ndim))
    first = 1 if exclude_background else 0
    inter = T.tsum(probabilities * y, axis=reduce_axes)[first:]
    psum = T.tsum(probabilities, axis=reduce_axes)[first:]
    ysum = y.sum(axis=reduce_axes)[first:]
    dice = (inter * 2.0 + DICE_SMOOTH) / (psum + (ysum + DICE_SMOOTH))
    dice_loss = 1.0 - T.mean(dice)

    foreground_only = exclude_background and ce_scope == "foreground"
    mask = (labels > 0) if foreground_only else np.ones(labels.shape, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        ce = Tensor(np.zeros((), dtype=probabilities.dtype))
    else:
        p_true = T.tsum(probabilities * y, axis=1)
        weights = (mask / count).astype(probabilities.dtype)
        ce = -T.tsum(T.log(p_true, CE_FLOOR) * weights)
    return dice_loss, ce


def dice_ce_loss(probabilities: Tensor, labels: np.ndarray, exclude_background: bool = True,
                 ce_scope: str = "foreground") -> Tensor:
    """Mean of Dice loss and cross-entropy."""
    dice_loss, ce = dice_ce_loss_terms(probabilities, labels, exclude_background, ce_scope)
    return (dice_loss + ce) * 0.5


# -- augmentation -------------------------------------------------------------------------

def rotation_matrix(axis: int, degrees: float) -> np.ndarray:
    """Rotation about array axis ``axis`` (0, 1 or 2) in the plane of the other two."""
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    i, j = [a for a in range(3) if a != axis]
    m = np.eye(3)
    m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
    return m


def rotate_sample(sample: VolumeSample, axis: int, degrees: float) -> VolumeSample:
    """Rotate about the volume centre; trilinear intensities, nearest labels."""
    shape = np.array(sample.shape, dtype=np.float64)
    center = (shape - 1) / 2.0
    m = rotation_matrix(axis, degrees)
    # output voxel o samples input at m @ (o - center) + center
    offset = center - m @ center
    fill = float(sample.intensity.min())
    intensity = ndimage.affine_transform(sample.intensity.astype(np.float64), m, offset=offset,
                                         order=1, mode="constant", cval=fill)
    labels = ndimage.affine_transform(sample.labels, m, offset=offset, order=0, mode="constant", cval=0)
    return sample.replace(intensity=intensity.astype(np.float32), labels=labels.astype(np.uint8))


def flip_sample(sample: VolumeSample, axis: int) -> VolumeSample:
    return sample.replace(intensity=np.ascontiguousarray(np.flip(sample.intensity, axis)),
                          labels=np.ascontiguousarray(np.flip(sample.labels, axis)))


def augment(sample: VolumeSample, rng: np.random.Generator, config: Optional[TrainConfig] = None) -> VolumeSample:
    """Random rotation (prob rotate_prob, angle in +-rotate_max_deg about a random
    axis) followed by a random flip (prob flip_prob, random axis)."""
    cfg = config or TrainConfig()
    out = sample
    if rng.random() < cfg.rotate_prob:
        axis = int(rng.integers(3))
        angle = float(rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg))
        out = rotate_sample(out, axis, angle)
    if rng.random() < cfg.flip_prob:
        out = flip_sample(out, int(rng.integers(3)))
    return out


# -- preprocessing --------------------------------------------------------------------------

@dataclass
class ModelInput:
    image: np.ndarray            # float32 [1, 1, S, S, S]
    labels: np.ndarray           # uint8 [1, S, S, S]
    region: tuple                # slices into the source volume that were resampled
    region_shape: tuple


def normalize_intensity(x: np.ndarray) -> np.ndarray:
    sd = float(x.std())
    return ((x - float(x.mean())) / (sd if sd > 0 else 1.0)).astype(np.float32)


def _pad_to(sample: VolumeSample, extent: int) -> VolumeSample:
    pad = [(0, max(extent - s, 0)) for s in sample.shape]
    if not any(p[1] for p in pad):
        return sample
    warnings.warn(f"volume {sample.shape} smaller than patch extent {extent}; padding with background")
    return sample.replace(intensity=np.pad(sample.intensity, pad, constant_values=float(sample.intensity.min())),
                          labels=np.pad(sample.labels, pad, constant_values=0))


def _resampled(sample: VolumeSample, region: tuple, extent: int) -> ModelInput:
    img = sample.intensity[region]
    lab = sample.labels[region]
    target = (extent,) * 3
    img = resize_linear(img.astype(np.float32), target)
    lab = resize_nearest(lab, target)
    return ModelInput(normalize_intensity(img)[None, None], lab[None].astype(np.uint8), region, tuple(s.stop - s.start for s in region))


def patch_offsets(shape: tuple, extent: int) -> list[tuple]:
    """Tile origins covering the volume; the last tile per axis is flush with the end."""
    per_axis = []
    for s in shape:
        starts = list(range(0, max(s - extent, 0) + 1, extent))
        if starts[-1] + extent < s:
            starts.append(s - extent)
        per_axis.append(starts)
    return [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]


def preprocess(sample: VolumeSample, mode: str, target_extent: int, box: Optional[Box] = None,
               rng: Optional[np.random.Generator] = None) -> list[ModelInput]:
    """Turn a volume into model inputs.

    ``downsample`` resizes the whole volume, ``crop_then_downsample`` resizes the
    ``box`` region, ``patches`` returns one random sub-volume when ``rng`` is
    given (training) or the full tiling otherwise (inference).
    """
    full = tuple(slice(0, s) for s in sample.shape)
    if mode == "downsample":
        return [_resampled(sample, full, target_extent)]
    if mode == "crop_then_downsample":
        if box is None:
            raise ConfigurationError("crop_then_downsample needs a bounding box")
        if any(l < 0 or h >= s or l > h for l, h, s in zip(box.lo, box.hi, sample.shape)):
            raise ConfigurationError(f"box {box} lies outside volume {sample.shape}")
        return [_resampled(sample, box.slices(), target_extent)]
    if mode == "patches":
        sample = _pad_to(sample, target_extent)
        if rng is not None:
            origin = tuple(int(rng.integers(0, s - target_extent + 1)) for s in sample.shape)
            offsets = [origin]
        else:
            offsets = patch_offsets(sample.shape, target_extent)
        out = []
        for o in offsets:
            region = tuple(slice(a, a + target_extent) for a in o)
            out.append(ModelInput(normalize_intensity(sample.intensity[region])[None, None],
                                  sample.labels[region][None].astype(np.uint8), region, (target_extent,) * 3))
        return out
    raise ConfigurationError(f"unknown input mode {mode!r}")


def predict_probabilities(model: Module, sample: VolumeSample, mode: str, target_extent: int,
                          box: Optional[Box] = None) -> np.ndarray:
    """Class probabilities on the source grid, [C, *sample.shape]; outside a crop box
    everything is background."""
    c = model.config.num_classes
    probs = np.zeros((c,) + sample.shape, dtype=np.float32)
    counts = np.zeros(sample.shape, dtype=np.float32)
    with no_grad():
        for item in preprocess(sample, mode, target_extent, box):
            p = model(Tensor(item.image)).data[0]
            region = tuple(slice(r.start, min(r.stop, s)) for r, s in zip(item.region, sample.shape))
            valid = tuple(r.stop - r.start for r in region)
            if mode == "patches":
                p = p[(slice(None),) + tuple(slice(0, v) for v in valid)]
            else:
                p = resize_linear(p, item.region_shape)
            probs[(slice(None),) + region] += p
            counts[region] += 1
    covered = counts > 0
    probs[:, covered] /= counts[covered]
    probs[0, ~covered] = 1.0
    return probs


def predict_volume(model: Module, sample: VolumeSample, mode: str, target_extent: int,
                   box: Optional[Box] = None) -> np.ndarray:
    return predict_labels(predict_probabilities(model, sample, mode, target_extent, box)[None])[0]


# -- fit -------------------------------------------------------------------------------------

TRACE_COLUMNS = ("epoch", "iter", "lr", "train_loss", "val_dss_macro", "val_hd95_macro", "wall_seconds")


@dataclass
class TrainingTrace:
    rows: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_dss: Optional[float] = None
    best_state: Optional[dict] = None

    def near_best(self, tol: float = 0.01) -> Optional[dict]:
        """First validated epoch whose macro DSS is within ``tol`` of the best."""
        if self.best_val_dss is None:
            return None
        for r in self.rows:
            if r["val_dss_macro"] is not None and r["val_dss_macro"] >= self.best_val_dss - tol:
                return r
        return None

    @property
    def epochs_to_near_best(self) -> Optional[int]:
        r = self.near_best()
        return None if r is None else r["epoch"]

    @property
    def seconds_to_near_best(self) -> Optional[float]:
        r = self.near_best()
        return None if r is None else r["wall_seconds"]

    def to_csv(self, include_wall_time: bool = True) -> str:
        cols = TRACE_COLUMNS if include_wall_time else TRACE_COLUMNS[:-1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (f"{r[c]:.10g}" if isinstance(r[c], float) else r[c])
                        for c in cols])
        return buf.getvalue()


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def validation_dss(model: Module, samples: Sequence[VolumeSample], cfg: TrainConfig,
                   boxes: Optional[dict] = None) -> tuple[float, float]:
    preds, truths, spacings, ids = [], [], [], []
    for s in samples:
        box = boxes.get(s.patient_id) if boxes else None
        preds.append(predict_volume(model, s, cfg.input_mode, cfg.target_extent, box))
        truths.append(s.labels)
        spacings.append(s.spacing_mm)
        ids.append(f"p{s.patient_id}_t{s.timepoint}")
    report = evaluate(preds, truths, spacings, volume_ids=ids)
    return report.macro_dss, report.macro_hd95


def train_step(model: Module, optimizer: Adam, item: ModelInput, lr: float,
               exclude_background: bool = True, ce_scope: str = "all") -> float:
    optimizer.zero_grad()
    probs = model(Tensor(item.image))
    loss = dice_ce_loss(probs, item.labels, exclude_background, ce_scope)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    backward(loss)
    optimizer.step(lr)
    return value


def fit(model: Module, train: Sequence[VolumeSample], val: Sequence[VolumeSample], cfg: TrainConfig,
        callbacks: Sequence[Callable] = (), boxes: Optional[dict] = None,
        optimizer: Optional[Adam] = None) -> TrainingTrace:
    """Train with Adam + poly decay, validating every ``val_every`` epochs.

    The parameters with the highest validation macro DSS are kept in
    ``trace.best_state``. Each callback is called as ``cb(model, row)`` after
    every validated epoch.
    """
    cfg.validate()
    trace = TrainingTrace()
    if cfg.epochs == 0 or not train:
        return trace
    optimizer = optimizer or Adam(model)
    max_iters = cfg.epochs * len(train)
    it = 0
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        losses = []
        lr = cfg.base_lr
        for idx in order:
            rng = sample_rng(cfg.seed, epoch, int(idx))
            sample = augment(train[idx], rng, cfg)
            box = boxes.get(sample.patient_id) if boxes else None
            item = preprocess(sample, cfg.input_mode, cfg.target_extent, box,
                              rng=rng if cfg.input_mode == "patches" else None)[0]
            lr = poly_lr(cfg.base_lr, it, max_iters, cfg.poly_power)
            losses.append(train_step(model, optimizer, item, lr, cfg.exclude_background, cfg.ce_scope))
            it += 1
        row = {"epoch": epoch, "iter": it, "lr": lr, "train_loss": float(np.mean(losses)),
               "val_dss_macro": None, "val_hd95_macro": None, "wall_seconds": None}
        if val and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            dss, hd = validation_dss(model, val, cfg, boxes)
            row["val_dss_macro"], row["val_hd95_macro"] = dss, hd
            if trace.best_val_dss is None or dss > trace.best_val_dss:
                trace.best_val_dss, trace.best_epoch = dss, epoch
                trace.best_state = model.state_dict()
        row["wall_seconds"] = time.perf_counter() - start
        trace.rows.append(row)
        log.info("epoch %d loss %.4f val_dss %s", epoch, row["train_loss"], row["val_dss_macro"])
        for cb in callbacks:
            cb(model, row)
        if cfg.max_wall_seconds is not None and row["wall_seconds"] >= cfg.max_wall_seconds:
            break
    return trace
