"""End-to-end workflows: dataset generation, ROI localization, training,
evaluation and the two-model convergence comparison."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, UsageError
from .metrics import Box, MetricsReport, bounding_box, evaluate
from .models import (ModelConfig, build_localizer, build_model, save_checkpoint,
                     toy_res_unet_config, toy_trunet_config)
from .nn import Module
from .phantom import (PhantomSpec, VolumeSample, generate_phantom, load_volume, read_manifest,
                      save_volume, split_patients, write_manifest)
from .training import TrainConfig, TrainingTrace, fit, predict_volume

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class ExperimentConfig:
    """Everything one run needs, serialized as a single JSON document."""

    model: ModelConfig = field(default_factory=toy_trunet_config)
    baseline: ModelConfig = field(default_factory=toy_res_unet_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=lambda: PhantomSpec(timepoints=5))
    n_val: int = 2
    n_test: int = 2
    margin: int = 3
    localizer_epochs: int = 3
    out_dir: str = "runs"

    def violations(self) -> list[str]:
        out = []
        for label, cfg in (("model", self.model), ("baseline", self.baseline), ("train", self.train)):
            out.extend(f"{label}: {v}" for v in cfg.violations())
        try:
            self.phantom.validate()
        except ConfigurationError as exc:
            out.append(str(exc))
        if self.margin < 0:
            out.append("margin must be >= 0")
        if self.n_val < 0 or self.n_test < 0:
            out.append("n_val and n_test must be >= 0")
        if self.n_val + self.n_test >= self.phantom.num_patients:
            out.append(f"{self.n_val} val + {self.n_test} test patients leave none of "
                       f"{self.phantom.num_patients} for training")
        if self.localizer_epochs < 1:
            out.append("localizer_epochs must be >= 1")
        for label, cfg in (("model", self.model), ("baseline", self.baseline)):
            if self.train.input_mode != "patches" and cfg.input_extent != self.train.target_extent:
                out.append(f"{label}.input_extent {cfg.input_extent} != train.target_extent "
                           f"{self.train.target_extent}")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.violations()
        if problems:
            raise ConfigurationError("invalid experiment config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "baseline": self.baseline.to_dict(),
                "train": self.train.to_dict(), "phantom": self.phantom.to_dict(),
                "n_val": self.n_val, "n_test": self.n_test, "margin": self.margin,
                "localizer_epochs": self.localizer_epochs, "out_dir": self.out_dir}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "baseline" in d:
            d["baseline"] = ModelConfig.from_dict(d["baseline"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "phantom" in d:
            d["phantom"] = PhantomSpec.from_dict(d["phantom"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"{path}: {exc}") from None


# -- datasets -------------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list
    split: dict          # split name -> sorted patient ids

    def volumes(self, name: str) -> list[VolumeSample]:
        if name not in SPLITS:
            raise UsageError(f"unknown split {name!r}")
        ids = set(self.split[name])
        return [s for s in self.samples if s.patient_id in ids]

    @property
    def split_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.split, sort_keys=True).encode()).hexdigest()[:16]


def volume_filename(sample: VolumeSample) -> str:
    return f"p{sample.patient_id:03d}_t{sample.timepoint:02d}.vol"


def make_split(cfg: ExperimentConfig) -> dict:
    lengths = {pid: cfg.phantom.series_length(pid) for pid in range(cfg.phantom.num_patients)}
    return split_patients(lengths, cfg.n_val, cfg.n_test, cfg.phantom.seed, cfg.phantom.timepoints)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    return Dataset(generate_phantom(cfg.phantom), make_split(cfg))


def gen_data(cfg: ExperimentConfig, out_dir) -> tuple[Dataset, Path]:
    """Write one VOL1 file per volume plus ``manifest.json``; returns the manifest path."""
    cfg.validate()
    dataset = build_dataset(cfg)
    out = Path(out_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    role = {pid: name for name, ids in dataset.split.items() for pid in ids}
    entries = []
    for s in dataset.samples:
        save_volume(s, out / volume_filename(s))
        entries.append({"path": volume_filename(s), "patient_id": s.patient_id,
                        "timepoint": s.timepoint, "split": role[s.patient_id]})
    manifest = out / "manifest.json"
    write_manifest(entries, manifest)
    return dataset, manifest


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise UsageError(f"manifest {manifest_path} does not exist; run gen-data first")
    entries = read_manifest(manifest_path)
    split = {name: set() for name in SPLITS}
    samples = []
    for e in entries:
        if e["split"] not in split:
            raise DataError(f"manifest entry {e['path']} has unknown split {e['split']!r}")
        split[e["split"]].add(int(e["patient_id"]))
        samples.append(load_volume(manifest_path.parent / e["path"]))
    return Dataset(samples, {k: sorted(v) for k, v in split.items()})


# -- localization -------------------------------------------------------------------------

def binarized(samples: Sequence[VolumeSample]) -> list[VolumeSample]:
    return [s.replace(labels=(s.labels > 0).astype(np.uint8)) for s in samples]


def localizer_config(cfg: ExperimentConfig) -> ModelConfig:
    d = cfg.baseline.to_dict()
    d.update(kind="localizer", num_classes=2, input_extent=cfg.train.target_extent)
    return ModelConfig.from_dict(d)


def localizer_train_config(cfg: ExperimentConfig) -> TrainConfig:
    d = cfg.train.to_dict()
    d.update(epochs=cfg.localizer_epochs, input_mode="downsample", max_wall_seconds=None)
    return TrainConfig.from_dict(d)


@dataclass
class Localization:
    margin: int
    boxes: dict                  # patient id -> Box
    model: Optional[Module] = None

    def to_json(self) -> str:
        return json.dumps({"margin": self.margin,
                           "boxes": {str(p): b.to_dict() for p, b in sorted(self.boxes.items())}},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Localization":
        d = json.loads(text)
        return cls(int(d["margin"]), {int(p): Box.from_dict(b) for p, b in d["boxes"].items()})


def patient_boxes(predictions: dict, margin: int, extents: Sequence[int]) -> dict:
    """Union of per-timepoint foreground masks per patient, grown by ``margin``."""
    boxes = {}
    for pid, masks in sorted(predictions.items()):
        try:
            boxes[pid] = bounding_box(masks, margin, extents)
        except UsageError:
            raise DataError(f"localizer found no foreground for patient {pid}") from None
    return boxes


def localize(cfg: ExperimentConfig, dataset: Dataset, margin: Optional[int] = None) -> Localization:
    """Train the binary localizer on the training split and box every patient."""
    cfg.validate()
    margin = cfg.margin if margin is None else margin
    model = build_localizer(localizer_config(cfg), seed=cfg.train.seed)
    tcfg = localizer_train_config(cfg)
    fit(model, binarized(dataset.volumes("train")), [], tcfg)
    masks: dict = {}
    for s in dataset.samples:
        pred = predict_volume(model, s, "downsample", tcfg.target_extent)
        masks.setdefault(s.patient_id, []).append(pred > 0)
    extents = dataset.samples[0].shape
    return Localization(margin, patient_boxes(masks, margin, extents), model)


# -- training and evaluation ------------------------------------------------------------

@dataclass
class TrainResult:
    model: Module
    best_model: Module
    trace: TrainingTrace


def train_model(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset,
                boxes: Optional[dict] = None) -> TrainResult:
    if train_cfg.input_mode == "crop_then_downsample" and not boxes:
        raise UsageError("crop_then_downsample needs localization boxes; run localize first")
    model = build_model(model_cfg, seed=train_cfg.seed)
    trace = fit(model, dataset.volumes("train"), dataset.volumes("val"), train_cfg, boxes=boxes)
    best = model
    if trace.best_state is not None:
        best = build_model(model_cfg, seed=train_cfg.seed)
        best.load_state_dict(trace.best_state)
    return TrainResult(model, best, trace)


def train_summary(trace: TrainingTrace) -> dict:
    return {"epochs_run": len(trace.rows), "best_epoch": trace.best_epoch,
            "best_val_dss": trace.best_val_dss,
            "epochs_to_within_0.01_of_best": trace.epochs_to_near_best,
            "seconds_to_within_0.01_of_best": trace.seconds_to_near_best}


def write_training_outputs(result: TrainResult, train_cfg: TrainConfig, out_dir, stem: str = "") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = f"{stem}_" if stem else ""
    extra = {"train": train_cfg.to_dict()}
    save_checkpoint(result.best_model, out / f"{prefix}best.ckpt", step=result.trace.best_epoch or 0, extra=extra)
    save_checkpoint(result.model, out / f"{prefix}final.ckpt", step=len(result.trace.rows), extra=extra)
    (out / f"{prefix}trace.csv").write_text(result.trace.to_csv())
    summary = train_summary(result.trace)
    (out / f"{prefix}summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def evaluate_model(model: Module, samples: Sequence[VolumeSample], train_cfg: TrainConfig,
                   cluster_removal: bool = False, boxes: Optional[dict] = None) -> MetricsReport:
    if not samples:
        raise UsageError("cannot evaluate an empty split")
    mode, extent = train_cfg.input_mode, train_cfg.target_extent
    if mode != "patches" and model.config.input_extent != extent:
        raise ConfigurationError(f"checkpoint extent {model.config.input_extent} != target extent {extent}")
    if mode == "crop_then_downsample" and not boxes:
        raise UsageError("crop_then_downsample evaluation needs localization boxes")
    preds, truths, spacings, ids = [], [], [], []
    for s in samples:
        box = boxes.get(s.patient_id) if boxes else None
        preds.append(predict_volume(model, s, mode, extent, box))
        truths.append(s.labels)
        spacings.append(s.spacing_mm)
        ids.append(f"p{s.patient_id:03d}_t{s.timepoint:02d}")
    return evaluate(preds, truths, spacings, apply_cluster_removal=cluster_removal, volume_ids=ids)


def evaluate_checkpoint(path, dataset: Dataset, split: str, cluster_removal: bool = False,
                        boxes: Optional[dict] = None) -> MetricsReport:
    from .models import read_checkpoint
    ckpt = read_checkpoint(path)
    train_cfg = TrainConfig.from_dict(ckpt.extra["train"]) if "train" in ckpt.extra else TrainConfig(
        target_extent=ckpt.model.config.input_extent)
    return evaluate_model(ckpt.model, dataset.volumes(split), train_cfg, cluster_removal, boxes)


# -- comparison ---------------------------------------------------------------------------

COMPARE_COLUMNS = ("model", "split_hash", "epochs_run", "best_epoch", "best_val_dss",
                   "epochs_to_within_0.01_of_best", "seconds_to_within_0.01_of_best",
                   "test_dss_macro", "test_hd95_macro")


@dataclass
class Comparison:
    rows: list
    traces: dict         # model kind -> TrainingTrace

    def to_csv(self) -> str:
        lines = [",".join(COMPARE_COLUMNS)]
        for r in self.rows:
            lines.append(",".join("" if r[c] is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]))
                                  for c in COMPARE_COLUMNS))
        return "\n".join(lines) + "\n"

    def to_svg(self) -> str:
        return convergence_svg({k: [(r["epoch"], r["val_dss_macro"]) for r in t.rows
                                    if r["val_dss_macro"] is not None]
                                for k, t in self.traces.items()})


def convergence_svg(series: dict, width: int = 480, height: int = 320) -> str:
    """Validation DSS against epoch, one polyline per series."""
    pad = 40
    max_epoch = max([e for pts in series.values() for e, _ in pts] + [1])
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

    def xy(e, v):
        x = pad + (width - 2 * pad) * (e / max_epoch)
        y = height - pad - (height - 2 * pad) * v
        return f"{x:.1f},{y:.1f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">epoch</text>',
             f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" '
             f'text-anchor="middle">validation macro DSS</text>']
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = colors[i % len(colors)]
        coords = " ".join(xy(e, v) for e, v in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{width - pad - 90}" y="{pad + 16 * (i + 1)}" font-size="12" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def compare(cfg: ExperimentConfig, dataset: Dataset, boxes: Optional[dict] = None,
            out_dir=None) -> Comparison:
    """Train TRUNet and the residual U-Net with identical data, seed and budget."""
    cfg.validate()
    rows, traces = [], {}
    test = dataset.volumes("test")
    for model_cfg in (cfg.model, cfg.baseline):
        result = train_model(model_cfg, cfg.train, dataset, boxes)
        traces[model_cfg.kind] = result.trace
        if out_dir is not None:
            write_training_outputs(result, cfg.train, out_dir, stem=model_cfg.kind)
        row = {"model": model_cfg.kind, "split_hash": dataset.split_hash, **train_summary(result.trace),
               "test_dss_macro": None, "test_hd95_macro": None}
        if test:
            report = evaluate_model(result.best_model, test, cfg.train, boxes=boxes)
            row["test_dss_macro"], row["test_hd95_macro"] = report.macro_dss, report.macro_hd95
        rows.append(row)
        log.info("%s: best val %.4f at epoch %s", model_cfg.kind, row["best_val_dss"] or math.nan,
                 row["best_epoch"])
    comparison = Comparison(rows, traces)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "compare.csv").write_text(comparison.to_csv())
        (out / "compare.svg").write_text(comparison.to_svg())
    return comparison
