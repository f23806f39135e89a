"""Synthetic multi-label heart-like phantoms and the VOL1 volume format.

Each patient gets a jittered arrangement of five structures (LV, LA, LAA, AA,
PV) that breathes through a periodic cardiac cycle. Everything is derived from
(seed, patient_id, timepoint) so datasets are bit-reproducible.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, FormatError

BACKGROUND, LV, LA, LAA, AA, PV = range(6)
ROI_NAMES = {LV: "LV", LA: "LA", LAA: "LAA", AA: "AA", PV: "PV"}
NUM_CLASSES = 6
MIN_VOXELS = 8

BASE_LEVEL = {LV: 420.0, LA: 340.0, LAA: 265.0, AA: 510.0, PV: 190.0}


@dataclass
class VolumeSample:
    intensity: np.ndarray          # float32 [D, H, W]
    labels: np.ndarray             # uint8 [D, H, W]
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    patient_id: int = 0
    timepoint: int = 1

    def __post_init__(self):
        if self.intensity.shape != self.labels.shape:
            raise DataError(f"intensity {self.intensity.shape} and labels {self.labels.shape} differ")
        if self.timepoint < 1:
            raise DataError("timepoint is 1-based")
        if any(s <= 0 for s in self.spacing_mm):
            raise DataError("spacing must be strictly positive")

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def replace(self, **changes) -> "VolumeSample":
        d = dict(intensity=self.intensity, labels=self.labels, spacing_mm=self.spacing_mm,
                 patient_id=self.patient_id, timepoint=self.timepoint)
        d.update(changes)
        return VolumeSample(**d)


@dataclass
class PhantomSpec:
    extent: int = 32
    num_patients: int = 12
    timepoints: int = 20
    seed: int = 0
    contrast_level: float | Sequence[float] = 1.0
    noise_sd: float = 15.0
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    # patient_id -> number of available timepoints (short series)
    truncated: dict = field(default_factory=dict)

    def validate(self) -> "PhantomSpec":
        problems = []
        if self.extent < 32:
            problems.append(f"extent must be >= 32, got {self.extent}")
        if self.timepoints < 1:
            problems.append("timepoints must be >= 1")
        if self.num_patients < 1:
            problems.append("num_patients must be >= 1")
        if self.noise_sd < 0:
            problems.append("noise_sd must be >= 0")
        if not isinstance(self.contrast_level, (int, float)) and len(self.contrast_level) != self.num_patients:
            problems.append("contrast_level list must have one entry per patient")
        for pid, n in self.truncated.items():
            if not 1 <= int(n) <= self.timepoints:
                problems.append(f"truncated series for patient {pid} must have 1..{self.timepoints} timepoints")
        if problems:
            raise ConfigurationError("invalid phantom spec: " + "; ".join(problems))
        return self

    def contrast_for(self, patient_id: int) -> float:
        if isinstance(self.contrast_level, (int, float)):
            return float(self.contrast_level)
        return float(self.contrast_level[patient_id])

    def series_length(self, patient_id: int) -> int:
        return int(self.truncated.get(patient_id, self.truncated.get(str(patient_id), self.timepoints)))

    def to_dict(self) -> dict:
        return {"extent": self.extent, "num_patients": self.num_patients,
                "timepoints": self.timepoints, "seed": self.seed,
                "contrast_level": (self.contrast_level if isinstance(self.contrast_level, (int, float))
                                   else list(self.contrast_level)),
                "noise_sd": self.noise_sd, "spacing_mm": list(self.spacing_mm),
                "truncated": {str(k): int(v) for k, v in self.truncated.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "spacing_mm" in d:
            d["spacing_mm"] = tuple(d["spacing_mm"])
        if "truncated" in d:
            d["truncated"] = {int(k): int(v) for k, v in d["truncated"].items()}
        return cls(**d)


# -- geometry -------------------------------------------------------------------

def cycle_phase(timepoint: int, period: int) -> float:
    """0 at t=1, 1 at t=period/2+1; periodic in t with the given period."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * (timepoint - 1) / period))


def _patient_layout(seed: int, patient_id: int) -> dict:
    rng = np.random.default_rng([seed, patient_id, 7919])
    j = lambda s: rng.uniform(-s, s, size=3)  # noqa: E731
    n_pv = int(rng.integers(2, 5))
    pv_dirs = []
    for k in range(n_pv):
        # fan out behind the atrium (+x), spread in the z/y plane
        ang = np.pi * (k + 0.5) / n_pv + rng.uniform(-0.2, 0.2)
        d = np.array([0.9 * np.cos(ang), 0.9 * np.sin(ang) - 0.2, 0.7])
        pv_dirs.append(d / np.linalg.norm(d))
    return {
        "lv_center": np.array([0.58, 0.56, 0.38]) + j(0.02),
        "lv_radii": np.array([0.22, 0.15, 0.15]) * rng.uniform(0.93, 1.07),
        "la_center": np.array([0.50, 0.56, 0.72]) + j(0.015),
        "la_radii": np.array([0.13, 0.12, 0.105]) * rng.uniform(0.93, 1.07),
        "laa_offset": np.array([-0.06, -0.15, 0.0]) + j(0.015),
        "laa_radius": 0.058 * rng.uniform(0.95, 1.1),
        "aa_bend": rng.uniform(0.13, 0.17),
        "aa_radius": 0.06 * rng.uniform(0.95, 1.1),
        "pv_dirs": pv_dirs,
        "pv_radius": 0.042,
        "pv_length": rng.uniform(0.23, 0.27),
        "gradient": rng.uniform(-1.0, 1.0, size=3),
    }


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((points - a) @ ab) / float(ab @ ab), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def _polyline_distance(points, nodes) -> np.ndarray:
    return np.min([_segment_distance(points, nodes[i], nodes[i + 1]) for i in range(len(nodes) - 1)], axis=0)


def phantom_labels(extent: int, layout: dict, phase: float) -> np.ndarray:
    """Paint the five structures for one cardiac phase; later ones only fill background."""
    c = (np.arange(extent) + 0.5) / extent
    pts = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
    labels = np.zeros((extent,) * 3, dtype=np.uint8)

    def paint(mask, value):
        labels[mask & (labels == BACKGROUND)] = value

    lv_r = layout["lv_radii"] * (1.0 - 0.22 * phase)
    paint((((pts - layout["lv_center"]) / lv_r) ** 2).sum(-1) <= 1.0, LV)

    la_r = layout["la_radii"] * (1.0 + 0.10 * phase)
    la_c = layout["la_center"]
    paint((((pts - la_c) / la_r) ** 2).sum(-1) <= 1.0, LA)

    laa_c = la_c + layout["laa_offset"] * (1.0 + 0.10 * phase)
    r = layout["laa_radius"]
    lobe = laa_c + np.array([0.02, -0.05, 0.03])
    laa = (np.linalg.norm(pts - laa_c, axis=-1) <= r) | (np.linalg.norm(pts - lobe, axis=-1) <= 0.65 * r)
    paint(laa, LAA)

    lv_c = layout["lv_center"]
    top = lv_c - np.array([lv_r[0] * 0.75, 0.0, 0.0])
    bend = layout["aa_bend"]
    arc_center = top - np.array([0.0, bend, 0.0])
    theta = np.linspace(0.0, np.pi / 2, 8)
    nodes = [arc_center + bend * np.array([-np.sin(t), np.cos(t), 0.0]) for t in theta]
    nodes.append(nodes[-1] + np.array([0.0, -0.10, 0.0]))
    nodes = np.clip(np.array(nodes), 0.08, 0.92)
    paint(_polyline_distance(pts, nodes) <= layout["aa_radius"], AA)

    pv = np.zeros(labels.shape, dtype=bool)
    for d in layout["pv_dirs"]:
        end = np.clip(la_c + d * (float(la_r.max()) + layout["pv_length"]), 0.06, 0.94)
        pv |= _segment_distance(pts, la_c, end) <= layout["pv_radius"]
    paint(pv, PV)
    return labels


def generate_sample(spec: PhantomSpec, patient_id: int, timepoint: int) -> VolumeSample:
    layout = _patient_layout(spec.seed, patient_id)
    phase = cycle_phase(timepoint, spec.timepoints)
    s = spec.extent
    labels = phantom_labels(s, layout, phase)
    for roi, name in ROI_NAMES.items():
        n = int((labels == roi).sum())
        if n < MIN_VOXELS:
            raise ConfigurationError(
                f"cannot place {name} at extent {s} (patient {patient_id}, t={timepoint}): only {n} voxels")
    contrast = spec.contrast_for(patient_id)
    levels = np.zeros(NUM_CLASSES, dtype=np.float64)
    for roi, base in BASE_LEVEL.items():
        levels[roi] = base * contrast
    c = (np.arange(s) + 0.5) / s - 0.5
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
    g = layout["gradient"]
    background = 40.0 + 40.0 * (g[0] * zz + g[1] * yy + g[2] * xx)
    rng = np.random.default_rng([spec.seed, patient_id, timepoint])
    intensity = np.where(labels == BACKGROUND, background, levels[labels])
    intensity = intensity + rng.normal(0.0, spec.noise_sd, size=labels.shape)
    return VolumeSample(intensity.astype(np.float32), labels, tuple(float(v) for v in spec.spacing_mm),
                        patient_id, timepoint)


def generate_phantom(spec: PhantomSpec) -> list[VolumeSample]:
    """All (patient, timepoint) volumes, patient-major."""
    spec.validate()
    return [generate_sample(spec, pid, t)
            for pid in range(spec.num_patients)
            for t in range(1, spec.series_length(pid) + 1)]


# -- patient-level splits -----------------------------------------------------------

def split_patients(series_lengths: dict, n_val: int, n_test: int, seed: int = 0,
                   full_length: Optional[int] = None) -> dict:
    """Assign whole patients to train/val/test.

    Patients with fewer than ``full_length`` timepoints always go to test.
    """
    full_length = max(series_lengths.values()) if full_length is None else full_length
    short = sorted(p for p, n in series_lengths.items() if n < full_length)
    rest = sorted(p for p in series_lengths if p not in short)
    order = list(np.random.default_rng(seed).permutation(rest))
    order = [int(p) for p in order]
    need_test = max(n_test - len(short), 0)
    test = short + order[:need_test]
    val = order[need_test: need_test + n_val]
    train = order[need_test + n_val:]
    if not train:
        raise ConfigurationError("split leaves no training patients")
    return {"train": sorted(train), "val": sorted(val), "test": sorted(test)}


# -- VOL1 files -------------------------------------------------------------------

VOL_MAGIC = b"VOL1"


def save_volume(sample: VolumeSample, path) -> None:
    header = {"shape": list(sample.shape), "spacing_mm": [float(s) for s in sample.spacing_mm],
              "patient_id": int(sample.patient_id), "timepoint": int(sample.timepoint),
              "dtype_intensity": "f32", "dtype_labels": "u8"}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(VOL_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(np.ascontiguousarray(sample.intensity, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes())


def load_volume(path) -> VolumeSample:
    raw = Path(path).read_bytes()
    if raw[:4] != VOL_MAGIC:
        raise FormatError(f"{path}: not a VOL1 file")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8: 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("dtype_intensity") != "f32" or header.get("dtype_labels") != "u8":
        raise FormatError(f"{path}: unsupported dtypes {header.get('dtype_intensity')}/{header.get('dtype_labels')}")
    shape = tuple(int(s) for s in header["shape"])
    n = int(np.prod(shape))
    payload = raw[8 + hlen:]
    expected = 4 * n + n
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected} "
                          f"({4 * n} f32 intensity + {n} u8 labels)")
    intensity = np.frombuffer(payload, dtype="<f4", count=n).reshape(shape).astype(np.float32)
    labels = np.frombuffer(payload, dtype=np.uint8, count=n, offset=4 * n).reshape(shape).copy()
    return VolumeSample(intensity, labels, tuple(header["spacing_mm"]),
                        int(header["patient_id"]), int(header["timepoint"]))


def write_manifest(entries: list[dict], path) -> None:
    Path(path).write_text(json.dumps(entries, indent=1, sort_keys=True))


def read_manifest(path) -> list[dict]:
    return json.loads(Path(path).read_text())
