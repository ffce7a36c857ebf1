"""Raw volume ingestion and the CT preprocessing chain.

Volumes move one way through ``raw -> hounsfield -> normalized``; each step
checks the unit it receives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

HU_MIN = -1000.0
HU_MAX = 200.0
TARGET_SPACING = (1.5, 0.75, 0.75)  # (z, y, x) mm
TARGET_SHAPE = (240, 480, 480)

UNITS = ("raw", "hounsfield", "normalized")


class VolumeStateError(ValueError):
    """A preprocessing step received a volume in the wrong unit."""


class ResampleError(ValueError):
    pass


class IngestionError(ValueError):
    pass


class ManifestMissingError(IngestionError, FileNotFoundError):
    pass


class ManifestRowError(IngestionError):
    pass


class PayloadMismatchError(IngestionError):
    pass


@dataclass
class Volume3D:
    data: np.ndarray
    spacing: tuple
    unit: str = "raw"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-d, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.unit not in UNITS:
            raise ValueError(f"unknown unit {self.unit!r}")

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class VolumeMeta:
    patient_id: str
    study_time: str
    rescale_slope: float = 1.0
    rescale_intercept: float = -1024.0
    source_path: str = ""
    findings: str = ""
    volume_id: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def time(self) -> datetime:
        return parse_study_time(self.study_time)


def parse_study_time(text: str) -> datetime:
    try:
        return datetime.fromisoformat(text)
    except (TypeError, ValueError) as exc:
        raise IngestionError(f"unparsable study_time {text!r}") from exc


def convert_and_clip(vol: Volume3D, meta: VolumeMeta) -> Volume3D:
    """raw * slope + intercept, clamped to the diagnostic HU window."""
    if vol.unit != "raw":
        raise VolumeStateError(f"convert_and_clip expects a raw volume, got {vol.unit}")
    hu = vol.data.astype(np.float64) * meta.rescale_slope + meta.rescale_intercept
    return Volume3D(np.clip(hu, HU_MIN, HU_MAX), vol.spacing, "hounsfield")


def _resample_axis(data: np.ndarray, axis: int, old_sp: float, new_sp: float) -> np.ndarray:
    n_old = data.shape[axis]
    n_new = int(round(n_old * old_sp / new_sp))
    if n_old < 2 or n_new < 2:
        raise ResampleError(f"axis {axis} too short to resample ({n_old} -> {n_new} voxels)")
    # voxel centres aligned in physical space
    pos = (np.arange(n_new) + 0.5) * (new_sp / old_sp) - 0.5
    pos = np.clip(pos, 0.0, n_old - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_old - 2)
    w = pos - lo
    shape = [1] * data.ndim
    shape[axis] = n_new
    w = w.reshape(shape)
    a = np.take(data, lo, axis=axis)
    b = np.take(data, lo + 1, axis=axis)
    return a * (1.0 - w) + b * w


def resample_to_spacing(vol: Volume3D, target=TARGET_SPACING) -> Volume3D:
    """Trilinear resampling (separable linear passes) to ``target`` (z, y, x) spacing."""
    target = tuple(float(t) for t in target)
    if len(target) != 3 or min(target) <= 0:
        raise ResampleError(f"target spacing must be positive, got {target}")
    data = vol.data.astype(np.float64)
    for axis in range(3):
        if vol.spacing[axis] != target[axis]:
            data = _resample_axis(data, axis, vol.spacing[axis], target[axis])
    return Volume3D(data, target, vol.unit)


def _crop_pad_axis(data: np.ndarray, axis: int, target: int, fill: float) -> np.ndarray:
    n = data.shape[axis]
    if n > target:
        start = (n - target) // 2  # extra voxel dropped at the high end
        return np.take(data, np.arange(start, start + target), axis=axis)
    if n < target:
        before = (target - n) // 2  # extra voxel added at the high end
        pads = [(0, 0)] * data.ndim
        pads[axis] = (before, target - n - before)
        return np.pad(data, pads, constant_values=fill)
    return data


def crop_or_pad_center(vol: Volume3D, target_shape=TARGET_SHAPE) -> Volume3D:
    if min(target_shape) <= 0:
        raise ValueError(f"target shape must be positive, got {target_shape}")
    # pad with air in whatever unit the volume is in
    fill = {"raw": HU_MIN, "hounsfield": HU_MIN, "normalized": -1.0}[vol.unit]
    data = vol.data
    for axis, n in enumerate(target_shape):
        data = _crop_pad_axis(data, axis, int(n), fill)
    return replace(vol, data=data)


def normalize(vol: Volume3D) -> Volume3D:
    """Map the HU window [-1000, 200] linearly onto [-1, 1]."""
    if vol.unit != "hounsfield":
        raise VolumeStateError(f"normalize expects a hounsfield volume, got {vol.unit}")
    out = (vol.data - HU_MIN) / (HU_MAX - HU_MIN) * 2.0 - 1.0
    return Volume3D(out, vol.spacing, "normalized")


def preprocess(vol: Volume3D, meta: VolumeMeta, spacing=TARGET_SPACING, shape=TARGET_SHAPE) -> Volume3D:
    """raw -> HU clip -> resample -> crop/pad -> [-1, 1]."""
    hu = convert_and_clip(vol, meta)
    hu = resample_to_spacing(hu, spacing)
    hu = crop_or_pad_center(hu, shape)
    # resampling/padding stay inside the window, but keep the invariant explicit
    hu = Volume3D(np.clip(hu.data, HU_MIN, HU_MAX), hu.spacing, "hounsfield")
    return normalize(hu)


# -- manifest format ----------------------------------------------------------------

MANIFEST_KEYS = ("patient_id", "study_time", "shape", "spacing", "slope", "intercept", "payload")


def write_payload(path, data: np.ndarray):
    np.ascontiguousarray(data, dtype="<i2").tofile(path)


def manifest_row(meta: VolumeMeta, shape, spacing, payload: str) -> dict:
    row = {
        "id": meta.volume_id,
        "patient_id": meta.patient_id,
        "study_time": meta.study_time,
        "shape": [int(s) for s in shape],
        "spacing": [float(s) for s in spacing],
        "slope": float(meta.rescale_slope),
        "intercept": float(meta.rescale_intercept),
        "payload": payload,
        "findings": meta.findings,
    }
    row.update(meta.extra)
    return row


def entry_from_row(row: dict, base: Path, where: str = "row", lazy: bool = False):
    """Build ``(Volume3D | loader, VolumeMeta)`` from one manifest object."""
    missing = [k for k in MANIFEST_KEYS if k not in row]
    if missing:
        raise ManifestRowError(f"{where}: missing keys {missing}")
    try:
        shape = tuple(int(s) for s in row["shape"])
        spacing = tuple(float(s) for s in row["spacing"])
    except (TypeError, ValueError) as exc:
        raise ManifestRowError(f"{where}: bad shape/spacing ({exc})") from exc
    if len(shape) != 3 or min(shape) <= 0:
        raise ManifestRowError(f"{where}: bad shape {row['shape']}")
    payload = base / row["payload"]
    extra = {k: v for k, v in row.items() if k not in MANIFEST_KEYS + ("id", "findings")}
    meta = VolumeMeta(
        patient_id=str(row["patient_id"]),
        study_time=str(row["study_time"]),
        rescale_slope=float(row["slope"]),
        rescale_intercept=float(row["intercept"]),
        source_path=str(payload),
        findings=str(row.get("findings", "")),
        volume_id=str(row.get("id") or Path(row["payload"]).stem),
        extra=extra,
    )

    def load() -> Volume3D:
        if not payload.exists():
            raise PayloadMismatchError(f"{where}: payload {payload} not found")
        raw = np.fromfile(payload, dtype="<i2")
        if raw.size != int(np.prod(shape)):
            raise PayloadMismatchError(
                f"{where}: payload holds {raw.size} voxels but shape {shape} needs {int(np.prod(shape))}")
        return Volume3D(raw.reshape(shape).astype(np.float64), spacing, "raw")

    if lazy:
        return load, meta
    try:
        return load(), meta
    except ValueError as exc:
        if isinstance(exc, IngestionError):
            raise
        raise ManifestRowError(f"{where}: {exc}") from exc


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ManifestMissingError(f"manifest {path} not found")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestRowError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise ManifestRowError(f"{path}:{lineno}: expected an object")
        rows.append(obj)
    return rows


def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path, lazy: bool = False) -> list:
    """Entries ``(volume, meta)`` in file order. With ``lazy`` the volume slot holds a loader."""
    path = Path(path)
    rows = read_jsonl(path)
    return [entry_from_row(row, path.parent, f"{path.name} row {i + 1}", lazy) for i, row in enumerate(rows)]
