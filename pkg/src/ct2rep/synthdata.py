"""Procedural (volume, findings) pairs with longitudinal visit histories.

Each abnormality is a small bright ellipsoid at a fixed slot inside the lungs,
and the report is templated from the same label set, so the labeler can recover
the labels exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .longitudinal import build_pairs, write_pairs_manifest
from .metrics import LABELS
from .volio import TARGET_SPACING, Volume3D, VolumeMeta, manifest_row, write_jsonl, write_payload

OPENING = "Trachea, both main bronchi are open."

AIR_HU = -1000.0
TISSUE_HU = 40.0
LUNG_HU = -850.0
SLOPE, INTERCEPT = 1.0, -1024.0

POSITIVE = {
    "medical material": ("A central venous catheter is seen.", "Cardiac pacemaker leads are present.",
                         "Sternotomy wires are seen."),
    "arterial wall calcification": ("Calcified atherosclerotic plaques are seen in the aorta.",
                                    "Atherosclerotic calcifications are present in the aortic wall."),
    "cardiomegaly": ("Cardiomegaly is present.", "Heart size is increased.", "The heart is enlarged with cardiomegaly."),
    "pericardial effusion": ("Pericardial effusion is seen.", "Minimal pericardial effusion is present."),
    "coronary artery wall calcification": ("Coronary artery wall calcifications are seen.",
                                           "There are calcifications in the coronary arteries."),
    "hiatal hernia": ("Hiatal hernia is observed.", "A sliding type hiatal hernia is seen."),
    "lymphadenopathy": ("Mediastinal lymphadenopathy is present.", "Enlarged lymph nodes are seen in the mediastinum."),
    "emphysema": ("Emphysematous changes are seen in both lungs.", "Centrilobular emphysema is present."),
    "atelectasis": ("Atelectasis is seen in the lower lobes.", "Subsegmental atelectatic changes are present."),
    "lung nodule": ("A nodule is seen in the right upper lobe.", "Millimetric nodules are present in both lungs."),
    "lung opacity": ("Ground-glass opacities are seen in both lungs.", "Patchy opacity is present in the left lung."),
    "pulmonary fibrotic sequela": ("Fibrotic sequelae are seen in the lung bases.", "Linear fibrosis is present."),
    "pleural effusion": ("Bilateral pleural effusion is present.", "Pleural effusion is seen on the right."),
    "mosaic attenuation pattern": ("Mosaic attenuation pattern is seen in both lungs.",
                                   "There is a mosaic attenuation pattern."),
    "peribronchial thickening": ("Peribronchial thickening is present.", "Bronchial walls show peribronchial thickening."),
    "consolidation": ("Consolidation is seen in the lower lobe.", "Consolidative areas are present."),
    "bronchiectasis": ("Bronchiectasis is present.", "Cylindrical bronchiectatic changes are seen."),
    "interlobular septal thickening": ("Interlobular septal thickening is seen.",
                                       "Smooth interlobular septal thickening is present."),
}

NEGATIVE = {
    "medical material": "No medical material is seen.",
    "arterial wall calcification": "No calcified atherosclerotic plaques are seen.",
    "cardiomegaly": "Heart size is normal.",
    "pericardial effusion": "No pericardial effusion was observed.",
    "coronary artery wall calcification": "Coronary artery wall calcification was not observed.",
    "hiatal hernia": "No hiatal hernia is seen.",
    "lymphadenopathy": "No lymphadenopathy is present.",
    "emphysema": "No emphysema is seen.",
    "atelectasis": "No atelectasis is seen.",
    "lung nodule": "No nodule was detected.",
    "lung opacity": "No opacity is observed in either lung.",
    "pulmonary fibrotic sequela": "No fibrotic changes are seen.",
    "pleural effusion": "No pleural effusion is seen.",
    "mosaic attenuation pattern": "Mosaic attenuation was not observed.",
    "peribronchial thickening": "No peribronchial thickening is seen.",
    "consolidation": "No consolidation is seen.",
    "bronchiectasis": "No bronchiectasis is present.",
    "interlobular septal thickening": "No interlobular septal thickening is seen.",
}


@dataclass(frozen=True)
class SynthSpec:
    labels: tuple = ()  # label indices into LABELS, ascending
    seed: int = 0
    shape: tuple = (24, 48, 48)
    spacing: tuple = TARGET_SPACING
    phrase_seed: int | None = None  # paraphrase choices; defaults to ``seed``
    patient_id: str = "p0000"
    study_time: str = "2020-01-01T00:00:00"
    volume_id: str = ""

    def __post_init__(self):
        labels = tuple(sorted(set(int(k) for k in self.labels)))
        if any(k < 0 or k >= len(LABELS) for k in labels):
            raise ValueError(f"label index out of range in {self.labels}")
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ValueError(f"volume shape must be 3-d with every side >= 4, got {self.shape}")
        object.__setattr__(self, "labels", labels)

    @property
    def label_vector(self) -> np.ndarray:
        out = np.zeros(len(LABELS), dtype=np.int64)
        out[list(self.labels)] = 1
        return out


def _lungs(shape) -> tuple:
    """Centres and radii (voxels) of the two lung ellipsoids."""
    d, h, w = shape
    radii = (0.42 * d, 0.3 * h, 0.15 * w)
    return ((d / 2, h / 2, 0.3 * w), (d / 2, h / 2, 0.7 * w)), radii


def signature_center(k: int, shape) -> tuple:
    """Fixed slot for label ``k``: side k%2, depth slot (k//2)%3, row slot k//6."""
    d, h, w = shape
    (left, right), _ = _lungs(shape)
    side = left if k % 2 == 0 else right
    z = d * (0.3 + 0.2 * ((k // 2) % 3))
    y = h * (0.35 + 0.15 * (k // 6))
    return z, y, side[2]


def signature_hu(k: int) -> float:
    return 60.0 + 7.0 * k


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g + 0.5 - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def synth_volume(spec: SynthSpec) -> tuple:
    """Raw int16-valued volume plus metadata; ``convert_and_clip`` recovers the intended HU."""
    rng = np.random.default_rng([spec.seed, 0])
    shape = tuple(spec.shape)
    d, h, w = shape
    hu = np.full(shape, AIR_HU) + rng.normal(0.0, 5.0, size=shape)
    torso = _ellipsoid(shape, (d / 2, h / 2, w / 2), (0.6 * d, 0.45 * h, 0.45 * w))
    hu[torso] = TISSUE_HU + rng.normal(0.0, 5.0, size=int(torso.sum()))
    centers, radii = _lungs(shape)
    for c in centers:
        lung = _ellipsoid(shape, c, radii)
        hu[lung] = LUNG_HU + rng.normal(0.0, 5.0, size=int(lung.sum()))
    sig_radii = (max(0.12 * d, 1.0), max(0.1 * h, 1.0), max(0.08 * w, 1.0))
    for k in spec.labels:
        jitter = rng.uniform(-0.5, 0.5, size=3)
        center = np.add(signature_center(k, shape), jitter)
        blob = _ellipsoid(shape, center, sig_radii)
        hu = np.where(blob, np.maximum(hu, signature_hu(k)), hu)  # max-intensity composition
    raw = np.rint((hu - INTERCEPT) / SLOPE)
    meta = VolumeMeta(patient_id=spec.patient_id, study_time=spec.study_time, rescale_slope=SLOPE,
                      rescale_intercept=INTERCEPT, findings=synth_report(spec), volume_id=spec.volume_id)
    return Volume3D(raw, spec.spacing, "raw"), meta


def synth_report(spec: SynthSpec) -> str:
    """Opening sentence, one paraphrased sentence per label, then negations for some absent labels."""
    phrase_seed = spec.seed if spec.phrase_seed is None else spec.phrase_seed
    choice = np.random.default_rng([phrase_seed, 1])
    picks = choice.integers(0, 6, size=len(LABELS))  # one pick per label, stable for a phrase seed
    negate = np.random.default_rng([spec.seed, 2]).random(len(LABELS)) < 0.5
    present = set(spec.labels)
    sentences = [OPENING]
    for k, label in enumerate(LABELS):
        if k in present:
            options = POSITIVE[label]
            sentences.append(options[picks[k] % len(options)])
    for k, label in enumerate(LABELS):
        if k not in present and (negate[k] or not present):
            sentences.append(NEGATIVE[label])
    return " ".join(sentences)


@dataclass
class SynthDataset:
    train_manifest: Path
    val_manifest: Path
    train_pairs: Path
    val_pairs: Path
    train_patients: list
    val_patients: list


def _visit_labels(rng, n_visits: int, p_label: float, p_new: float, persistence: float) -> list[tuple]:
    current = rng.random(len(LABELS)) < p_label
    visits = [current]
    for _ in range(n_visits - 1):
        keep = rng.random(len(LABELS)) < persistence
        appear = rng.random(len(LABELS)) < p_new
        current = np.where(current, keep, appear)
        visits.append(current)
    return [tuple(int(k) for k in np.flatnonzero(v)) for v in visits]


def synth_dataset(out_dir, n_patients: int, visits=(1, 3), seed: int = 0, shape=(24, 48, 48),
                  persistence: float = 0.8, p_label: float = 0.2, p_new: float = 0.1,
                  val_fraction: float = 0.06) -> SynthDataset:
    """Write volumes, train/val manifests and pairs manifests under ``out_dir``.

    ``visits`` is an inclusive (min, max) range of visits per patient. Patients
    are split disjointly with ``round(n * val_fraction)`` going to validation.
    """
    if n_patients < 1:
        raise ValueError("need at least one patient")
    lo, hi = visits
    if not 1 <= lo <= hi:
        raise ValueError(f"bad visit range {visits}")
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    ids = [f"p{i:04d}" for i in range(n_patients)]
    order = np.random.default_rng([seed, 7]).permutation(n_patients)
    n_val = int(round(n_patients * val_fraction))
    val_ids = sorted(ids[i] for i in order[:n_val])
    train_ids = sorted(ids[i] for i in order[n_val:])
    rows = {}
    base_time = datetime(2020, 1, 1)
    for i, pid in enumerate(ids):
        rng = np.random.default_rng([seed, 1000 + i])
        n_visits = int(rng.integers(lo, hi + 1))
        history = _visit_labels(rng, n_visits, p_label, p_new, persistence)
        when = base_time + timedelta(days=int(rng.integers(0, 365)))
        patient_rows = []
        for v, labels in enumerate(history):
            if v:
                when += timedelta(days=int(rng.integers(30, 400)))
            vid = f"{pid}_v{v}"
            spec = SynthSpec(labels=labels, seed=int(rng.integers(0, 2**31)), shape=tuple(shape),
                             phrase_seed=seed * 100003 + i, patient_id=pid,
                             study_time=when.isoformat(timespec="seconds"), volume_id=vid)
            vol, meta = synth_volume(spec)
            payload = f"volumes/{vid}.i16"
            write_payload(out / payload, vol.data)
            meta.extra = {"labels": list(spec.labels)}
            patient_rows.append(manifest_row(meta, vol.data.shape, vol.spacing, payload))
        rows[pid] = patient_rows
    paths = {}
    for split, split_ids in (("train", train_ids), ("val", val_ids)):
        split_rows = [r for pid in split_ids for r in rows[pid]]
        manifest = out / f"{split}.jsonl"
        write_jsonl(manifest, split_rows)
        entries = [(r, VolumeMeta(r["patient_id"], r["study_time"], source_path=r["payload"])) for r in split_rows]
        pairs = out / f"{split}_pairs.jsonl"
        write_pairs_manifest(pairs, build_pairs(entries))
        paths[split] = (manifest, pairs)
    return SynthDataset(paths["train"][0], paths["val"][0], paths["train"][1], paths["val"][1], train_ids, val_ids)
