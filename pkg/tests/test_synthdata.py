import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ct2rep.longitudinal import load_pairs
from ct2rep.metrics import LABELS, extract_labels
from ct2rep.synthdata import (
    LUNG_HU,
    TISSUE_HU,
    OPENING,
    SynthSpec,
    signature_center,
    synth_dataset,
    synth_report,
    synth_volume,
)
from ct2rep.volio import convert_and_clip, load_manifest, read_jsonl


def _random_spec(seed: int) -> SynthSpec:
    rng = np.random.default_rng(seed)
    return SynthSpec(labels=tuple(np.flatnonzero(rng.random(len(LABELS)) < 0.3)), seed=seed)


def test_label_round_trip_over_1000_specs():
    for seed in range(1000):
        spec = _random_spec(seed)
        np.testing.assert_array_equal(extract_labels(synth_report(spec)), spec.label_vector, err_msg=str(seed))


def test_report_opens_with_conserved_sentence():
    assert synth_report(_random_spec(3)).startswith(OPENING)


def test_empty_set_gives_only_negations():
    text = synth_report(SynthSpec(seed=1))
    sentences = [s for s in text.split(". ") if s]
    assert len(sentences) == 1 + len(LABELS)
    assert not extract_labels(text).any()


def test_report_and_volume_are_seed_deterministic():
    spec = _random_spec(11)
    assert synth_report(spec) == synth_report(spec)
    np.testing.assert_array_equal(synth_volume(spec)[0].data, synth_volume(spec)[0].data)
    other = SynthSpec(labels=spec.labels, seed=12)
    assert not np.array_equal(synth_volume(spec)[0].data, synth_volume(other)[0].data)


def test_phrase_seed_pins_paraphrases():
    a = SynthSpec(labels=(2, 9), seed=1, phrase_seed=7)
    b = SynthSpec(labels=(2, 9), seed=2, phrase_seed=7)
    positives = lambda s: synth_report(s).split(". ")[1:3]  # noqa: E731
    assert positives(a) == positives(b)


def _hu(spec):
    vol, meta = synth_volume(spec)
    return convert_and_clip(vol, meta).data


def test_empty_spec_is_torso_only():
    hu = _hu(SynthSpec(seed=0))
    assert hu.max() < TISSUE_HU + 30.0  # soft tissue plus 6 sigma of noise, no signatures


def test_nodule_is_a_bright_cluster_inside_the_lung():
    k = LABELS.index("lung nodule")
    spec = SynthSpec(labels=(k,), seed=4)
    hu = _hu(spec)
    z, y, x = (int(c) for c in signature_center(k, spec.shape))
    assert hu[z, y, x] > LUNG_HU + 500
    assert (hu > 0).sum() > 5
    # the slot sits in lung parenchyma when the label is absent
    assert _hu(SynthSpec(seed=4))[z, y, x] < -700


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_signatures_stay_in_bounds(seed):
    spec = _random_spec(seed)
    hu = _hu(spec)
    assert hu.shape == spec.shape
    assert np.all((hu >= -1000) & (hu <= 200))
    for k in spec.labels:
        assert all(0 <= c < n for c, n in zip(signature_center(k, spec.shape), spec.shape))


def test_bad_spec_rejected():
    with pytest.raises(ValueError):
        SynthSpec(labels=(18,))


def test_split_is_patient_disjoint(tmp_path):
    ds = synth_dataset(tmp_path, 100, visits=(1, 1), seed=0, shape=(8, 8, 8))
    assert (len(ds.train_patients), len(ds.val_patients)) == (94, 6)
    train = {r["patient_id"] for r in read_jsonl(ds.train_manifest)}
    val = {r["patient_id"] for r in read_jsonl(ds.val_manifest)}
    assert not train & val and len(train | val) == 100


def test_single_visit_patients_have_no_pairs(tmp_path):
    ds = synth_dataset(tmp_path, 5, visits=(1, 1), seed=0, shape=(8, 8, 8))
    assert read_jsonl(ds.train_pairs) == []


def test_visits_strictly_increase_and_labels_round_trip(tmp_path):
    ds = synth_dataset(tmp_path, 6, visits=(2, 4), seed=3, shape=(8, 8, 8), val_fraction=0.0)
    entries = load_manifest(ds.train_manifest)
    by_patient = {}
    for _, meta in entries:
        by_patient.setdefault(meta.patient_id, []).append(meta.time)
        np.testing.assert_array_equal(extract_labels(meta.findings), SynthSpec(labels=meta.extra["labels"]).label_vector)
    for times in by_patient.values():
        assert all(a < b for a, b in zip(times, times[1:]))
    ks = [len(t) for t in by_patient.values()]
    assert len(load_pairs(ds.train_pairs)) == sum(k * (k - 1) // 2 for k in ks)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_bytes_are_a_function_of_seed(tmp_path):
    for name in ("a", "b"):
        synth_dataset(tmp_path / name, 4, seed=9, shape=(8, 8, 8))
    synth_dataset(tmp_path / "c", 4, seed=10, shape=(8, 8, 8))
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b") != _digest(tmp_path / "c")


def test_zero_patients_rejected(tmp_path):
    with pytest.raises(ValueError):
        synth_dataset(tmp_path, 0)
