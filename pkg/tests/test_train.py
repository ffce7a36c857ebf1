import csv
import json
import struct

import numpy as np
import pytest

from ct2rep import checkpoint as ckpt_io
from ct2rep.cli import main as cli_main
from ct2rep.config import RunConfig, apply_overrides, parse_override
from ct2rep.synthdata import synth_dataset
from ct2rep.tensor import ContractError
from ct2rep.train import ModeMismatchError, model_from_checkpoint, run_eval, run_generate, run_train
from ct2rep.volio import read_jsonl, write_jsonl

SHAPE = (12, 24, 24)


def small_cfg(**kw) -> RunConfig:
    cfg = RunConfig.desk(**{"model.volume_shape": list(SHAPE), "model.dim": 16, "model.vision_depth": 1,
                            "model.decoder_depth": 1, "max_steps": 6})
    return apply_overrides(cfg, kw) if kw else cfg


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    return synth_dataset(tmp_path_factory.mktemp("data"), 3, visits=(2, 2), seed=5, shape=SHAPE, val_fraction=0.0)


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_train(small_cfg(), data.train_manifest, "base", out), out


# -- config ----------------------------------------------------------------------------------


def test_defaults_match_published_hyperparameters():
    cfg = RunConfig()
    assert (cfg.optim.lr_visual, cfg.optim.lr_other) == (5e-5, 1e-4)
    assert (cfg.optim.beta1, cfg.optim.beta2, cfg.optim.scheduler_gamma) == (0.9, 0.99, 0.1)
    assert cfg.model.max_tokens == 300 and cfg.epochs == 20
    assert cfg.model.volume_shape == (240, 480, 480) and cfg.model.patch == (12, 24, 24)


def test_config_json_round_trip():
    cfg = small_cfg()
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_overrides():
    assert parse_override("model.dim=32") == ("model.dim", 32)
    assert parse_override("decode=beam") == ("decode", "beam")
    assert apply_overrides(RunConfig(), {"model.dim": 32}).model.dim == 32
    with pytest.raises(KeyError):
        apply_overrides(RunConfig(), {"model.width": 3})


# -- checkpoints -----------------------------------------------------------------------------


def test_checkpoint_round_trip_is_byte_exact(trained):
    res, _ = trained
    assert ckpt_io.checkpoint_roundtrip(res.checkpoint)
    ck = ckpt_io.load(res.checkpoint)
    assert ck.step == 6 and ck.optimizer_step == 6 and ck.model_kind == "base"
    assert any(k.startswith("adam.m.") for k in ck.tensors)


def test_generation_identical_after_round_trip(trained, data, tmp_path):
    res, _ = trained
    blob = ckpt_io.to_bytes(ckpt_io.load(res.checkpoint))
    (tmp_path / "again.ckpt").write_bytes(blob)
    a = run_generate(res.checkpoint, data.train_manifest, "base", tmp_path / "a.jsonl")
    b = run_generate(tmp_path / "again.ckpt", data.train_manifest, "base", tmp_path / "b.jsonl")
    assert a == b
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_version_mismatch_names_both_versions(trained, tmp_path):
    res, _ = trained
    blob = bytearray(res.checkpoint.read_bytes())
    struct.pack_into("<I", blob, 8, 7)
    bad = tmp_path / "v7.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(ckpt_io.CheckpointVersionError, match=r"version 7.*version 1"):
        ckpt_io.load(bad)


def test_corrupted_header_fails_before_loading(trained, tmp_path):
    res, _ = trained
    blob = bytearray(res.checkpoint.read_bytes())
    blob[24:40] = b"#" * 16
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.load(bad)


def test_truncated_payload_rejected(trained, tmp_path):
    res, _ = trained
    bad = tmp_path / "short.ckpt"
    bad.write_bytes(res.checkpoint.read_bytes()[:-16])
    with pytest.raises(ckpt_io.CheckpointError, match="truncated"):
        ckpt_io.load(bad)


def test_restore_rejects_other_model_kind(trained):
    from ct2rep.longitudinal import CT2RepLong

    ck = ckpt_io.load(trained[0].checkpoint)
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.restore(ck, CT2RepLong(ck.config.model, len(ck.vocab)))


# -- training --------------------------------------------------------------------------------


def _log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_loss_log_written(trained):
    _, out = trained
    rows = _log(out / "loss.csv")
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert all(np.isfinite(float(r["loss"])) for r in rows)


def test_identical_runs_are_byte_identical(data, trained, tmp_path):
    res, out = trained
    again = run_train(small_cfg(), data.train_manifest, "base", tmp_path)
    assert again.checkpoint.read_bytes() == res.checkpoint.read_bytes()
    assert (tmp_path / "loss.csv").read_bytes() == (out / "loss.csv").read_bytes()


def test_resume_continues_bit_identically(data, tmp_path):
    full = run_train(small_cfg(max_steps=10), data.train_manifest, "base", tmp_path / "full")
    run_train(small_cfg(max_steps=10), data.train_manifest, "base", tmp_path / "part", until=4)
    resumed = run_train(small_cfg(max_steps=10), data.train_manifest, "base", tmp_path / "part",
                        resume=tmp_path / "part" / "checkpoint.ckpt")
    assert resumed.losses == full.losses[4:]
    assert (tmp_path / "part" / "loss.csv").read_bytes() == (tmp_path / "full" / "loss.csv").read_bytes()
    assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()


def test_periodic_checkpoints(data, tmp_path):
    run_train(small_cfg(max_steps=4, checkpoint_every=2), data.train_manifest, "base", tmp_path)
    assert sorted(p.name for p in tmp_path.glob("step_*.ckpt")) == ["step_000002.ckpt", "step_000004.ckpt"]


def test_long_mode_trains_on_pairs(data, tmp_path):
    res = run_train(small_cfg(max_steps=3), data.train_pairs, "long", tmp_path)
    assert ckpt_io.load(res.checkpoint).model_kind == "long"
    rows = run_generate(res.checkpoint, data.train_pairs, "long", tmp_path / "gen.jsonl")
    assert len(rows) == 3


def test_long_mode_needs_pairs(tmp_path):
    ds = synth_dataset(tmp_path, 2, visits=(1, 1), seed=0, shape=SHAPE)
    with pytest.raises(ContractError, match="empty"):
        run_train(small_cfg(), ds.train_pairs, "long", tmp_path / "run")


def test_resume_with_wrong_mode_fails_fast(trained, data, tmp_path):
    with pytest.raises(ModeMismatchError):
        run_train(small_cfg(), data.train_pairs, "long", tmp_path, resume=trained[0].checkpoint)


# -- generation and evaluation ---------------------------------------------------------------


def test_generated_reports_bounded_and_deterministic(trained, data, tmp_path):
    res, _ = trained
    a = run_generate(res.checkpoint, data.train_manifest, "base", tmp_path / "a.jsonl")
    b = run_generate(res.checkpoint, data.train_manifest, "base", tmp_path / "b.jsonl")
    assert a == b
    assert [r["id"] for r in a] == [r["id"] for r in read_jsonl(data.train_manifest)]
    assert all(len(r["report"].split()) <= 300 for r in a)


def test_empty_manifest_gives_empty_output(trained, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run_generate(trained[0].checkpoint, empty, "base", tmp_path / "out.jsonl") == []
    assert (tmp_path / "out.jsonl").read_text() == ""


def test_generate_mode_mismatch(trained, data, tmp_path):
    with pytest.raises(ModeMismatchError):
        run_generate(trained[0].checkpoint, data.train_pairs, "long", tmp_path / "x.jsonl")


def test_eval_identical_reports(data, tmp_path):
    rows = [{"id": r["id"], "report": r["findings"]} for r in read_jsonl(data.train_manifest)]
    write_jsonl(tmp_path / "pred.jsonl", rows)
    rep = run_eval(tmp_path / "pred.jsonl", data.train_manifest, tmp_path / "m.json")
    assert rep["bleu1"] == rep["rouge_l"] == 1.0
    assert rep["f1"] == 1.0
    assert [r["label"] for r in rep["per_label"]][:2] == ["medical material", "arterial wall calcification"]
    assert json.loads((tmp_path / "m.json").read_text())["bleu4"] == 1.0


def test_eval_lists_missing_ids(data, tmp_path):
    write_jsonl(tmp_path / "pred.jsonl", [{"id": "nobody", "report": "x"}])
    with pytest.raises(ContractError, match="nobody"):
        run_eval(tmp_path / "pred.jsonl", data.train_manifest)


def test_model_from_checkpoint_restores_weights(trained):
    ck = ckpt_io.load(trained[0].checkpoint)
    m = model_from_checkpoint(ck)
    for name, p in m.named_parameters():
        np.testing.assert_array_equal(p.data, ck.tensors[name])


# -- command line ----------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    d = tmp_path / "d"
    assert cli_main(["synth", "--out", str(d), "--patients", "2", "--min-visits", "2", "--max-visits", "2",
                     "--shape", *map(str, SHAPE), "--seed", "1"]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(small_cfg().to_json())
    run = tmp_path / "run"
    assert cli_main(["train", str(d / "train.jsonl"), "--config", str(cfg), "--set", "max_steps=2",
                     "--seed", "3", "--out", str(run)]) == 0
    ck = ckpt_io.load(run / "checkpoint.ckpt")
    assert ck.config.seed == 3 and ck.config.max_steps == 2
    assert cli_main(["generate", str(run / "checkpoint.ckpt"), str(d / "train.jsonl"), "--out",
                     str(tmp_path / "p.jsonl")]) == 0
    assert cli_main(["eval", str(tmp_path / "p.jsonl"), str(d / "train.jsonl"), "--out", str(tmp_path / "m.json")]) == 0
    assert cli_main(["inspect-checkpoint", str(run / "checkpoint.ckpt"), "--verify"]) == 0
    assert '"roundtrip_ok": true' in capsys.readouterr().out
    assert cli_main(["generate", str(run / "checkpoint.ckpt"), str(d / "train_pairs.jsonl"), "--mode", "long",
                     "--out", str(tmp_path / "q.jsonl")]) == 2
