"""Training loop (batch size 1, seeded per-epoch shuffles, resumable), generation and evaluation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .decoding import generate
from .longitudinal import CT2RepLong, generate_long, load_pairs
from .metrics import LABELS, evaluate
from .model import CT2Rep
from .optim import Adam, StepLR
from .tensor import ContractError
from .textproc import BOS, EOS, Vocabulary, build_vocab, decode_tokens, encode_report
from .volio import load_manifest, preprocess, read_jsonl, write_jsonl

log = logging.getLogger(__name__)

MODES = ("base", "long")


class ModeMismatchError(ContractError):
    pass


@dataclass
class Sample:
    id: str
    volume: np.ndarray
    target: list
    prior_volume: np.ndarray | None = None
    prior_ids: list | None = None
    report: str = ""


def _prep(entry, cfg: RunConfig) -> np.ndarray:
    vol, meta = entry
    vol = vol() if callable(vol) else vol
    return preprocess(vol, meta, cfg.data.spacing, cfg.model.volume_shape).data


def load_samples(cfg: RunConfig, manifest, mode: str = "base", vocab: Vocabulary | None = None,
                 prior: str = "real") -> tuple:
    """Preprocessed samples plus the vocabulary (built from their reports unless given).

    In ``long`` mode ``manifest`` is a pairs manifest. ``prior="zero"`` swaps
    every prior for a zero volume and an empty report.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if prior not in ("real", "zero"):
        raise ValueError(f"prior must be 'real' or 'zero', got {prior!r}")
    if mode == "base":
        entries = load_manifest(manifest, lazy=True)
        texts = [m.findings for _, m in entries]
    else:
        pairs = load_pairs(manifest, lazy=True)
        if not pairs:
            raise ContractError(f"pairs manifest {manifest} is empty; longitudinal training needs prior visits")
        texts = [t for p in pairs for t in (p.r_old, p.r_new)]
    if vocab is None:
        vocab = build_vocab(texts, cfg.data.vocab_min_count)
    samples = []
    if mode == "base":
        for entry in entries:
            meta = entry[1]
            samples.append(Sample(meta.volume_id, _prep(entry, cfg), encode_report(meta.findings, vocab),
                                  report=meta.findings))
    else:
        for p in pairs:
            if prior == "zero":
                x_old, r_old = np.zeros(tuple(cfg.model.volume_shape)), [BOS, EOS]
            else:
                x_old, r_old = _prep(p.old, cfg), encode_report(p.r_old, vocab)
            samples.append(Sample(p.new[1].volume_id, _prep(p.new, cfg), encode_report(p.r_new, vocab),
                                  x_old, r_old, report=p.r_new))
    too_long = [s.id for s in samples if len(s.target) > cfg.model.max_tokens + 1]
    if too_long:
        raise ContractError(f"reports exceed {cfg.model.max_tokens} tokens: {too_long[:5]}")
    return samples, vocab


def build_model(cfg: RunConfig, vocab_size: int, mode: str):
    cls = CT2RepLong if mode == "long" else CT2Rep
    return cls(cfg.model, vocab_size, cfg.seed)


def build_optimizer(model, cfg: RunConfig) -> Adam:
    o = cfg.optim
    return Adam(model.param_groups(), {"visual": o.lr_visual, "other": o.lr_other}, (o.beta1, o.beta2), o.eps)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def sample_loss(model, s: Sample):
    if model.kind == "long":
        return model.loss_long(s.volume, s.target, s.prior_volume, s.prior_ids)
    return model.loss(s.volume, s.target)


@dataclass
class TrainResult:
    model: object
    optimizer: Adam
    vocab: Vocabulary
    losses: list = field(default_factory=list)
    step: int = 0
    checkpoint: Path | None = None


class Trainer:
    def __init__(self, cfg: RunConfig, samples: list, vocab: Vocabulary, mode: str = "base"):
        if not samples:
            raise ContractError("no training samples")
        self.cfg, self.samples, self.vocab, self.mode = cfg, samples, vocab, mode
        self.model = build_model(cfg, len(vocab), mode)
        self.optimizer = build_optimizer(self.model, cfg)
        o = cfg.optim
        self.scheduler = StepLR(self.optimizer, o.scheduler_step_epochs, o.scheduler_gamma) if o.use_scheduler else None
        self.step = 0

    @property
    def total_steps(self) -> int:
        return self.cfg.max_steps or self.cfg.epochs * len(self.samples)

    def resume(self, ckpt: ckpt_io.Checkpoint):
        if ckpt.vocab != self.vocab:
            raise ContractError("checkpoint vocabulary differs from the training data vocabulary")
        ckpt_io.restore(ckpt, self.model, self.optimizer)
        self.step = ckpt.step

    def train_step(self) -> float:
        n = len(self.samples)
        epoch, pos = divmod(self.step, n)
        if self.scheduler is not None:
            self.scheduler.set_epoch(epoch)
        sample = self.samples[epoch_order(self.cfg.seed, epoch, n)[pos]]
        self.optimizer.zero_grad()
        loss = sample_loss(self.model, sample)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        return loss.item()

    def snapshot(self) -> ckpt_io.Checkpoint:
        return ckpt_io.capture(self.model, self.cfg, self.vocab, self.step, self.optimizer,
                               {"n_samples": len(self.samples)})

    def run(self, out_dir=None, until: int | None = None, callback=None) -> TrainResult:
        """Train up to step ``until`` (default: the configured total); write log and checkpoints."""
        until = self.total_steps if until is None else min(until, self.total_steps)
        out = Path(out_dir) if out_dir is not None else None
        writer = fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_path = out / "loss.csv"
            fresh = self.step == 0 or not log_path.exists()
            fh = open(log_path, "w" if fresh else "a", newline="")
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(["step", "epoch", "loss"])
        losses = []
        try:
            while self.step < until:
                loss = self.train_step()
                losses.append(loss)
                if writer is not None:
                    writer.writerow([self.step, (self.step - 1) // len(self.samples), repr(loss)])
                every = self.cfg.checkpoint_every
                if out is not None and every and self.step % every == 0:
                    ckpt_io.save(out / f"step_{self.step:06d}.ckpt", self.snapshot())
                if callback is not None and callback(self, loss):
                    break
        finally:
            if fh is not None:
                fh.close()
        path = None
        if out is not None:
            path = out / "checkpoint.ckpt"
            ckpt_io.save(path, self.snapshot())
        return TrainResult(self.model, self.optimizer, self.vocab, losses, self.step, path)


def run_train(cfg: RunConfig, manifest, mode: str = "base", out_dir=None, resume=None,
              until: int | None = None, prior: str = "real") -> TrainResult:
    """Train on a manifest (base) or pairs manifest (long); optionally resume from a checkpoint."""
    previous = ckpt_io.load(resume) if resume is not None else None
    if previous is not None and previous.model_kind != mode:
        raise ModeMismatchError(f"checkpoint is {previous.model_kind!r}, requested mode {mode!r}")
    samples, vocab = load_samples(cfg, manifest, mode, previous.vocab if previous else None, prior)
    trainer = Trainer(cfg, samples, vocab, mode)
    if previous is not None:
        trainer.resume(previous)
    log.info("training %s model: %d samples, %d parameters", mode, len(samples), trainer.model.num_parameters())
    return trainer.run(out_dir, until)


def model_from_checkpoint(ckpt: ckpt_io.Checkpoint):
    model = build_model(ckpt.config, len(ckpt.vocab), ckpt.model_kind)
    ckpt_io.restore(ckpt, model)
    return model


def generate_reports(model, samples: list, vocab: Vocabulary, decode: str = "greedy", beam_size: int = 3) -> list:
    rows = []
    for s in samples:
        if model.kind == "long":
            ids = generate_long(model, s.volume, s.prior_volume, s.prior_ids, decode, beam_size)
        else:
            ids = generate(model, s.volume, decode, beam_size)
        rows.append({"id": s.id, "report": decode_tokens(ids, vocab)})
    return rows


def run_generate(checkpoint, manifest, mode: str, out, decode: str | None = None) -> list:
    """Decode one report per manifest entry (per pair in ``long`` mode) to JSON lines ``{id, report}``."""
    ckpt = ckpt_io.load(checkpoint)
    if mode != ckpt.model_kind:
        raise ModeMismatchError(f"checkpoint holds a {ckpt.model_kind!r} model but mode {mode!r} was requested")
    cfg = ckpt.config
    rows_in = read_jsonl(manifest)
    if rows_in:
        samples, _ = load_samples(cfg, manifest, mode, ckpt.vocab)
        rows = generate_reports(model_from_checkpoint(ckpt), samples, ckpt.vocab, decode or cfg.decode, cfg.beam_size)
    else:
        rows = []
    write_jsonl(out, rows)
    return rows


def _texts_by_id(path) -> dict:
    out = {}
    for row in read_jsonl(path):
        if "new" in row:  # pairs manifest: the target is the later visit
            row = row["new"]
        key = str(row.get("id"))
        text = row.get("report", row.get("findings"))
        if text is None:
            raise ContractError(f"{path}: row {key} has neither 'report' nor 'findings'")
        out[key] = text
    return out


def run_eval(pred_file, truth_file, out=None) -> dict:
    """Corpus NLG metrics and the per-label clinical-efficacy table for id-aligned files."""
    pred, truth = _texts_by_id(pred_file), _texts_by_id(truth_file)
    missing_pred = sorted(set(truth) - set(pred))
    missing_truth = sorted(set(pred) - set(truth))
    if missing_pred or missing_truth:
        raise ContractError(f"id mismatch: missing predictions {missing_pred}, missing references {missing_truth}")
    ids = sorted(truth)
    report = evaluate([pred[i] for i in ids], [truth[i] for i in ids]).to_dict()
    report["per_label"] = [{"label": lab, **report["per_label"][lab]} for lab in LABELS]
    report["meteor_variant"] = "METEOR-lite (exact + stem matching)"
    if out is not None:
        Path(out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
