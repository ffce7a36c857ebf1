"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .metrics import corpus_bleu
from .synthdata import synth_dataset
from .tensor import no_grad
from .train import Trainer, generate_reports, load_samples, sample_loss
from .volio import read_jsonl, write_jsonl


@dataclass
class MemorizationResult:
    mode: str
    steps: int
    bleu1: float
    final_loss: float
    history: list = field(default_factory=list)  # (step, mean recent loss, bleu1)
    predictions: list = field(default_factory=list)


def memorization_data(out_dir, n: int, seed: int = 0, shape=(24, 48, 48)) -> tuple:
    """``n`` patients with two visits each: a manifest of their first ``n`` volumes and ``n`` pairs."""
    out = Path(out_dir)
    ds = synth_dataset(out, n, visits=(2, 2), seed=seed, shape=shape, val_fraction=0.0)
    rows = read_jsonl(ds.train_manifest)[:n]
    subset = out / "memorize.jsonl"
    write_jsonl(subset, rows)
    return subset, ds.train_pairs


def training_set_loss(model, samples) -> float:
    with no_grad():
        return float(np.mean([sample_loss(model, s).item() for s in samples]))


def corpus_bleu1(model, samples, vocab) -> tuple:
    preds = generate_reports(model, samples, vocab)
    return corpus_bleu([p["report"] for p in preds], [s.report for s in samples], 1), preds


def memorization_run(out_dir, cfg: RunConfig, mode: str = "base", n: int = 8, max_steps: int = 2000,
                     eval_every: int = 200, target: float = 0.9, data_seed: int = 0,
                     progress=None) -> MemorizationResult:
    """Overfit ``n`` samples, checking corpus BLEU-1 every ``eval_every`` steps.

    Training stops once BLEU-1 reaches ``target`` or after ``max_steps``.
    """
    manifest, pairs = memorization_data(Path(out_dir) / "data", n, data_seed, tuple(cfg.model.volume_shape))
    samples, vocab = load_samples(cfg, pairs if mode == "long" else manifest, mode)
    cfg = RunConfig.from_dict({**cfg.to_dict(), "max_steps": max_steps})
    trainer = Trainer(cfg, samples, vocab, mode)
    recent, history, state = [], [], {"bleu1": 0.0, "preds": []}

    def check(tr, loss):
        recent.append(loss)
        if tr.step % eval_every and tr.step < max_steps:
            return False
        b1, preds = corpus_bleu1(tr.model, samples, vocab)
        state.update(bleu1=b1, preds=preds)
        mean_loss = float(np.mean(recent[-len(samples):]))
        history.append((tr.step, mean_loss, b1))
        if progress is not None:
            progress(tr.step, mean_loss, b1)
        return b1 >= target

    trainer.run(None, callback=check)
    return MemorizationResult(mode, trainer.step, state["bleu1"], training_set_loss(trainer.model, samples),
                              history, state["preds"])


@dataclass
class SignalResult:
    loss_with_priors: float
    loss_zero_priors: float
    n_pairs: int
    steps: int

    @property
    def prior_helps(self) -> bool:
        return self.loss_with_priors < self.loss_zero_priors


def longitudinal_signal_run(out_dir, cfg: RunConfig, n_patients: int = 6, steps: int = 600,
                            persistence: float = 0.8, data_seed: int = 0) -> SignalResult:
    """Same seed, same pairs, same steps: real priors versus zero volume + empty prior report.

    The score is the mean teacher-forced loss over the whole pair set after training.
    """
    ds = synth_dataset(Path(out_dir) / "data", n_patients, visits=(2, 3), seed=data_seed,
                       shape=tuple(cfg.model.volume_shape), persistence=persistence, val_fraction=0.0)
    cfg = RunConfig.from_dict({**cfg.to_dict(), "max_steps": steps})
    real, vocab = load_samples(cfg, ds.train_pairs, "long", prior="real")
    zero, _ = load_samples(cfg, ds.train_pairs, "long", vocab=vocab, prior="zero")
    losses = []
    for samples in (real, zero):
        trainer = Trainer(cfg, samples, vocab, "long")
        trainer.run(None)
        losses.append(training_set_loss(trainer.model, samples))
    return SignalResult(losses[0], losses[1], len(real), steps)
