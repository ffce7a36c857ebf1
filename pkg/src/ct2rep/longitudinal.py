"""Longitudinal variant: fuse the prior visit's volume and report, and let the
relational-memory readout attend to the fused features before it drives MCLN."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .decoding import beam_search, greedy
from .layers import LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock, make_rng
from .model import CT2Rep
from .tensor import ContractError, Tensor, concat, no_grad, softmax
from .textproc import MAX_TOKENS
from .volio import IngestionError, ManifestRowError, entry_from_row, parse_study_time, read_jsonl, write_jsonl


@dataclass
class LongitudinalPair:
    """Two visits of one patient; ``old``/``new`` are ``(volume_or_loader, meta)`` entries."""

    old: tuple
    new: tuple

    @property
    def patient_id(self) -> str:
        return self.new[1].patient_id

    @property
    def times(self) -> tuple:
        return self.old[1].study_time, self.new[1].study_time

    @property
    def r_old(self) -> str:
        return self.old[1].findings

    @property
    def r_new(self) -> str:
        return self.new[1].findings


def build_pairs(entries) -> list[LongitudinalPair]:
    """Every chronologically ordered (earlier, later) pair of visits per patient.

    Visits are ordered by study time, ties by source path. Patients are emitted in
    sorted id order.
    """
    by_patient = defaultdict(list)
    for entry in entries:
        meta = entry[1]
        try:
            when = parse_study_time(meta.study_time)
        except IngestionError as exc:
            raise IngestionError(f"patient {meta.patient_id}: {exc}") from exc
        by_patient[meta.patient_id].append((when, meta.source_path, entry))
    pairs = []
    for pid in sorted(by_patient):
        visits = sorted(by_patient[pid], key=lambda v: (v[0], v[1]))
        for (_, _, old), (_, _, new) in combinations(visits, 2):
            pairs.append(LongitudinalPair(old, new))
    return pairs


def pairs_rows(pairs) -> list[dict]:
    """Pairs-manifest rows for pairs whose entries carry manifest rows in the volume slot."""
    return [{"patient_id": p.patient_id, "old": p.old[0], "new": p.new[0]} for p in pairs]


def write_pairs_manifest(path, pairs) -> None:
    write_jsonl(path, pairs_rows(pairs))


def load_pairs(path, lazy: bool = False) -> list[LongitudinalPair]:
    """Read a pairs manifest: one ``{patient_id, old, new}`` object per line."""
    path = Path(path)
    pairs = []
    for i, row in enumerate(read_jsonl(path)):
        where = f"{path.name} row {i + 1}"
        if not {"old", "new"} <= set(row):
            raise ManifestRowError(f"{where}: a pair needs 'old' and 'new'")
        old = entry_from_row(row["old"], path.parent, where + " (old)", lazy)
        new = entry_from_row(row["new"], path.parent, where + " (new)", lazy)
        if old[1].patient_id != new[1].patient_id:
            raise ManifestRowError(f"{where}: visits belong to different patients")
        if not old[1].time < new[1].time:
            raise ManifestRowError(f"{where}: prior visit is not earlier than the target visit")
        pairs.append(LongitudinalPair(old, new))
    return pairs


@dataclass
class LongitudinalFeatures:
    H_IP: Tensor  # prior-volume features
    H_RP: Tensor  # prior-report features
    R_star: np.ndarray  # (rows(H_RP), rows(H_IP)): report attending to volume
    I_star: np.ndarray  # (rows(H_IP), rows(H_RP)): volume attending to report
    H_L: Tensor  # [R* v(H_IP); I* v(H_RP)]


class PriorFusion(Module):
    """Cross-attention between the prior volume and the prior report, both directions."""

    def __init__(self, dim: int, report_depth: int, heads: int, mlp_ratio: int, rng):
        self.dim = dim
        self.report_blocks = [TransformerBlock(dim, heads, mlp_ratio, rng) for _ in range(report_depth)]
        self.report_norm = LayerNorm(dim)
        self.volume_proj = Linear(dim, dim, rng)
        self.report_proj = Linear(dim, dim, rng)
        self.q_report = Linear(dim, dim, rng)
        self.k_volume = Linear(dim, dim, rng)
        self.v_volume = Linear(dim, dim, rng)
        self.q_volume = Linear(dim, dim, rng)
        self.k_report = Linear(dim, dim, rng)
        self.v_report = Linear(dim, dim, rng)

    def encode_report(self, report_emb: Tensor) -> Tensor:
        x = report_emb
        for block in self.report_blocks:
            x = block(x)
        return self.report_norm(x)

    def forward(self, h_old_vol: Tensor, report_emb: Tensor) -> LongitudinalFeatures:
        if h_old_vol.shape[0] < 1 or report_emb.shape[0] < 1:
            raise ContractError("prior fusion needs a non-empty prior volume and prior report")
        h_ip = self.volume_proj(h_old_vol)
        h_rp = self.report_proj(self.encode_report(report_emb))
        scale = 1.0 / math.sqrt(self.dim)
        r_star = softmax((self.q_report(h_rp) @ self.k_volume(h_ip).T) * scale, axis=-1)
        i_star = softmax((self.q_volume(h_ip) @ self.k_report(h_rp).T) * scale, axis=-1)
        attended_report = r_star @ self.v_volume(h_ip)
        attended_volume = i_star @ self.v_report(h_rp)
        h_l = concat([attended_report, attended_volume], axis=0)
        return LongitudinalFeatures(h_ip, h_rp, r_star.data, i_star.data, h_l)


class CT2RepLong(CT2Rep):
    """CT2Rep plus prior fusion and a memory/longitudinal cross-attention.

    The base sub-modules are drawn from the same random stream as ``CT2Rep`` with
    the same seed, so both models share initial base weights.
    """

    kind = "long"

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int = 0):
        super().__init__(cfg, vocab_size, seed)
        rng = make_rng([seed, 1])
        d = cfg.dim
        self.fusion = PriorFusion(d, cfg.report_encoder_depth, cfg.decoder_heads, cfg.mlp_ratio, rng)
        self.mem_attn = MultiHeadAttention(d, 1, rng)

    def context(self, x_old, r_old) -> LongitudinalFeatures:
        """Fused prior features H_L from the previous volume and its token ids."""
        r_old = np.asarray(r_old, dtype=np.int64)
        if r_old.size == 0:
            raise ContractError("prior report is empty")
        h_old = self.visual.encode_volume(x_old)[0]
        return self.fusion(h_old, self.decoder.embed_tokens(r_old))

    def condition(self, readout: Tensor, context) -> Tensor:
        if context is None:
            raise ContractError("the longitudinal model needs prior features")
        h_l = context.H_L
        return readout + self.mem_attn(readout, h_l, h_l)

    def zero_longitudinal_output(self):
        """Silence the memory/longitudinal attention so the model reduces to the base decoder."""
        self.mem_attn.out.zero_()

    def loss_long(self, x_new, r_new, x_old, r_old) -> Tensor:
        return self.loss(x_new, r_new, self.context(x_old, r_old))


def decode_step_long(model: CT2RepLong, tokens, h_new: Tensor, memory: list, features: LongitudinalFeatures):
    return model.decode_step(tokens, h_new, memory, features)


def generate_long(model: CT2RepLong, x_new, x_old, r_old, mode: str = "greedy", beam_size: int = 3,
                  max_tokens: int | None = None) -> list[int]:
    cap = min(max_tokens or model.cfg.max_tokens, MAX_TOKENS)
    with no_grad():
        features = model.context(x_old, r_old)
        h = model.encode(x_new)
        if mode == "greedy":
            return greedy(model, h, features, cap)
        if mode == "beam":
            return beam_search(model, h, beam_size, features, cap)
    raise ValueError(f"unknown decode mode {mode!r}")
