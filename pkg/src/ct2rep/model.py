"""CT2Rep: vision extractor -> transformer encoder -> relational-memory decoder with
memory-driven conditional layer normalisation (MCLN)."""

from __future__ import annotations

import math

import numpy as np

from .config import ModelConfig
from .layers import (
    MLP,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerBlock,
    causal_mask,
    make_rng,
    sinusoidal_positions,
)
from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    concat,
    cross_entropy,
    layer_norm,
    parameter,
    sigmoid,
    stack,
    tanh,
)
from .textproc import PAD
from .vision import PatchConfig, VisualExtractor


class TransformerEncoder(Module):
    """Bidirectional pre-norm blocks over the N CT features, with a closing LayerNorm."""

    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: int, rng):
        self.blocks = [TransformerBlock(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-2] < 1:
            raise ShapeError("transformer_encode needs at least one feature")
        for block in self.blocks:
            z = block(z)
        return self.norm(z)


class RelationalMemory(Module):
    """S x D memory matrix refreshed once per token.

    The previous matrix queries itself concatenated with the previous token
    embedding; the attended candidate goes through a residual MLP and is mixed
    into the old matrix by input/forget gates computed from the token and the
    old matrix.
    """

    def __init__(self, slots: int, dim: int, heads: int, rng, use_gates: bool = True):
        self.slots = slots
        self.dim = dim
        self.use_gates = use_gates
        self.initial = parameter(np.eye(slots, dim))
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.mlp = MLP(dim, dim, rng)
        self.input_gate_proj = Linear(dim, 2 * dim, rng)
        self.memory_gate_proj = Linear(dim, 2 * dim, rng)

    def step(self, memory: Tensor, y: Tensor) -> Tensor:
        if y.shape != (self.dim,):
            raise ShapeError(f"token embedding must have shape ({self.dim},), got {y.shape}")
        if memory.shape != (self.slots, self.dim):
            raise ShapeError(f"memory must be {(self.slots, self.dim)}, got {memory.shape}")
        kv = concat([memory, y.reshape(1, self.dim)], axis=0)  # [M_{t-1}; y_{t-1}]
        cand = memory + self.attn(memory, kv, kv)
        cand = cand + self.mlp(cand)
        if not self.use_gates:
            return tanh(cand)
        gates = self.input_gate_proj(y.reshape(1, self.dim)) + self.memory_gate_proj(tanh(memory))
        input_gate = sigmoid(gates[:, : self.dim])
        forget_gate = sigmoid(gates[:, self.dim:])
        return forget_gate * memory + input_gate * tanh(cand)

    def run(self, ys: Tensor, memory: Tensor | None = None) -> list:
        """Memory after consuming each row of ``ys`` in turn."""
        memory = self.initial if memory is None else memory
        states = []
        for i in range(ys.shape[0]):
            memory = self.step(memory, ys[i])
            states.append(memory)
        return states


class MCLN(Module):
    """Layer norm whose scale and shift receive deltas predicted from the memory readout."""

    def __init__(self, dim: int, rng, eps: float = 1e-6):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.delta_gamma = Linear(dim, dim, rng)
        self.delta_beta = Linear(dim, dim, rng)
        self.eps = eps
        self._ones = np.ones(dim)
        self._zeros = np.zeros(dim)

    def forward(self, x: Tensor, mem_state: Tensor) -> Tensor:
        if mem_state.shape[-1] != x.shape[-1]:
            raise ShapeError(f"memory readout {mem_state.shape} does not match features {x.shape}")
        xhat = layer_norm(x, self._ones, self._zeros, self.eps)
        return xhat * (self.gamma + self.delta_gamma(mem_state)) + (self.beta + self.delta_beta(mem_state))


def mcln_apply(x: Tensor, mem_state: Tensor, params: MCLN) -> Tensor:
    return params(x, mem_state)


class DecoderLayer(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng):
        self.norm_self = MCLN(dim, rng)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_cross = MCLN(dim, rng)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_mlp = MCLN(dim, rng)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def forward(self, x: Tensor, h: Tensor, mem: Tensor) -> Tensor:
        a = self.norm_self(x, mem)
        x = x + self.self_attn(a, a, a, mask=causal_mask(x.shape[0]))
        c = self.norm_cross(x, mem)
        x = x + self.cross_attn(c, h, h)
        return x + self.mlp(self.norm_mlp(x, mem))


class ReportDecoder(Module):
    def __init__(self, vocab_size: int, dim: int, depth: int, heads: int, mlp_ratio: int, max_len: int, rng):
        self.dim = dim
        self.embed = Embedding(vocab_size, dim, rng)
        self.layers = [DecoderLayer(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.final_norm = MCLN(dim, rng)
        self.head = Linear(dim, vocab_size, rng)
        self.positions = sinusoidal_positions(max_len + 1, dim)

    def embed_tokens(self, ids, start: int = 0) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if start + len(ids) > len(self.positions):
            raise ContractError(f"sequence longer than the {len(self.positions)} supported positions")
        return self.embed(ids) * math.sqrt(self.dim) + self.positions[start: start + len(ids)]

    def forward(self, x: Tensor, h: Tensor, mem: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x, h, mem)
        return self.head(self.final_norm(x, mem))


class CT2Rep(Module):
    kind = "base"

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int = 0):
        rng = make_rng(seed)
        self.cfg = cfg
        self.vocab_size = vocab_size
        d = cfg.dim
        self.visual = VisualExtractor(PatchConfig.from_model(cfg), cfg.vision_depth, cfg.vision_heads,
                                      cfg.mlp_ratio, rng)
        self.encoder = TransformerEncoder(d, cfg.encoder_depth, cfg.encoder_heads, cfg.mlp_ratio, rng)
        self.memory = RelationalMemory(cfg.memory_slots, d, cfg.memory_heads, rng, cfg.use_gates)
        self.mem_reduce = Linear(cfg.memory_slots * d, d, rng)
        self.decoder = ReportDecoder(vocab_size, d, cfg.decoder_depth, cfg.decoder_heads, cfg.mlp_ratio,
                                     cfg.max_tokens, rng)

    # -- pieces --------------------------------------------------------------------------
    def param_groups(self) -> dict:
        visual = self.visual.parameters()
        seen = {id(p) for p in visual}
        return {"visual": visual, "other": [p for p in self.parameters() if id(p) not in seen]}

    def encode(self, volume) -> Tensor:
        """h_1..h_N for a single volume: ``(N, D)``."""
        z = self.visual.encode_volume(volume)
        if z.shape[0] != 1:
            raise ShapeError("the report model processes one volume at a time")
        return self.encoder(z[0])

    def readout(self, states: list) -> Tensor:
        """Row-flattened memory matrices -> (L, D) readouts for MCLN."""
        flat = stack([m.reshape(self.cfg.memory_slots * self.cfg.dim) for m in states], axis=0)
        return self.mem_reduce(flat)

    def condition(self, readout: Tensor, context) -> Tensor:
        """Hook for extra conditioning of the memory readout; identity for the base model."""
        return readout

    def context(self, *prior):
        return None

    # -- teacher forcing ---------------------------------------------------------------
    def logits(self, ids, h: Tensor, context=None) -> Tensor:
        """(L, V) next-token logits for every prefix of ``ids`` (which starts with BOS)."""
        x = self.decoder.embed_tokens(ids)
        states = self.memory.run(x)
        mem = self.condition(self.readout(states), context)
        return self.decoder(x, h, mem)

    def loss(self, volume, ids, context=None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) < 2:
            raise ContractError("a training target needs at least BOS and one more token")
        logits = self.logits(ids[:-1], self.encode(volume), context)
        return cross_entropy(logits, ids[1:], ignore_index=PAD)

    # -- incremental decoding ----------------------------------------------------------------
    def decode_step(self, tokens, h: Tensor, memory: list, context=None):
        """Logits for the token after ``tokens`` plus the memory list extended by one step.

        ``memory`` holds the matrices produced for ``tokens[:-1]``; the last
        token's embedding drives one more relational-memory update.
        """
        tokens = list(tokens)
        if not tokens:
            raise ContractError("decode_step needs a non-empty prefix starting with BOS")
        if len(memory) != len(tokens) - 1:
            raise ContractError(f"memory covers {len(memory)} tokens, prefix has {len(tokens)}")
        x = self.decoder.embed_tokens(tokens)
        prev = memory[-1] if memory else self.memory.initial
        memory = memory + [self.memory.step(prev, x[len(tokens) - 1])]
        mem = self.condition(self.readout(memory), context)
        logits = self.decoder(x, h, mem)
        return logits[len(tokens) - 1], memory
