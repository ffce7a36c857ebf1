"""3D vision feature extractor: patch embedding followed by alternating spatial and causal
(temporal) transformer blocks that keep the (T, H/p1, W/p2) token grid intact."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Linear, Module, TransformerBlock, causal_mask
from .tensor import ShapeError, Tensor, as_tensor, parameter


@dataclass(frozen=True)
class PatchConfig:
    volume_shape: tuple  # (depth, H, W)
    p_t: int
    p_1: int
    p_2: int
    dim: int

    def __post_init__(self):
        grid_shape(self.volume_shape, (self.p_t, self.p_1, self.p_2))
        if self.dim <= 0:
            raise ShapeError(f"embedding dim must be positive, got {self.dim}")

    @classmethod
    def from_model(cls, cfg) -> "PatchConfig":
        return cls(tuple(cfg.volume_shape), *cfg.patch, cfg.dim)

    @property
    def grid(self) -> tuple:
        return grid_shape(self.volume_shape, (self.p_t, self.p_1, self.p_2))

    @property
    def T(self) -> int:
        return self.grid[0]

    @property
    def n_tokens(self) -> int:
        t, h, w = self.grid
        return t * h * w

    @property
    def patch_size(self) -> int:
        return self.p_t * self.p_1 * self.p_2

    @property
    def token_shape(self) -> tuple:
        """Shape of the embedded CT token tensor for one volume."""
        return (*self.grid, self.dim)


def grid_shape(volume_shape, patch) -> tuple:
    """(T, H/p_1, W/p_2) for a volume, or ShapeError if a patch does not tile it."""
    if len(volume_shape) != 3 or len(patch) != 3:
        raise ShapeError(f"need 3-d volume and patch sizes, got {volume_shape} / {patch}")
    if min(patch) <= 0 or min(volume_shape) <= 0:
        raise ShapeError(f"sizes must be positive: volume {volume_shape}, patch {patch}")
    bad = [(n, p) for n, p in zip(volume_shape, patch) if n % p]
    if bad:
        raise ShapeError(f"volume {tuple(volume_shape)} is not divisible by patch {tuple(patch)}")
    return tuple(n // p for n, p in zip(volume_shape, patch))


class VisualExtractor(Module):
    """Volume ``(B, depth, H, W)`` -> embedded tokens ``(B, T, H/p_1, W/p_2, D)``."""

    def __init__(self, cfg: PatchConfig, depth: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.cfg = cfg
        t, h, w = cfg.grid
        self.proj = Linear(cfg.patch_size, cfg.dim, rng)
        self.temporal_pos = parameter(rng.normal(0.0, 0.02, size=(t, cfg.dim)))
        self.spatial_pos = parameter(rng.normal(0.0, 0.02, size=(h * w, cfg.dim)))
        self.spatial_blocks = [TransformerBlock(cfg.dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.causal_blocks = [TransformerBlock(cfg.dim, heads, mlp_ratio, rng) for _ in range(depth)]

    def _as_batch(self, volume) -> Tensor:
        x = volume if isinstance(volume, Tensor) else as_tensor(getattr(volume, "data", volume))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.cfg.volume_shape):
            raise ShapeError(f"expected volume {tuple(self.cfg.volume_shape)}, got {x.shape}")
        return x

    def patch_embed(self, volume) -> Tensor:
        x = self._as_batch(volume)
        c = self.cfg
        b = x.shape[0]
        t, h, w = c.grid
        patches = (x.reshape(b, t, c.p_t, h, c.p_1, w, c.p_2)
                   .transpose(0, 1, 3, 5, 2, 4, 6)
                   .reshape(b, t, h, w, c.patch_size))
        z = self.proj(patches)
        z = z + self.temporal_pos.reshape(t, 1, 1, c.dim)
        return z + self.spatial_pos.reshape(1, h, w, c.dim)

    def spatial_block(self, z: Tensor, index: int = 0) -> Tensor:
        """Bidirectional attention over the H/p_1*W/p_2 positions of each temporal slice."""
        b, t, h, w, d = z.shape
        out = self.spatial_blocks[index](z.reshape(b * t, h * w, d))
        return out.reshape(b, t, h, w, d)

    def causal_block(self, z: Tensor, index: int = 0) -> Tensor:
        """Masked attention over the T temporal positions of each spatial location."""
        b, t, h, w, d = z.shape
        seq = z.transpose(0, 2, 3, 1, 4).reshape(b * h * w, t, d)
        out = self.causal_blocks[index](seq, mask=causal_mask(t))
        return out.reshape(b, h, w, t, d).transpose(0, 3, 1, 2, 4)

    def forward(self, volume) -> Tensor:
        z = self.patch_embed(volume)
        for i in range(len(self.spatial_blocks)):
            z = self.spatial_block(z, i)
            z = self.causal_block(z, i)
        return z

    def encode_volume(self, volume) -> Tensor:
        """Tokens flattened row-major over (T, h, w): ``(B, N, D)``."""
        z = self.forward(volume)
        b, t, h, w, d = z.shape
        return z.reshape(b, t * h * w, d)
