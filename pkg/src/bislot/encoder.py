"""Patch tokenizer standing in for a ViT backbone.

A single linear projection of flattened RGB patches, plus learned positional
embeddings, followed by layer norm.  Images are channel-first ``3 x S x S``
arrays; a leading batch axis is allowed everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Rng, Tensor, layer_norm, parameter

# position embeddings start on the same scale as projected patch content
POS_INIT_STD = 0.5


class ConfigError(ValueError):
    """Inconsistent model or data configuration."""


def grid_side(image_side: int, patch_size: int) -> int:
    if patch_size <= 0 or image_side % patch_size:
        raise ConfigError(f"image side {image_side} is not divisible by patch size {patch_size}")
    return image_side // patch_size


def patchify(img, patch_size: int) -> np.ndarray:
    """Rows are flattened (channel, dy, dx) blocks in row-major patch order.

    Accepts ``(3, S, S)`` or ``(B, 3, S, S)``; returns ``(N, 3 p^2)`` or ``(B, N, 3 p^2)``.
    """
    x = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    b, c, s, s2 = x.shape
    if s != s2:
        raise ConfigError(f"images must be square, got {s}x{s2}")
    g = grid_side(s, patch_size)
    p = patch_size
    out = (x.reshape(b, c, g, p, g, p)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(b, g * g, c * p * p))
    return out[0] if squeeze else out


def patch_targets(img, patch_size: int) -> np.ndarray:
    """Mean RGB of each patch, ``(N, 3)`` (or batched)."""
    x = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    b, c, s, _ = x.shape
    g = grid_side(s, patch_size)
    p = patch_size
    out = x.reshape(b, c, g, p, g, p).mean(axis=(3, 5)).reshape(b, c, g * g).transpose(0, 2, 1)
    return out[0] if squeeze else out


@dataclass
class EncoderParams:
    patch_size: int
    proj: Tensor        # (3 p^2) x D
    pos_embed: Tensor   # N x D
    ln_gamma: Tensor
    ln_beta: Tensor

    @property
    def dim(self) -> int:
        return self.proj.shape[1]

    @property
    def num_tokens(self) -> int:
        return self.pos_embed.shape[0]

    @classmethod
    def init(cls, image_side: int, patch_size: int, dim: int, rng: Rng) -> EncoderParams:
        n = grid_side(image_side, patch_size) ** 2
        fan_in = 3 * patch_size * patch_size
        return cls(
            patch_size=patch_size,
            proj=parameter(rng.normal((fan_in, dim), 1.0 / math.sqrt(fan_in))),
            pos_embed=parameter(rng.normal((n, dim), POS_INIT_STD)),
            ln_gamma=parameter(np.ones(dim)),
            ln_beta=parameter(np.zeros(dim)),
        )

    def tensors(self) -> list[Tensor]:
        return [self.proj, self.pos_embed, self.ln_gamma, self.ln_beta]


def encode(img, params: EncoderParams) -> Tensor:
    """Tokens ``layer_norm(patchify(img) @ proj + pos_embed)``, shape ``(..., N, D)``."""
    patches = Tensor(patchify(img, params.patch_size))
    if patches.shape[-2] != params.num_tokens:
        raise ConfigError(
            f"image yields {patches.shape[-2]} patches but pos_embed has {params.num_tokens} rows")
    return layer_norm(patches @ params.proj + params.pos_embed, params.ln_gamma, params.ln_beta)
