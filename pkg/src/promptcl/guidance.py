"""Frozen image/text encoders and cosine scoring for prompt routing.

The encoders play the role of an off-the-shelf dual-encoder: fixed random
parameters, never trained, emitting unit-norm vectors in a shared guidance
space. Image side: linear map, tanh, L2-normalize. Text side: mean of a
fixed token embedding table, L2-normalize (bag of embeddings, so token
order does not matter).
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
import torch

from .errors import InputError, ShapeError

_EPS = 1e-12


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(_EPS)


class GuidanceEncoders:
    """Pair of frozen encoders mapping raw inputs into the guidance space."""

    def __init__(self, d_img: int, d_g: int, vocab_size: int = 256, seed: int = 1234):
        self.d_img = d_img
        self.d_g = d_g
        self.vocab_size = vocab_size
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.image_weight = torch.randn(d_g, d_img, generator=gen, dtype=torch.float64)
        self.image_weight /= d_img ** 0.5
        self.token_table = torch.randn(vocab_size, d_g, generator=gen, dtype=torch.float64)
        self.image_weight.requires_grad_(False)
        self.token_table.requires_grad_(False)

    def encode_image(self, image) -> torch.Tensor:
        """Unit-norm guidance vector for one raw image feature vector."""
        return self.encode_images(torch.as_tensor(image, dtype=torch.float64).reshape(1, -1))[0]

    def encode_images(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float64)
        if x.ndim != 2 or x.shape[1] != self.d_img:
            raise ShapeError(f"expected images of shape (N, {self.d_img}), got {tuple(x.shape)}")
        return l2_normalize(torch.tanh(x @ self.image_weight.T))

    def encode_text(self, tokens: Sequence[int]) -> torch.Tensor:
        """Unit-norm guidance vector for a token sequence (order-insensitive)."""
        if len(tokens) == 0:
            raise InputError("cannot encode an empty token sequence")
        ids = torch.as_tensor(list(tokens), dtype=torch.long)
        if int(ids.max()) >= self.vocab_size or int(ids.min()) < 0:
            raise InputError("token id outside encoder vocabulary")
        return l2_normalize(self.token_table[ids].mean(dim=0))

    def state(self) -> dict:
        return {
            "seed": self.seed,
            "d_img": self.d_img,
            "d_g": self.d_g,
            "vocab_size": self.vocab_size,
            "image_weight": self.image_weight,
            "token_table": self.token_table,
        }

    @classmethod
    def from_state(cls, state: dict) -> "GuidanceEncoders":
        enc = cls(state["d_img"], state["d_g"], state["vocab_size"], state["seed"])
        enc.image_weight = state["image_weight"].detach().clone()
        enc.token_table = state["token_table"].detach().clone()
        return enc


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    return float((a * b).sum() / (a.norm() * b.norm()).clamp_min(_EPS))


def score(prototype, x_v, x_instruct) -> tuple[float, float]:
    """Dual-modality guidance scores (alpha from image, beta from text)."""
    return cosine(prototype, x_v), cosine(prototype, x_instruct)
