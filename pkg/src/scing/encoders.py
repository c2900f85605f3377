"""Small dual encoder: a patch-transformer image tower and a prompt-driven text tower."""

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ShapeError


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, c = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(c // self.heads)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.out(out.transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln_1(x), mask)
        return x + self.mlp(self.ln_2(x))


class ImageEncoder(nn.Module):
    """Patch-transformer image tower.

    ``forward`` takes a ``(B, 3, H, W)`` batch and returns ``(V, g)`` where ``V``
    is the layer-normed class-token state (dimension ``width``) and ``g`` the
    projected, L2-normalised descriptor used for retrieval.

    The learnable logit scale (``log(1/tau)``) lives here, as in CLIP.
    """

    def __init__(
        self,
        image_size=(64, 32),
        patch_size: int = 8,
        width: int = 64,
        depth: int = 2,
        heads: int = 4,
        embed_dim: int = 32,
        init_temperature: float = 0.07,
    ):
        super().__init__()
        h, w = image_size
        if h % patch_size or w % patch_size:
            raise ShapeError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = (h, w)
        self.patch_size = patch_size
        self.width = width
        self.embed_dim = embed_dim
        n_patches = (h // patch_size) * (w // patch_size)

        self.patch_embed = nn.Conv2d(3, width, kernel_size=patch_size, stride=patch_size, bias=False)
        self.cls_token = nn.Parameter(torch.randn(width) * width**-0.5)
        self.pos_embed = nn.Parameter(torch.randn(n_patches + 1, width) * 0.02)
        self.ln_pre = nn.LayerNorm(width)
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(depth))
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Parameter(torch.randn(width, embed_dim) * width**-0.5)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / init_temperature)))

    @property
    def feature_dim(self) -> int:
        return self.width

    def check_images(self, images: torch.Tensor) -> None:
        expected = (3, *self.image_size)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape (B, {expected}), got {tuple(images.shape)}")

    def forward(self, images: torch.Tensor):
        self.check_images(images)
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        x = self.ln_pre(x)
        for block in self.blocks:
            x = block(x)
        feat = self.ln_post(x[:, 0])
        g = F.normalize(feat @ self.proj, dim=-1)
        return feat, g

    def encode_image(self, image):
        """Encode one ``H x W x 3`` image with values in [0, 1]; returns ``(V, g)``."""
        t = torch.as_tensor(np.asarray(image), dtype=self.proj.dtype)
        expected = (*self.image_size, 3)
        if tuple(t.shape) != expected:
            raise ShapeError(f"expected image of shape {expected}, got {tuple(t.shape)}")
        v, g = self(t.permute(2, 0, 1).unsqueeze(0))
        return v[0], g[0]


class TextEncoder(nn.Module):
    """Causal transformer over token embeddings with final-position readout.

    The token table is only used to look up template words; learnable prompt
    vectors enter :meth:`forward` directly as embeddings.
    """

    def __init__(
        self,
        vocab_size: int,
        context_length: int,
        embed_dim: int = 32,
        depth: int = 2,
        heads: int = 4,
    ):
        super().__init__()
        self.context_length = context_length
        self.embed_dim = embed_dim
        self.token_embedding = nn.Embedding(vocab_size, embed_dim)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.randn(context_length, embed_dim) * 0.01)
        self.blocks = nn.ModuleList(Block(embed_dim, heads) for _ in range(depth))
        self.ln_final = nn.LayerNorm(embed_dim)
        self.proj = nn.Parameter(torch.randn(embed_dim, embed_dim) * embed_dim**-0.5)
        self.register_buffer(
            "causal_mask",
            torch.ones(context_length, context_length, dtype=torch.bool).triu(1),
            persistent=False,
        )

    def embed_tokens(self, token_ids) -> torch.Tensor:
        return self.token_embedding(torch.as_tensor(token_ids, dtype=torch.long))

    def forward(self, sequences: torch.Tensor) -> torch.Tensor:
        """Map ``(B, T, d)`` token embeddings to ``(B, d)`` unit-norm text features."""
        if sequences.ndim != 3 or sequences.shape[1:] != (self.context_length, self.embed_dim):
            raise ShapeError(
                f"expected sequences of shape (B, {self.context_length}, {self.embed_dim}), "
                f"got {tuple(sequences.shape)}"
            )
        if not torch.isfinite(sequences).all():
            raise NumericError("text sequence contains non-finite entries")
        x = sequences + self.pos_embed
        for block in self.blocks:
            x = block(x, self.causal_mask)
        x = self.ln_final(x[:, -1])
        return F.normalize(x @ self.proj, dim=-1)

    def encode_text(self, sequence) -> torch.Tensor:
        seq = torch.as_tensor(sequence, dtype=self.proj.dtype)
        if seq.ndim != 2:
            raise ShapeError(f"expected a (T, d) sequence, got {tuple(seq.shape)}")
        return self(seq.unsqueeze(0))[0]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
