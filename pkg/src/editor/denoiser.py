"""
Small conditional noise predictor eps(z_t, t, I, C_T).

The noisy image and the conditioning image are concatenated channelwise;
timestep and pooled text embeddings are added to every block. The output
convolution starts at zero so an untrained model predicts zero noise.
"""

import math
from typing import Dict, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from config.settings import DiffusionDefaults
from src.utils.exceptions import InvalidArgumentError

PAD_TOKEN = -1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (B,) integer timesteps into (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def encode_text(conditions: Sequence[Sequence[int]], device=None) -> torch.Tensor:
    """Pad index sequences with ``PAD_TOKEN`` into a (B, L) tensor."""
    if not conditions:
        raise InvalidArgumentError("no text conditions given")
    length = max(len(c) for c in conditions)
    if length == 0:
        raise InvalidArgumentError("text condition must hold at least one index")
    out = torch.full((len(conditions), length), PAD_TOKEN, dtype=torch.long, device=device)
    for i, tokens in enumerate(conditions):
        out[i, : len(tokens)] = torch.as_tensor(list(tokens), dtype=torch.long)
    return out


class ResidualBlock(nn.Module):
    def __init__(self, width: int, embed_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.embed = nn.Linear(embed_dim, width)
        self.norm2 = nn.GroupNorm(8, width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.embed(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class DenoiserNet(nn.Module):
    def __init__(
        self,
        base_width: int = DiffusionDefaults.BASE_WIDTH,
        blocks: int = DiffusionDefaults.BLOCKS,
        time_embed_dim: int = DiffusionDefaults.TIME_EMBED_DIM,
        text_embed_dim: int = DiffusionDefaults.TEXT_EMBED_DIM,
        vocab_size: int = DiffusionDefaults.VOCAB_SIZE,
    ):
        super().__init__()
        self.hparams = {
            "base_width": base_width,
            "blocks": blocks,
            "time_embed_dim": time_embed_dim,
            "text_embed_dim": text_embed_dim,
            "vocab_size": vocab_size,
        }
        self.time_embed_dim = time_embed_dim
        self.vocab_size = vocab_size
        embed_dim = time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(time_embed_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim)
        )
        self.text_table = nn.Embedding(vocab_size, text_embed_dim)
        self.text_proj = nn.Linear(text_embed_dim, embed_dim)

        self.conv_in = nn.Conv2d(6, base_width, 3, padding=1)
        self.blocks = nn.ModuleList([ResidualBlock(base_width, embed_dim) for _ in range(blocks)])
        self.norm_out = nn.GroupNorm(8, base_width)
        self.conv_out = nn.Conv2d(base_width, 3, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def config(self) -> Dict[str, int]:
        return dict(self.hparams)

    def pooled_text(self, text: torch.Tensor) -> torch.Tensor:
        """Mean of the embeddings of every non-pad index: (B, L) -> (B, text_embed_dim)."""
        if bool((text >= self.vocab_size).any()):
            raise InvalidArgumentError("text index outside the vocabulary")
        mask = (text != PAD_TOKEN).unsqueeze(-1).to(self.text_table.weight.dtype)
        emb = self.text_table(text.clamp(min=0)) * mask
        return emb.sum(dim=1) / mask.sum(dim=1).clamp(min=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, image: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        """z, image: (B, 3, H, W); t: (B,) ints in [1, T]; text: (B, L) indices."""
        t = torch.as_tensor(t, device=z.device)
        if t.dim() == 0:
            t = t.expand(z.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.time_embed_dim).to(z.dtype))
        emb = emb + self.text_proj(self.pooled_text(text))

        h = self.conv_in(torch.cat([z, image], dim=1))
        for block in self.blocks:
            h = block(h, emb)
        return self.conv_out(F.silu(self.norm_out(h)))
