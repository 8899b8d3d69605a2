"""Small multimodal causal transformer.

The image is split into non-overlapping patches, each linearly projected into
the token embedding space and prepended to the text embeddings, so every text
position can attend to the whole image under the causal mask. The backbone is
an ordinary pre-LN decoder; swap in a larger pretrained model by matching
encode_multimodal / last_hidden / generate.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from langrasp.vocab import EOS_ID


@dataclass
class BackboneConfig:
    hidden_dim: int = 256
    layers: int = 4
    heads: int = 4
    vision_patch: int = 16
    vision_tokens: int = 36
    adapter_rank: int = 64
    adapter_alpha: int = 64
    max_seq: int = 128

    def __post_init__(self) -> None:
        if self.hidden_dim % self.heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} must divide by heads {self.heads}"
            )
        if self.adapter_rank > self.hidden_dim:
            raise ValueError(
                f"adapter_rank {self.adapter_rank} must be <= hidden_dim {self.hidden_dim}"
            )
        side = int(round(math.sqrt(self.vision_tokens)))
        if side * side != self.vision_tokens:
            raise ValueError(f"vision_tokens {self.vision_tokens} must be a square")
        if min(self.hidden_dim, self.layers, self.heads, self.vision_patch,
               self.adapter_rank, self.max_seq) <= 0:
            raise ValueError("all config counts must be positive")
        if self.vision_tokens >= self.max_seq:
            raise ValueError("max_seq must exceed vision_tokens")

    @property
    def image_size(self) -> int:
        return self.vision_patch * int(round(math.sqrt(self.vision_tokens)))


class TransformerBlock(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(hidden)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.attn_out = nn.Linear(hidden, hidden)
        self.ln2 = nn.LayerNorm(hidden)
        self.fc1 = nn.Linear(hidden, 4 * hidden)
        self.fc2 = nn.Linear(4 * hidden, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, length, hidden = x.shape
        head_dim = hidden // self.heads
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.view(b, length, self.heads, head_dim).transpose(1, 2)
        k = k.view(b, length, self.heads, head_dim).transpose(1, 2)
        v = v.view(b, length, self.heads, head_dim).transpose(1, 2)
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        att = att.transpose(1, 2).reshape(b, length, hidden)
        x = x + self.attn_out(att)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class MultimodalBackbone(nn.Module):
    """Causal LM over [vision patches] + [text tokens]."""

    def __init__(self, config: BackboneConfig, vocab_size: int):
        super().__init__()
        if vocab_size <= 0:
            raise ValueError(f"vocab_size must be > 0, got {vocab_size}")
        self.config = config
        self.vocab_size = vocab_size
        self.token_embedding = nn.Embedding(vocab_size, config.hidden_dim)
        self.position_embedding = nn.Embedding(config.max_seq, config.hidden_dim)
        patch_dim = 3 * config.vision_patch * config.vision_patch
        self.vision_proj = nn.Linear(patch_dim, config.hidden_dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.hidden_dim, config.heads)
            for _ in range(config.layers)
        )
        self.ln_f = nn.LayerNorm(config.hidden_dim)
        self.lm_head = nn.Linear(config.hidden_dim, vocab_size, bias=False)

    def _patchify(self, image: torch.Tensor) -> torch.Tensor:
        p = self.config.vision_patch
        b, c, h, w = image.shape
        size = self.config.image_size
        if (h, w) != (size, size):
            raise ValueError(f"image must be {size}x{size}, got {h}x{w}")
        patches = image.unfold(2, p, p).unfold(3, p, p)
        patches = patches.permute(0, 2, 3, 1, 4, 5).reshape(b, -1, c * p * p)
        return patches

    def encode_multimodal(self, image: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """Embed image patches + text ids into one (B, T_v + S, H) sequence."""
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
            ids = ids.unsqueeze(0)
        vis = self.vision_proj(self._patchify(image))
        txt = self.token_embedding(ids)
        seq = torch.cat([vis, txt], dim=1)
        length = seq.shape[1]
        if length > self.config.max_seq:
            raise ValueError(
                f"sequence of {length} tokens exceeds max_seq {self.config.max_seq}"
            )
        positions = torch.arange(length, device=seq.device)
        seq = seq + self.position_embedding(positions)
        return seq.squeeze(0) if squeeze else seq

    def last_hidden(self, embeddings: torch.Tensor) -> torch.Tensor:
        squeeze = embeddings.dim() == 2
        x = embeddings.unsqueeze(0) if squeeze else embeddings
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        return x.squeeze(0) if squeeze else x

    def forward(self, image: torch.Tensor, ids: torch.Tensor):
        """Returns (logits, last-layer hidden states) over the full sequence."""
        hidden = self.last_hidden(self.encode_multimodal(image, ids))
        return self.lm_head(hidden), hidden

    @torch.no_grad()
    def generate(self, image: torch.Tensor, prompt_ids, max_new: int):
        """Greedy decoding; returns only the generated response ids."""
        ids = [int(i) for i in prompt_ids]
        prompt_len = len(ids)
        budget = self.config.max_seq - self.config.vision_tokens
        for _ in range(max_new):
            if len(ids) >= budget:
                break
            logits, _ = self.forward(
                image, torch.tensor(ids, dtype=torch.long, device=image.device)
            )
            next_id = int(logits[-1].argmax())
            if next_id == EOS_ID:
                break
            ids.append(next_id)
        return ids[prompt_len:]
