"""Adapters exposing a ``transformers`` CLIP model through the encoder contract.

Only imported when a CLIP-backed model is requested.
"""
from __future__ import annotations

import torch
import torch.nn as nn
from transformers import CLIPConfig, CLIPModel

from .models import PixelNorm


def load_clip(name_or_path: str, config: CLIPConfig | None = None):
    if config is not None:
        return CLIPModel(config).eval(), None
    from transformers import CLIPTokenizer

    return CLIPModel.from_pretrained(name_or_path).eval(), CLIPTokenizer.from_pretrained(name_or_path)


class ClipImageEncoder(nn.Module):
    """CLIP vision tower + projection; accepts any H x W via position interpolation."""

    def __init__(self, clip: CLIPModel):
        super().__init__()
        self.norm = PixelNorm()
        self.vision = clip.vision_model
        self.visual_projection = clip.visual_projection
        self.feature_dim = clip.config.projection_dim

    def forward(self, x):
        out = self.vision(pixel_values=self.norm(x), interpolate_pos_encoding=True)
        return self.visual_projection(out.pooler_output)


class ClipTextEncoder(nn.Module):
    """Runs pre-embedded token sequences through the CLIP text transformer.

    Sequences are wrapped in start/end-of-text embeddings and pooled at the
    end-of-text position, matching how CLIP pools tokenized captions.
    """

    def __init__(self, clip: CLIPModel, tokenizer=None):
        super().__init__()
        tm = clip.text_model
        self.embeddings = tm.embeddings
        self.encoder = tm.encoder
        self.final_layer_norm = tm.final_layer_norm
        self.text_projection = clip.text_projection
        self.tokenizer = tokenizer
        cfg = clip.config.text_config
        self.bos_id, self.eos_id = cfg.bos_token_id, cfg.eos_token_id
        self.vocab_size = cfg.vocab_size
        self.token_dim = cfg.hidden_size
        self.feature_dim = clip.config.projection_dim

    def _ids(self, words: list[str]) -> list[int]:
        if self.tokenizer is not None:
            return self.tokenizer(" ".join(words), add_special_tokens=False)["input_ids"] if words else []
        # no tokenizer: deterministic ids, enough for randomly initialised models
        return [sum(map(ord, w.lower())) % (self.vocab_size - 2) + 1 for w in words]

    def embed_words(self, words: list[str]) -> torch.Tensor:
        ids = torch.tensor(self._ids(words), dtype=torch.long)
        with torch.no_grad():
            return self.embeddings.token_embedding(ids)

    def forward(self, token_embeds: torch.Tensor) -> torch.Tensor:
        n = token_embeds.shape[0]
        tok = self.embeddings.token_embedding
        bos = tok(torch.full((n, 1), self.bos_id, dtype=torch.long))
        eos = tok(torch.full((n, 1), self.eos_id, dtype=torch.long))
        seq = torch.cat([bos, token_embeds, eos], dim=1)
        hidden = self.embeddings(inputs_embeds=seq)
        L = seq.shape[1]
        causal = torch.full((L, L), float("-inf")).triu(1)
        hidden = self.encoder(inputs_embeds=hidden, attention_mask=causal[None, None].expand(n, 1, L, L))
        hidden = hidden.last_hidden_state if hasattr(hidden, "last_hidden_state") else hidden[0]
        hidden = self.final_layer_norm(hidden)
        return self.text_projection(hidden[:, -1])


def tiny_clip_config(projection_dim: int = 16) -> CLIPConfig:
    """A few-parameter CLIP for tests and smoke runs."""
    return CLIPConfig(
        text_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=1,
                         num_attention_heads=2, vocab_size=1000, max_position_embeddings=32,
                         bos_token_id=998, eos_token_id=999, pad_token_id=0),
        vision_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=1,
                           num_attention_heads=2, image_size=32, patch_size=8),
        projection_dim=projection_dim,
    )


__all__ = ["ClipImageEncoder", "ClipTextEncoder", "load_clip", "tiny_clip_config"]
