"""Dual-encoder model with a query decoder for region-level outputs.

A ViT encoder turns the image into patch tokens; a small transformer decoder
runs a fixed set of learned queries (region queries plus one image query)
against those tokens with self- and cross-attention.  Region queries feed a
shared projection into the joint embedding space and a shared two-layer box
head; the image query has its own projection.  Text goes through a causal
transformer pooled at the end token.  All embeddings are unit-norm and
compared by scaled cosine similarity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NormalizationError, ShapeError, TokenizationError

MAX_LOGIT_SCALE = 100.0


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    encoder_dim: int = 768
    encoder_layers: int = 12
    encoder_heads: int = 12
    decoder_layers: int = 6
    decoder_heads: int = 8
    n_region_queries: int = 10
    embed_dim: int = 512
    text_dim: int = 512
    text_layers: int = 12
    text_heads: int = 8
    text_context_len: int = 77
    vocab_size: int = 512
    logit_scale_init: float = math.log(1.0 / 0.07)
    dropout: float = 0.0

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def validate(self) -> "ModelConfig":
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.encoder_dim % self.encoder_heads or self.encoder_dim % self.decoder_heads:
            raise ConfigError("encoder_dim must be divisible by encoder/decoder head counts")
        if self.text_dim % self.text_heads:
            raise ConfigError("text_dim must be divisible by text_heads")
        for name in ("embed_dim", "n_region_queries", "encoder_layers", "decoder_layers", "text_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.text_context_len < 2:
            raise ConfigError("text_context_len must fit start and end tokens")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size too small")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Desk-scale preset: 32px images, 8px patches, 2-layer stacks."""
        return cls(
            image_size=32,
            patch_size=8,
            encoder_dim=64,
            encoder_layers=2,
            encoder_heads=4,
            decoder_layers=2,
            decoder_heads=4,
            n_region_queries=4,
            embed_dim=32,
            text_dim=64,
            text_layers=2,
            text_heads=4,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norms = x.norm(dim=dim, keepdim=True)
    if (norms < 1e-12).any():
        raise NormalizationError("cannot normalize a zero-norm embedding")
    return x / norms


class _FeedForward(nn.Module):
    def __init__(self, dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(4 * dim, dim),
        )

    def forward(self, x):
        return self.net(x)


class _EncoderBlock(nn.Module):
    """Pre-LN self-attention block."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = _FeedForward(dim, dropout)

    def forward(self, x, attn_mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False, attn_mask=attn_mask)[0]
        return x + self.ffn(self.ln2(x))


class _DecoderBlock(nn.Module):
    """Query self-attention then cross-attention into the encoder tokens.

    No positional encoding touches the memory here, so the block is
    permutation-invariant over token order.
    """

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ln3 = nn.LayerNorm(dim)
        self.ffn = _FeedForward(dim, dropout)

    def forward(self, queries, memory):
        h = self.ln1(queries)
        queries = queries + self.self_attn(h, h, h, need_weights=False)[0]
        h = self.ln2(queries)
        queries = queries + self.cross_attn(h, memory, memory, need_weights=False)[0]
        return queries + self.ffn(self.ln3(queries))


class VisionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.encoder_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_tokens, cfg.encoder_dim))
        self.blocks = nn.ModuleList(
            _EncoderBlock(cfg.encoder_dim, cfg.encoder_heads, cfg.dropout)
            for _ in range(cfg.encoder_layers)
        )
        self.ln_final = nn.LayerNorm(cfg.encoder_dim)

    def forward(self, images: torch.Tensor, add_pos_embed: bool = True) -> torch.Tensor:
        s = self.cfg.image_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[-2:] != (s, s):
            raise ShapeError(
                f"expected images of shape (B, 3, {s}, {s}), got {tuple(images.shape)}"
            )
        x = self.patch_embed(images).flatten(2).transpose(1, 2)  # (B, T, D)
        if add_pos_embed:
            x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.ln_final(x)


class QueryDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_region = cfg.n_region_queries
        self.query_embed = nn.Parameter(torch.zeros(cfg.n_region_queries + 1, cfg.encoder_dim))
        self.blocks = nn.ModuleList(
            _DecoderBlock(cfg.encoder_dim, cfg.decoder_heads, cfg.dropout)
            for _ in range(cfg.decoder_layers)
        )
        self.ln_final = nn.LayerNorm(cfg.encoder_dim)

    def forward(self, memory: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(region states (B, n_q, D), image state (B, D))."""
        q = self.query_embed.unsqueeze(0).expand(memory.shape[0], -1, -1)
        for block in self.blocks:
            q = block(q, memory)
        q = self.ln_final(q)
        return q[:, : self.n_region], q[:, self.n_region]


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.end_token_id = cfg.vocab_size - 1
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.text_dim)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.text_context_len, cfg.text_dim))
        self.blocks = nn.ModuleList(
            _EncoderBlock(cfg.text_dim, cfg.text_heads, cfg.dropout)
            for _ in range(cfg.text_layers)
        )
        self.ln_final = nn.LayerNorm(cfg.text_dim)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Pooled state at the end token, (B, text_dim)."""
        if token_ids.ndim != 2:
            raise ShapeError(f"token ids must be (B, L), got {tuple(token_ids.shape)}")
        B, L = token_ids.shape
        if L > self.cfg.text_context_len:
            raise TokenizationError(
                f"sequence length {L} exceeds context {self.cfg.text_context_len}"
            )
        is_end = token_ids == self.end_token_id
        if not (is_end.sum(dim=1) == 1).all():
            raise TokenizationError("each sequence must contain exactly one end token")
        x = self.token_embed(token_ids) + self.pos_embed[:L]
        # bool mask, not float("-inf"): an additive mask in a dtype other than
        # x's corrupts the attention backward pass (silently, float64 included)
        mask = torch.ones(L, L, device=x.device, dtype=torch.bool).triu(1)
        for block in self.blocks:
            x = block(x, attn_mask=mask)
        x = self.ln_final(x)
        eot = is_end.int().argmax(dim=1)
        return x[torch.arange(B, device=x.device), eot]


@dataclass
class ModelOutputs:
    image_embed: torch.Tensor  # (B, E), unit norm
    region_embeds: torch.Tensor  # (B, n_q, E), unit norm
    pred_boxes: torch.Tensor | None = None  # (B, n_q, 4) cxcywh in (0, 1)
    caption_embed: torch.Tensor | None = None  # (B, E)
    description_embeds: torch.Tensor | None = None  # (M, E), flattened batch order


class GrainModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.vision = VisionEncoder(config)
        self.decoder = QueryDecoder(config)
        self.text = TextEncoder(config)
        self.region_proj = nn.Linear(config.encoder_dim, config.embed_dim, bias=False)
        self.image_proj = nn.Linear(config.encoder_dim, config.embed_dim, bias=False)
        self.text_proj = nn.Linear(config.text_dim, config.embed_dim, bias=False)
        self.box_head = nn.Sequential(
            nn.Linear(config.encoder_dim, config.encoder_dim),
            nn.ReLU(),
            nn.Linear(config.encoder_dim, 4),
        )
        self.logit_scale = nn.Parameter(torch.tensor(float(config.logit_scale_init)))
        self._init_weights()

    def _init_weights(self):
        for p in (
            self.vision.pos_embed,
            self.decoder.query_embed,
            self.text.pos_embed,
        ):
            nn.init.trunc_normal_(p, std=0.02)
        nn.init.trunc_normal_(self.text.token_embed.weight, std=0.02)
        for proj in (self.region_proj, self.image_proj, self.text_proj):
            nn.init.trunc_normal_(proj.weight, std=0.02)

    def scaled_logit(self) -> torch.Tensor:
        return self.logit_scale.exp().clamp(max=MAX_LOGIT_SCALE)

    # -- image side ---------------------------------------------------------

    def decode_image(
        self, images: torch.Tensor, with_boxes: bool, add_pos_embed: bool = True
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        memory = self.vision(images, add_pos_embed=add_pos_embed)
        region_states, image_state = self.decoder(memory)
        image_embed = l2_normalize(self.image_proj(image_state))
        region_embeds = l2_normalize(self.region_proj(region_states))
        boxes = torch.sigmoid(self.box_head(region_states)) if with_boxes else None
        return image_embed, region_embeds, boxes

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, embed_dim) unit-norm global image embeddings."""
        image_embed, _, _ = self.decode_image(images, with_boxes=False)
        return image_embed

    def predict_boxes(self, images: torch.Tensor) -> torch.Tensor:
        _, _, boxes = self.decode_image(images, with_boxes=True)
        return boxes

    # -- text side ----------------------------------------------------------

    def encode_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(B, embed_dim) unit-norm text embeddings from padded token ids."""
        return l2_normalize(self.text_proj(self.text(token_ids)))

    # -- joint --------------------------------------------------------------

    def forward(
        self,
        images: torch.Tensor,
        caption_ids: torch.Tensor | None = None,
        description_ids: torch.Tensor | None = None,
        with_boxes: bool | None = None,
    ) -> ModelOutputs:
        if with_boxes is None:
            with_boxes = self.training
        image_embed, region_embeds, boxes = self.decode_image(images, with_boxes=with_boxes)
        caption_embed = self.encode_text(caption_ids) if caption_ids is not None else None
        description_embeds = (
            self.encode_text(description_ids)
            if description_ids is not None and description_ids.shape[0] > 0
            else None
        )
        return ModelOutputs(
            image_embed=image_embed,
            region_embeds=region_embeds,
            pred_boxes=boxes,
            caption_embed=caption_embed,
            description_embeds=description_embeds,
        )


def preprocess_images(images: np.ndarray | list[np.ndarray]) -> torch.Tensor:
    """(B, H, W, 3) uint8 (or list of (H, W, 3)) -> (B, 3, H, W) float in [-1, 1]."""
    if isinstance(images, list):
        images = np.stack(images)
    if images.ndim == 3:
        images = images[None]
    x = torch.from_numpy(np.ascontiguousarray(images)).float().div_(255.0)
    return x.sub_(0.5).div_(0.5).permute(0, 3, 1, 2)


def parameter_digest(model: nn.Module) -> str:
    """sha256 over all state-dict tensors in sorted name order."""
    import hashlib

    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        h.update(name.encode("utf-8"))
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
