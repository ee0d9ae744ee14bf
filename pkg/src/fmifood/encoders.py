"""Desk-scale two-tower encoders.

The image tower is a small ViT: non-overlapping patches, learned positions,
pre-LN transformer blocks, every patch projected into the shared space and
L2-normalized, plus a mean-pooled global embedding.  The text tower is a
causally masked transformer over lowercase word ids; per-word embeddings
land in the same space, and the global embedding is read off an appended
end-of-sequence slot.  Both towers re-normalize inside the forward pass, so
the unit-norm contract survives any number of optimizer steps.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, ValidationError
from .simkernel import TokenEmbeddings, TokenKind

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
_N_SPECIAL = 3

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError("image_size must be divisible by patch_size")
        if self.dim % self.heads != 0:
            raise ConfigurationError("dim must be divisible by heads")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 2048
    max_tokens: int = 77
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    causal_mask: bool = True

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigurationError("dim must be divisible by heads")
        if self.vocab_size <= _N_SPECIAL:
            raise ConfigurationError("vocab_size must exceed the reserved special ids")


@dataclass
class EncodedSample:
    """Per-token embeddings plus the pooled global vector for one input."""

    tokens: TokenEmbeddings
    global_vec: torch.Tensor


@dataclass
class Tokenization:
    ids: list[int]
    mask: list[bool]
    truncated: bool


class Tokenizer:
    """Deterministic lowercase word tokenizer with a fitted vocabulary.

    Words are ranked by (frequency desc, word asc) and assigned ids above
    the reserved PAD/EOS/UNK slots; anything unseen maps to UNK.
    """

    def __init__(self, vocab: dict[str, int]):
        self.vocab = dict(vocab)
        self.inverse = {i: w for w, i in self.vocab.items()}

    @staticmethod
    def words_of(text: str) -> list[str]:
        return _WORD_RE.findall(text.lower())

    @classmethod
    def fit(cls, texts: list[str], vocab_size: int = 2048) -> "Tokenizer":
        counts: dict[str, int] = {}
        for text in texts:
            for word in cls.words_of(text):
                counts[word] = counts.get(word, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))[: vocab_size - _N_SPECIAL]
        vocab = {w: _N_SPECIAL + i for i, w in enumerate(ranked)}
        return cls(vocab)

    def encode(self, text: str, max_tokens: int = 77) -> Tokenization:
        if not text or not text.strip():
            raise ValidationError("cannot tokenize an empty string")
        words = self.words_of(text)
        if not words:
            raise ValidationError(f"no tokenizable words in {text!r}")
        truncated = len(words) > max_tokens
        words = words[:max_tokens]
        ids = [self.vocab.get(w, UNK_ID) for w in words]
        return Tokenization(ids=ids, mask=[True] * len(ids), truncated=truncated)

    def decode(self, ids: list[int]) -> list[str]:
        return [self.inverse.get(i, "<unk>") for i in ids]

    def to_dict(self) -> dict:
        return {"vocab": self.vocab}

    @classmethod
    def from_dict(cls, data: dict) -> "Tokenizer":
        return cls({w: int(i) for w, i in data["vocab"].items()})


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # [B, H, N, hd]
        attn = (q @ k.transpose(-2, -1)) * self.head_dim**-0.5
        if attn_mask is not None:
            attn = attn.masked_fill(~attn_mask, float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.out(out)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), attn_mask)
        x = x + self.mlp(self.ln2(x))
        return x


class ImageEncoder(nn.Module):
    """Patchify, attend, and emit unit-norm patch + global embeddings."""

    def __init__(self, config: ImageEncoderConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Conv2d(3, config.dim, config.patch_size, config.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, config.n_patches, config.dim) * 0.02)
        self.blocks = nn.ModuleList(
            [_Block(config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.ln = nn.LayerNorm(config.dim)
        self.proj = nn.Linear(config.dim, config.dim, bias=False)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """images [B, 3, H, W] in [0, 1] -> (tokens [B, P, D], global [B, D])."""
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (3, size, size):
            raise ValidationError(
                f"expected images [B, 3, {size}, {size}], got {tuple(images.shape)}"
            )
        if float(images.min()) < -1e-6 or float(images.max()) > 1 + 1e-6:
            raise ValidationError("pixel values must lie in [0, 1]")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)  # [B, P, D]
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.ln(x)
        tokens = F.normalize(self.proj(x), dim=-1)
        pooled = F.normalize(self.proj(x.mean(dim=1)), dim=-1)
        return tokens, pooled

    def encode(self, pixels: torch.Tensor) -> EncodedSample:
        """Single image [H, W, 3] in [0, 1] -> EncodedSample."""
        if pixels.ndim != 3 or pixels.shape[-1] != 3:
            raise ValidationError(f"expected pixels [H, W, 3], got {tuple(pixels.shape)}")
        batch = pixels.permute(2, 0, 1).unsqueeze(0).to(self.patch_embed.weight.dtype)
        tokens, pooled = self.forward(batch)
        mask = torch.ones(tokens.shape[1], dtype=torch.bool)
        return EncodedSample(
            tokens=TokenEmbeddings(tokens[0], mask, TokenKind.IMAGE_PATCH),
            global_vec=pooled[0],
        )


class TextEncoder(nn.Module):
    """Causal transformer over word ids; global embedding from the EOS slot."""

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        self.tok_embed = nn.Embedding(config.vocab_size, config.dim)
        self.pos_embed = nn.Parameter(torch.randn(1, config.max_tokens + 1, config.dim) * 0.02)
        self.blocks = nn.ModuleList(
            [_Block(config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.ln = nn.LayerNorm(config.dim)
        self.proj = nn.Linear(config.dim, config.dim, bias=False)

    def forward(
        self, word_ids: torch.Tensor, word_counts: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """word_ids [B, L] (PAD-padded), word_counts [B] real lengths.

        Returns (tokens [B, L, D], token_mask [B, L], global [B, D]).  An
        EOS slot is appended after each sequence's last word; padding
        positions are excluded from attention keys, so appending padding
        never changes a real token's embedding.
        """
        if word_ids.ndim != 2:
            raise ValidationError("word_ids must be [B, L]")
        if int(word_ids.max()) >= self.config.vocab_size or int(word_ids.min()) < 0:
            raise ValidationError("token id out of vocabulary range")
        if int(word_counts.min()) < 1:
            raise ValidationError("each sequence needs at least one word")
        B, L = word_ids.shape
        if L > self.config.max_tokens:
            raise ValidationError(f"sequence length {L} exceeds max_tokens {self.config.max_tokens}")

        seq = torch.cat([word_ids, word_ids.new_full((B, 1), PAD_ID)], dim=1)  # [B, L+1]
        positions = torch.arange(L + 1, device=word_ids.device)
        seq[torch.arange(B), word_counts] = EOS_ID

        x = self.tok_embed(seq) + self.pos_embed[:, : L + 1]
        key_valid = positions[None, :] <= word_counts[:, None]  # words + EOS slot
        attn_mask = key_valid[:, None, None, :]  # [B, 1, 1, S]
        if self.config.causal_mask:
            causal = positions[None, :] <= positions[:, None]  # [S, S]
            attn_mask = attn_mask & causal[None, None, :, :]
        for block in self.blocks:
            x = block(x, attn_mask)
        x = self.ln(x)

        tokens = F.normalize(self.proj(x[:, :L]), dim=-1)
        token_mask = positions[None, :L] < word_counts[:, None]
        pooled = x[torch.arange(B), word_counts]
        pooled = F.normalize(self.proj(pooled), dim=-1)
        return tokens, token_mask, pooled

    def encode(self, tokenized: Tokenization) -> EncodedSample:
        """Single tokenized text -> EncodedSample (word embeddings only)."""
        ids = torch.tensor([tokenized.ids], dtype=torch.long)
        counts = torch.tensor([len(tokenized.ids)])
        tokens, mask, pooled = self.forward(ids, counts)
        return EncodedSample(
            tokens=TokenEmbeddings(tokens[0], mask[0], TokenKind.TEXT_TOKEN),
            global_vec=pooled[0],
        )


def parse_temperature(spec: str) -> tuple[str, float]:
    """Parse a temperature spec: "learnable", "learnable:20", or "fixed:1.0"."""
    parts = spec.split(":", 1)
    mode = parts[0]
    if mode not in ("learnable", "fixed"):
        raise ConfigurationError(f"unknown temperature mode {spec!r}")
    if mode == "fixed":
        if len(parts) != 2:
            raise ConfigurationError("fixed temperature needs a value, e.g. fixed:1.0")
        value = float(parts[1])
    else:
        value = float(parts[1]) if len(parts) == 2 else 1.0 / 0.07
    if value <= 0:
        raise ConfigurationError("temperature must be positive")
    return mode, value


class TwoTowerModel(nn.Module):
    """Image tower + text tower + the shared logit scale."""

    TAU_MIN = 1.0
    TAU_MAX = 100.0

    def __init__(
        self,
        image_config: ImageEncoderConfig,
        text_config: TextEncoderConfig,
        temperature: str = "learnable",
    ):
        super().__init__()
        self.image_encoder = ImageEncoder(image_config)
        self.text_encoder = TextEncoder(text_config)
        self.temperature_spec = temperature
        mode, value = parse_temperature(temperature)
        self._temperature_mode = mode
        if mode == "learnable":
            self.log_scale = nn.Parameter(torch.tensor(math.log(value)))
        else:
            self.register_buffer("fixed_scale", torch.tensor(value))

    @property
    def temperature(self) -> torch.Tensor:
        if self._temperature_mode == "learnable":
            return self.log_scale.exp()
        return self.fixed_scale

    def clamp_temperature(self):
        """Keep the learnable scale inside [TAU_MIN, TAU_MAX] after a step."""
        if self._temperature_mode == "learnable":
            with torch.no_grad():
                self.log_scale.clamp_(math.log(self.TAU_MIN), math.log(self.TAU_MAX))


def pad_tokenizations(tokenized: list[Tokenization]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length id lists into (ids [B, L], counts [B])."""
    counts = torch.tensor([len(t.ids) for t in tokenized], dtype=torch.long)
    width = int(counts.max())
    ids = torch.full((len(tokenized), width), PAD_ID, dtype=torch.long)
    for row, t in enumerate(tokenized):
        ids[row, : len(t.ids)] = torch.tensor(t.ids, dtype=torch.long)
    return ids, counts
