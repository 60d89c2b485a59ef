"""Image, text and cross encoders plus the projection and prediction heads.

All three encoders are plain pre-norm transformers with learned absolute
position embeddings. Shapes follow a batch-first convention: images are
``(B, 3, H, W)``, token ids ``(B, T)`` and every sequence output ``(B, T, d)``
with row 0 the [CLS] state.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .attributes.tokenizer import MAX_TOKENS, PAD
from .numcore import ContractError, Embedding, LayerNorm, Linear, Module, Tensor, parameter
from .numcore.nn import trunc_normal


class ConfigError(ValueError):
    pass


@dataclass
class ImageEncoderConfig:
    image_height: int = 384
    image_width: int = 128
    patch_size: int = 32
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)


@dataclass
class TextEncoderConfig:
    vocab_size: int = 8192
    max_tokens: int = MAX_TOKENS
    embed_dim: int = 64
    num_layers: int = 2
    cross_layers: int = 2
    num_heads: int = 4

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")


@dataclass
class ModelConfig:
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    proj_dim: int = 64
    mlp_ratio: int = 4
    temperature: float = 0.07
    temp_min: float = 0.001
    temp_max: float = 0.5

    def __post_init__(self):
        if isinstance(self.image, dict):
            self.image = ImageEncoderConfig(**self.image)
        if isinstance(self.text, dict):
            self.text = TextEncoderConfig(**self.text)
        if self.image.embed_dim != self.text.embed_dim:
            raise ConfigError("image and text embed_dim must agree for cross attention")

    def to_dict(self) -> dict:
        return asdict(self)


def _neg_mask(valid: np.ndarray) -> np.ndarray:
    """Additive attention bias: 0 where a key is valid, a large negative otherwise."""
    return np.where(valid, 0.0, -1e9).astype(nc.get_dtype())[:, None, None, :]


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, cross: bool = False):
        self.heads = heads
        self.cross = cross
        if cross:
            self.q = Linear(dim, dim, rng)
            self.kv = Linear(dim, 2 * dim, rng)
        else:
            self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, context: Tensor | None = None, key_bias: np.ndarray | None = None,
                 context_index: np.ndarray | None = None) -> Tensor:
        b, n, d = x.shape
        if self.cross:
            q = self._split(self.q(x))
            kv = self.kv(context)
            if context_index is not None:
                # project each context once, then fan out to the rows that use it
                kv = kv[context_index]
            k, v = self._split(kv[..., :d]), self._split(kv[..., d:])
        else:
            qkv = self.qkv(x)
            q, k, v = self._split(qkv[..., :d]), self._split(qkv[..., d:2 * d]), self._split(qkv[..., 2 * d:])
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.heads))
        if key_bias is not None:
            scores = scores + key_bias
        attn = nc.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer layer; with ``cross=True`` a cross-attention sublayer follows self-attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng, cross: bool = False):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        if cross:
            self.norm_x = LayerNorm(dim)
            self.xattn = Attention(dim, heads, rng, cross=True)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)

    def __call__(self, x: Tensor, self_bias=None, context: Tensor | None = None, context_index=None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_bias=self_bias)
        if context is not None:
            x = x + self.xattn(self.norm_x(x), context, context_index=context_index)
        return x + self.mlp(self.norm2(x))


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*p*p), patches in row-major order."""
    b, c, h, w = pixels.shape
    x = pixels.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


class ImageEncoder(Module):
    def __init__(self, cfg: ImageEncoderConfig, rng, mlp_ratio: int = 4):
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(cfg.channels * cfg.patch_size ** 2, d, rng)
        self.cls = parameter(trunc_normal(rng, (1, 1, d)))
        self.pos = parameter(trunc_normal(rng, (cfg.num_patches + 1, d)))
        self.blocks = [Block(d, cfg.num_heads, mlp_ratio, rng) for _ in range(cfg.num_layers)]
        self.norm = LayerNorm(d)

    def __call__(self, pixels) -> Tensor:
        x = np.asarray(pixels.data if isinstance(pixels, Tensor) else pixels, dtype=nc.get_dtype())
        if x.ndim == 3:
            x = x[None]
        cfg = self.cfg
        if x.shape[1:] != (cfg.channels, cfg.image_height, cfg.image_width):
            raise ContractError(
                f"expected images of shape {(cfg.channels, cfg.image_height, cfg.image_width)}, got {x.shape[1:]}")
        if not np.all(np.isfinite(x)):
            raise nc.NumericError("non-finite pixel values")
        b = x.shape[0]
        patches = self.patch_embed(Tensor(patchify(x, cfg.patch_size)))
        cls = self.cls * np.ones((b, 1, 1), dtype=x.dtype)
        h = nc.concat([cls, patches], axis=1) + self.pos
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)


class TextEncoder(Module):
    def __init__(self, cfg: TextEncoderConfig, rng, mlp_ratio: int = 4):
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok = Embedding(cfg.vocab_size, d, rng)
        self.pos = parameter(trunc_normal(rng, (cfg.max_tokens, d)))
        self.blocks = [Block(d, cfg.num_heads, mlp_ratio, rng) for _ in range(cfg.num_layers)]
        self.norm = LayerNorm(d)

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] > self.cfg.max_tokens:
            raise ContractError(f"sequence of {ids.shape[1]} tokens exceeds max_tokens={self.cfg.max_tokens}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ContractError("token id outside the vocabulary")
        bias = _neg_mask(ids != PAD)
        h = self.tok(ids) + self.pos[: ids.shape[1]]
        for blk in self.blocks:
            h = blk(h, self_bias=bias)
        return self.norm(h)


class CrossEncoder(Module):
    def __init__(self, cfg: TextEncoderConfig, rng, mlp_ratio: int = 4):
        d = cfg.embed_dim
        self.blocks = [Block(d, cfg.num_heads, mlp_ratio, rng, cross=True) for _ in range(cfg.cross_layers)]
        self.norm = LayerNorm(d)

    def __call__(self, text_states: Tensor, image_states: Tensor, ids, image_index=None) -> Tensor:
        """Fuse text rows with images; row ``i`` sees image ``image_index[i]`` (default: image ``i``)."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        if image_index is not None:
            image_index = np.asarray(image_index, dtype=np.int64)
            if image_index.shape != (text_states.shape[0],):
                raise ContractError("image_index needs one entry per text row")
        elif text_states.shape[0] != image_states.shape[0]:
            raise ContractError("text and image batches differ in size")
        bias = _neg_mask(ids != PAD)
        h = text_states
        for blk in self.blocks:
            h = blk(h, self_bias=bias, context=image_states, context_index=image_index)
        return self.norm(h)


class MatchHead(Module):
    def __init__(self, dim: int, rng):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, 1, rng)

    def __call__(self, c_cls: Tensor) -> Tensor:
        """Matching logit; sigmoid of this is the match probability."""
        return self.fc2(nc.gelu(self.fc1(c_cls))).reshape(-1)


class MaskHead(Module):
    def __init__(self, dim: int, vocab_size: int, rng):
        self.fc1 = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)
        self.fc2 = Linear(dim, vocab_size, rng)

    def __call__(self, c: Tensor) -> Tensor:
        """Vocabulary logits; softmax of this is the token distribution."""
        return self.fc2(self.norm(nc.gelu(self.fc1(c))))


class APTM(Module):
    """Three encoders, two projections, the match and mask heads, and the temperature.

    Both the image-text and the image-prompt streams run through this single
    set of parameters.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = nc.RngStream.named(seed, "init").generator()
        d = cfg.text.embed_dim
        self.image = ImageEncoder(cfg.image, rng, cfg.mlp_ratio)
        self.text = TextEncoder(cfg.text, rng, cfg.mlp_ratio)
        self.cross = CrossEncoder(cfg.text, rng, cfg.mlp_ratio)
        self.image_proj = Linear(d, cfg.proj_dim, rng)
        self.text_proj = Linear(d, cfg.proj_dim, rng)
        self.match_head = MatchHead(d, rng)
        self.mask_head = MaskHead(d, cfg.text.vocab_size, rng)
        self.temp = parameter(np.array(cfg.temperature))

    def encode_image(self, pixels) -> Tensor:
        return self.image(pixels)

    def encode_text(self, ids) -> Tensor:
        return self.text(ids)

    def encode_cross(self, image_states: Tensor, text_states: Tensor, ids, image_index=None) -> Tensor:
        return self.cross(text_states, image_states, ids, image_index)

    def project_image(self, v_cls: Tensor) -> Tensor:
        return nc.l2_normalize(self.image_proj(v_cls), axis=-1)

    def project_text(self, l_cls: Tensor) -> Tensor:
        return nc.l2_normalize(self.text_proj(l_cls), axis=-1)

    def match_logit(self, c_cls: Tensor) -> Tensor:
        return self.match_head(c_cls)

    def match_prob(self, c_cls: Tensor) -> Tensor:
        return nc.sigmoid(self.match_head(c_cls))

    def mask_logits(self, c_rows: Tensor) -> Tensor:
        return self.mask_head(c_rows)

    def mask_probs(self, c_rows: Tensor) -> Tensor:
        return nc.softmax(self.mask_head(c_rows), axis=-1)

    def tau(self) -> Tensor:
        return nc.clamp(self.temp, self.cfg.temp_min, self.cfg.temp_max)

    def param_groups(self) -> dict[str, list[str]]:
        names = [n for n, _ in self.named_parameters()]
        return {prefix: [n for n in names if n.startswith(prefix + ".")]
                for prefix in ("image", "text", "cross", "image_proj", "text_proj", "match_head", "mask_head")}


def trim_padding(ids: np.ndarray) -> np.ndarray:
    """Drop trailing columns that are [PAD] in every row (outputs on real tokens are unchanged)."""
    ids = np.asarray(ids)
    nonpad = np.nonzero((ids != PAD).any(axis=0))[0]
    width = int(nonpad[-1]) + 1 if nonpad.size else 1
    return ids[:, :width]
