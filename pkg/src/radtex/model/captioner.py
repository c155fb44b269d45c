"""Captioning model (visual backbone + textual head) and the transfer-time classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import tensor as T
from ..tensor import DimensionError, Tensor
from ..textpipe import EOS_ID, PAD_ID, SOS_ID, Vocabulary
from .backbone import Backbone, BackboneConfig
from .layers import DecoderLayer, LayerNorm, Linear, Module, causal_mask

DIRECTIONS = ("forward", "backward")


@dataclass
class TextualHeadConfig:
    width: int = 128
    layers: int = 2
    heads: int = 4
    ffn: int = 512
    dropout: float = 0.1
    vocab_size: int = 1000
    max_positions: int = 170

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("decoder width must be divisible by the number of heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    textual: TextualHeadConfig = field(default_factory=TextualHeadConfig)
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "textual": asdict(self.textual), "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(BackboneConfig(**d.get("backbone", {})), TextualHeadConfig(**d.get("textual", {})),
                   d.get("dtype", "float32"))


def _as_images(images, dtype) -> Tensor:
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


class TextualHead(Module):
    """Shared token/position embeddings feeding separate forward and backward decoder stacks.

    The output projection is tied to the token embedding.
    """

    def __init__(self, cfg: TextualHeadConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.width
        self.token_embedding = Tensor((rng.standard_normal((cfg.vocab_size, d)) * 0.02).astype(dtype),
                                      requires_grad=True)
        self.position_embedding = Tensor((rng.standard_normal((cfg.max_positions, d)) * 0.02).astype(dtype),
                                         requires_grad=True)
        self.embedding_norm = LayerNorm(d, dtype)
        self.forward_decoder = [DecoderLayer(d, cfg.heads, cfg.ffn, cfg.dropout, rng, dtype)
                                for _ in range(cfg.layers)]
        self.backward_decoder = [DecoderLayer(d, cfg.heads, cfg.ffn, cfg.dropout, rng, dtype)
                                 for _ in range(cfg.layers)]

    def __call__(self, ids: np.ndarray, visual: Tensor, direction: str, rng=None) -> Tensor:
        """Logits B×T×V for ``ids`` given in the direction's own reading order."""
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        ids = np.asarray(ids)
        b, t = ids.shape
        if t > self.cfg.max_positions:
            raise DimensionError(f"{t} tokens exceed the {self.cfg.max_positions} learned positions")
        tok = T.embedding(ids, self.token_embedding)
        pos = T.getitem(self.position_embedding, slice(0, t))
        h = self.embedding_norm(T.add(tok, pos))
        h = T.dropout(h, self.cfg.dropout, rng, self.training)
        mask = causal_mask(t, self.token_embedding.dtype)
        stack = self.forward_decoder if direction == "forward" else self.backward_decoder
        for layer in stack:
            h = layer(h, visual, mask, rng)
        return T.matmul(h, T.transpose(self.token_embedding, (1, 0)))


class CaptioningModel(Module):
    kind = "captioner"

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None, seed: int = 0,
                 max_caption_len: int | None = None):
        rng = np.random.default_rng([seed, 1])
        dtype = np.dtype(cfg.dtype).type
        self.cfg = cfg
        self.vocab = vocab
        if vocab is not None and len(vocab) != cfg.textual.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} pieces, config says {cfg.textual.vocab_size}")
        self.max_caption_len = max_caption_len or cfg.textual.max_positions
        if self.max_caption_len > cfg.textual.max_positions:
            raise ValueError("max_caption_len exceeds the decoder's max positions")
        self.backbone = Backbone(cfg.backbone, rng, dtype)
        self.projection = Linear(cfg.backbone.out_width, cfg.textual.width, rng, dtype=dtype)
        self.textual = TextualHead(cfg.textual, rng, dtype)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def header(self) -> dict:
        return {"kind": self.kind, "model": self.cfg.to_dict(), "max_caption_len": self.max_caption_len,
                "vocab": None if self.vocab is None else self.vocab.pieces}


class ClassifierModel(Module):
    """Backbone with a global-average-pool + linear decision head."""

    kind = "classifier"

    def __init__(self, backbone_cfg: BackboneConfig, head_width: int, seed: int = 0, dtype: str = "float32",
                 zero_head: bool = False):
        rng = np.random.default_rng([seed, 2])
        self.backbone_cfg = backbone_cfg
        self.head_width = head_width
        self._dtype = dtype
        self.backbone = Backbone(backbone_cfg, rng, np.dtype(dtype).type)
        self.head = Linear(backbone_cfg.out_width, head_width, rng, dtype=np.dtype(dtype).type, zero=zero_head)

    @property
    def dtype(self):
        return np.dtype(self._dtype)

    def header(self) -> dict:
        return {"kind": self.kind, "backbone": self.backbone_cfg.to_dict(), "head_width": self.head_width,
                "dtype": self._dtype}


# ---------------------------------------------------------------------------
# operations


def encode_image(model: CaptioningModel, images) -> Tensor:
    """B×H×W (or B×C×H×W) images → B×S×d visual feature sequence, S = (H/32)·(W/32)."""
    x = _as_images(images, model.dtype)
    fmap = model.backbone(x)
    b, c, h, w = fmap.shape
    seq = T.transpose(T.reshape(fmap, (b, c, h * w)), (0, 2, 1))
    return model.projection(seq)


def token_lengths(ids: np.ndarray) -> np.ndarray:
    return (np.asarray(ids) != PAD_ID).sum(axis=1)


def reverse_tokens(ids: np.ndarray) -> np.ndarray:
    """Reverse the non-pad prefix of each right-padded row."""
    ids = np.asarray(ids)
    lengths = token_lengths(ids)
    t = ids.shape[1]
    pos = np.arange(t)[None, :]
    src = np.where(pos < lengths[:, None], lengths[:, None] - 1 - pos, pos)
    return np.take_along_axis(ids, src, axis=1)


def decoder_forward(model: CaptioningModel, tokens, visual: Tensor, direction: str = "forward", rng=None) -> Tensor:
    """Logits for natural-order ``tokens``.

    For ``direction="backward"`` the non-pad part of every row is reversed
    first and the logits come back in that reversed order.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if direction == "backward":
        tokens = reverse_tokens(tokens)
    return model.textual(tokens, visual, direction, rng)


def _direction_loss(model, ids, visual, direction, rng) -> Tensor:
    logits = model.textual(ids[:, :-1], visual, direction, rng)
    b, t, v = logits.shape
    return T.softmax_cross_entropy(T.reshape(logits, (b * t, v)), ids[:, 1:].reshape(-1), ignore_index=PAD_ID)


def caption_loss(model: CaptioningModel, images, tokens, rng=None) -> Tensor:
    """Forward plus backward next-token cross-entropy, each averaged over non-pad targets."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] < 2 or np.any(token_lengths(tokens) < 2):
        raise ValueError("every caption needs at least [SOS] and one more token")
    visual = encode_image(model, images)
    fwd = _direction_loss(model, tokens, visual, "forward", rng)
    bwd = _direction_loss(model, reverse_tokens(tokens), visual, "backward", rng)
    return T.add(fwd, bwd)


def backbone_features(backbone: Backbone, images, dtype) -> Tensor:
    return T.global_avg_pool(backbone(_as_images(images, dtype)))


def classify(model: ClassifierModel, images, frozen: bool = False) -> Tensor:
    """Pooled backbone features → linear head.  ``frozen`` runs the backbone without recording."""
    if frozen:
        with T.no_grad():
            feats = backbone_features(model.backbone, images, model.dtype)
        feats = Tensor(feats.data)
    else:
        feats = backbone_features(model.backbone, images, model.dtype)
    return model.head(feats)


def transplant_backbone(src: Module, dst: Module) -> None:
    """Copy every backbone parameter and buffer from ``src`` into ``dst``."""
    state = {k: v for k, v in src.state_dict().items() if k.startswith("backbone.")}
    dst.load_state_dict(state, strict=False)
    missing = [k for k in dst.state_dict() if k.startswith("backbone.") and k not in state]
    if missing:
        raise KeyError(f"source lacks backbone tensors: {missing[:3]}")

