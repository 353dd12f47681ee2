"""Toy end-to-end set-prediction detector.

A strided convolutional backbone feeds a transformer encoder over the
flattened feature map; a decoder stack turns learned object queries into
per-layer class and box predictions. Each decoder layer supports two
component orders (self-attention first or cross-attention first) and two
supervision tap points for the one-to-many predictors: the layer output,
or the internal queries right after the first attention block. Internal
taps are processed by the layer's own feed-forward block before the
one-to-many predictors, which keeps tap features in the same distribution
the (possibly shared) predictors see on the main path.

The one-to-one heads always read the layer output, and inference uses only
the last layer's one-to-one heads, so the one-to-many machinery never
affects `predict`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import torch
import torch.nn as nn
from torch import Tensor

ORDERS = ("sa_ca_ffn", "ca_sa_ffn")
TAPS = ("layer_output", "internal")

_VARIANT_LETTERS = {
    "a": ("sa_ca_ffn", "layer_output"),
    "b": ("ca_sa_ffn", "layer_output"),
    "c": ("ca_sa_ffn", "internal"),
    "d": ("sa_ca_ffn", "internal"),
}


@dataclass(frozen=True)
class DecoderVariant:
    """Layer component order plus the one-to-many supervision tap point."""

    order: str = "ca_sa_ffn"
    tap: str = "internal"

    def __post_init__(self) -> None:
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.tap not in TAPS:
            raise ValueError(f"tap must be one of {TAPS}, got {self.tap!r}")

    @classmethod
    def from_letter(cls, letter: str) -> "DecoderVariant":
        key = letter.lower()
        if key not in _VARIANT_LETTERS:
            raise ValueError(f"unknown variant {letter!r}, expected one of a, b, c, d")
        order, tap = _VARIANT_LETTERS[key]
        return cls(order=order, tap=tap)

    @property
    def letter(self) -> str:
        for key, value in _VARIANT_LETTERS.items():
            if value == (self.order, self.tap):
                return key
        raise AssertionError("unreachable")


@dataclass(frozen=True)
class ModelConfig:
    num_queries: int = 30
    num_classes: int = 3
    embed_dim: int = 64
    num_heads: int = 8
    num_encoder_layers: int = 2
    num_decoder_layers: int = 3
    ffn_dim: int = 256
    share_cls_head: bool = True
    share_box_head: bool = True
    variant: DecoderVariant = field(default_factory=DecoderVariant)
    image_size: int = 64
    backbone_channels: tuple[int, int, int] = (32, 64, 128)

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.embed_dim % 4 != 0:
            raise ValueError("embed_dim must be divisible by 4 (2-d sine encoding)")
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be divisible by the backbone stride (8)")
        for name in ("num_queries", "num_classes", "num_encoder_layers", "num_decoder_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_queries": self.num_queries,
            "num_classes": self.num_classes,
            "embed_dim": self.embed_dim,
            "num_heads": self.num_heads,
            "num_encoder_layers": self.num_encoder_layers,
            "num_decoder_layers": self.num_decoder_layers,
            "ffn_dim": self.ffn_dim,
            "share_cls_head": self.share_cls_head,
            "share_box_head": self.share_box_head,
            "variant": {"order": self.variant.order, "tap": self.variant.tap},
            "image_size": self.image_size,
            "backbone_channels": list(self.backbone_channels),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        variant = data.pop("variant", None)
        if isinstance(variant, str):
            data["variant"] = DecoderVariant.from_letter(variant)
        elif isinstance(variant, dict):
            data["variant"] = DecoderVariant(**variant)
        elif variant is not None:
            raise ValueError(f"cannot parse variant {variant!r}")
        if "backbone_channels" in data:
            data["backbone_channels"] = tuple(data["backbone_channels"])
        return cls(**data)


class LayerSlice(NamedTuple):
    """Predictions of one decoder layer for one scene."""

    o2o_logits: Tensor  # (Q, C)
    o2o_boxes: Tensor  # (Q, 4) center form in (0, 1)
    o2m_logits: Tensor
    o2m_boxes: Tensor


@dataclass
class LayerPredictions:
    """Stacked per-layer predictions, batched (L, B, Q, *) or scene level (L, Q, *)."""

    o2o_logits: Tensor
    o2o_boxes: Tensor
    o2m_logits: Tensor
    o2m_boxes: Tensor

    @property
    def num_layers(self) -> int:
        return self.o2o_logits.shape[0]

    @property
    def batch_size(self) -> int:
        if self.o2o_logits.dim() != 4:
            raise ValueError("scene-level predictions have no batch dimension")
        return self.o2o_logits.shape[1]

    def scene(self, index: int) -> "LayerPredictions":
        return LayerPredictions(
            o2o_logits=self.o2o_logits[:, index],
            o2o_boxes=self.o2o_boxes[:, index],
            o2m_logits=self.o2m_logits[:, index],
            o2m_boxes=self.o2m_boxes[:, index],
        )

    def layer_slice(self, index: int) -> LayerSlice:
        if self.o2o_logits.dim() != 3:
            raise ValueError("layer_slice expects scene-level predictions")
        return LayerSlice(
            o2o_logits=self.o2o_logits[index],
            o2o_boxes=self.o2o_boxes[index],
            o2m_logits=self.o2m_logits[index],
            o2m_boxes=self.o2m_boxes[index],
        )


class Detections(NamedTuple):
    scores: Tensor  # (B, Q, C) class probabilities
    boxes: Tensor  # (B, Q, 4) center form


def sine_position_encoding_2d(height: int, width: int, dim: int) -> Tensor:
    """DETR-style 2-d sine/cosine position features, shape (height*width, dim)."""
    if dim % 4 != 0:
        raise ValueError("dim must be divisible by 4")
    num_feats = dim // 2
    temperature = 10000.0
    ys = torch.arange(height, dtype=torch.float32).unsqueeze(1).expand(height, width)
    xs = torch.arange(width, dtype=torch.float32).unsqueeze(0).expand(height, width)
    dim_t = torch.arange(num_feats // 2, dtype=torch.float32)
    dim_t = temperature ** (2 * dim_t / num_feats)

    def encode(coords: Tensor) -> Tensor:
        pos = coords.unsqueeze(-1) / dim_t
        return torch.stack([pos.sin(), pos.cos()], dim=-1).flatten(-2)

    pos = torch.cat([encode(ys), encode(xs)], dim=-1)
    return pos.reshape(height * width, dim)


class ConvBackbone(nn.Module):
    """Four-layer strided stack, total stride 8, projecting to the embed width."""

    def __init__(self, channels: tuple[int, int, int], embed_dim: int):
        super().__init__()
        c1, c2, c3 = channels
        self.layers = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1),
            nn.GroupNorm(8, c1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.GroupNorm(8, c2),
            nn.ReLU(inplace=True),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
            nn.GroupNorm(8, c3),
            nn.ReLU(inplace=True),
            nn.Conv2d(c3, embed_dim, 3, stride=1, padding=1),
            nn.GroupNorm(8, embed_dim),
        )
        self.stride = 8

    def forward(self, images: Tensor) -> Tensor:
        return self.layers(images)


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.linear1 = nn.Linear(dim, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: Tensor, pos: Tensor) -> Tensor:
        q = k = x + pos
        attn, _ = self.attn(q, k, x, need_weights=False)
        x = self.norm1(x + attn)
        ffn = self.linear2(torch.relu(self.linear1(x)))
        return self.norm2(x + ffn)


class DecoderLayer(nn.Module):
    """One decoder layer whose block order follows the configured variant.

    Returns both the layer output and the internal queries after the first
    attention block (the tap for internal supervision placements).
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, order: str):
        super().__init__()
        if order not in ORDERS:
            raise ValueError(f"unknown order {order!r}")
        self.order = order
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_sa = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_ca = nn.LayerNorm(dim)
        self.linear1 = nn.Linear(dim, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, dim)
        self.norm_ffn = nn.LayerNorm(dim)

    def _sa_block(self, x: Tensor, query_pos: Tensor) -> Tensor:
        q = k = x + query_pos
        attn, _ = self.self_attn(q, k, x, need_weights=False)
        return self.norm_sa(x + attn)

    def _ca_block(self, x: Tensor, query_pos: Tensor, memory: Tensor, mem_pos: Tensor) -> Tensor:
        attn, _ = self.cross_attn(x + query_pos, memory + mem_pos, memory, need_weights=False)
        return self.norm_ca(x + attn)

    def ffn_block(self, x: Tensor) -> Tensor:
        ffn = self.linear2(torch.relu(self.linear1(x)))
        return self.norm_ffn(x + ffn)

    def forward(
        self, x: Tensor, query_pos: Tensor, memory: Tensor, mem_pos: Tensor
    ) -> tuple[Tensor, Tensor]:
        if self.order == "sa_ca_ffn":
            x = self._sa_block(x, query_pos)
            internal = x
            x = self._ca_block(x, query_pos, memory, mem_pos)
        else:
            x = self._ca_block(x, query_pos, memory, mem_pos)
            internal = x
            x = self._sa_block(x, query_pos)
        x = self.ffn_block(x)
        return x, internal




class BoxHead(nn.Module):
    """Three-layer MLP with ReLU, sigmoid-bounded center-form output."""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim), nn.ReLU(inplace=True),
            nn.Linear(dim, dim), nn.ReLU(inplace=True),
            nn.Linear(dim, 4),
        )

    def forward(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.mlp(x))


class ClassHead(nn.Module):
    """Single linear layer producing per-class logits."""

    def __init__(self, dim: int, num_classes: int, prior_prob: float = 0.01):
        super().__init__()
        self.linear = nn.Linear(dim, num_classes)
        nn.init.constant_(self.linear.bias, -math.log((1 - prior_prob) / prior_prob))

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(x)


class Detector(nn.Module):
    """Backbone + encoder + variant-configurable decoder with dual predictors."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.embed_dim
        self.backbone = ConvBackbone(config.backbone_channels, dim)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(dim, config.num_heads, config.ffn_dim)
            for _ in range(config.num_encoder_layers)
        )
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(dim, config.num_heads, config.ffn_dim, config.variant.order)
            for _ in range(config.num_decoder_layers)
        )
        # Unit-normal query embeddings: per-query diversity at the cold start
        # keeps the one-to-one matching from churning across near-identical
        # candidates.
        self.query_content = nn.Embedding(config.num_queries, dim)
        self.query_pos = nn.Embedding(config.num_queries, dim)

        layers = config.num_decoder_layers
        self.cls_o2o = nn.ModuleList(ClassHead(dim, config.num_classes) for _ in range(layers))
        self.box_o2o = nn.ModuleList(BoxHead(dim) for _ in range(layers))
        if config.share_cls_head:
            self.cls_o2m = self.cls_o2o
        else:
            self.cls_o2m = nn.ModuleList(ClassHead(dim, config.num_classes) for _ in range(layers))
        if config.share_box_head:
            self.box_o2m = self.box_o2o
        else:
            self.box_o2m = nn.ModuleList(BoxHead(dim) for _ in range(layers))

        feat = config.image_size // self.backbone.stride
        self.register_buffer(
            "feature_pos", sine_position_encoding_2d(feat, feat, dim), persistent=False
        )

    def o2m_only_parameters(self) -> list[nn.Parameter]:
        """Parameters used by the one-to-many path only (empty when fully shared)."""
        params: list[nn.Parameter] = []
        if not self.config.share_cls_head:
            params += [p for head in self.cls_o2m for p in head.parameters()]
        if not self.config.share_box_head:
            params += [p for head in self.box_o2m for p in head.parameters()]
        return params

    def encode(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Images (B, 3, H, W) -> (memory (B, T, D), positional features (T, D))."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images of shape (B, 3, H, W), got {tuple(images.shape)}")
        if images.shape[2] != self.config.image_size or images.shape[3] != self.config.image_size:
            raise ValueError(
                f"expected {self.config.image_size}x{self.config.image_size} images, "
                f"got {images.shape[2]}x{images.shape[3]}"
            )
        feats = self.backbone(images)
        memory = feats.flatten(2).transpose(1, 2)
        pos = self.feature_pos.to(memory.dtype)
        for layer in self.encoder_layers:
            memory = layer(memory, pos)
        return memory, pos

    def _run_decoder(self, memory: Tensor, mem_pos: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        batch = memory.shape[0]
        x = self.query_content.weight.unsqueeze(0).expand(batch, -1, -1)
        query_pos = self.query_pos.weight.unsqueeze(0).expand(batch, -1, -1)
        outputs: list[Tensor] = []
        taps: list[Tensor] = []
        for layer in self.decoder_layers:
            x, internal = layer(x, query_pos, memory, mem_pos)
            outputs.append(x)
            taps.append(internal)
        return outputs, taps

    def decode(self, memory: Tensor, mem_pos: Tensor) -> LayerPredictions:
        """Run the decoder and apply both predictor families per layer."""
        outputs, taps = self._run_decoder(memory, mem_pos)
        o2o_logits, o2o_boxes, o2m_logits, o2m_boxes = [], [], [], []
        for index, output in enumerate(outputs):
            logits = self.cls_o2o[index](output)
            boxes = self.box_o2o[index](output)
            o2o_logits.append(logits)
            o2o_boxes.append(boxes)
            if self.config.variant.tap == "internal":
                # Internal queries pass the layer's own feed-forward block
                # before the one-to-many predictors; sharing it with the main
                # path keeps the tap features in the predictors' input
                # distribution.
                tap_queries = self.decoder_layers[index].ffn_block(taps[index])
                o2m_logits.append(self.cls_o2m[index](tap_queries))
                o2m_boxes.append(self.box_o2m[index](tap_queries))
            else:
                # Same input queries; shared heads then reuse the same tensors.
                o2m_logits.append(logits if self.config.share_cls_head else self.cls_o2m[index](output))
                o2m_boxes.append(boxes if self.config.share_box_head else self.box_o2m[index](output))
        return LayerPredictions(
            o2o_logits=torch.stack(o2o_logits),
            o2o_boxes=torch.stack(o2o_boxes),
            o2m_logits=torch.stack(o2m_logits),
            o2m_boxes=torch.stack(o2m_boxes),
        )

    def forward(self, images: Tensor) -> LayerPredictions:
        memory, pos = self.encode(images)
        return self.decode(memory, pos)

    def predict(self, images: Tensor) -> Detections:
        """Final detections from the last layer's one-to-one heads only."""
        memory, pos = self.encode(images)
        outputs, _ = self._run_decoder(memory, pos)
        final = outputs[-1]
        logits = self.cls_o2o[-1](final)
        boxes = self.box_o2o[-1](final)
        return Detections(scores=torch.sigmoid(logits), boxes=boxes)


CHECKPOINT_FORMAT = "mixdet-checkpoint-v1"


def save_checkpoint(model: Detector, path) -> None:
    """Single-file checkpoint: parameters plus the config as embedded JSON."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config_json": json.dumps(model.config.to_dict()),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Detector:
    """Rebuild a Detector; validates config equality when one is expected."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a recognized checkpoint file: {path}")
    config = ModelConfig.from_dict(json.loads(payload["config_json"]))
    if expected_config is not None and config != expected_config:
        raise ValueError(
            f"checkpoint config does not match: checkpoint={config}, expected={expected_config}"
        )
    model = Detector(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def variant_config(config: ModelConfig, letter: str) -> ModelConfig:
    """Copy of a model config switched to the lettered decoder variant."""
    return replace(config, variant=DecoderVariant.from_letter(letter))


def box_merge_applies(config: ModelConfig) -> bool:
    """True when the one-to-many box predictions are the one-to-one ones.

    Only then does the merged box term alone cover the one-to-one pair;
    otherwise the loss keeps a one-to-one box term so the inference box
    head is trained.
    """
    return config.share_box_head and config.variant.tap == "layer_output"
