"""Backbone, transformer encoder-decoder and prediction heads producing stage-0 outputs.
"""
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from rego.base import DimensionError, shape_str
from rego.boxes import BoxSet
from rego.nn import MLP, Conv2d, LayerNorm, Linear, Module, parameter
from rego.tensor import Tensor, clip, relu, sigmoid
from rego.transformer import DecoderLayer, EncoderLayer, positional_embedding

from libb import copydoc

logger = logging.getLogger(__name__)

STRIDES = (4, 8, 16, 32)
BOX_LOGIT_LIMIT = 50.0


@dataclass
class BackboneFeatures:
    """Per-level maps at strides 4/8/16/32, raw and projected to model width.
    """

    levels: list[Tensor]
    projected: list[Tensor]
    image_size: tuple[int, int]
    strides: tuple[int, ...] = STRIDES

    @property
    def width(self) -> int:
        return self.projected[0].shape[0]


@dataclass
class DetectionSet:
    """Class logits (background last) and boxes for N_d queries of one stage.

    Boxes are kept as pre-sigmoid logits so a residual update of zero leaves
    them bitwise unchanged; `boxes` is their sigmoid, with logits clamped to
    +-BOX_LOGIT_LIMIT so every extent stays positive.
    """

    logits: Tensor
    box_logits: Tensor
    boxes: Tensor = field(init=False)

    def __post_init__(self) -> None:
        if self.logits.shape[0] != self.box_logits.shape[0] or self.box_logits.shape[1:] != (4,):
            raise DimensionError(
                f'DetectionSet: logits {shape_str(self.logits.shape)} vs '
                f'boxes {shape_str(self.box_logits.shape)}')
        self.boxes = sigmoid(clip(self.box_logits, -BOX_LOGIT_LIMIT, BOX_LOGIT_LIMIT))

    def __len__(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        """Foreground class count N_c.
        """
        return self.logits.shape[1] - 1

    def box_set(self) -> BoxSet:
        return BoxSet(self.boxes.data)

    def detach(self) -> 'DetectionSet':
        return DetectionSet(self.logits.detach(), self.box_logits.detach())


class QueryEmbedding(Module):
    """N_d learned object queries E_box.
    """

    def __init__(self, count: int, width: int, rng: np.random.Generator | None = None) -> None:
        if count < 1:
            raise ValueError(f'query count must be >= 1, got {count}')
        init = rng.normal(size=(count, width)) if rng is not None else np.zeros((count, width))
        self.embed = parameter(init)

    @property
    def count(self) -> int:
        return self.embed.shape[0]


class PredictionHeads(Module):
    """F_cls (linear, N_c + 1 logits) and F_box (3-layer perceptron, 4 box logits).
    """

    def __init__(self, width: int, num_classes: int,
                 rng: np.random.Generator | None = None) -> None:
        self.cls = Linear(width, num_classes + 1, rng)
        self.box = MLP([width, width, width, 4], rng)

    def __call__(self, h: Tensor, reference: Tensor | None = None) -> DetectionSet:
        """Predict from decoder state `h`; box logits are added to `reference` when given.
        """
        if h.shape[-1] != self.cls.weight.shape[0]:
            raise DimensionError(
                f'PredictionHeads: state {shape_str(h.shape)} vs width {self.cls.weight.shape[0]}')
        delta = self.box(h)
        return DetectionSet(self.cls(h), delta if reference is None else reference + delta)


def backbone_forward(params: 'Backbone', image: Tensor) -> BackboneFeatures:
    """Run the stem and four stride-2 stages; project each stage to model width.

    A 3 x H x W image (H, W divisible by 32) yields levels of H/4 ... H/32.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f'backbone: expected 3 x H x W image, got {shape_str(image.shape)}')
    _, h, w = image.shape
    if h % 32 or w % 32:
        raise DimensionError(f'backbone: image extents {h}x{w} not divisible by 32')
    x = relu(params.stem(image.reshape(1, 3, h, w)))
    levels, projected = [], []
    for stage, proj in zip(params.stages, params.projections):
        x = relu(stage(x))
        p = proj(x)
        levels.append(x.reshape(x.shape[1:]))
        projected.append(p.reshape(p.shape[1:]))
    return BackboneFeatures(levels, projected, (h, w))


class Backbone(Module):
    """Stride-2 stem followed by four stride-2 3x3 stages with 1x1 projections.
    """

    def __init__(self, width: int, widths: Sequence[int] = (32, 64, 128, 256),
                 stem_width: int = 16, rng: np.random.Generator | None = None) -> None:
        if len(widths) != len(STRIDES):
            raise ValueError(f'backbone needs {len(STRIDES)} stage widths, got {len(widths)}')
        self.stem = Conv2d(3, stem_width, 3, stride=2, padding=1, rng=rng)
        chans = [stem_width, *widths]
        self.stages = [Conv2d(a, b, 3, stride=2, padding=1, rng=rng)
                       for a, b in zip(chans[:-1], chans[1:])]
        self.projections = [Conv2d(c, width, 1, rng=rng) for c in widths]

    @copydoc(backbone_forward)
    def __call__(self, image: Tensor) -> BackboneFeatures:
        return backbone_forward(self, image)


class Transformer(Module):

    def __init__(self, width: int, heads: int, hidden: int, encoder_layers: int,
                 decoder_layers: int, rng: np.random.Generator | None = None) -> None:
        self.encoder = [EncoderLayer(width, heads, hidden, rng) for _ in range(encoder_layers)]
        self.decoder = [DecoderLayer(width, heads, hidden, rng) for _ in range(decoder_layers)]
        self.decoder_norm = LayerNorm(width)


@dataclass
class DetrOutput:
    """Final decoder state H_dec(0), its detections, and one detection set per
    earlier decoder layer for auxiliary losses.
    """

    h_dec: Tensor
    detection: DetectionSet
    aux: list[DetectionSet]
    trace: dict[str, list[np.ndarray]]

    def __iter__(self):
        yield self.h_dec
        yield self.detection


def detr_forward(transformer: Transformer, features: BackboneFeatures,
                 queries: QueryEmbedding, heads: PredictionHeads) -> DetrOutput:
    """Encode the stride-32 level, decode the object queries, apply the heads.

    Every decoder layer output passes through the shared decoder norm and the
    shared heads; the last one is the stage-0 result.
    """
    top = features.projected[-1]
    c, h, w = top.shape
    if c != queries.embed.shape[1]:
        raise DimensionError(f'detr: feature width {c} vs query width {queries.embed.shape[1]}')
    memory = top.reshape(c, h * w).transpose(1, 0)
    pos = positional_embedding(h, w, c)
    for layer in transformer.encoder:
        memory = layer(memory, pos)
    tgt = Tensor(np.zeros(queries.embed.shape))
    trace: dict[str, list[np.ndarray]] = {}
    states = []
    for layer in transformer.decoder:
        tgt = layer(tgt, memory, queries.embed, pos, trace)
        states.append(transformer.decoder_norm(tgt))
    detections = [heads(s) for s in states]
    return DetrOutput(states[-1], detections[-1], detections[:-1], trace)
