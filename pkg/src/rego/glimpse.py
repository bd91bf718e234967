"""Recurrent glimpse stages: enlarged RoIs, RoIAlign, glimpse decoding, residual refinement.

Each stage reads the previous stage's decoder state and boxes through a
detach barrier, pools features around boxes enlarged by alpha, decodes them
against the previous state and predicts box offsets in logit space.
"""
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from rego.base import DimensionError, shape_str
from rego.boxes import BoxSet, cxcywh_to_xyxy, xyxy_to_cxcywh
from rego.detr import BackboneFeatures, DetectionSet, PredictionHeads
from rego.nn import LayerNorm, Linear, Module
from rego.tensor import Tensor, apply_op, concat
from rego.transformer import DecoderLayer, Trace

logger = logging.getLogger(__name__)

ALPHA_MODES = ('side', 'area')
QUERY_MODES = ('glimpse', 'state')
MIN_EXTENT = 1e-4


def alpha_schedule(n_stages: int, multiplier: float = 1.0) -> list[float]:
    """Decreasing enlargement factors [n, n - 1, ..., 1] scaled by `multiplier`.
    """
    if n_stages < 1:
        raise ValueError(f'n_stages must be >= 1, got {n_stages}')
    return [multiplier * (n_stages - k) for k in range(n_stages)]


@dataclass
class GlimpseConfig:
    """Stage count, enlargement schedule and glimpse decoder settings.

    When `alpha` is omitted it is derived from `n_stages` and
    `scale_multiplier`. The schedule must decrease and end at the multiplier
    unless `disentangled` is set, in which case it defaults to the multiplier
    at every stage and any factors >= 1 are allowed.
    """

    n_stages: int = 3
    alpha: list[float] | None = None
    roi_window: int = 7
    decoder_layers: int = 2
    scale_multiplier: float = 1.0
    alpha_mode: str = 'side'
    disentangled: bool = False
    query: str = 'glimpse'
    level: int | None = None

    def __post_init__(self) -> None:
        if self.n_stages < 0:
            raise ValueError(f'n_stages must be >= 0, got {self.n_stages}')
        if self.scale_multiplier <= 0:
            raise ValueError(f'scale_multiplier must be positive, got {self.scale_multiplier}')
        if self.alpha is None and self.disentangled:
            self.alpha = [self.scale_multiplier] * self.n_stages
        elif self.alpha is None:
            self.alpha = alpha_schedule(self.n_stages, self.scale_multiplier) if self.n_stages else []
        self.alpha = [float(a) for a in self.alpha]
        if len(self.alpha) != self.n_stages:
            raise ValueError(f'{len(self.alpha)} alpha values for {self.n_stages} stages')
        if any(a < 1 for a in self.alpha):
            raise ValueError(f'alpha values must be >= 1, got {self.alpha}')
        if self.alpha and not self.disentangled:
            if any(b >= a for a, b in zip(self.alpha, self.alpha[1:])):
                raise ValueError(f'alpha must strictly decrease, got {self.alpha}')
            if not math.isclose(self.alpha[-1], self.scale_multiplier):
                raise ValueError(
                    f'last alpha {self.alpha[-1]} must equal scale_multiplier {self.scale_multiplier}')
        if self.roi_window < 1:
            raise ValueError(f'roi_window must be >= 1, got {self.roi_window}')
        if self.decoder_layers < 1:
            raise ValueError(f'decoder_layers must be >= 1, got {self.decoder_layers}')
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f'alpha_mode must be one of {ALPHA_MODES}, got {self.alpha_mode!r}')
        if self.query not in QUERY_MODES:
            raise ValueError(f'query must be one of {QUERY_MODES}, got {self.query!r}')


def enlarge_rois(boxes: BoxSet, alpha: float, mode: str = 'side') -> BoxSet:
    """Scale each box about its center and clip it to the unit square.

    In 'side' mode width and height are multiplied by alpha; in 'area' mode
    by sqrt(alpha), so the area grows by alpha. Boxes needing no clipping are
    returned exactly scaled; every extent is at least 1e-4.
    """
    if alpha < 1:
        raise ValueError(f'alpha must be >= 1, got {alpha}')
    if mode not in ALPHA_MODES:
        raise ValueError(f'alpha mode must be one of {ALPHA_MODES}, got {mode!r}')
    factor = alpha if mode == 'side' else math.sqrt(alpha)
    out = boxes.boxes.copy()
    out[:, 2:] *= factor
    corners = cxcywh_to_xyxy(out)
    outside = np.any((corners < 0) | (corners > 1), axis=1)
    if outside.any():
        out[outside] = xyxy_to_cxcywh(np.clip(corners[outside], 0.0, 1.0))
    thin = out[:, 2:] < MIN_EXTENT
    if thin.any():
        logger.warning(f'{int(thin.any(axis=1).sum())} RoIs collapsed to the minimum extent')
        out[:, 2:] = np.where(thin, MIN_EXTENT, out[:, 2:])
        out[:, :2] = np.clip(out[:, :2], MIN_EXTENT / 2, 1 - MIN_EXTENT / 2)
    return BoxSet(out)


def assign_levels(rois: BoxSet, image_size: tuple[int, int], n_levels: int) -> np.ndarray:
    """Pyramid level per RoI: floor(2 + log2(sqrt(w h) / (side / 4))), clamped.

    Level 2 is stride 16; a box a quarter of the image side maps there.
    """
    h, w = image_size
    side = math.sqrt(h * w)
    extent = np.sqrt(np.maximum(rois.area(), 1e-12)) * side
    levels = np.floor(2 + np.log2(extent / (side / 4))).astype(np.int64)
    return np.clip(levels, 0, n_levels - 1)


def _bilinear_taps(lo: float, hi: float, window: int, extent: int):
    u = lo + (np.arange(window) + 0.5) * (hi - lo) / window
    p = np.clip(u * extent - 0.5, 0.0, extent - 1)
    i0 = np.minimum(np.floor(p).astype(np.int64), max(extent - 2, 0))
    i1 = np.minimum(i0 + 1, extent - 1)
    return i0, i1, p - i0


def roi_align(features: BackboneFeatures, rois: BoxSet, window: int,
              level: int | None = None) -> Tensor:
    """Pool a window x window grid of projected features inside each RoI.

    One bilinear sample at the center of every bin; sample positions outside
    the map clamp to the border. RoIs are routed to levels by `assign_levels`
    unless `level` pins them all to one. Returns N x window x window x C.
    """
    maps = features.projected
    if level is not None and not 0 <= level < len(maps):
        raise ValueError(f'level {level} outside 0..{len(maps) - 1}')
    for m in maps:
        if m.ndim != 3 or m.shape[1] == 0 or m.shape[2] == 0:
            raise DimensionError(f'roi_align: empty feature map {shape_str(m.shape)}')
    n, c = len(rois), features.width
    levels = (np.full(n, level, dtype=np.int64) if level is not None
              else assign_levels(rois, features.image_size, len(maps)))
    corners = rois.xyxy()
    value = np.zeros((n, window, window, c))
    taps = []
    for r in range(n):
        fmap = maps[levels[r]].data
        _, fh, fw = fmap.shape
        x0, y0, x1, y1 = corners[r]
        xa, xb, lx = _bilinear_taps(x0, x1, window, fw)
        ya, yb, ly = _bilinear_taps(y0, y1, window, fh)
        wy = [(ya, 1 - ly), (yb, ly)]
        wx = [(xa, 1 - lx), (xb, lx)]
        for yi, wyv in wy:
            for xi, wxv in wx:
                weight = wyv[:, None] * wxv[None, :]
                value[r] += (fmap[:, yi[:, None], xi[None, :]] * weight).transpose(1, 2, 0)
        taps.append((levels[r], wy, wx))

    def grad_fn(g: np.ndarray) -> list[np.ndarray | None]:
        grads = [np.zeros_like(m.data) if np.any(levels == i) else None
                 for i, m in enumerate(maps)]
        for r, (lvl, wy, wx) in enumerate(taps):
            gr = g[r].transpose(2, 0, 1)
            for yi, wyv in wy:
                for xi, wxv in wx:
                    weight = wyv[:, None] * wxv[None, :]
                    np.add.at(grads[lvl], (slice(None), yi[:, None], xi[None, :]), gr * weight)
        return grads

    return apply_op('roi_align', value, maps, grad_fn)


@dataclass
class GlimpseFeatures:
    """Fused glimpse tokens V (N x C) and the RoIs they were pooled from.
    """

    tokens: Tensor
    rois: BoxSet


class GlimpseFuser(Module):
    """Flatten the pooled window and project it to width C.
    """

    def __init__(self, window: int, width: int, rng: np.random.Generator | None = None) -> None:
        self.window = window
        self.proj = Linear(window * window * width, width, rng)


def fuse_glimpse(raw: Tensor, fuser: GlimpseFuser, rois: BoxSet | None = None) -> GlimpseFeatures:
    """Turn N x win x win x C pooled features into N x C glimpse tokens.
    """
    if raw.ndim != 4 or raw.shape[1] != raw.shape[2]:
        raise DimensionError(f'fuse_glimpse: expected N x win x win x C, got {shape_str(raw.shape)}')
    n = raw.shape[0]
    tokens = fuser.proj(raw.reshape(n, raw.shape[1] * raw.shape[2] * raw.shape[3]))
    return GlimpseFeatures(tokens, rois if rois is not None else BoxSet(np.zeros((0, 4))))


class GlimpseDecoder(Module):

    def __init__(self, width: int, heads: int, hidden: int, layers: int,
                 rng: np.random.Generator | None = None) -> None:
        self.layers = [DecoderLayer(width, heads, hidden, rng) for _ in range(layers)]


def glimpse_decode(glimpse: GlimpseFeatures, h_prev: Tensor, params: GlimpseDecoder,
                   query: str = 'glimpse', trace: Trace | None = None) -> Tensor:
    """Decode glimpse tokens against the previous decoder state.

    With query='glimpse' the tokens are the decoder queries and the previous
    state is the memory; query='state' swaps them. No positional embeddings.
    """
    tokens = glimpse.tokens
    if tokens.shape != h_prev.shape:
        raise DimensionError(
            f'glimpse_decode: tokens {shape_str(tokens.shape)} vs state {shape_str(h_prev.shape)}')
    if query not in QUERY_MODES:
        raise ValueError(f'query must be one of {QUERY_MODES}, got {query!r}')
    x, memory = (tokens, h_prev) if query == 'glimpse' else (h_prev, tokens)
    for layer in params.layers:
        x = layer(x, memory, trace=trace)
    return x


class GlimpseStage(Module):
    """Parameters of one refinement stage; stages never share weights.
    """

    def __init__(self, width: int, heads: int, hidden: int, num_classes: int,
                 config: GlimpseConfig, rng: np.random.Generator | None = None) -> None:
        self.fuser = GlimpseFuser(config.roi_window, width, rng)
        self.decoder = GlimpseDecoder(width, heads, hidden, config.decoder_layers, rng)
        self.merge = Linear(2 * width, width, rng)
        self.merge_norm = LayerNorm(width)
        self.heads = PredictionHeads(width, num_classes, rng)


@dataclass
class StageState:
    """Decoder state and detections after stage `stage_index` (0 is the base detector).

    Both stay linked to the graph of the stage that produced them; the next
    stage detaches them on entry.
    """

    h_dec: Tensor
    detection: DetectionSet
    stage_index: int = 0
    aux: list[DetectionSet] = field(default_factory=list)
    attention: Trace | None = None
    rois: BoxSet | None = None
    alpha: float | None = None


def run_stage(prev: StageState, features: BackboneFeatures, config: GlimpseConfig,
              params: GlimpseStage) -> StageState:
    """Refine `prev` by one glimpse stage.

    H_dec(i) = LN(W [glimpse_decode(V, H_prev); H_prev]) and
    box_logits(i) = box_logits(i - 1) + F_box(H_dec(i)), with both inputs
    detached so no gradient reaches earlier stages.
    """
    index = prev.stage_index + 1
    if index > config.n_stages:
        raise ValueError(f'stage {index} beyond configured {config.n_stages} stages')
    alpha = config.alpha[index - 1]
    h_prev = prev.h_dec.detach()
    reference = prev.detection.box_logits.detach()
    rois = enlarge_rois(prev.detection.box_set(), alpha, config.alpha_mode)
    pooled = roi_align(features, rois, config.roi_window, level=config.level)
    glimpse = fuse_glimpse(pooled, params.fuser, rois)
    trace: Trace = {}
    decoded = glimpse_decode(glimpse, h_prev, params.decoder, config.query, trace)
    h_dec = params.merge_norm(params.merge(concat([decoded, h_prev], axis=1)))
    detection = params.heads(h_dec, reference=reference)
    logger.debug(f'stage {index}: alpha={alpha} rois={len(rois)}')
    return StageState(h_dec, detection, index, attention=trace, rois=rois, alpha=alpha)


class RecurrentGlimpse(Module):
    """The ordered refinement stages applied after the base detector.
    """

    def __init__(self, width: int, heads: int, hidden: int, num_classes: int,
                 config: GlimpseConfig, rngs: Sequence[np.random.Generator | None]) -> None:
        if len(rngs) != config.n_stages:
            raise ValueError(f'{len(rngs)} generators for {config.n_stages} stages')
        self.config = config
        self.stages = [GlimpseStage(width, heads, hidden, num_classes, config, rng) for rng in rngs]

    def __call__(self, prev: StageState, features: BackboneFeatures) -> list[StageState]:
        """Run every stage in order starting from `prev`; returns stages 1..n.
        """
        states = []
        for stage in self.stages:
            prev = run_stage(prev, features, self.config, stage)
            states.append(prev)
        return states


def extract_relations(stage: StageState, top_k: int) -> list[list[tuple[int, float]]]:
    """Top-k cross-attention partners of each query, averaged over heads and layers.

    Returns, per query row, (index, weight) pairs sorted by descending weight.
    """
    if not stage.attention or not stage.attention.get('cross'):
        raise ValueError(f'stage {stage.stage_index} recorded no cross-attention')
    stacked = np.stack(stage.attention['cross'])
    mean = stacked.mean(axis=(0, 1))
    if not 1 <= top_k <= mean.shape[1]:
        raise ValueError(f'top_k must be in 1..{mean.shape[1]}, got {top_k}')
    order = np.argsort(-mean, axis=1, kind='stable')[:, :top_k]
    return [[(int(j), float(mean[i, j])) for j in row] for i, row in enumerate(order)]
