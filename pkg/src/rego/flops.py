"""Closed-form multiply-add counts for the detector, with the glimpse overhead isolated.

A linear map of `rows` inputs from `a` to `b` features costs 2 * rows * a * b;
every other count is built from that rule so parts add up to the total exactly.
"""
import logging
import math
from dataclasses import dataclass, field

from rego.model import ModelConfig

logger = logging.getLogger(__name__)

REGO_PREFIX = 'rego.'


def linear_flops(rows: int, fan_in: int, fan_out: int) -> int:
    return 2 * rows * fan_in * fan_out


def conv_flops(out_h: int, out_w: int, in_channels: int, out_channels: int, kernel: int) -> int:
    return 2 * out_h * out_w * in_channels * out_channels * kernel * kernel


def layer_norm_flops(rows: int, width: int) -> int:
    """Mean, variance, normalize, scale and shift: five passes over the row.
    """
    return 5 * rows * width


def attention_flops(lq: int, lkv: int, width: int, heads: int) -> dict[str, int]:
    """Projections, the two score/mixing products and the softmax of one block.
    """
    return {
        'q_proj': linear_flops(lq, width, width),
        'k_proj': linear_flops(lkv, width, width),
        'v_proj': linear_flops(lkv, width, width),
        'scores': 2 * lq * lkv * width,
        'mix': 2 * lq * lkv * width,
        'softmax': 3 * heads * lq * lkv,
        'out_proj': linear_flops(lq, width, width),
        }


def ffn_flops(rows: int, width: int, hidden: int) -> int:
    return linear_flops(rows, width, hidden) + linear_flops(rows, hidden, width)


def roi_align_flops(rois: int, window: int, width: int) -> int:
    """Four multiplies and three adds per bilinear sample and channel.
    """
    return rois * window * window * 7 * width


def heads_flops(rows: int, width: int, num_classes: int) -> int:
    return (linear_flops(rows, width, num_classes + 1)
            + 2 * linear_flops(rows, width, width) + linear_flops(rows, width, 4))


@dataclass
class FlopReport:
    """Ordered per-part counts; names under 'rego.' belong to glimpse stages.
    """

    parts: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, count: int) -> None:
        self.parts[name] = self.parts.get(name, 0) + int(count)

    def add_all(self, prefix: str, counts: dict[str, int]) -> None:
        for name, count in counts.items():
            self.add(f'{prefix}.{name}', count)

    @property
    def total(self) -> int:
        return sum(self.parts.values())

    @property
    def rego_overhead(self) -> int:
        return sum(v for k, v in self.parts.items() if k.startswith(REGO_PREFIX))

    def by_module(self) -> dict[str, int]:
        """Counts summed over the first two name components.
        """
        out: dict[str, int] = {}
        for name, count in self.parts.items():
            key = '.'.join(name.split('.')[:2])
            out[key] = out.get(key, 0) + count
        return out


def _decoder_layer(report: FlopReport, prefix: str, lq: int, lkv: int, width: int, heads: int,
                   hidden: int) -> None:
    report.add_all(f'{prefix}.self_attn', attention_flops(lq, lq, width, heads))
    report.add_all(f'{prefix}.cross_attn', attention_flops(lq, lkv, width, heads))
    report.add(f'{prefix}.ffn', ffn_flops(lq, width, hidden))
    report.add(f'{prefix}.norm', 3 * layer_norm_flops(lq, width))


def count_flops(config: ModelConfig, image_size: tuple[int, int], batch: int = 1) -> FlopReport:
    """Multiply-add counts of one forward pass over `batch` images.

    Feature maps have extents ceil(side / stride), so image sizes need not be
    multiples of 32 here.
    """
    if batch < 1:
        raise ValueError(f'batch must be >= 1, got {batch}')
    h, w = image_size
    if h < 1 or w < 1:
        raise ValueError(f'image extents must be positive, got {image_size}')
    c, g = config, config.glimpse
    single = FlopReport()

    chans = [3, c.stem_width, *c.backbone_widths]
    for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
        stride = 2 ** (i + 1)
        oh, ow = math.ceil(h / stride), math.ceil(w / stride)
        single.add(f'backbone.conv{i}', conv_flops(oh, ow, a, b, 3))
        if i:
            single.add(f'backbone.proj{i - 1}', conv_flops(oh, ow, b, c.width, 1))

    tokens = math.ceil(h / 32) * math.ceil(w / 32)
    for i in range(c.encoder_layers):
        prefix = f'encoder.layer{i}'
        single.add_all(f'{prefix}.self_attn', attention_flops(tokens, tokens, c.width, c.heads))
        single.add(f'{prefix}.ffn', ffn_flops(tokens, c.width, c.ffn_width))
        single.add(f'{prefix}.norm', 2 * layer_norm_flops(tokens, c.width))

    n = c.num_queries
    for i in range(c.decoder_layers):
        _decoder_layer(single, f'decoder.layer{i}', n, tokens, c.width, c.heads, c.ffn_width)
        single.add(f'decoder.layer{i}.final_norm', layer_norm_flops(n, c.width))
        single.add(f'decoder.layer{i}.heads', heads_flops(n, c.width, c.num_classes))

    for s in range(g.n_stages):
        prefix = f'{REGO_PREFIX}stage{s + 1}'
        single.add(f'{prefix}.roi_align', roi_align_flops(n, g.roi_window, c.width))
        single.add(f'{prefix}.fuser', linear_flops(n, g.roi_window ** 2 * c.width, c.width))
        for layer in range(g.decoder_layers):
            _decoder_layer(single, f'{prefix}.decoder{layer}', n, n, c.width, c.heads, c.ffn_width)
        single.add(f'{prefix}.merge', linear_flops(n, 2 * c.width, c.width)
                   + layer_norm_flops(n, c.width))
        single.add(f'{prefix}.heads', heads_flops(n, c.width, c.num_classes))

    report = FlopReport({name: batch * count for name, count in single.parts.items()})
    logger.debug(f'count_flops: total={report.total} rego={report.rego_overhead}')
    return report
