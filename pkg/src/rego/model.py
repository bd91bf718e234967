"""The full detector: base detector plus recurrent glimpse stages, and checkpoints.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from rego.base import DimensionError, ManifestError
from rego.detr import Backbone, DetectionSet, PredictionHeads, QueryEmbedding
from rego.detr import Transformer, detr_forward
from rego.glimpse import GlimpseConfig, RecurrentGlimpse, StageState
from rego.matching import LOSS_TYPES
from rego.nn import Module
from rego.tensor import Tensor, load_tensor, save_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'rego-checkpoint/1'


@dataclass
class ModelConfig:
    """Sizes of the base detector and the glimpse stages.
    """

    width: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_queries: int = 25
    num_classes: int = 3
    ffn_width: int = 256
    backbone_widths: tuple[int, ...] = (32, 64, 128, 256)
    stem_width: int = 16
    loss: str = 'ce'
    seed: int = 0
    glimpse: GlimpseConfig = field(default_factory=GlimpseConfig)

    def __post_init__(self) -> None:
        if isinstance(self.glimpse, dict):
            self.glimpse = GlimpseConfig(**self.glimpse)
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        if self.width % 4:
            raise ValueError(f'width {self.width} must be divisible by 4')
        if self.heads < 1 or self.width % self.heads:
            raise ValueError(f'width {self.width} not divisible by {self.heads} heads')
        for name in ('encoder_layers', 'decoder_layers', 'num_queries', 'num_classes', 'ffn_width'):
            if getattr(self, name) < 1:
                raise ValueError(f'{name} must be >= 1, got {getattr(self, name)}')
        if self.loss not in LOSS_TYPES:
            raise ValueError(f'loss must be one of {LOSS_TYPES}, got {self.loss!r}')

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out['backbone_widths'] = list(self.backbone_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> 'ModelConfig':
        return cls(**data)


class Detector(Module):
    """Base detector (backbone, transformer, queries, heads) and glimpse stages.

    Each component draws its initial weights from its own generator seeded
    by (seed, component), so a model with no glimpse stages initializes its
    base detector exactly like one with three.
    """

    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        c, g = config, config.glimpse

        def rng(k: int) -> np.random.Generator:
            return np.random.default_rng([c.seed, k])

        self.backbone = Backbone(c.width, c.backbone_widths, c.stem_width, rng(0))
        self.transformer = Transformer(c.width, c.heads, c.ffn_width, c.encoder_layers,
                                       c.decoder_layers, rng(1))
        self.queries = QueryEmbedding(c.num_queries, c.width, rng(2))
        self.heads = PredictionHeads(c.width, c.num_classes, rng(3))
        self.glimpse = RecurrentGlimpse(c.width, c.heads, c.ffn_width, c.num_classes, g,
                                        [rng(10 + i) for i in range(g.n_stages)])

    def __call__(self, image: Tensor, use_rego: bool = True) -> list[StageState]:
        return run_rego(image, self, use_rego)


def run_rego(image: Tensor, model: Detector, use_rego: bool = True) -> list[StageState]:
    """Run the base detector and, when `use_rego`, every glimpse stage.

    Returns one state per stage, stage 0 first. Stage 0 carries the
    auxiliary detections of the earlier base decoder layers.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    features = model.backbone(image)
    base = detr_forward(model.transformer, features, model.queries, model.heads)
    states = [StageState(base.h_dec, base.detection, 0, aux=base.aux, attention=base.trace)]
    if use_rego:
        states.extend(model.glimpse(states[0], features))
    return states


def supervised_outputs(states: list[StageState]) -> list[DetectionSet]:
    """Every detection set that receives the set loss: auxiliary, then one per stage.
    """
    return [*states[0].aux, *(s.detection for s in states)]


def save_checkpoint(model: Detector, directory: str | Path) -> Path:
    """Write manifest.json and one tensor file per parameter under `directory`.
    """
    directory = Path(directory)
    tensors = directory / 'tensors'
    tensors.mkdir(parents=True, exist_ok=True)
    names = []
    for name, p in model.named_parameters():
        save_tensor(tensors / f'{name}.bin', p)
        names.append(name)
    manifest = {'format': CHECKPOINT_FORMAT, 'model': model.config.to_dict(), 'parameters': names}
    path = directory / 'manifest.json'
    path.write_text(json.dumps(manifest, indent=2))
    logger.info(f'Saved {len(names)} tensors to {directory}')
    return path


def load_checkpoint(directory: str | Path) -> Detector:
    """Rebuild a `Detector` from a directory written by `save_checkpoint`.
    """
    directory = Path(directory)
    path = directory / 'manifest.json'
    if not path.exists():
        raise ManifestError(f'{path}: no checkpoint manifest')
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f'{path}: malformed manifest: {exc}') from exc
    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise ManifestError(f'{path}: unsupported format {manifest.get("format")!r}')
    try:
        model = Detector(ModelConfig.from_dict(manifest['model']))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f'{path}: invalid model config: {exc}') from exc
    state = {}
    for name in manifest.get('parameters', []):
        file = directory / 'tensors' / f'{name}.bin'
        if not file.exists():
            raise ManifestError(f'{path}: missing tensor file {file.name}')
        state[name] = load_tensor(file).data
    try:
        model.load_state_dict(state)
    except (KeyError, DimensionError) as exc:
        raise ManifestError(f'{path}: {exc}') from exc
    return model
