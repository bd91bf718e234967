"""Training loop, evaluation of checkpoints, ablation sweeps and convergence curves.
"""
import csv
import json
import logging
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from rego.base import ManifestError, NonFiniteError, get_settings
from rego.data import SyntheticScene, generate_dataset, load_dataset
from rego.evaluate import CSV_FIELDS, EvalReport, Predictions, evaluate_ap
from rego.glimpse import GlimpseConfig
from rego.matching import CostWeights, compute_set_loss
from rego.model import Detector, ModelConfig, load_checkpoint, run_rego, save_checkpoint
from rego.model import supervised_outputs
from rego.tensor import ComputationGraph, Tensor, backward
from tqdm import tqdm

logger = logging.getLogger(__name__)

CURVE_FIELDS = ('epoch', 'AP', 'AP50', 'AP75', 'loss', 'run')
METRIC_FIELDS = ('epoch', 'loss', *CSV_FIELDS)
ABLATION_AXES = ('stages', 'scale')


@dataclass
class TrainConfig:
    """Optimizer schedule, data sizes and the model to train.

    `lr_drop` lists the epochs (0-based) from which the learning rate is
    multiplied by another `lr_drop_factor`; it defaults to 80% of `epochs`.
    The default of 20 epochs over 500 scenes keeps a default-sized run under
    half an hour on one CPU (about 85 s per epoch at batch 8).
    """

    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    lr_drop: list[int] | None = None
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    eos_coef: float = 0.1
    seed: int = 0
    data_seed: int = 0
    n_train: int = 500
    n_val: int = 100
    image_size: tuple[int, int] = (64, 64)
    datadir: str | None = None
    rundir: str | None = None
    cost: CostWeights = field(default_factory=CostWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if isinstance(self.cost, dict):
            self.cost = CostWeights(**self.cost)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.epochs < 1:
            raise ValueError(f'epochs must be >= 1, got {self.epochs}')
        if self.batch_size < 1:
            raise ValueError(f'batch_size must be >= 1, got {self.batch_size}')
        for name in ('lr', 'lr_drop_factor', 'clip_norm'):
            if getattr(self, name) <= 0:
                raise ValueError(f'{name} must be positive, got {getattr(self, name)}')
        if self.weight_decay < 0:
            raise ValueError(f'weight_decay must be >= 0, got {self.weight_decay}')
        if self.n_train < 1 or self.n_val < 0:
            raise ValueError(f'need n_train >= 1 and n_val >= 0, got {self.n_train}, {self.n_val}')
        if self.lr_drop is None:
            self.lr_drop = [max(1, int(0.8 * self.epochs))]
        self.lr_drop = sorted(int(e) for e in self.lr_drop)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out['image_size'] = list(self.image_size)
        out['model']['backbone_widths'] = list(self.model.backbone_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> 'TrainConfig':
        return cls(**data)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(1 for e in cfg.lr_drop if epoch >= e)
    return cfg.lr * cfg.lr_drop_factor ** drops


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    stage_loss: list[float]
    reports: list[EvalReport]


@dataclass
class RunRecord:
    """Per-epoch losses and per-stage reports of one run, with its config.
    """

    config: dict[str, Any]
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_time: float = field(default=0.0, compare=False)

    @property
    def final(self) -> EvalReport:
        """Final-stage report of the last epoch.
        """
        return self.epochs[-1].reports[-1]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> 'RunRecord':
        epochs = [EpochRecord(e['epoch'], e['loss'], e['stage_loss'],
                              [EvalReport(**r) for r in e['reports']])
                  for e in data.get('epochs', [])]
        return cls(data.get('config', {}), epochs, data.get('wall_time', 0.0))

    def metric_rows(self) -> list[list[Any]]:
        return [[e.epoch, e.loss, *r.csv_row()] for e in self.epochs for r in e.reports]


class AdamW:
    """Adaptive moments with weight decay applied directly to the parameters.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4) -> None:
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            p.data *= 1 - self.lr * self.weight_decay
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most `max_norm`.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


def _check_finite(loss: Tensor, where: str) -> None:
    if np.isfinite(loss.item()):
        return
    op = None
    if get_settings()['nan_check'] and loss.node is not None:
        op = ComputationGraph(loss).first_nonfinite_op()
    raise NonFiniteError(f'non-finite loss {where}; first produced by {op or "unknown op"}', op=op)


def train_step(model: Detector, batch: Sequence[SyntheticScene], optimizer: AdamW,
               cfg: TrainConfig, where: str = '') -> tuple[float, list[float]]:
    """One optimizer update on `batch`; returns the mean loss and its per-stage parts.

    Every auxiliary and stage output receives the set loss. Gradients of
    each image are accumulated before clipping and the update.
    """
    model.zero_grad()
    n_stages = cfg.model.glimpse.n_stages + 1
    total, per_stage = 0.0, np.zeros(n_stages)
    for scene in batch:
        if not len(scene.gt):
            logger.warning(f'scene {scene.index} has no ground truth; background loss only')
        states = run_rego(scene.image, model)
        loss = compute_set_loss(supervised_outputs(states), scene.gt, cfg.cost,
                                cfg.model.loss, cfg.eos_coef)
        _check_finite(loss.total, where)
        backward(loss.total / len(batch), accumulate=True)
        total += loss.item() / len(batch)
        per_stage += np.array([s['total'] for s in loss.stages[-n_stages:]]) / len(batch)
    clip_grad_norm(model.parameters(), cfg.clip_norm)
    optimizer.step()
    return total, per_stage.tolist()


def scenes_for(cfg: TrainConfig, split: str) -> list[SyntheticScene]:
    """Load `split` from cfg.datadir when present, else generate it.
    """
    if cfg.datadir and (Path(cfg.datadir) / split / 'annotations.json').exists():
        return load_dataset(cfg.datadir, split)
    n, seed = (cfg.n_train, cfg.data_seed) if split == 'train' else (cfg.n_val, cfg.data_seed + 1)
    h, w = cfg.image_size
    return generate_dataset(n, seed, h, w)


def predict(model: Detector, scenes: Sequence[SyntheticScene], use_rego: bool = True,
            loss: str = 'ce') -> list[list[Predictions]]:
    """Per stage, per image predictions."""
    per_stage: list[list[Predictions]] = []
    for scene in scenes:
        states = run_rego(scene.image, model, use_rego)
        if not per_stage:
            per_stage = [[] for _ in states]
        for bucket, state in zip(per_stage, states):
            bucket.append(Predictions.from_detections(state.detection, loss))
    return per_stage


def evaluate_model(model: Detector, scenes: Sequence[SyntheticScene],
                   use_rego: bool = True) -> list[EvalReport]:
    if not scenes:
        n = model.config.glimpse.n_stages + 1 if use_rego else 1
        return [EvalReport(stage=i) for i in range(n)]
    gts = [s.gt for s in scenes]
    loss = model.config.loss
    return [evaluate_ap(preds, gts, loss, stage=i)
            for i, preds in enumerate(predict(model, scenes, use_rego, loss))]


def evaluate(checkpoint: str | Path | Detector, scenes: Sequence[SyntheticScene],
             use_rego: bool = True, expect: ModelConfig | None = None) -> list[EvalReport]:
    """One report per evaluated stage; the last is the headline.

    With use_rego=False only stage 0 of a glimpse-trained model is run.
    """
    model = checkpoint if isinstance(checkpoint, Detector) else load_checkpoint(checkpoint)
    if expect is not None and expect != model.config:
        raise ManifestError(f'checkpoint config {model.config} does not match {expect}')
    return evaluate_model(model, scenes, use_rego)


def write_run(record: RunRecord, model: Detector, rundir: str | Path) -> Path:
    """Write the checkpoint, record.json and metrics.csv under `rundir`.
    """
    rundir = Path(rundir)
    save_checkpoint(model, rundir)
    (rundir / 'record.json').write_text(json.dumps(record.to_dict(), indent=1))
    with (rundir / 'metrics.csv').open('w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_FIELDS)
        writer.writerows(record.metric_rows())
    logger.info(f'Wrote run to {rundir}')
    return rundir


def train(cfg: TrainConfig, train_scenes: Sequence[SyntheticScene] | None = None,
          val_scenes: Sequence[SyntheticScene] | None = None) -> tuple[RunRecord, Detector]:
    """Train a detector from scratch; evaluates every stage after each epoch.

    Shuffling is seeded by (seed, epoch), so a run is reproducible bit for bit.
    """
    train_scenes = list(train_scenes) if train_scenes is not None else scenes_for(cfg, 'train')
    val_scenes = list(val_scenes) if val_scenes is not None else scenes_for(cfg, 'val')
    model = Detector(cfg.model)
    logger.info(f'Built detector with {model.num_parameters()} parameters, '
                f'{cfg.model.glimpse.n_stages} glimpse stages')
    optimizer = AdamW(model.parameters(), cfg.lr, weight_decay=cfg.weight_decay)
    record = RunRecord(cfg.to_dict())
    start = time.perf_counter()
    for epoch in tqdm(range(cfg.epochs), desc='Training'):
        lr = lr_at(epoch, cfg)
        if lr != optimizer.lr:
            logger.debug(f'epoch {epoch}: learning rate {optimizer.lr} -> {lr}')
        optimizer.lr = lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_scenes))
        losses, stage_losses = [], []
        steps = range(0, len(order), cfg.batch_size)
        for step, lo in enumerate(tqdm(steps, desc=f'Epoch {epoch}', leave=False)):
            batch = [train_scenes[i] for i in order[lo:lo + cfg.batch_size]]
            try:
                loss, parts = train_step(model, batch, optimizer, cfg, f'at epoch {epoch} step {step}')
            except NonFiniteError:
                logger.exception(f'Training diverged at epoch {epoch} step {step}')
                raise
            losses.append(loss)
            stage_losses.append(parts)
        reports = evaluate_model(model, val_scenes)
        entry = EpochRecord(epoch, float(np.mean(losses)),
                            [float(v) for v in np.mean(stage_losses, axis=0)], reports)
        record.epochs.append(entry)
        logger.info(f'epoch {epoch}: loss={entry.loss:.4f} AP50={reports[-1].AP50:.3f}')
    record.wall_time = time.perf_counter() - start
    if cfg.rundir:
        write_run(record, model, cfg.rundir)
    return record, model


def overfit(cfg: TrainConfig, scene: SyntheticScene,
            steps: int = 300) -> tuple[list[float], Detector]:
    """Repeatedly fit one image at the base learning rate.

    Returns the loss per step and the fitted model.
    """
    model = Detector(cfg.model)
    optimizer = AdamW(model.parameters(), cfg.lr, weight_decay=cfg.weight_decay)
    losses = [train_step(model, [scene], optimizer, cfg, f'at overfit step {i}')[0]
              for i in range(steps)]
    return losses, model


@dataclass
class AblationRow:
    axis: str
    value: float
    alpha: list[float]
    report: EvalReport


def ablation_settings(axis: str, cfg: TrainConfig, values: Sequence[float] | None = None,
                      disentangled: bool = False) -> list[tuple[float, GlimpseConfig]]:
    """Glimpse configurations swept along `axis`.

    'stages' varies the stage count over 0..4 with the base schedule; 'scale'
    keeps the configured stage count and multiplies the schedule by 1, 1.5
    and 2. With `disentangled` every stage uses alpha equal to the multiplier.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f'ablation axis must be one of {ABLATION_AXES}, got {axis!r}')
    base = cfg.model.glimpse
    if axis == 'stages':
        values = list(range(5)) if values is None else [int(v) for v in values]
        if any(v < 0 for v in values):
            raise ValueError(f'stage counts must be >= 0, got {values}')
        pairs = [(v, v, base.scale_multiplier) for v in values]
    else:
        values = [1.0, 1.5, 2.0] if values is None else [float(v) for v in values]
        if any(v <= 0 for v in values):
            raise ValueError(f'scale multipliers must be positive, got {values}')
        pairs = [(v, base.n_stages, v) for v in values]
    out = []
    for value, n, scale in pairs:
        out.append((value, replace(base, n_stages=n, scale_multiplier=scale, alpha=None,
                                   disentangled=disentangled)))
    return out


def ablate(axis: str, cfg: TrainConfig, values: Sequence[float] | None = None,
           disentangled: bool = False, train_scenes: Sequence[SyntheticScene] | None = None,
           val_scenes: Sequence[SyntheticScene] | None = None) -> list[AblationRow]:
    """Train one model per setting with the shared seed; writes ablation.csv under cfg.rundir.
    """
    settings = ablation_settings(axis, cfg, values, disentangled)
    train_scenes = list(train_scenes) if train_scenes is not None else scenes_for(cfg, 'train')
    val_scenes = list(val_scenes) if val_scenes is not None else scenes_for(cfg, 'val')
    rows = []
    for value, glimpse in tqdm(settings, desc=f'Ablating {axis}'):
        rundir = str(Path(cfg.rundir) / f'{axis}-{value}') if cfg.rundir else None
        run_cfg = replace(cfg, model=replace(cfg.model, glimpse=glimpse), rundir=rundir)
        record, _ = train(run_cfg, train_scenes, val_scenes)
        rows.append(AblationRow(axis, value, list(glimpse.alpha), record.final))
        logger.info(f'{axis}={value} alpha={glimpse.alpha}: AP={record.final.AP:.3f}')
    if cfg.rundir:
        path = Path(cfg.rundir) / 'ablation.csv'
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow([axis, 'alpha', 'AP', 'AP50', 'AP75', 'AP_S', 'AP_M', 'AP_L'])
            for row in rows:
                r = row.report
                writer.writerow([row.value, ' '.join(str(a) for a in row.alpha),
                                 r.AP, r.AP50, r.AP75, r.AP_S, r.AP_M, r.AP_L])
    return rows


def emit_curves(records: dict[str, RunRecord], directory: str | Path) -> tuple[Path, Path]:
    """Write curves.csv (one labeled series per run) and curves.json for plotting.

    CSV columns: epoch, AP, AP50, AP75, loss, run; AP values are the final
    stage's. The JSON maps run label to column-wise lists of the same values.
    """
    if not records:
        raise ValueError('emit_curves: no run records')
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    series: dict[str, dict[str, list[float]]] = {}
    csv_path = directory / 'curves.csv'
    with csv_path.open('w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(CURVE_FIELDS)
        for label, record in records.items():
            cols = series.setdefault(label, {k: [] for k in CURVE_FIELDS[:-1]})
            for e in record.epochs:
                r = e.reports[-1]
                row = [e.epoch, r.AP, r.AP50, r.AP75, e.loss]
                writer.writerow([*row, label])
                for k, v in zip(CURVE_FIELDS, row):
                    cols[k].append(v)
    json_path = directory / 'curves.json'
    json_path.write_text(json.dumps(series, indent=1))
    return csv_path, json_path
