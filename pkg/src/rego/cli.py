"""Command-line entry point: `rego <verb> [--config FILE] [--key value ...]`.

Every option that shapes a run is also accepted as `key = value` in the
config file; flags override the file. Failures print one JSON line to stderr.
"""
import argparse
import json
import logging
import sys
from collections.abc import Callable
from dataclasses import replace
from pathlib import Path
from typing import Any

from rego.base import ManifestError, configure, get_settings
from rego.data import save_dataset
from rego.evaluate import iou_histogram
from rego.flops import count_flops
from rego.glimpse import GlimpseConfig, extract_relations
from rego.matching import CostWeights
from rego.model import Detector, ModelConfig, load_checkpoint, run_rego
from rego.train import RunRecord, TrainConfig, ablate, emit_curves, evaluate
from rego.train import predict, scenes_for, train

logger = logging.getLogger(__name__)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).replace(',', ' ').split()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).replace(',', ' ').split()]


def _pair(text: str) -> tuple[int, int]:
    values = _int_list(str(text).lower().replace('x', ' '))
    if len(values) == 1:
        return values[0], values[0]
    if len(values) != 2:
        raise ValueError(f'expected HxW, got {text!r}')
    return values[0], values[1]


def _bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in {'1', 'true', 'yes', 'on'}:
        return True
    if value in {'0', 'false', 'no', 'off'}:
        return False
    raise ValueError(f'expected a boolean, got {text!r}')


def _optional_int(text: str) -> int | None:
    return None if str(text).strip().lower() in {'', 'none'} else int(text)


# key -> (config section, field name, parser)
CONFIG_KEYS: dict[str, tuple[str, str, Callable[[str], Any]]] = {
    'epochs': ('train', 'epochs', int),
    'batch_size': ('train', 'batch_size', int),
    'lr': ('train', 'lr', float),
    'lr_drop': ('train', 'lr_drop', _int_list),
    'lr_drop_factor': ('train', 'lr_drop_factor', float),
    'weight_decay': ('train', 'weight_decay', float),
    'clip_norm': ('train', 'clip_norm', float),
    'eos_coef': ('train', 'eos_coef', float),
    'seed': ('train', 'seed', int),
    'data_seed': ('train', 'data_seed', int),
    'n_train': ('train', 'n_train', int),
    'n_val': ('train', 'n_val', int),
    'image_size': ('train', 'image_size', _pair),
    'datadir': ('train', 'datadir', str),
    'rundir': ('train', 'rundir', str),
    'width': ('model', 'width', int),
    'heads': ('model', 'heads', int),
    'encoder_layers': ('model', 'encoder_layers', int),
    'decoder_layers': ('model', 'decoder_layers', int),
    'num_queries': ('model', 'num_queries', int),
    'num_classes': ('model', 'num_classes', int),
    'ffn_width': ('model', 'ffn_width', int),
    'backbone_widths': ('model', 'backbone_widths', _int_list),
    'stem_width': ('model', 'stem_width', int),
    'loss': ('model', 'loss', str),
    'n_stages': ('glimpse', 'n_stages', int),
    'alpha': ('glimpse', 'alpha', _float_list),
    'roi_window': ('glimpse', 'roi_window', int),
    'glimpse_layers': ('glimpse', 'decoder_layers', int),
    'scale_multiplier': ('glimpse', 'scale_multiplier', float),
    'alpha_mode': ('glimpse', 'alpha_mode', str),
    'disentangled': ('glimpse', 'disentangled', _bool),
    'query': ('glimpse', 'query', str),
    'level': ('glimpse', 'level', _optional_int),
    'cost_cls': ('cost', 'cls', float),
    'cost_l1': ('cost', 'l1', float),
    'cost_giou': ('cost', 'giou', float),
    }


def load_config_file(path: str | Path) -> dict[str, str]:
    """Read `key = value` lines; '#' starts a comment, blank lines are skipped.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ValueError(f'{path}:{lineno}: expected key = value, got {raw.strip()!r}')
        key, value = (part.strip() for part in line.split('=', 1))
        key = key.replace('-', '_')
        if key not in CONFIG_KEYS:
            raise ValueError(f'{path}:{lineno}: unknown key {key!r}')
        values[key] = value
    return values


def build_train_config(values: dict[str, Any]) -> TrainConfig:
    """Assemble a TrainConfig from flat key/value pairs; strings are parsed per key.

    The training seed also seeds model initialization.
    """
    sections: dict[str, dict[str, Any]] = {'train': {}, 'model': {}, 'glimpse': {}, 'cost': {}}
    for key, value in values.items():
        if key not in CONFIG_KEYS:
            raise ValueError(f'unknown config key {key!r}')
        section, name, parse = CONFIG_KEYS[key]
        sections[section][name] = parse(value) if isinstance(value, str) else value
    train_kw = sections['train']
    glimpse = GlimpseConfig(**sections['glimpse'])
    model = ModelConfig(**sections['model'], glimpse=glimpse, seed=train_kw.get('seed', 0))
    return TrainConfig(**train_kw, model=model, cost=CostWeights(**sections['cost']))


def _explicit_values(args: argparse.Namespace) -> dict[str, Any]:
    values: dict[str, Any] = load_config_file(args.config) if args.config else {}
    values.update({k: v for k, v in vars(args).items() if k in CONFIG_KEYS})
    return values


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    values = _explicit_values(args)
    settings = get_settings()
    values.setdefault('rundir', settings['rundir'])
    values.setdefault('datadir', settings['datadir'])
    return build_train_config(values)


def _emit(payload: Any) -> None:
    print(json.dumps(payload))


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    counts = {}
    for split in ('train', 'val'):
        scenes = scenes_for(replace(cfg, datadir=None), split)
        save_dataset(scenes, cfg.datadir, split)
        counts[split] = len(scenes)
    _emit({'datadir': cfg.datadir, **counts})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    record, _ = train(cfg)
    _emit({'rundir': cfg.rundir, 'epochs': len(record.epochs), **record.final.as_dict()})
    return 0


def _checkpoint(args: argparse.Namespace, cfg: TrainConfig) -> Path:
    return Path(args.checkpoint or cfg.rundir)


def _load_model(args: argparse.Namespace, cfg: TrainConfig) -> tuple[Path, Detector]:
    """Load the checkpoint and reject model options that disagree with its manifest.
    """
    checkpoint = _checkpoint(args, cfg)
    model = load_checkpoint(checkpoint)
    sections = {'model': model.config, 'glimpse': model.config.glimpse}
    for key in _explicit_values(args):
        section, name, _ = CONFIG_KEYS[key]
        if section not in sections:
            continue
        wanted = getattr(cfg.model if section == 'model' else cfg.model.glimpse, name)
        found = getattr(sections[section], name)
        if isinstance(found, tuple):
            wanted, found = list(wanted), list(found)
        if wanted != found:
            raise ManifestError(f'{checkpoint}: {key} is {found!r} in the manifest, requested {wanted!r}')
    return checkpoint, model


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    _, model = _load_model(args, cfg)
    reports = evaluate(model, scenes_for(cfg, args.split), use_rego=not args.no_rego)
    _emit([r.as_dict() for r in reports])
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    values = _float_list(args.values) if args.values else None
    rows = ablate(args.axis, cfg, values, disentangled=cfg.model.glimpse.disentangled)
    _emit([{args.axis: r.value, 'alpha': r.alpha, **r.report.as_dict()} for r in rows])
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    report = count_flops(cfg.model, cfg.image_size, args.batch)
    _emit({'total': report.total, 'rego_overhead': report.rego_overhead,
           'modules': report.by_module()})
    return 0


def cmd_curves(args: argparse.Namespace) -> int:
    records = {}
    for item in args.record:
        label, _, path = item.rpartition('=')
        path = Path(path)
        if not path.exists():
            raise LookupError(f'{path}: no run record')
        records[label or path.parent.name] = RunRecord.from_dict(json.loads(path.read_text()))
    csv_path, json_path = emit_curves(records, args.out)
    _emit({'csv': str(csv_path), 'json': str(json_path)})
    return 0


def cmd_relations(args: argparse.Namespace) -> int:
    """Write relations.json: a flat array of [query index, source index, weight] triples.
    """
    cfg = _config_from_args(args)
    checkpoint, model = _load_model(args, cfg)
    scenes = scenes_for(cfg, args.split)
    if not 0 <= args.image < len(scenes):
        raise ValueError(f'image {args.image} outside split of {len(scenes)}')
    states = run_rego(scenes[args.image].image, model)
    stage = states[args.stage if args.stage is not None else -1]
    relations = extract_relations(stage, args.top_k)
    triples = [[i, j, w] for i, row in enumerate(relations) for j, w in row]
    path = checkpoint / 'relations.json'
    path.write_text(json.dumps(triples))
    _emit({'relations': str(path), 'stage': stage.stage_index, 'image': args.image})
    return 0


def cmd_histogram(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    checkpoint, model = _load_model(args, cfg)
    scenes = scenes_for(cfg, args.split)
    bins = _float_list(args.bins)
    counts = iou_histogram(predict(model, scenes, loss=model.config.loss),
                           [s.gt for s in scenes], bins, min_score=args.min_score)
    path = checkpoint / 'histogram.json'
    path.write_text(json.dumps({'bins': bins, 'counts': counts}))
    _emit({'histogram': str(path), 'counts': counts})
    return 0


def _config_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--config', help='key = value file; flags override it')
    for key, (_, _, parse) in CONFIG_KEYS.items():
        flag = f'--{key.replace("_", "-")}'
        if parse is _bool:
            parent.add_argument(flag, dest=key, action='store_const', const=True,
                                default=argparse.SUPPRESS)
        else:
            parent.add_argument(flag, dest=key, type=parse, default=argparse.SUPPRESS)
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='rego', description='Recurrent glimpse detection toolkit.')
    parser.add_argument('--log-level', default=None, help='logging level (default from settings)')
    sub = parser.add_subparsers(dest='verb', required=True)
    options = _config_options()

    def verb(name: str, handler: Callable[[argparse.Namespace], int], help: str,
             config: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, parents=[options] if config else [])
        p.set_defaults(handler=handler)
        return p

    verb('gen-data', cmd_gen_data, 'render the train and val splits to --datadir')
    verb('train', cmd_train, 'train a detector; writes the run directory')
    p = verb('eval', cmd_eval, 'evaluate a checkpoint per stage')
    p.add_argument('--checkpoint')
    p.add_argument('--split', default='val')
    p.add_argument('--no-rego', action='store_true', help='run stage 0 only')
    p = verb('ablate', cmd_ablate, 'train one model per stage count or glimpse scale')
    p.add_argument('--axis', choices=('stages', 'scale'), required=True)
    p.add_argument('--values', help='comma separated settings (default 0..4 or 1,1.5,2)')
    p = verb('flops', cmd_flops, 'analytic multiply-add counts')
    p.add_argument('--batch', type=int, default=1)
    p = verb('curves', cmd_curves, 'epoch-vs-AP series from run records', config=False)
    p.add_argument('record', nargs='+', help='[label=]path/to/record.json')
    p.add_argument('--out', default='.')
    p = verb('relations', cmd_relations, 'top-k glimpse attention partners per box')
    p.add_argument('--checkpoint')
    p.add_argument('--split', default='val')
    p.add_argument('--image', type=int, default=0)
    p.add_argument('--stage', type=int, default=None)
    p.add_argument('--top-k', dest='top_k', type=int, default=5)
    p = verb('histogram', cmd_histogram, 'IoU histogram of correct detections per stage')
    p.add_argument('--checkpoint')
    p.add_argument('--split', default='val')
    p.add_argument('--bins', default='0.5,0.6,0.7,0.8,0.9,1.0')
    p.add_argument('--min-score', dest='min_score', type=float, default=0.0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        configure(log_level=args.log_level)
    logging.basicConfig(level=get_settings()['log_level'],
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return args.handler(args)
    except Exception as exc:
        logger.exception(f'{args.verb} failed')
        print(json.dumps({'error': type(exc).__name__, 'message': str(exc)}), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
