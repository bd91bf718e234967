"""Transformer set-prediction detection with recurrent glimpse refinement, on numpy.
"""
from rego.base import DimensionError, GradientError, ManifestError, NonFiniteError
from rego.base import RegoError, configure, get_settings
from rego.boxes import BoxSet, giou, iou
from rego.data import SyntheticScene, generate_dataset
from rego.detr import DetectionSet, detr_forward
from rego.evaluate import EvalReport, evaluate_ap, iou_histogram
from rego.flops import count_flops
from rego.glimpse import GlimpseConfig, alpha_schedule, enlarge_rois, extract_relations
from rego.glimpse import roi_align, run_stage
from rego.matching import CostWeights, GroundTruth, compute_set_loss, hungarian
from rego.model import Detector, ModelConfig, load_checkpoint, run_rego, save_checkpoint
from rego.tensor import Tensor, backward
from rego.train import RunRecord, TrainConfig, ablate, emit_curves, evaluate, train

__all__ = [
    'configure',
    'get_settings',
    'RegoError',
    'DimensionError',
    'GradientError',
    'NonFiniteError',
    'ManifestError',
    'Tensor',
    'backward',
    'BoxSet',
    'iou',
    'giou',
    'DetectionSet',
    'detr_forward',
    'GroundTruth',
    'CostWeights',
    'hungarian',
    'compute_set_loss',
    'GlimpseConfig',
    'alpha_schedule',
    'enlarge_rois',
    'roi_align',
    'run_stage',
    'extract_relations',
    'ModelConfig',
    'Detector',
    'run_rego',
    'save_checkpoint',
    'load_checkpoint',
    'SyntheticScene',
    'generate_dataset',
    'EvalReport',
    'evaluate_ap',
    'iou_histogram',
    'TrainConfig',
    'RunRecord',
    'train',
    'evaluate',
    'ablate',
    'emit_curves',
    'count_flops',
    ]
