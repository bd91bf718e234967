"""Shared fixtures, markers, and env-var gating for tests.
"""
import os

import numpy as np
import pytest
from rego.boxes import BoxSet
from rego.detr import BackboneFeatures
from rego.glimpse import GlimpseConfig
from rego.matching import GroundTruth
from rego.model import Detector, ModelConfig
from rego.tensor import Tensor


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: training runs and acceptance analogs')


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless REGO_SLOW_TESTS env var is set.
    """
    if not os.environ.get('REGO_SLOW_TESTS'):
        skip = pytest.mark.skip(reason='REGO_SLOW_TESTS not set')
        for item in items:
            if 'slow' in item.keywords:
                item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def clean_settings():
    """Save and restore rego.base._settings.
    """
    import rego.base
    original = rego.base._settings.copy()
    yield rego.base._settings
    rego.base._settings.clear()
    rego.base._settings.update(original)


def tiny_config(n_stages: int = 2, **glimpse) -> ModelConfig:
    """A detector small enough to run a forward and backward pass in well under a second.
    """
    return ModelConfig(width=16, heads=2, encoder_layers=1, decoder_layers=2, num_queries=6,
                       num_classes=3, ffn_width=32, backbone_widths=(8, 8, 8, 8), stem_width=4,
                       glimpse=GlimpseConfig(n_stages=n_stages, roi_window=3, decoder_layers=1,
                                             **glimpse))


@pytest.fixture
def tiny_model():
    return Detector(tiny_config())


@pytest.fixture
def image(rng):
    return Tensor(rng.uniform(0, 1, size=(3, 64, 64)))


@pytest.fixture
def features(rng):
    """Random projected pyramid of width 4 for a 64x64 image.
    """
    projected = [Tensor(rng.normal(size=(4, s, s)), requires_grad=True) for s in (16, 8, 4, 2)]
    return BackboneFeatures(projected, projected, (64, 64))


@pytest.fixture
def gt_two():
    return GroundTruth(BoxSet([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.4]]), [0, 2])
