"""Synthetic shapes benchmark: anti-aliased triangles, rectangles and discs on noise.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from rego.base import DimensionError, get_settings
from rego.boxes import BoxSet
from rego.matching import GroundTruth
from rego.tensor import Tensor, load_tensor, save_tensor
from tqdm import tqdm

logger = logging.getLogger(__name__)

CLASSES = ('triangle', 'rectangle', 'disc')
MAX_OBJECTS = 5


@dataclass
class SyntheticScene:
    """One rendered image (3 x H x W, values in [0, 1]) with its ground truth.
    """

    image: Tensor
    gt: GroundTruth
    seed: int
    index: int = 0


def _coverage(signed_distance: np.ndarray) -> np.ndarray:
    """Pixel coverage from a signed distance in pixels; one-pixel soft edge.
    """
    return np.clip(0.5 - signed_distance, 0.0, 1.0)


def _edge_distance(px: np.ndarray, py: np.ndarray, a: tuple[float, float],
                   b: tuple[float, float], inside: tuple[float, float]) -> np.ndarray:
    nx, ny = b[1] - a[1], a[0] - b[0]
    norm = np.hypot(nx, ny)
    nx, ny = nx / norm, ny / norm
    if nx * (inside[0] - a[0]) + ny * (inside[1] - a[1]) > 0:
        nx, ny = -nx, -ny
    return nx * (px - a[0]) + ny * (py - a[1])


def _render(label: int, box: np.ndarray, px: np.ndarray, py: np.ndarray,
            h: int, w: int) -> np.ndarray:
    cx, cy, bw, bh = box
    x0, x1 = (cx - bw / 2) * w, (cx + bw / 2) * w
    y0, y1 = (cy - bh / 2) * h, (cy + bh / 2) * h
    if label == 1:
        sd = np.maximum(np.abs(px - cx * w) - bw * w / 2, np.abs(py - cy * h) - bh * h / 2)
    elif label == 2:
        sd = np.hypot(px - cx * w, py - cy * h) - bw * w / 2
    else:
        apex, left, right = (cx * w, y0), (x0, y1), (x1, y1)
        centroid = ((apex[0] + left[0] + right[0]) / 3, (apex[1] + left[1] + right[1]) / 3)
        sd = np.maximum.reduce([
            _edge_distance(px, py, apex, left, centroid),
            _edge_distance(px, py, left, right, centroid),
            _edge_distance(px, py, right, apex, centroid),
            ])
    return _coverage(sd)


def generate_scene(seed: int, index: int, h: int, w: int) -> SyntheticScene:
    """Render scene `index` of the dataset drawn with `seed`.

    The scene depends only on (seed, index, h, w).
    """
    rng = np.random.default_rng([seed, index])
    background = rng.uniform(0.0, 0.3, size=3)
    image = background[:, None, None] + rng.normal(0.0, 0.03, size=(3, h, w))
    py, px = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    side = min(h, w)
    boxes, labels = [], []
    for _ in range(rng.integers(1, MAX_OBJECTS + 1)):
        label = int(rng.integers(0, len(CLASSES)))
        if label == 2:
            diameter = rng.uniform(0.15, 0.45) * side
            bw, bh = diameter / w, diameter / h
        else:
            bw, bh = rng.uniform(0.15, 0.45, size=2)
        cx = rng.uniform(bw / 2, 1 - bw / 2)
        cy = rng.uniform(bh / 2, 1 - bh / 2)
        color = rng.uniform(0.4, 1.0, size=3)
        box = np.array([cx, cy, bw, bh])
        alpha = _render(label, box, px, py, h, w)
        image = image * (1 - alpha) + color[:, None, None] * alpha
        boxes.append(box)
        labels.append(label)
    gt = GroundTruth(BoxSet(np.array(boxes)), np.array(labels))
    return SyntheticScene(Tensor(np.clip(image, 0.0, 1.0)), gt, seed, index)


def generate_dataset(n: int, seed: int, h: int = 64, w: int = 64,
                     workers: int | None = None) -> list[SyntheticScene]:
    """Render `n` scenes, optionally across a thread pool; output order is by index.
    """
    if h % 32 or w % 32:
        raise DimensionError(f'image extents {h}x{w} must be divisible by 32')
    if n < 0:
        raise ValueError(f'scene count must be >= 0, got {n}')
    workers = workers or get_settings()['workers']
    desc = f'Generating {n} scenes (seed {seed})'
    if workers <= 1:
        scenes = [generate_scene(seed, i, h, w) for i in tqdm(range(n), desc=desc, leave=False)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            jobs = pool.map(lambda i: generate_scene(seed, i, h, w), range(n))
            scenes = list(tqdm(jobs, total=n, desc=desc, leave=False))
    logger.info(f'Generated {n} scenes of {h}x{w} with seed {seed}')
    return scenes


def save_dataset(scenes: list[SyntheticScene], directory: str | Path, split: str) -> Path:
    """Write one tensor file per image and annotations.json under directory/split.
    """
    root = Path(directory) / split
    root.mkdir(parents=True, exist_ok=True)
    annotations = {}
    for scene in scenes:
        key = f'{scene.index:05d}'
        save_tensor(root / f'{key}.bin', scene.image)
        annotations[key] = [{'bbox': [float(v) for v in box], 'label': int(label)}
                            for box, label in zip(scene.gt.boxes.boxes, scene.gt.labels)]
    (root / 'annotations.json').write_text(json.dumps(annotations, indent=1))
    (root / 'meta.json').write_text(json.dumps({'seed': scenes[0].seed if scenes else 0,
                                                'count': len(scenes)}))
    logger.info(f'Saved {len(scenes)} scenes to {root}')
    return root


def load_dataset(directory: str | Path, split: str) -> list[SyntheticScene]:
    """Read a split written by `save_dataset`, in image-id order.
    """
    root = Path(directory) / split
    path = root / 'annotations.json'
    if not path.exists():
        raise LookupError(f'{path}: no annotation file')
    annotations = json.loads(path.read_text())
    meta = root / 'meta.json'
    seed = json.loads(meta.read_text()).get('seed', 0) if meta.exists() else 0
    scenes = []
    for key in sorted(annotations):
        file = root / f'{key}.bin'
        if not file.exists():
            raise LookupError(f'{file}: image listed in annotations is missing')
        objects = annotations[key]
        gt = GroundTruth(BoxSet(np.array([o['bbox'] for o in objects]).reshape(-1, 4)),
                         np.array([o['label'] for o in objects], dtype=np.int64))
        scenes.append(SyntheticScene(load_tensor(file), gt, seed, int(key)))
    return scenes
