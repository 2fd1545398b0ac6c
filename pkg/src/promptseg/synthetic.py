"""Procedural multi-object scenes with exact ground truth.

The bundled synthetic dataset is ten of these, generated from fixed seeds so
every install sees identical pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VOCAB = ("dog", "car", "chair", "bottle", "sheep", "horse", "plant", "train", "sofa", "cow")
PALETTE = np.array([
    [0.85, 0.20, 0.15], [0.15, 0.35, 0.85], [0.95, 0.80, 0.10], [0.20, 0.70, 0.25],
    [0.75, 0.30, 0.80], [0.10, 0.75, 0.75], [0.95, 0.55, 0.15], [0.45, 0.25, 0.10],
])

# Mock backend settings used with the synthetic dataset: a coarse 8x8 patch
# grid, blur and a shared leak term so whole-image views are visibly worse
# than crops and calibration has something to remove.
MOCK_OPTIONS = {"noise_sigma": 0.05, "blur_radius": 2.0, "grid": [8, 8], "leak": 0.3}
CROP_GRID = {"crop_size": 32, "stride": 8, "gate_threshold": 0.3}


@dataclass
class SyntheticScene:
    image: np.ndarray        # (h, w, 3) float32 in [0, 1]
    labels: np.ndarray       # (h, w) uint8, 0 background, i -> categories[i-1]
    categories: list[str]

    def scene(self) -> list[tuple[str, np.ndarray]]:
        return [(c, self.labels == i + 1) for i, c in enumerate(self.categories)]


def _shape_mask(rng, h, w, occupied):
    for _ in range(200):
        kind = rng.choice(["ellipse", "rect"])
        ry, rx = rng.integers(h // 8, h // 4, endpoint=True), rng.integers(w // 8, w // 4, endpoint=True)
        cy, cx = rng.integers(ry + 1, h - ry - 1), rng.integers(rx + 1, w - rx - 1)
        yy, xx = np.mgrid[0:h, 0:w]
        if kind == "ellipse":
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            m = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        if not (m & occupied).any():
            return m
    raise RuntimeError("could not place a non-overlapping object")


def make_scene(seed: int, size: int = 64, n_categories: int | None = None,
               pixel_noise: float = 0.02) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    h = w = size
    k = n_categories or int(rng.integers(2, 4))
    cats = [str(c) for c in rng.choice(VOCAB, size=k, replace=False)]
    colors = PALETTE[rng.choice(len(PALETTE), size=k + 1, replace=False)]

    yy, xx = np.mgrid[0:h, 0:w] / size
    base = colors[0] * 0.5 + 0.25
    image = base[None, None, :] + 0.15 * (yy[..., None] - 0.5) + 0.1 * (xx[..., None] - 0.5)
    labels = np.zeros((h, w), dtype=np.uint8)
    for i in range(k):
        m = _shape_mask(rng, h, w, labels > 0)
        labels[m] = i + 1
        image[m] = colors[i + 1]
    image = image + rng.normal(0.0, pixel_noise, image.shape)
    return SyntheticScene(np.clip(image, 0, 1).astype(np.float32), labels, cats)


def synthetic_dataset(n: int = 10, size: int = 64, base_seed: int = 1000) -> list[SyntheticScene]:
    return [make_scene(base_seed + i, size) for i in range(n)]


def synthetic_config(**overrides):
    """Pipeline configuration matched to the synthetic scenes and the mock backend."""
    from .config import PipelineConfig

    base = {"backend": "mock", "backend_options": dict(MOCK_OPTIONS), "grid": dict(CROP_GRID)}
    base.update(overrides)
    return PipelineConfig.from_dict(base)
