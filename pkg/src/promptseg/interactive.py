"""Drive a click-based interactive segmenter with sampled pseudo-clicks.

An interactive model is any object with::

    load(weights_path)          # optional weights
    set_image(image)
    click((x, y), positive)     # positive=True for foreground
    result() -> soft mask in [0, 1], shape (h, w)
    reset()

``MockInteractiveSegmenter`` grows colour-homogeneous regions from clicks and
stands in for a real model in tests.
"""
from __future__ import annotations

import importlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import BackendUnavailableError, LowConfidenceError, ShapeMismatchError
from .fusion import DEFAULT_TAU, MultiClassRelevance, SegmentationMask, sample

log = logging.getLogger(__name__)

DEFAULT_CLICKS = 3


@dataclass
class ClickPlan:
    category: int
    positives: list[tuple[int, int]]
    negatives: list[tuple[int, int]]
    seed: int

    def __post_init__(self):
        if set(self.positives) & set(self.negatives):
            raise ValueError("positive and negative clicks must be disjoint")

    def to_dict(self) -> dict:
        return {"category": self.category, "seed": self.seed,
                "positives": [list(p) for p in self.positives],
                "negatives": [list(p) for p in self.negatives]}


@dataclass
class BinaryMask:
    mask: np.ndarray
    confidence: np.ndarray
    transcript: list[dict] = field(default_factory=list)

    @classmethod
    def from_confidence(cls, confidence, transcript=None) -> "BinaryMask":
        conf = np.clip(np.asarray(confidence, dtype=np.float64), 0.0, 1.0)
        return cls(conf >= 0.5, conf, transcript or [])


def _pixels(batch) -> list[tuple[int, int]]:
    return [(int(x), int(y)) for x, y in zip(batch.xs, batch.ys)]


def plan_clicks(relevance: MultiClassRelevance, c: int, n_pos: int = DEFAULT_CLICKS,
                n_neg: int | None = None, tau: float = DEFAULT_TAU, seed: int = 0,
                max_retries: int = 20) -> ClickPlan:
    """Sample positive clicks from channel ``c`` and negatives from background."""
    if n_pos < 1:
        raise ValueError("need at least one positive click")
    if not 1 <= c <= relevance.k:
        raise IndexError(f"category {c} out of range 1..{relevance.k}")
    if not relevance.channel(c).any():
        raise LowConfidenceError(
            f"channel {c} ({relevance.categories[c - 1]!r}) is all-zero; use the low-confidence path"
        )
    n_neg = n_pos if n_neg is None else n_neg
    rng = np.random.default_rng(seed)
    positives = _pixels(sample(relevance, c, n_pos, tau, rng))
    taken = set(positives)
    negatives: list[tuple[int, int]] = []
    if n_neg > 0:
        negatives = _pixels(sample(relevance, 0, n_neg, tau, rng))
        for _ in range(max_retries):
            clash = [i for i, p in enumerate(negatives) if p in taken]
            if not clash:
                break
            fresh = _pixels(sample(relevance, 0, len(clash), tau, rng))
            for i, p in zip(clash, fresh):
                negatives[i] = p
        dropped = [p for p in negatives if p in taken]
        if dropped:
            log.debug("dropping %d negative clicks that kept colliding", len(dropped))
            negatives = [p for p in negatives if p not in taken]
    return ClickPlan(c, positives, negatives, seed)


def segment_category(model, image, plan: ClickPlan) -> BinaryMask:
    """Reset the model, submit positives then negatives, and return its final output."""
    if not plan.positives:
        raise ValueError("click plan has no positive clicks")
    model.reset()
    model.set_image(image)
    transcript = []
    for clicks, positive in ((plan.positives, True), (plan.negatives, False)):
        for x, y in clicks:
            model.click((x, y), positive)
            transcript.append({"category": plan.category, "x": x, "y": y, "positive": positive})
    soft = np.asarray(model.result(), dtype=np.float64)
    if soft.shape != np.asarray(image).shape[:2]:
        raise ShapeMismatchError(f"model returned {soft.shape} for image {np.asarray(image).shape[:2]}")
    return BinaryMask.from_confidence(soft, transcript)


def merge(masks: Sequence[tuple[int, BinaryMask]], categories: Sequence[str] = ()) -> SegmentationMask:
    """Label each pixel with the most confident covering mask; ties go to the lower index."""
    if not masks:
        raise ValueError("nothing to merge")
    masks = sorted(masks, key=lambda cm: cm[0])
    shapes = {m.mask.shape for _, m in masks}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"masks disagree on shape: {shapes}")
    conf = np.stack([np.where(m.mask, m.confidence, -np.inf) for _, m in masks])
    best = np.argmax(conf, axis=0)
    covered = np.isfinite(conf.max(axis=0))
    ids = np.array([c for c, _ in masks])
    labels = np.where(covered, ids[best], 0)
    return SegmentationMask(labels.astype(np.uint8), list(categories))


def split_mask(mask: SegmentationMask) -> list[tuple[int, BinaryMask]]:
    """Per-label binary masks with unit confidence, the inverse of ``merge``."""
    return [(int(c), BinaryMask(mask.labels == c, (mask.labels == c).astype(np.float64)))
            for c in np.unique(mask.labels) if c != 0]


def write_transcript(path, transcript: list[dict]) -> None:
    with open(path, "w") as fh:
        json.dump(transcript, fh, indent=1)


# -- models -------------------------------------------------------------------

class MockInteractiveSegmenter:
    """Region growing from clicks over colour-connected components.

    Each positive click grows the connected region of pixels within
    ``tolerance`` (Euclidean RGB distance) of the clicked colour.  A region
    that contains a negative click is blocked.  Confidence inside a grown
    region is ``0.5 + 0.5 * share of positive clicks that landed in it``.
    """

    def __init__(self, tolerance: float = 0.15):
        self.tolerance = tolerance
        self.image = None
        self.reset()

    def load(self, weights_path=None):
        return self

    def set_image(self, image):
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[..., None]
        self.image = img / 255.0 if img.max() > 1.0 else img

    def reset(self):
        self.clicks: list[tuple[tuple[int, int], bool]] = []

    def click(self, pixel, positive: bool):
        if self.image is None:
            raise RuntimeError("set_image must be called before clicking")
        x, y = pixel
        h, w = self.image.shape[:2]
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"click {pixel} outside image {w}x{h}")
        self.clicks.append(((int(x), int(y)), bool(positive)))

    def _region(self, x, y):
        dist = np.linalg.norm(self.image - self.image[y, x], axis=-1)
        comps, _ = ndimage.label(dist <= self.tolerance)
        return comps == comps[y, x]

    def result(self) -> np.ndarray:
        h, w = self.image.shape[:2]
        pos = [p for p, s in self.clicks if s]
        neg = [p for p, s in self.clicks if not s]
        conf = np.zeros((h, w))
        if not pos:
            return conf
        regions: list[tuple[np.ndarray, int]] = []
        for x, y in pos:
            for i, (r, n) in enumerate(regions):
                if r[y, x]:
                    regions[i] = (r, n + 1)
                    break
            else:
                regions.append((self._region(x, y), 1))
        for r, n in regions:
            if any(r[y, x] for x, y in neg):
                continue
            conf = np.maximum(conf, np.where(r, 0.5 + 0.5 * n / len(pos), 0.0))
        return conf


class ExternalInteractiveModel:
    """Adapter for a real interactive model given as ``"package.module:factory"``."""

    def __init__(self, factory: str, weights_path: str | None = None, **kwargs):
        try:
            mod, _, attr = factory.partition(":")
            self._model = getattr(importlib.import_module(mod), attr)(**kwargs)
            if weights_path is not None:
                self._model.load(weights_path)
        except Exception as exc:  # noqa: BLE001 - any import or load failure
            raise BackendUnavailableError(f"cannot load interactive model {factory!r}: {exc}") from exc

    def load(self, weights_path):
        self._model.load(weights_path)
        return self

    def set_image(self, image):
        self._model.set_image(image)

    def click(self, pixel, positive):
        self._model.click(pixel, positive)

    def result(self):
        return self._model.result()

    def reset(self):
        self._model.reset()


_MODELS: dict[str, Callable] = {
    "mock": MockInteractiveSegmenter,
    "external": ExternalInteractiveModel,
}


def load_interactive(name: str, **options):
    try:
        factory = _MODELS[name]
    except KeyError:
        raise BackendUnavailableError(
            f"unknown interactive model {name!r}; available: {', '.join(sorted(_MODELS))}"
        ) from None
    return factory(**options)


def segment_interactive(model, image, relevance: MultiClassRelevance, n_pos: int = DEFAULT_CLICKS,
                        n_neg: int | None = None, tau: float = DEFAULT_TAU,
                        seed: int = 0) -> tuple[SegmentationMask, list[dict]]:
    """Segment every category with usable relevance and merge the results."""
    rng = np.random.default_rng(seed)
    masks, transcript = [], []
    for c in range(1, relevance.k + 1):
        plan_seed = int(rng.integers(2**31))
        if relevance.low_confidence[c - 1] or not relevance.channel(c).any():
            log.info("skipping low-confidence category %r", relevance.categories[c - 1])
            continue
        plan = plan_clicks(relevance, c, n_pos, n_neg, tau, plan_seed)
        bm = segment_category(model, image, plan)
        masks.append((c, bm))
        transcript.extend(bm.transcript)
    if not masks:
        return SegmentationMask(np.zeros(relevance.shape, np.uint8), list(relevance.categories)), []
    return merge(masks, relevance.categories), transcript
