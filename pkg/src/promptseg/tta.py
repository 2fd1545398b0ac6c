"""Test-time augmentation of relevance maps.

Each view is an invertible image transform.  Relevance is computed on the
transformed image, calibrated against distractor prompts and mapped back to
the original pixel grid.  The crop view is a whole grid of overlapping crops
whose gated, calibrated maps are averaged per pixel into a single map.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .backends import (
    BackendDescriptor,
    PromptSet,
    RelevanceMap,
    ViewImage,
    check_image,
    identity_coords,
)
from .errors import NoSignalError, ShapeMismatchError

log = logging.getLogger(__name__)

VIEW_KINDS = ("identity", "hflip", "contrast", "crop")
CONTRAST_RANGE = (0.5, 1.5)
_EPS = 1e-12


@dataclass(frozen=True)
class CropGridSpec:
    crop_size: int = 224
    stride: int = 50
    gate_threshold: float = 0.3

    def __post_init__(self):
        if not 0 < self.stride <= self.crop_size:
            raise ValueError(f"need 0 < stride <= crop_size, got {self.stride}, {self.crop_size}")
        if not 0 <= self.gate_threshold < 1:
            raise ValueError(f"gate_threshold must be in [0, 1), got {self.gate_threshold}")

    def to_dict(self) -> dict:
        return {"crop_size": self.crop_size, "stride": self.stride,
                "gate_threshold": self.gate_threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "CropGridSpec":
        return cls(int(d["crop_size"]), int(d["stride"]), float(d["gate_threshold"]))


def crop_positions(length: int, size: int, stride: int) -> list[int]:
    """Start offsets along one axis; the last crop is clamped to end at the border."""
    if size >= length:
        return [0]
    pos = list(range(0, length - size + 1, stride))
    if pos[-1] != length - size:
        pos.append(length - size)
    return pos


@dataclass(frozen=True)
class ViewTransform:
    """One augmentation view of an image of shape ``source_shape``.

    ``params`` holds ``factor`` for contrast and ``x``, ``y``, ``size`` for crops.
    """

    kind: str
    source_shape: tuple[int, int]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in VIEW_KINDS:
            raise ValueError(f"unknown view kind {self.kind!r}")

    def _coords(self) -> np.ndarray:
        h, w = self.source_shape
        coords = identity_coords(h, w)
        if self.kind == "hflip":
            return coords[:, ::-1]
        if self.kind == "crop":
            x, y, s = self.params["x"], self.params["y"], self.params["size"]
            return coords[y:y + s, x:x + s]
        return coords

    def forward(self, image) -> ViewImage:
        image = check_image(image)
        if image.shape[:2] != tuple(self.source_shape):
            raise ShapeMismatchError(f"view built for {self.source_shape}, got {image.shape[:2]}")
        if self.kind == "identity":
            out = image
        elif self.kind == "hflip":
            out = image[:, ::-1]
        elif self.kind == "contrast":
            top = 255.0 if np.issubdtype(image.dtype, np.integer) else 1.0
            img = image.astype(np.float64)
            mean = img.mean()
            out = np.clip(mean + self.params["factor"] * (img - mean), 0.0, top).astype(image.dtype)
        else:
            x, y, s = self.params["x"], self.params["y"], self.params["size"]
            out = image[y:y + s, x:x + s]
        return ViewImage(np.ascontiguousarray(out), np.ascontiguousarray(self._coords()))

    def backward_relevance(self, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map a view-space relevance field back to the source grid.

        Returns ``(scores, valid)``; pixels the view never saw are 0 and invalid.
        """
        scores = np.asarray(scores)
        h, w = self.source_shape
        if self.kind == "crop":
            x, y, s = self.params["x"], self.params["y"], self.params["size"]
            if scores.shape != (s, s):
                raise ShapeMismatchError(f"crop relevance shape {scores.shape} != {(s, s)}")
            out = np.zeros((h, w), dtype=scores.dtype)
            valid = np.zeros((h, w), dtype=bool)
            out[y:y + s, x:x + s] = scores
            valid[y:y + s, x:x + s] = True
            return out, valid
        if scores.shape != (h, w):
            raise ShapeMismatchError(f"view relevance shape {scores.shape} != {(h, w)}")
        if self.kind == "hflip":
            scores = scores[:, ::-1]
        return np.ascontiguousarray(scores), np.ones((h, w), dtype=bool)


def crop_views(shape: tuple[int, int], grid: CropGridSpec) -> list[ViewTransform]:
    h, w = shape
    size = min(grid.crop_size, h, w)
    if size < grid.crop_size:
        log.info("image %sx%s smaller than crop size %d; using %d", h, w, grid.crop_size, size)
    # a shrunken crop keeps the grid gap-free by never striding past itself
    stride = min(grid.stride, size)
    return [
        ViewTransform("crop", (h, w), {"x": x, "y": y, "size": size})
        for y in crop_positions(h, size, stride)
        for x in crop_positions(w, size, stride)
    ]


def make_views(image, view_kinds: Iterable[str], seed: int,
               grid: CropGridSpec | None = None) -> list[ViewTransform]:
    kinds = set(view_kinds)
    if not kinds:
        raise ValueError("at least one view kind is required")
    unknown = kinds - set(VIEW_KINDS)
    if unknown:
        raise ValueError(f"unknown view kinds: {sorted(unknown)}")
    shape = check_image(image).shape[:2]
    rng = np.random.default_rng(seed)
    views = []
    for kind in VIEW_KINDS:
        if kind not in kinds:
            continue
        if kind == "crop":
            views.extend(crop_views(shape, grid or CropGridSpec()))
        elif kind == "contrast":
            views.append(ViewTransform(kind, shape, {"factor": float(rng.uniform(*CONTRAST_RANGE))}))
        else:
            views.append(ViewTransform(kind, shape))
    return views


def normalize_scores(scores: np.ndarray, valid: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """Min-max normalise over ``valid`` pixels; returns (map, low_confidence)."""
    scores = np.asarray(scores, dtype=np.float64)
    if valid is None:
        valid = np.ones(scores.shape, dtype=bool)
    if not valid.any():
        return np.zeros_like(scores), True
    lo, hi = scores[valid].min(), scores[valid].max()
    if hi - lo <= _EPS:
        return np.zeros_like(scores), True
    out = np.where(valid, (scores - lo) / (hi - lo), 0.0)
    return np.clip(out, 0.0, 1.0), False


def calibrate(rel: RelevanceMap, distractor_maps: Sequence[RelevanceMap]) -> RelevanceMap:
    """Subtract the mean of {query} and distractor maps, clipping at zero."""
    if not distractor_maps:
        return rel
    for d in distractor_maps:
        if d.shape != rel.shape:
            raise ShapeMismatchError(f"distractor map {d.shape} != {rel.shape}")
    stack = np.stack([rel.scores] + [d.scores for d in distractor_maps]).astype(np.float64)
    return RelevanceMap(np.clip(rel.scores - stack.mean(axis=0), 0.0, None), rel.category)


class _ViewCache:
    """Memoises per-view forward images, probabilities and relevance for one image."""

    def __init__(self, backend, image, views: Sequence[ViewTransform]):
        self.backend = backend
        self.image = image
        self.views = list(views)
        self._fwd: dict[int, ViewImage] = {}
        self._probs: dict[tuple[int, tuple], np.ndarray] = {}
        self._rel: dict[tuple[int, str], RelevanceMap] = {}

    def forward(self, i: int) -> ViewImage:
        if i not in self._fwd:
            self._fwd[i] = self.views[i].forward(self.image)
        return self._fwd[i]

    def probs(self, i: int, prompts: PromptSet) -> np.ndarray:
        key = (i, tuple(prompts.texts))
        if key not in self._probs:
            self._probs[key] = self.backend.class_probabilities(self.forward(i), prompts)
        return self._probs[key]

    def relevance(self, i: int, text: str) -> RelevanceMap:
        if (i, text) not in self._rel:
            self._rel[(i, text)] = self.backend.relevance(self.forward(i), text)
        return self._rel[(i, text)]

    def calibrated(self, i: int, prompts: PromptSet, category_index: int,
                   use_calibration: bool = True) -> RelevanceMap:
        rel = self.relevance(i, prompts.query_texts[category_index])
        if not use_calibration:
            return RelevanceMap(np.clip(rel.scores, 0.0, None), rel.category)
        distractors = [self.relevance(i, t) for t in prompts.distractor_texts]
        return calibrate(rel, distractors)


def view_relevance(backend, image, prompt: str, view: ViewTransform) -> tuple[RelevanceMap, np.ndarray]:
    rel = backend.relevance(view.forward(image), prompt)
    scores, valid = view.backward_relevance(rel.scores)
    return RelevanceMap(scores, prompt), valid


def passing_crops(backend, image, prompts: PromptSet, category_index: int,
                  grid: CropGridSpec, _cache: _ViewCache | None = None) -> list[int]:
    """Indices (into ``crop_views``) of crops whose class probability clears the gate."""
    cache = _cache or _ViewCache(backend, image, crop_views(check_image(image).shape[:2], grid))
    return [i for i in range(len(cache.views))
            if cache.probs(i, prompts)[category_index] > grid.gate_threshold]


def aggregate_crops(backend, image, prompts: PromptSet, category_index: int,
                    grid: CropGridSpec | None = None, use_calibration: bool = True,
                    _cache: _ViewCache | None = None) -> RelevanceMap:
    """Average gated, calibrated crop relevance per pixel, then normalise to [0, 1].

    Pixels no passing crop covers stay 0 and are left out of the min/max.  If no
    crop passes (or the result is constant) the all-zero map is returned with
    ``low_confidence`` set.
    """
    grid = grid or CropGridSpec()
    shape = check_image(image).shape[:2]
    cache = _cache or _ViewCache(backend, image, crop_views(shape, grid))
    acc = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.int64)
    for i in passing_crops(backend, image, prompts, category_index, grid, cache):
        rel = cache.calibrated(i, prompts, category_index, use_calibration)
        scores, valid = cache.views[i].backward_relevance(rel.scores)
        acc += scores
        count += valid
    covered = count > 0
    mean = np.where(covered, acc / np.maximum(count, 1), 0.0)
    mean = np.clip(mean, 0.0, None)
    scores, low = normalize_scores(mean, covered)
    label = prompts.queries[category_index]
    if low:
        log.debug("crop aggregation for %r has no signal", label)
    return RelevanceMap(scores, label, low_confidence=low)


@dataclass
class RefinedRelevance:
    """Per-category refined maps plus the settings that produced them."""

    maps: list[RelevanceMap]
    views_used: list[str]
    calibration: list[str]
    grid: CropGridSpec = field(default_factory=CropGridSpec)
    seed: int = 0
    backend: BackendDescriptor | None = None

    def __post_init__(self):
        shapes = {m.shape for m in self.maps}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"refined maps disagree on shape: {shapes}")

    @property
    def categories(self) -> list[str]:
        return [m.category for m in self.maps]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps[0].shape


def refine(backend, image, prompts: PromptSet, view_kinds: Iterable[str] = VIEW_KINDS,
           grid: CropGridSpec | None = None, seed: int = 0,
           use_calibration: bool = True) -> RefinedRelevance:
    """Average calibrated per-view relevance into one normalised map per query.

    The whole crop grid counts as one view.  Each view's map is normalised
    before averaging so views weigh equally; views without signal are skipped.
    """
    grid = grid or CropGridSpec()
    image = check_image(image)
    kinds = [k for k in VIEW_KINDS if k in set(view_kinds)]
    views = make_views(image, kinds, seed, grid)
    whole = [i for i, v in enumerate(views) if v.kind != "crop"]
    crops = [v for v in views if v.kind == "crop"]
    cache = _ViewCache(backend, image, views)
    crop_cache = _ViewCache(backend, image, crops) if crops else None

    maps = []
    for c, label in enumerate(prompts.queries):
        per_view = []
        for i in whole:
            rel = cache.calibrated(i, prompts, c, use_calibration)
            scores, valid = views[i].backward_relevance(rel.scores)
            normed, low = normalize_scores(scores, valid)
            if not low:
                per_view.append(normed)
        if crop_cache is not None:
            agg = aggregate_crops(backend, image, prompts, c, grid, use_calibration, crop_cache)
            if not agg.low_confidence:
                per_view.append(agg.scores)
        if per_view:
            avg = np.mean(np.stack(per_view), axis=0)
            scores, low = normalize_scores(avg)
        else:
            scores, low = np.zeros(image.shape[:2]), True
        maps.append(RelevanceMap(scores.astype(np.float32), label, low_confidence=low))

    if all(m.low_confidence for m in maps):
        raise NoSignalError("no view produced a usable relevance map for any category")
    return RefinedRelevance(
        maps=maps,
        views_used=kinds,
        calibration=list(prompts.distractors) if use_calibration else [],
        grid=grid,
        seed=seed,
        backend=getattr(backend, "descriptor", None),
    )
