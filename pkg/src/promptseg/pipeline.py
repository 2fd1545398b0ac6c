"""One image in, one segmentation out: relevance refinement followed by a segmenter."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backends import DEFAULT_TEMPLATE, PromptSet, load_backend
from .cluster import segment as cluster_segment
from .config import PipelineConfig
from .fusion import MultiClassRelevance, SegmentationMask, binarize, fuse
from .interactive import load_interactive, segment_interactive
from .storage import load_mask
from .tta import refine

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    mask: SegmentationMask
    refined: object
    relevance: MultiClassRelevance
    history: list[dict] = field(default_factory=list)
    transcript: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def build_backend(config: PipelineConfig, scene=None, seed: int | None = None):
    """Instantiate the configured backend.

    The mock needs a scene: either passed in, or a label PNG (with sidecar)
    named by ``backend_options["scene"]``.
    """
    options = dict(config.backend_options)
    scene_path = options.pop("scene", None)
    if config.backend == "mock":
        if scene is None:
            if scene_path is None:
                raise ValueError("mock backend needs a scene (backend_options.scene = label PNG)")
            gt = load_mask(scene_path)
            scene = [(name, gt.labels == i) for i, name in enumerate(gt.categories, start=1)]
        options.setdefault("seed", config.seed if seed is None else seed)
        return load_backend("mock", scene=scene, **options)
    return load_backend(config.backend, **options)


def select_prompts(backend, image, mode: str, gt_categories: Sequence[str],
                   vocabulary: Sequence[str] = (), cutoff: float = 0.3,
                   template: str = DEFAULT_TEMPLATE) -> list[str]:
    """Choose the query labels for the ``gt``, ``k1`` and ``unknown`` modes.

    ``k1`` keeps the single most probable ground-truth category; ``unknown``
    shortlists the vocabulary by image-level probability above ``cutoff`` and
    falls back to the top candidate.
    """
    if mode == "gt":
        return list(gt_categories)
    pool = list(gt_categories) if mode == "k1" else list(vocabulary)
    if not pool:
        raise ValueError(f"no candidate categories for mode {mode!r}")
    if len(pool) == 1:
        return pool
    probs = backend.class_probabilities(image, PromptSet(tuple(pool), (), template))
    if mode == "k1":
        return [pool[int(np.argmax(probs))]]
    chosen = [c for c, p in zip(pool, probs) if p > cutoff]
    return chosen or [pool[int(np.argmax(probs))]]


def run(image, labels: Sequence[str], config: PipelineConfig, backend=None,
        interactive_model=None, seed: int | None = None) -> PipelineResult:
    seed = config.seed if seed is None else seed
    start = time.monotonic()
    backend = backend or build_backend(config, seed=seed)
    prompts = PromptSet.create(labels, config.distractors, config.template)
    refined = refine(backend, image, prompts, config.views, config.grid, seed, config.calibrate)
    relevance = fuse(refined)
    history: list[dict] = []
    transcript: list[dict] = []
    if config.method == "threshold":
        mask = binarize(relevance, config.threshold)
    elif config.method == "cluster":
        ccfg = config.cluster
        overrides = {"seed": seed, "tau": config.tau}
        if config.budget is not None:
            overrides["time_budget"] = config.budget
        ccfg = type(ccfg).from_dict({**ccfg.to_dict(), **overrides})
        result = cluster_segment(image, relevance, ccfg, config.feature_source, backend)
        mask, history = result.mask, result.history
    else:
        model = interactive_model or load_interactive(config.interactive, **config.interactive_options)
        mask, transcript = segment_interactive(model, image, relevance, config.clicks,
                                               config.negative_clicks, config.tau, seed)
    mask.flags.setdefault("low_confidence", [c for c, low in zip(relevance.categories,
                                                                 relevance.low_confidence) if low])
    return PipelineResult(mask, refined, relevance, history, transcript, time.monotonic() - start)
