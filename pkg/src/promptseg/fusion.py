"""Multi-class relevance, stochastic pixel sampling and hard binarisation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backends import softmax
from .errors import ShapeMismatchError
from .tta import RefinedRelevance

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.1


@dataclass
class MultiClassRelevance:
    """Stacked per-category maps ``ss`` (h, w, K) and the derived background (h, w)."""

    ss: np.ndarray
    categories: list[str]
    low_confidence: list[bool] = field(default_factory=list)

    def __post_init__(self):
        self.ss = np.asarray(self.ss, dtype=np.float64)
        if self.ss.ndim != 3 or self.ss.shape[2] != len(self.categories):
            raise ShapeMismatchError(
                f"relevance stack {self.ss.shape} does not match {len(self.categories)} categories"
            )
        if not self.low_confidence:
            self.low_confidence = [not self.ss[..., c].any() for c in range(self.k)]
        self.background = np.maximum(0.0, 1.0 - self.ss.max(axis=2))

    @property
    def k(self) -> int:
        return self.ss.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ss.shape[:2]

    def channel(self, c: int) -> np.ndarray:
        """Channel 0 is background, 1..K the prompt categories."""
        if not 0 <= c <= self.k:
            raise IndexError(f"category {c} out of range 0..{self.k}")
        return self.background if c == 0 else self.ss[..., c - 1]


@dataclass
class PseudoLabelBatch:
    xs: np.ndarray
    ys: np.ndarray
    labels: np.ndarray
    tau: float
    seed: int
    low_confidence: bool = False

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def concat(cls, batches: Sequence["PseudoLabelBatch"]) -> "PseudoLabelBatch":
        if not batches:
            empty = np.zeros(0, dtype=np.int64)
            return cls(empty, empty, empty, DEFAULT_TAU, 0)
        return cls(
            np.concatenate([b.xs for b in batches]),
            np.concatenate([b.ys for b in batches]),
            np.concatenate([b.labels for b in batches]),
            batches[0].tau,
            batches[0].seed,
            any(b.low_confidence for b in batches),
        )


@dataclass
class SegmentationMask:
    """Per-pixel labels; 0 is background and ``categories[i-1]`` names label i."""

    labels: np.ndarray
    categories: list[str] = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeMismatchError(f"mask must be 2-D, got {self.labels.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def fuse(refined: RefinedRelevance | Sequence) -> MultiClassRelevance:
    maps = refined.maps if isinstance(refined, RefinedRelevance) else list(refined)
    if not maps:
        raise ValueError("need at least one relevance map")
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"maps disagree on shape: {shapes}")
    ss = np.stack([np.clip(m.scores, 0.0, 1.0) for m in maps], axis=-1)
    return MultiClassRelevance(ss, [m.category for m in maps], [m.low_confidence for m in maps])


def pixel_distribution(scores: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over all pixels of ``scores / tau``, flattened row-major."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return softmax(np.asarray(scores, dtype=np.float64).ravel() / tau)


def sample(relevance: MultiClassRelevance, c: int, n: int, tau: float = DEFAULT_TAU,
           seed: int | np.random.Generator = 0) -> PseudoLabelBatch:
    """Draw ``n`` pixels i.i.d. from Softmax(channel_c / tau).

    An all-zero channel falls back to uniform sampling and is flagged.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = relevance.channel(c)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    low = not scores.any()
    if low:
        log.debug("channel %d is all-zero; sampling uniformly", c)
        p = np.full(scores.size, 1.0 / scores.size)
    else:
        p = pixel_distribution(scores, tau)
    idx = rng.choice(scores.size, size=n, replace=True, p=p)
    ys, xs = np.divmod(idx, scores.shape[1])
    return PseudoLabelBatch(xs, ys, np.full(n, c, dtype=np.int64), tau,
                            seed if isinstance(seed, int) else -1, low)


def sample_all(relevance: MultiClassRelevance, n: int, tau: float = DEFAULT_TAU,
               rng: np.random.Generator | int = 0, include_background: bool = True) -> PseudoLabelBatch:
    """One batch covering background and every category with a usable map."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    batches = []
    for c in range(0 if include_background else 1, relevance.k + 1):
        if c > 0 and relevance.low_confidence[c - 1]:
            continue
        if not relevance.channel(c).any():
            continue
        batches.append(sample(relevance, c, n, tau, rng))
    return PseudoLabelBatch.concat(batches)


def binarize(relevance: MultiClassRelevance, threshold: float = 0.5) -> SegmentationMask:
    """Per-pixel argmax, kept only where it reaches ``threshold`` and beats background."""
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    top = relevance.ss.max(axis=2)
    arg = relevance.ss.argmax(axis=2) + 1
    keep = (top >= threshold) & (top > relevance.background)
    return SegmentationMask(np.where(keep, arg, 0).astype(np.uint8), list(relevance.categories))
